"""Experiment configuration: JSON sections with strict key checking.

A config file holds four sections — corpus, codec, lm, eval — each a JSON
object whose keys override dataclass defaults.  Unknown keys are rejected
with their full path so typos cannot silently fall back to defaults.  The
fully resolved configuration (every default materialized, loss weights after
normalization) is archived next to run outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from .codec import CodecConfig, LossWeights
from .lm import LMConfig, ScheduleConfig
from .synth import CorpusConfig


@dataclass(frozen=True)
class LMTraining:
    steps: int = 2000
    batch_tokens: int = 2048
    mode_mix: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("lm training needs at least one step")
        if not 0.0 <= self.mode_mix <= 1.0:
            raise ValueError("mode_mix must lie in [0, 1]")


@dataclass(frozen=True)
class EvalSettings:
    conversion_pairs: int = 200
    tts_generations: int = 200
    temperature: float = 0.7
    top_k: int = 32
    max_new_tokens: int = 288
    probes: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.conversion_pairs < 1 or self.tts_generations < 1:
            raise ValueError("evaluation needs at least one item per battery")


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig
    codec: CodecConfig
    loss_weights: LossWeights
    lm_model: LMConfig
    lm_schedule: ScheduleConfig
    lm_training: LMTraining
    eval: EvalSettings

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls(corpus=CorpusConfig(), codec=CodecConfig(),
                   loss_weights=LossWeights(), lm_model=LMConfig(),
                   lm_schedule=ScheduleConfig(), lm_training=LMTraining(),
                   eval=EvalSettings())


def _apply(cls, defaults, overrides: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ValueError(f"unknown key {path}.{unknown[0]}")
    return replace(defaults, **overrides)


def from_dict(data: dict) -> ExperimentConfig:
    """Build a config from parsed JSON, rejecting unknown sections and keys."""
    known_sections = {"corpus", "codec", "lm", "eval"}
    unknown = sorted(set(data) - known_sections)
    if unknown:
        raise ValueError(f"unknown section {unknown[0]!r}")
    base = ExperimentConfig.default()

    corpus = _apply(CorpusConfig, base.corpus, data.get("corpus", {}), "corpus")

    codec_over = dict(data.get("codec", {}))
    weight_over = {k: codec_over.pop(k) for k in ("l0", "l1", "l2", "l3")
                   if k in codec_over}
    codec = _apply(CodecConfig, base.codec, codec_over, "codec")
    if weight_over:
        merged = {k: weight_over.get(k, getattr(base.loss_weights, k))
                  for k in ("l0", "l1", "l2", "l3")}
        weights = LossWeights.normalized(**merged)
    else:
        weights = base.loss_weights

    lm = dict(data.get("lm", {}))
    model_over = lm.pop("model", {})
    sched_over = lm.pop("schedule", {})
    train_over = lm.pop("training", {})
    if lm:
        raise ValueError(f"unknown key lm.{sorted(lm)[0]}")
    lm_model = _apply(LMConfig, base.lm_model, model_over, "lm.model")
    lm_schedule = _apply(ScheduleConfig, base.lm_schedule, sched_over,
                         "lm.schedule")
    lm_training = _apply(LMTraining, base.lm_training, train_over, "lm.training")

    eval_cfg = _apply(EvalSettings, base.eval, data.get("eval", {}), "eval")

    _check_consistency(corpus, codec, lm_model)
    return ExperimentConfig(corpus=corpus, codec=codec, loss_weights=weights,
                            lm_model=lm_model, lm_schedule=lm_schedule,
                            lm_training=lm_training, eval=eval_cfg)


def _check_consistency(corpus: CorpusConfig, codec: CodecConfig,
                       lm_model: LMConfig) -> None:
    if codec.d_in != corpus.feature_dim:
        raise ValueError(f"codec.d_in {codec.d_in} must equal "
                         f"corpus.feature_dim {corpus.feature_dim}")
    if (lm_model.num_books, lm_model.book_size) != (codec.num_books,
                                                    codec.book_size):
        raise ValueError("lm.model codebook layout must match the codec: "
                         f"({lm_model.num_books}, {lm_model.book_size}) vs "
                         f"({codec.num_books}, {codec.book_size})")
    if lm_model.alphabet != corpus.alphabet:
        raise ValueError(f"lm.model.alphabet {lm_model.alphabet} must equal "
                         f"corpus.alphabet {corpus.alphabet}")
    if lm_model.ref_dim != corpus.feature_dim:
        raise ValueError(f"lm.model.ref_dim {lm_model.ref_dim} must equal "
                         f"corpus.feature_dim {corpus.feature_dim}")


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"config is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ValueError("config root must be a JSON object")
    return from_dict(data)


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """Every field materialized, in the section layout of the input format."""
    codec = asdict(cfg.codec)
    weights = asdict(cfg.loss_weights)
    codec.update({k: weights[k] for k in ("l0", "l1", "l2", "l3")})
    codec["loss_weights_renormalized"] = weights["renormalized"]
    return {
        "corpus": asdict(cfg.corpus),
        "codec": codec,
        "lm": {"model": asdict(cfg.lm_model),
               "schedule": asdict(cfg.lm_schedule),
               "training": asdict(cfg.lm_training)},
        "eval": asdict(cfg.eval),
    }


def archive_config(cfg: ExperimentConfig, path: str) -> None:
    """Write the resolved configuration as deterministic JSON."""
    text = json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
