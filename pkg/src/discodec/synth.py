"""Synthetic "speech" features with fully known generative factors.

Each utterance is a T×D_in float sequence built from three factors:

  * a stationary speaker vector p acting additively (offset B·p) and
    multiplicatively (per-dimension timbre gain 1 + 0.5·tanh(M·p));
  * a transitory symbol sequence (the "text"), each symbol held for
    ``frames_per_symbol`` frames through a fixed embedding table E;
  * a smooth scalar prosody contour injected along a fixed unit direction g.

Because every table derives from one corpus seed, the module can also invert
itself: the oracles below recover content, speaker, and prosody from raw
features and stand in for ASR and speaker-verification models when scoring
conversions and generations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

_f32 = np.float32


@dataclass(frozen=True)
class SpeakerParams:
    p: np.ndarray
    speaker_id: int
    seed: int


@dataclass(frozen=True)
class UtteranceSpec:
    speaker: SpeakerParams
    content: tuple
    prosody_seed: int
    frames_per_symbol: int = 4
    noise_sigma: float = 0.02

    def __post_init__(self):
        if len(self.content) == 0:
            raise ValueError("utterance content must be nonempty")

    @property
    def num_frames(self) -> int:
        return self.frames_per_symbol * len(self.content)


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    speakers: int = 64
    utterances_per_speaker: int = 200
    alphabet: int = 16
    d_speaker: int = 8
    feature_dim: int = 24
    frames_per_symbol: int = 4
    content_min: int = 5
    content_max: int = 12
    noise_sigma: float = 0.02
    train_speakers: int = 48


class SynthWorld:
    """Fixed generator tables (E, M, B, g) derived from one corpus seed."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        d, ds, a = cfg.feature_dim, cfg.d_speaker, cfg.alphabet
        self.symbol_table = rng.standard_normal((a, d)).astype(_f32)       # E
        self.timbre_map = rng.standard_normal((d, ds)).astype(_f32)        # M
        self.offset_map = rng.standard_normal((d, ds)).astype(_f32)        # B
        g = rng.standard_normal(d)
        self.prosody_dir = (g / np.linalg.norm(g)).astype(_f32)            # g

    # -- generation ---------------------------------------------------------

    def make_speaker(self, seed: int, speaker_id: int | None = None) -> SpeakerParams:
        rng = np.random.default_rng([seed, 7])
        p = rng.standard_normal(self.cfg.d_speaker)
        p = (p / np.linalg.norm(p)).astype(_f32)
        return SpeakerParams(p=p, speaker_id=int(seed if speaker_id is None else speaker_id),
                             seed=int(seed))

    def timbre_gain(self, p: np.ndarray) -> np.ndarray:
        return 1.0 + 0.5 * np.tanh(self.timbre_map @ p.astype(_f32))

    def render_frames(self, p: np.ndarray, content, contour: np.ndarray) -> np.ndarray:
        """The generative equation, noise-free; contour length must be r·len(content)."""
        r = len(contour) // len(content)
        sym = np.repeat(self.symbol_table[np.asarray(content)], r, axis=0)
        frames = (sym * self.timbre_gain(p)
                  + self.offset_map @ p.astype(_f32)
                  + contour[:, None].astype(_f32) * self.prosody_dir)
        return frames.astype(_f32)

    def prosody_walk(self, seed: int, length: int) -> np.ndarray:
        """Stationary AR(1) contour, clipped to stay bounded.

        The amplitude is deliberately large relative to a single feature
        dimension so the contour stays recoverable after encoding and
        quantization.
        """
        rng = np.random.default_rng([seed, 11])
        rho, sigma = 0.85, 2.0
        x = np.empty(length, dtype=np.float64)
        x[0] = rng.standard_normal() * sigma
        innov = rng.standard_normal(length - 1) * sigma * np.sqrt(1.0 - rho * rho)
        for t in range(1, length):
            x[t] = rho * x[t - 1] + innov[t - 1]
        return np.clip(x, -6.0, 6.0).astype(_f32)

    def make_utterance(self, spec: UtteranceSpec):
        """Returns (frames: T×D_in float32, contour: length-T float32)."""
        t = spec.num_frames
        contour = self.prosody_walk(spec.prosody_seed, t)
        frames = self.render_frames(spec.speaker.p, spec.content, contour)
        noise_rng = np.random.default_rng([spec.prosody_seed, 13])
        frames = frames + noise_rng.standard_normal(frames.shape).astype(_f32) * _f32(spec.noise_sigma)
        return frames.astype(_f32), contour

    # -- oracles ------------------------------------------------------------

    def _normalized_templates(self, p: np.ndarray) -> np.ndarray:
        """Symbol templates after the same speaker removal applied to features."""
        gain = self.timbre_gain(p)
        t = self.symbol_table * gain
        t = t - np.outer(t @ self.prosody_dir, self.prosody_dir)
        return t / gain

    def oracle_decode_content(self, features: np.ndarray, speaker: SpeakerParams) -> list:
        r = self.cfg.frames_per_symbol
        if len(features) % r:
            raise ValueError(f"feature length {len(features)} not divisible by frames_per_symbol {r}")
        return self._decode_content_p(features, speaker.p)

    def _decode_content_p(self, features: np.ndarray, p: np.ndarray) -> list:
        r = self.cfg.frames_per_symbol
        gain = self.timbre_gain(p)
        y = features - self.offset_map @ p.astype(_f32)
        y = y - np.outer(y @ self.prosody_dir, self.prosody_dir)
        z = y / gain
        blocks = z.reshape(-1, r, self.cfg.feature_dim).mean(axis=1)
        templates = self._normalized_templates(p)
        d2 = ((blocks[:, None, :] - templates[None, :, :]) ** 2).sum(axis=2)
        return [int(i) for i in d2.argmin(axis=1)]

    def oracle_extract_prosody(self, features: np.ndarray, speaker: SpeakerParams) -> np.ndarray:
        content = self._decode_content_p(features, speaker.p)
        r = len(features) // len(content)
        sym = np.repeat(self.symbol_table[np.asarray(content)], r, axis=0)
        resid = features - sym * self.timbre_gain(speaker.p) - self.offset_map @ speaker.p.astype(_f32)
        return (resid @ self.prosody_dir).astype(_f32)

    def oracle_speaker_estimate(self, features: np.ndarray) -> np.ndarray:
        r = self.cfg.frames_per_symbol
        if len(features) < 2 * r:
            raise ValueError(f"need at least {2 * r} frames, got {len(features)}")
        if features.std(axis=0).max() < 1e-7:
            raise ValueError("degenerate constant feature input")
        e, m, b, g = (self.symbol_table.astype(np.float64), self.timbre_map.astype(np.float64),
                      self.offset_map.astype(np.float64), self.prosody_dir.astype(np.float64))
        feats = features.astype(np.float64)

        # linearized initial fit from the utterance mean:
        # mean ≈ muE ⊙ (1 + 0.5 M p) + B p + pbar g
        mu = feats.mean(axis=0)
        mu_e = e.mean(axis=0)
        design = np.concatenate([0.5 * mu_e[:, None] * m + b, g[:, None]], axis=1)
        theta, *_ = np.linalg.lstsq(design, mu - mu_e, rcond=None)
        p_est = theta[: self.cfg.d_speaker]

        # refine with decoded content and a Gauss-Newton pass in the
        # prosody-free subspace (projection along g removes the contour)
        proj = np.eye(self.cfg.feature_dim) - np.outer(g, g)
        for _ in range(3):
            content = self._decode_content_p(features.astype(_f32), p_est.astype(_f32))
            sym = np.repeat(e[np.asarray(content)], r, axis=0)
            gain = 1.0 + 0.5 * np.tanh(m @ p_est)
            pred = sym * gain + b @ p_est
            resid = (feats - pred) @ proj.T
            slope = 0.5 * (1.0 - np.tanh(m @ p_est) ** 2)
            jac_frames = sym[:, :, None] * (slope[:, None] * m)[None, :, :] + b[None, :, :]
            jac = proj @ jac_frames
            step, *_ = np.linalg.lstsq(jac.reshape(-1, self.cfg.d_speaker),
                                       resid.reshape(-1), rcond=None)
            p_est = p_est + step
        return p_est.astype(_f32)


def chunk_pair(features: np.ndarray, chunk_len: int, seed: int):
    """Two uniformly random crops of exactly ``chunk_len`` frames."""
    t = len(features)
    if chunk_len > t:
        raise ValueError(f"chunk_len {chunk_len} exceeds utterance length {t}")
    rng = np.random.default_rng([seed, 17])
    starts = rng.integers(0, t - chunk_len + 1, size=2)
    return (features[starts[0]: starts[0] + chunk_len],
            features[starts[1]: starts[1] + chunk_len])


@dataclass
class Corpus:
    """A realized utterance collection plus its generator world."""

    world: SynthWorld
    speakers: list
    utterances: list          # list[UtteranceSpec], speaker-major order
    train_speaker_ids: list
    heldout_speaker_ids: list
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def cfg(self) -> CorpusConfig:
        return self.world.cfg

    def features(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = self.world.make_utterance(self.utterances[index])[0]
        return self._cache[index]

    def contour(self, index: int) -> np.ndarray:
        return self.world.make_utterance(self.utterances[index])[1]

    def indices_for_speaker(self, speaker_id: int) -> list:
        return [i for i, u in enumerate(self.utterances) if u.speaker.speaker_id == speaker_id]


def build_corpus(cfg: CorpusConfig) -> Corpus:
    world = SynthWorld(cfg)
    seed_rng = np.random.default_rng([cfg.seed, 1])
    speaker_seeds = seed_rng.integers(0, 2**62, size=cfg.speakers)
    speakers = [world.make_speaker(int(s), speaker_id=i) for i, s in enumerate(speaker_seeds)]

    content_rng = np.random.default_rng([cfg.seed, 2])
    utterances = []
    for spk in speakers:
        for _ in range(cfg.utterances_per_speaker):
            length = int(content_rng.integers(cfg.content_min, cfg.content_max + 1))
            content = tuple(int(c) for c in content_rng.integers(0, cfg.alphabet, size=length))
            utterances.append(UtteranceSpec(
                speaker=spk, content=content,
                prosody_seed=int(content_rng.integers(0, 2**62)),
                frames_per_symbol=cfg.frames_per_symbol,
                noise_sigma=cfg.noise_sigma))
    ids = list(range(cfg.speakers))
    return Corpus(world=world, speakers=speakers, utterances=utterances,
                  train_speaker_ids=ids[: cfg.train_speakers],
                  heldout_speaker_ids=ids[cfg.train_speakers:])


# -- manifest io ------------------------------------------------------------

def write_manifest(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, utt in enumerate(corpus.utterances):
            fh.write(json.dumps({
                "utt": i,
                "speaker_id": utt.speaker.speaker_id,
                "speaker_seed": utt.speaker.seed,
                "content": list(utt.content),
                "prosody_seed": utt.prosody_seed,
                "noise_sigma": utt.noise_sigma,
            }) + "\n")


def read_manifest(path, cfg: CorpusConfig) -> Corpus:
    """Rebuild a corpus from its manifest; features regenerate on demand."""
    world = SynthWorld(cfg)
    speakers_by_id, utterances = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            sid = rec["speaker_id"]
            if sid not in speakers_by_id:
                speakers_by_id[sid] = world.make_speaker(rec["speaker_seed"], speaker_id=sid)
            utterances.append(UtteranceSpec(
                speaker=speakers_by_id[sid], content=tuple(rec["content"]),
                prosody_seed=rec["prosody_seed"],
                frames_per_symbol=cfg.frames_per_symbol,
                noise_sigma=rec["noise_sigma"]))
    ids = sorted(speakers_by_id)
    return Corpus(world=world, speakers=[speakers_by_id[i] for i in ids],
                  utterances=utterances,
                  train_speaker_ids=ids[: cfg.train_speakers],
                  heldout_speaker_ids=ids[cfg.train_speakers:])
