"""Speaker-disentangling codec.

A frozen layer stack is split into two complementary mixtures by learnable
per-layer logits: softmax weights feed a speaker extractor, and one minus
those weights feed the residual-quantized content path.  Four loss terms
combine into the training objective:

  total = λ0·recon + λ1·contrastive − λ2·disentangle + λ3·commitment

The disentangle term rewards statistical independence of the two branches:
its value is 1 − |cos(s_s, s_ns)| and it enters the optimized graph through a
gradient reversal layer on the non-speaker features, with the speaker branch
and extractor weights stopped, so only the mixing logits feel it — and they
feel it reversed, descending |cos|.  The minus sign in the reported total
mirrors that reversal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import FrozenEncoder
from .rvq import ResidualQuantizer

_f32 = np.float32


@dataclass(frozen=True)
class CodecConfig:
    layers: int = 6
    d_model: int = 32
    d_in: int = 24
    d_spk: int = 16
    num_books: int = 4
    book_size: int = 512
    chunk_len: int = 8
    batch: int = 16
    steps: int = 5000
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 50
    decoder_hidden: int = 128
    adv_scale: float = 8.0


@dataclass(frozen=True)
class LossWeights:
    l0: float = 1.0 / 301.0
    l1: float = 100.0 / 301.0
    l2: float = 100.0 / 301.0
    l3: float = 100.0 / 301.0
    renormalized: bool = False

    def __post_init__(self):
        for name in ("l0", "l1", "l2", "l3"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

    @classmethod
    def normalized(cls, l0: float, l1: float, l2: float, l3: float) -> "LossWeights":
        """Scale the four weights to sum to 1, recording that this happened."""
        total = l0 + l1 + l2 + l3
        if total <= 0:
            raise ValueError("loss weights must have a positive sum")
        scaled = cls(l0 / total, l1 / total, l2 / total, l3 / total,
                     renormalized=not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-12))
        return scaled


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    contrastive: float
    disentangle: float
    commitment: float
    total: float

    @classmethod
    def compose(cls, recon, contrastive, disentangle, commitment,
                weights: LossWeights) -> "LossBreakdown":
        total = (weights.l0 * recon + weights.l1 * contrastive
                 - weights.l2 * disentangle + weights.l3 * commitment)
        return cls(float(recon), float(contrastive), float(disentangle),
                   float(commitment), float(total))


# -- ops shared by model and tests ------------------------------------------

def layer_mix(stack, weights, branch: str):
    """Mix an (..., L, T, D) stack with softmax(weights) or its complement."""
    stack = ad.as_tensor(stack)
    num_layers = weights.shape[0]
    axis = stack.ndim - 3
    if stack.shape[axis] != num_layers:
        raise ValueError(f"stack has {stack.shape[axis]} layers, weights expect {num_layers}")
    w = ad.softmax(weights, axis=0)
    if branch == "non-speaker":
        w = 1.0 - w
    elif branch != "speaker":
        raise ValueError(f"unknown branch {branch!r}")
    shape = (1,) * axis + (num_layers, 1, 1)
    return ad.reduce_sum(stack * ad.reshape(w, shape), axis=axis)


def contrastive_loss(emb_a, emb_b, temperature):
    """Symmetric InfoNCE over an in-batch similarity matrix."""
    n = emb_a.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    sim = ad.matmul(emb_a, ad.transpose(emb_b, (1, 0))) / temperature
    targets = np.arange(n)
    row_ce = ad.cross_entropy_logits(sim, targets)
    col_ce = ad.cross_entropy_logits(ad.transpose(sim, (1, 0)), targets)
    return 0.5 * (row_ce + col_ce)


def disentangle_term(s_s, s_ns):
    """Mean of 1 − |cos| over paired unit embeddings (N×d or single vectors)."""
    s_s, s_ns = ad.as_tensor(s_s), ad.as_tensor(s_ns)
    if s_s.ndim == 1:
        s_s = ad.reshape(s_s, (1, s_s.shape[0]))
        s_ns = ad.reshape(s_ns, (1, s_ns.shape[0]))
    for emb in (s_s, s_ns):
        norms = np.linalg.norm(emb.data, axis=1)
        if norms.min() < 1e-6:
            raise ValueError("degenerate zero embedding")
    cos = ad.reduce_sum(s_s * s_ns, axis=1)
    return ad.reduce_mean(1.0 - ad.absolute(cos))


# -- model ------------------------------------------------------------------

class SpeakerExtractor:
    """CLS token + 2 position-free transformer layers + projection to d_spk."""

    def __init__(self, rng, d_model: int, d_spk: int):
        self.cls = Tensor((rng.standard_normal((1, 1, d_model)) * 0.1).astype(_f32),
                          requires_grad=True)
        self.blocks = [nn.TransformerBlock(rng, d_model, 4, 2 * d_model) for _ in range(2)]
        self.proj = nn.Linear(rng, d_model, d_spk)

    def __call__(self, x, frozen: bool = False):
        b = x.shape[0]
        cls = nn._use(self.cls, frozen) + Tensor(np.zeros((b, 1, x.shape[2]), _f32))
        h = ad.concat([cls, x], axis=1)
        for block in self.blocks:
            h = block(h, causal=False, frozen=frozen)
        pooled = h[:, 0]
        return ad.unit_normalize(self.proj(pooled, frozen), axis=-1)

    def params(self):
        return [self.cls] + nn.collect_params(*self.blocks) + self.proj.params()


class Decoder:
    """Four temporal-convolution layers from codes + broadcast embedding."""

    def __init__(self, rng, d_model: int, d_spk: int, hidden: int, d_in: int):
        dims = [d_model + d_spk, hidden, hidden, hidden, d_in]
        self.convs = [nn.TemporalConv3(rng, dims[i], dims[i + 1]) for i in range(4)]

    def __call__(self, chat, s, frozen: bool = False):
        b, t, _ = chat.shape
        s_frames = ad.reshape(s, (b, 1, s.shape[-1])) + Tensor(
            np.zeros((b, t, s.shape[-1]), _f32))
        h = ad.concat([chat, s_frames], axis=2)
        for conv in self.convs[:-1]:
            h = ad.tanh(conv(h, frozen))
        return self.convs[-1](h, frozen)

    def params(self):
        return nn.collect_params(*self.convs)


class CodecModel:
    def __init__(self, config: CodecConfig, corpus_seed: int = 0):
        self.config = config
        self.encoder = FrozenEncoder(corpus_seed, d_in=config.d_in,
                                     d_model=config.d_model, layers=config.layers)
        rng = np.random.default_rng([config.seed, 37])
        self.w_s = Tensor(np.zeros(config.layers, dtype=_f32), requires_grad=True)
        self.extractor = SpeakerExtractor(rng, config.d_model, config.d_spk)
        self.decoder = Decoder(rng, config.d_model, config.d_spk,
                               config.decoder_hidden, config.d_in)
        self.temperature = Tensor(np.asarray(0.07, dtype=_f32), requires_grad=True)
        self.quantizer = ResidualQuantizer(rng, config.num_books, config.book_size,
                                           config.d_model)
        self.trained = False

    def params(self):
        return ([self.w_s, self.temperature] + self.extractor.params()
                + self.decoder.params())

    # -- graph pieces -------------------------------------------------------

    def quantize_graph(self, c, train: bool = False, rng=None):
        """Straight-through quantization of a (B, T, D) mixture tensor.

        Returns (grid B×T×Nq, Ĉ_st with identity gradient to c, commitment).
        """
        b, t, d = c.shape
        flat = c.data.reshape(b * t, d)
        if train:
            grid, chat = self.quantizer.quantize_train(flat, rng)
        else:
            grid, chat = self.quantizer.quantize(flat)
        chat = chat.reshape(b, t, d)
        chat_const = Tensor(chat)
        chat_st = c + Tensor(chat - c.data)
        diff = c - chat_const
        commitment = ad.reduce_mean(ad.reduce_sum(diff * diff, axis=-1))
        return grid.reshape(b, t, self.config.num_books), chat_st, commitment

    def total_loss(self, stack_a, stack_b, frames_a, train: bool = False, rng=None):
        """Eq.-3-shaped objective over a two-view batch.

        Returns (graph_loss, breakdown, aux).  graph_loss is what gets
        differentiated: it carries +λ2·(reversed disentangle term), while the
        reported breakdown carries −λ2·(its value).
        """
        lw = self.loss_weights
        sa, sb = ad.as_tensor(stack_a), ad.as_tensor(stack_b)
        frames = Tensor(np.asarray(frames_a, dtype=_f32))

        mix_s_a = layer_mix(sa, self.w_s, "speaker")
        mix_s_b = layer_mix(sb, self.w_s, "speaker")
        mix_ns_a = layer_mix(sa, self.w_s, "non-speaker")

        emb_a = self.extractor(mix_s_a)
        emb_b = self.extractor(mix_s_b)
        l_contrastive = contrastive_loss(emb_a, emb_b, self.temperature)

        grid, chat_st, l_commit = self.quantize_graph(mix_ns_a, train=train, rng=rng)
        # condition on the sibling view's embedding: reconstruction then cannot
        # lean on chunk-local content smuggled through the speaker branch
        recon = self.decoder(chat_st, emb_b)
        err = recon - frames
        l_recon = ad.reduce_mean(ad.reduce_sum(err * err, axis=-1))

        s_ns_adv = self.extractor(ad.gradient_reversal(mix_ns_a, self.config.adv_scale),
                                  frozen=True)
        d_term = disentangle_term(emb_a.detach(), s_ns_adv)

        graph_loss = (lw.l0 * l_recon + lw.l1 * l_contrastive
                      + lw.l2 * d_term + lw.l3 * l_commit)
        breakdown = LossBreakdown.compose(l_recon.item(), l_contrastive.item(),
                                          d_term.item(), l_commit.item(), lw)
        return graph_loss, breakdown, {"grid": grid, "emb_a": emb_a, "emb_b": emb_b}

    loss_weights = LossWeights()

    # -- inference ----------------------------------------------------------

    def _require_trained(self):
        if not self.trained:
            raise RuntimeError("model has not been trained")

    def speaker_embedding(self, features: np.ndarray) -> np.ndarray:
        """Unit d_spk embedding of a full utterance."""
        stack = self.encoder.encode_layers(features)[None]
        with ad.no_grad():
            mix = layer_mix(stack, self.w_s, "speaker")
            return self.extractor(mix).data[0].copy()

    def encode_utterance(self, features: np.ndarray) -> np.ndarray:
        """Quantized non-speaker codes, T×Nq."""
        stack = self.encoder.encode_layers(features)[None]
        with ad.no_grad():
            mix = layer_mix(stack, self.w_s, "non-speaker")
        grid, _ = self.quantizer.quantize(mix.data[0])
        return grid

    def decode_codes(self, grid: np.ndarray, speaker_emb: np.ndarray) -> np.ndarray:
        """Render frames from a T×Nq grid and a d_spk embedding."""
        chat = self.quantizer.dequantize(grid)
        with ad.no_grad():
            out = self.decoder(Tensor(chat[None]), Tensor(speaker_emb[None].astype(_f32)))
        return out.data[0].copy()

    def convert_voice(self, source: np.ndarray, target: np.ndarray) -> np.ndarray:
        """Content and prosody of ``source`` rendered as ``target``'s speaker."""
        self._require_trained()
        grid = self.encode_utterance(source)
        s_target = self.speaker_embedding(target)
        return self.decode_codes(grid, s_target)

    def reconstruct(self, features: np.ndarray) -> np.ndarray:
        return self.convert_voice(features, features)


# -- training ---------------------------------------------------------------

def _view_starts(rng, num_frames: int, chunk_len: int) -> tuple[int, int]:
    """Two crop starts, disjoint when the utterance is long enough.

    Disjoint views keep the speaker branch from seeing the frames the decoder
    must reconstruct, so the embedding cannot act as a content side channel.
    """
    hi = num_frames - chunk_len + 1
    for _ in range(100):
        a, b = rng.integers(0, hi, size=2)
        if abs(int(a) - int(b)) >= chunk_len or num_frames < 2 * chunk_len:
            return int(a), int(b)
    return int(a), int(b)


def train_codec(corpus, config: CodecConfig, weights: LossWeights | None = None):
    """Train a codec on the corpus; returns (model, log records)."""
    model = CodecModel(config, corpus_seed=corpus.cfg.seed)
    if weights is not None:
        model.loss_weights = weights
    if len(corpus.train_speaker_ids) < config.batch:
        raise ValueError(f"need at least {config.batch} training speakers, "
                         f"have {len(corpus.train_speaker_ids)}")

    params = model.params()
    state = ad.OptimizerState.init(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 41])
    records = []
    per_speaker = {sid: corpus.indices_for_speaker(sid) for sid in corpus.train_speaker_ids}

    for step in range(config.steps):
        speakers = rng.permutation(corpus.train_speaker_ids)[: config.batch]
        stacks_a, stacks_b, frames_a = [], [], []
        for sid in speakers:
            utt_idx = per_speaker[sid][int(rng.integers(len(per_speaker[sid])))]
            feats = corpus.features(utt_idx)
            # encode the whole utterance, then crop the stack: instance-norm
            # statistics match what inference on full utterances will see
            stack = model.encoder.encode_layers(feats)
            start_a, start_b = _view_starts(rng, len(feats), config.chunk_len)
            stacks_a.append(stack[:, start_a: start_a + config.chunk_len])
            stacks_b.append(stack[:, start_b: start_b + config.chunk_len])
            frames_a.append(feats[start_a: start_a + config.chunk_len])
        graph_loss, breakdown, _ = model.total_loss(
            np.stack(stacks_a), np.stack(stacks_b), np.stack(frames_a),
            train=True, rng=rng)
        grads = ad.grad(graph_loss, params)
        ad.adamw_step(params, grads, state)
        model.temperature.data = np.clip(model.temperature.data, 1e-3, 1.0)

        if step % config.log_every == 0 or step == config.steps - 1:
            records.append({
                "step": step,
                "recon": model.loss_weights.l0 * breakdown.recon,
                "contrastive": model.loss_weights.l1 * breakdown.contrastive,
                "disentangle": -model.loss_weights.l2 * breakdown.disentangle,
                "commitment": model.loss_weights.l3 * breakdown.commitment,
                "total": breakdown.total,
                "temperature": float(model.temperature.item()),
                "codebook_utilization": [float(u) for u in model.quantizer.utilization()],
            })
    model.trained = True
    return model, records


def retrieval_accuracy(model: CodecModel, corpus, batches: int = 10, batch: int = 16,
                       seed: int = 0, speaker_ids=None) -> float:
    """Positive-pair identification rate for the contrastive embeddings."""
    rng = np.random.default_rng([seed, 43])
    pool = corpus.train_speaker_ids if speaker_ids is None else list(speaker_ids)
    hits = total = 0
    for _ in range(batches):
        speakers = rng.permutation(pool)[:batch]
        emb_a, emb_b = [], []
        for sid in speakers:
            utts = corpus.indices_for_speaker(sid)
            feats = corpus.features(utts[int(rng.integers(len(utts)))])
            full = model.encoder.encode_layers(feats)
            starts = rng.integers(0, len(feats) - model.config.chunk_len + 1, size=2)
            for start, out in zip(starts, (emb_a, emb_b)):
                stack = full[:, int(start): int(start) + model.config.chunk_len][None]
                with ad.no_grad():
                    mix = layer_mix(stack, model.w_s, "speaker")
                    out.append(model.extractor(mix).data[0])
        sim = np.stack(emb_a) @ np.stack(emb_b).T
        hits += (sim.argmax(axis=1) == np.arange(len(speakers))).sum()
        total += len(speakers)
    return hits / total
