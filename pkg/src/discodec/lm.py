"""Autoregressive token model over flattened codec codes.

The vocabulary is offset-partitioned: the first Nq·K ids are code tokens
(codebook i owns [i·K, (i+1)·K)), followed by the control tokens BOS, EOS,
SEP, SEP2 and PAD, followed by the text-symbol tokens.  Frames are flattened
by interleaving codebooks, so the codebook of a code token is recoverable
from its stream position alone; sampling masks logits to the codebook whose
turn it is, which makes misaligned output impossible by construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

_f32 = np.float32

PROMPT_MODES = ("text", "speech", "text-with-reference")


@dataclass(frozen=True)
class LMConfig:
    num_books: int = 4
    book_size: int = 512
    alphabet: int = 16
    layers: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    heads: int = 4
    max_len: int = 640
    ref_dim: int = 24
    use_reference: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"{self.heads} heads")

    @property
    def code_tokens(self) -> int:
        return self.num_books * self.book_size

    @property
    def bos(self) -> int:
        return self.code_tokens

    @property
    def eos(self) -> int:
        return self.code_tokens + 1

    @property
    def sep(self) -> int:
        return self.code_tokens + 2

    @property
    def sep2(self) -> int:
        # reserved separator; no current prompt layout uses it
        return self.code_tokens + 3

    @property
    def pad(self) -> int:
        return self.code_tokens + 4

    @property
    def text_base(self) -> int:
        return self.code_tokens + 5

    @property
    def vocab_size(self) -> int:
        return self.text_base + self.alphabet


# -- code stream <-> grid ----------------------------------------------------

def flatten_codes(grid: np.ndarray, book_size: int) -> np.ndarray:
    """Interleave a T×Nq grid into a token stream: token = i·K + grid[t, i]."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"expected a T×Nq grid, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() >= book_size):
        raise ValueError(f"grid entries must lie in [0, {book_size})")
    offsets = np.arange(grid.shape[1], dtype=np.int64) * book_size
    return (grid.astype(np.int64) + offsets).reshape(-1)


def unflatten_tokens(tokens, num_books: int, book_size: int) -> np.ndarray:
    """Invert flatten_codes; validates the codebook of every position."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError(f"expected a 1-D token stream, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= num_books * book_size):
        raise ValueError("token outside the code range")
    books = tokens // book_size
    expected = np.arange(tokens.size, dtype=np.int64) % num_books
    bad = np.nonzero(books != expected)[0]
    if bad.size:
        j = int(bad[0])
        raise ValueError(f"codebook misalignment at position {j}: token "
                         f"{int(tokens[j])} belongs to codebook {int(books[j])}, "
                         f"expected {int(expected[j])}")
    tail = tokens.size % num_books
    if tail:
        warnings.warn(f"dropping {tail} trailing tokens of a partial frame")
        tokens = tokens[: tokens.size - tail]
    return (tokens - (np.arange(tokens.size) % num_books) * book_size).reshape(
        -1, num_books).astype(np.int64)


# -- prompts ----------------------------------------------------------------

@dataclass(frozen=True)
class PromptSequence:
    mode: str
    text: tuple
    ref_text: tuple | None = None
    ref_codes: np.ndarray | None = None
    ref_features: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if self.mode == "speech" and (self.ref_text is None or self.ref_codes is None):
            raise ValueError("speech prompts need ref_text and ref_codes")
        if self.mode == "text-with-reference" and self.ref_features is None:
            raise ValueError("text-with-reference prompts need ref_features")


def build_prompt(p: PromptSequence, cfg: LMConfig):
    """Token prefix for a prompt; returns (tokens, reference slot or None).

    text:                [BOS] text [SEP]
    speech:              [BOS] ref-text target-text [SEP] ref-codes
    text-with-reference: [BOS] <slot> text [SEP], embedding injected at <slot>
    """
    def text_tokens(symbols):
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.size and (symbols.min() < 0 or symbols.max() >= cfg.alphabet):
            raise ValueError(f"text symbol outside [0, {cfg.alphabet})")
        return symbols + cfg.text_base

    if p.mode == "text":
        tokens = np.concatenate([[cfg.bos], text_tokens(p.text), [cfg.sep]])
        return tokens.astype(np.int64), None
    if p.mode == "speech":
        tokens = np.concatenate([
            [cfg.bos], text_tokens(p.ref_text), text_tokens(p.text), [cfg.sep],
            flatten_codes(p.ref_codes, cfg.book_size)])
        return tokens.astype(np.int64), None
    # the slot holds PAD; its embedding is replaced by the reference encoding
    tokens = np.concatenate([[cfg.bos, cfg.pad], text_tokens(p.text), [cfg.sep]])
    return tokens.astype(np.int64), 1


# -- model ------------------------------------------------------------------

class ReferenceEncoder:
    """Two temporal convolutions, one self-attention layer, mean pooling."""

    def __init__(self, rng, d_in: int, dim: int, heads: int):
        self.conv1 = nn.TemporalConv3(rng, d_in, dim)
        self.conv2 = nn.TemporalConv3(rng, dim, dim)
        self.attn = nn.MultiHeadSelfAttention(rng, dim, heads)

    def __call__(self, features, frozen: bool = False):
        x = ad.as_tensor(np.asarray(features, dtype=_f32)[None])
        h = ad.tanh(self.conv1(x, frozen))
        h = ad.tanh(self.conv2(h, frozen))
        h = self.attn(h, causal=False, frozen=frozen)
        return ad.reduce_mean(h, axis=1)[0]

    def params(self):
        return nn.collect_params(self.conv1, self.conv2, self.attn)


class TokenLM:
    """Decoder-only transformer with learned positions over the token vocab."""

    def __init__(self, config: LMConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 101])
        self.tok = nn.Embedding(rng, config.vocab_size, config.model_dim)
        self.pos = Tensor((rng.standard_normal((config.max_len, config.model_dim))
                           * 0.02).astype(_f32), requires_grad=True)
        self.blocks = [nn.TransformerBlock(rng, config.model_dim, config.heads,
                                           config.ff_dim)
                       for _ in range(config.layers)]
        self.ln_f = nn.LayerNorm(config.model_dim)
        self.head = nn.Linear(rng, config.model_dim, config.vocab_size)
        self.reference = (ReferenceEncoder(rng, config.ref_dim, config.model_dim,
                                           config.heads)
                          if config.use_reference else None)

    def params(self):
        base = ([self.tok.weight, self.pos] + nn.collect_params(*self.blocks)
                + self.ln_f.params() + self.head.params())
        if self.reference is not None:
            base += self.reference.params()
        return base

    def forward_batch(self, tokens: np.ndarray, ref_embs=None, ref_slot=None,
                      frozen: bool = False):
        """Logits (B, L, V) under causal masking."""
        tokens = np.asarray(tokens, dtype=np.int64)
        b, length = tokens.shape
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len "
                             f"{self.config.max_len}")
        h = self.tok(tokens, frozen)
        if ref_embs is not None:
            ref = ad.reshape(ref_embs, (b, 1, self.config.model_dim))
            h = ad.concat([h[:, :ref_slot], ref, h[:, ref_slot + 1:]], axis=1)
        h = h + nn._use(self.pos, frozen)[:length]
        for block in self.blocks:
            h = block(h, causal=True, frozen=frozen)
        return self.head(self.ln_f(h, frozen), frozen)

    def forward(self, tokens: np.ndarray, ref_emb=None, ref_slot=None):
        ref = None if ref_emb is None else ad.reshape(ref_emb, (1, -1))
        return self.forward_batch(np.asarray(tokens)[None], ref, ref_slot)[0]


def sample(model: TokenLM, prefix: np.ndarray, temperature: float, top_k: int,
           seed: int, max_new: int, ref_emb=None, ref_slot=None) -> np.ndarray:
    """Continue a prefix with code tokens; returns the continuation only.

    Each position allows one codebook's range plus EOS; generation stops at
    EOS, ``max_new`` tokens, or the model's length limit.  temperature 0 or
    top_k 1 reduce to greedy argmax over the allowed set.
    """
    cfg = model.config
    rng = np.random.default_rng([seed, 53])
    seq = list(np.asarray(prefix, dtype=np.int64))
    n_codes = sum(1 for t in seq if t < cfg.code_tokens)
    out = []
    for _ in range(max_new):
        if len(seq) >= cfg.max_len:
            break
        with ad.no_grad():
            logits = model.forward(np.asarray(seq), ref_emb, ref_slot).data[-1]
        book = n_codes % cfg.num_books
        allowed = np.arange(book * cfg.book_size, (book + 1) * cfg.book_size)
        allowed = np.concatenate([allowed, [cfg.eos]])
        sub = logits[allowed].astype(np.float64)
        if temperature <= 0 or top_k <= 1:
            pick = int(np.argmax(sub))
        else:
            k = min(top_k, sub.size)
            keep = np.argpartition(sub, -k)[-k:]
            z = sub[keep] / temperature
            z -= z.max()
            probs = np.exp(z) / np.exp(z).sum()
            pick = int(keep[rng.choice(k, p=probs)])
        token = int(allowed[pick])
        if token == cfg.eos:
            break
        seq.append(token)
        out.append(token)
        n_codes += 1
    return np.asarray(out, dtype=np.int64)


# -- learning-rate schedule --------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    warmup_steps: int = 10000
    peak_lr: float = 5e-4
    total_steps: int = 120000
    floor_fraction: float = 0.10

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")
        if not 0.0 <= self.floor_fraction <= 1.0:
            raise ValueError("floor_fraction must lie in [0, 1]")


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to peak, cosine decay to the floor, then constant."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    peak = float(cfg.peak_lr)
    floor = cfg.floor_fraction * peak
    if step <= cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return floor
    span = cfg.total_steps - cfg.warmup_steps
    phase = math.pi * (step - cfg.warmup_steps) / span
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(phase))


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class CodeUtterance:
    """One utterance of the LM's training corpus."""

    speaker_id: int
    content: tuple
    grid: np.ndarray
    features: np.ndarray | None = None


def _training_sequence(utt: CodeUtterance, partner: CodeUtterance | None,
                       cfg: LMConfig):
    """Token row plus the reference features it conditions on (or None)."""
    if partner is None:
        prompt = PromptSequence(
            mode="text-with-reference" if cfg.use_reference else "text",
            text=tuple(utt.content),
            ref_features=utt.features if cfg.use_reference else None)
        codes = flatten_codes(utt.grid, cfg.book_size)
    else:
        # speech-style row: same-speaker pair rendered as one code stream
        prompt = PromptSequence(mode="speech", text=tuple(utt.content),
                                ref_text=tuple(partner.content),
                                ref_codes=partner.grid)
        codes = flatten_codes(utt.grid, cfg.book_size)
    prefix, slot = build_prompt(prompt, cfg)
    tokens = np.concatenate([prefix, codes, [cfg.eos]])
    return tokens, slot, (utt.features if cfg.use_reference else None)


def train_lm(code_corpus, config: LMConfig, schedule: ScheduleConfig,
             steps: int, batch_tokens: int = 2048, mode_mix: float = 0.5,
             seed: int = 0, log_every: int = 50):
    """Train a TokenLM on CodeUtterance rows; returns (model, log records).

    ``mode_mix`` is the fraction of rows built as same-speaker speech-style
    pairs; the rest are plain text rows.  With ``config.use_reference`` all
    rows are text rows conditioned on the utterance's own features through
    the reference encoder.
    """
    corpus = list(code_corpus)
    if not corpus:
        raise ValueError("code corpus is empty")
    if config.use_reference and any(u.features is None for u in corpus):
        raise ValueError("reference training needs features on every utterance")
    by_speaker = {}
    for i, utt in enumerate(corpus):
        by_speaker.setdefault(utt.speaker_id, []).append(i)

    model = TokenLM(config)
    params = model.params()
    state = ad.OptimizerState.init(params, lr=0.0)
    rng = np.random.default_rng([seed, 59])
    records = []

    for step in range(steps):
        # draw a pool of candidate rows, then pack similar lengths together so
        # padding does not inflate the true compute cost past the budget
        candidates, rejected = [], 0
        while len(candidates) < 16:
            utt = corpus[int(rng.integers(len(corpus)))]
            partner = None
            if not config.use_reference and rng.random() < mode_mix:
                pool = by_speaker[utt.speaker_id]
                partner = corpus[pool[int(rng.integers(len(pool)))]]
            tokens, slot, ref = _training_sequence(utt, partner, config)
            if len(tokens) > config.max_len:
                rejected += 1
                if rejected > 1000:
                    raise ValueError("every sampled sequence exceeds max_len")
                continue
            candidates.append((tokens, slot, ref))
        # pack an ascending-length window starting at a random candidate:
        # similar lengths waste little padding, and the random start keeps
        # long rows from crowding out short ones across steps
        candidates.sort(key=lambda c: len(c[0]))
        start = int(rng.integers(len(candidates)))
        rows, slots, refs = [], None, []
        for tokens, slot, ref in candidates[start:]:
            if rows and len(tokens) * (len(rows) + 1) > batch_tokens:
                break
            rows.append(tokens)
            slots = slot
            refs.append(ref)

        length = max(len(r) for r in rows)
        batch = np.full((len(rows), length), config.pad, dtype=np.int64)
        for i, r in enumerate(rows):
            batch[i, : len(r)] = r
        ref_embs = None
        if config.use_reference:
            ref_embs = ad.concat(
                [ad.reshape(model.reference(f), (1, -1)) for f in refs], axis=0)
        logits = model.forward_batch(batch[:, :-1], ref_embs, slots)
        targets = batch[:, 1:]
        is_code = targets < config.code_tokens
        mask = (is_code | (targets == config.eos)).astype(_f32)
        flat = ad.reshape(logits, (-1, config.vocab_size))
        loss = ad.cross_entropy_logits(flat, targets.reshape(-1),
                                       weights=mask.reshape(-1))
        grads = ad.grad(loss, params)
        state.lr = lr_schedule(state.step + 1, schedule)
        ad.adamw_step(params, grads, state)

        if step % log_every == 0 or step == steps - 1:
            records.append({"step": step, "loss": float(loss.item()),
                            "lr": state.lr, "rows": len(rows),
                            "tokens": int(mask.sum())})
    return model, records
