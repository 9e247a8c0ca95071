"""Evaluation metrics: edit-distance rates, speaker similarity, prosody
correlation, linear speaker probes, and paired t-tests over listening scores.

The symbol-rate and speaker metrics call the corpus oracles, which play the
role of external transcription and speaker-verification models.  Everything
here is pure and deterministic given its inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


# -- edit distance ----------------------------------------------------------

def edit_distance(hyp, ref) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def edit_distance_rate(hyp, ref) -> float:
    hyp, ref = list(hyp), list(ref)
    if not ref:
        if hyp:
            raise ValueError("empty reference with nonempty hypothesis")
        return 0.0
    return edit_distance(hyp, ref) / len(ref)


def wer_analog(world, output: np.ndarray, target_content, speaker) -> float:
    """Symbol error rate of the decoded output against the target content."""
    return edit_distance_rate(world.oracle_decode_content(output, speaker), target_content)


# -- speaker and prosody similarity -----------------------------------------

def secs(world, a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of oracle speaker estimates for two feature sequences."""
    ea = world.oracle_speaker_estimate(a).astype(np.float64)
    eb = world.oracle_speaker_estimate(b).astype(np.float64)
    return float(ea @ eb / (np.linalg.norm(ea) * np.linalg.norm(eb)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length 1-d sequences, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least 2 samples")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant sequence")
    return float((xc * yc).sum() / (sx * sy))


def f0_correlation(a, b) -> float:
    """Pearson correlation of two prosody contours."""
    return pearson(a, b)


# -- speaker probe ----------------------------------------------------------

def speaker_probe(inputs, labels, train_idx, eval_idx, steps: int = 500,
                  lr: float = 0.05, seed: int = 0) -> float:
    """Held-out accuracy of a linear speaker classifier.

    Each input is either a (T, D) sequence, averaged over time, or an already
    pooled (D,) vector.  The classifier is multinomial logistic regression
    trained full-batch for ``steps`` steps.
    """
    train_idx, eval_idx = list(train_idx), list(eval_idx)
    if set(train_idx) & set(eval_idx):
        raise ValueError("train and eval splits overlap")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels], dtype=np.int64)

    pooled = np.stack([np.asarray(v, dtype=np.float64).mean(axis=0) if np.asarray(v).ndim == 2
                       else np.asarray(v, dtype=np.float64) for v in inputs])
    mu = pooled[train_idx].mean(axis=0)
    sd = pooled[train_idx].std(axis=0) + 1e-6
    pooled = ((pooled - mu) / sd).astype(np.float32)

    rng = np.random.default_rng([seed, 23])
    w = Tensor((rng.standard_normal((pooled.shape[1], len(classes))) * 0.01).astype(np.float32),
               requires_grad=True)
    b = Tensor(np.zeros(len(classes), dtype=np.float32), requires_grad=True)
    state = ad.OptimizerState.init([w, b], lr=lr, weight_decay=0.0)
    xtr = Tensor(pooled[train_idx])
    ytr = y[train_idx]
    for _ in range(steps):
        loss = ad.cross_entropy_logits(ad.matmul(xtr, w) + b, ytr)
        grads = ad.grad(loss, [w, b])
        ad.adamw_step([w, b], grads, state)

    logits = pooled[eval_idx] @ w.data + b.data
    return float((logits.argmax(axis=1) == y[eval_idx]).mean())


# -- paired t-test ----------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny, eps = 1e-30, 1e-14
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """One-sided survival function P(T > t) of Student's t."""
    x = df / (df + t * t)
    p = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x)
    return p if t >= 0 else 1.0 - p


def paired_ttest(scores_a, scores_b):
    """Two-sided paired t-test; returns (t, p) with df = n - 1."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need equal-length 1-d score sequences, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 paired scores")
    d = a - b
    if np.all(d == 0.0):
        return 0.0, 1.0
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise ValueError(f"zero-variance differences (mean difference {d.mean()!r})")
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * t_sf(abs(t), n - 1)
    return float(t), float(min(p, 1.0))


# -- MUSHRA score ingestion -------------------------------------------------

def mushra_ingest(path):
    """Read a listening-test CSV into per-system score vectors.

    The file must have the header ``tester,system,item,score`` with scores in
    [0, 100].  Every system must cover exactly the same (tester, item) keys;
    vectors are aligned on the sorted key order so they can be compared with
    paired_ttest.
    """
    records = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["tester", "system", "item", "score"]:
            raise ValueError(f"bad header {header!r}, expected tester,system,item,score")
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"row {row_num}: expected 4 fields, got {len(row)}")
            tester, system, item, score_text = (f.strip() for f in row)
            try:
                score = float(score_text)
            except ValueError:
                raise ValueError(f"row {row_num}: non-numeric score {score_text!r}") from None
            if not 0.0 <= score <= 100.0:
                raise ValueError(f"row {row_num}: score {score} outside [0, 100]")
            key = (system, tester, item)
            if key in records:
                raise ValueError(f"row {row_num}: duplicate entry for tester {tester!r}, "
                                 f"system {system!r}, item {item!r}")
            records[key] = (score, row_num)
    if not records:
        raise ValueError("no score rows found")

    systems = sorted({s for s, _, _ in records})
    keysets = {s: {(t, i) for s2, t, i in records if s2 == s} for s in systems}
    all_keys = set().union(*keysets.values())
    for system in systems:
        missing = all_keys - keysets[system]
        if missing:
            t, i = sorted(missing)[0]
            culprit = next(rn for (s2, t2, i2), (_, rn) in sorted(records.items())
                           if (t2, i2) == (t, i))
            raise ValueError(f"row {culprit}: block for tester {t!r}, item {i!r} lacks "
                             f"system {system!r}")

    order = sorted(all_keys)
    return {s: np.array([records[(s, t, i)][0] for t, i in order], dtype=np.float64)
            for s in systems}


# -- report -----------------------------------------------------------------

def fmt(x) -> str:
    """Shortest round-trip decimal form; stable across runs."""
    return repr(float(x))


@dataclass
class SystemRow:
    system: str
    metrics: dict

    def __post_init__(self):
        for name, value in self.metrics.items():
            if value is None:
                continue
            if name in ("secs", "f0_corr") and not -1.0 - 1e-9 <= value <= 1.0 + 1e-9:
                raise ValueError(f"{name} {value} outside [-1, 1]")
            if name in ("wer_analog", "probe_accuracy") and value < 0.0:
                raise ValueError(f"{name} {value} negative")


@dataclass
class PairStat:
    system_a: str
    system_b: str
    metric: str
    t: float
    p: float
    note: str = ""

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p-value {self.p} outside [0, 1]")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    pairs: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def render_text(self) -> str:
        lines = []
        if self.rows:
            names = []
            for row in self.rows:
                for name in row.metrics:
                    if name not in names:
                        names.append(name)
            lines.append("== systems ==")
            lines.append("\t".join(["system"] + names))
            for row in self.rows:
                cells = [fmt(row.metrics[n]) if row.metrics.get(n) is not None else "-"
                         for n in names]
                lines.append("\t".join([row.system] + cells))
        if self.pairs:
            lines.append("== paired tests ==")
            lines.append("system_a\tsystem_b\tmetric\tt\tp\tnote")
            for ps in self.pairs:
                lines.append("\t".join([ps.system_a, ps.system_b, ps.metric,
                                        fmt(ps.t), fmt(ps.p), ps.note or "-"]))
        for note in self.notes:
            lines.append(f"# {note}")
        return "\n".join(lines) + "\n"

    def render_jsonl(self) -> str:
        import json
        lines = []
        for row in self.rows:
            lines.append(json.dumps({"kind": "system", "system": row.system,
                                     "metrics": row.metrics}, sort_keys=True))
        for ps in self.pairs:
            lines.append(json.dumps({"kind": "pair", "system_a": ps.system_a,
                                     "system_b": ps.system_b, "metric": ps.metric,
                                     "t": ps.t, "p": ps.p, "note": ps.note},
                                    sort_keys=True))
        for note in self.notes:
            lines.append(json.dumps({"kind": "note", "text": note}, sort_keys=True))
        return "\n".join(lines) + "\n"
