"""End-to-end orchestration: corpus files, model checkpoints, batteries.

Everything here is deterministic given an ExperimentConfig: random streams
are derived from config seeds with fixed tags, artifacts are written through
the checkpoint tensor table or as sorted JSON, and evaluation batteries fix
their item lists up front.
"""

from __future__ import annotations

import json
import os
import warnings

import numpy as np

from . import autodiff as ad
from . import lm as lmmod
from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import CodecModel, train_codec
from .config import ExperimentConfig
from .lm import CodeUtterance, LMConfig, PromptSequence, TokenLM, build_prompt
from .synth import Corpus, build_corpus

_f32 = np.float32


# -- corpus manifest ---------------------------------------------------------

def corpus_manifest(corpus: Corpus) -> dict:
    """JSON-ready description of every utterance; features stay derivable."""
    return {
        "speakers": len(corpus.speakers),
        "train_speaker_ids": [int(s) for s in corpus.train_speaker_ids],
        "heldout_speaker_ids": [int(s) for s in corpus.heldout_speaker_ids],
        "utterances": [
            {"speaker_id": int(u.speaker.speaker_id),
             "content": [int(c) for c in u.content],
             "prosody_seed": int(u.prosody_seed)}
            for u in corpus.utterances
        ],
    }


def write_manifest(corpus: Corpus, path: str) -> None:
    text = json.dumps(corpus_manifest(corpus), indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


# -- model <-> tensor table --------------------------------------------------

def _params_to_table(params, prefix: str) -> dict:
    return {f"{prefix}.p{i:03d}": p.data for i, p in enumerate(params)}


def _params_from_table(params, table: dict, prefix: str) -> None:
    for i, p in enumerate(params):
        key = f"{prefix}.p{i:03d}"
        if key not in table:
            raise ValueError(f"checkpoint is missing tensor {key}")
        arr = np.asarray(table[key], dtype=_f32)
        if arr.shape != p.data.shape:
            raise ValueError(f"tensor {key} has shape {arr.shape}, "
                             f"expected {p.data.shape}")
        p.data = arr.copy()


def save_codec(model: CodecModel, path: str) -> None:
    table = _params_to_table(model.params(), "codec")
    table.update({f"quantizer.{k}": v
                  for k, v in model.quantizer.state_tensors().items()})
    table["trained"] = np.asarray([float(model.trained)], dtype=_f32)
    save_checkpoint(table, path)


def load_codec(cfg: ExperimentConfig, path: str) -> CodecModel:
    table = load_checkpoint(path)
    model = CodecModel(cfg.codec, corpus_seed=cfg.corpus.seed)
    model.loss_weights = cfg.loss_weights
    _params_from_table(model.params(), table, "codec")
    model.quantizer.load_state_tensors(table, prefix="quantizer.")
    model.trained = bool(table["trained"][0])
    return model


def save_lm(model: TokenLM, path: str) -> None:
    save_checkpoint(_params_to_table(model.params(), "lm"), path)


def load_lm(model_cfg: LMConfig, path: str) -> TokenLM:
    model = TokenLM(model_cfg)
    _params_from_table(model.params(), load_checkpoint(path), "lm")
    return model


# -- code corpus -------------------------------------------------------------

def encode_corpus(corpus: Corpus, codec: CodecModel, speaker_ids=None) -> list:
    """CodeUtterance rows (with features) for the given speakers, in corpus order."""
    wanted = None if speaker_ids is None else set(int(s) for s in speaker_ids)
    rows = []
    for i, utt in enumerate(corpus.utterances):
        sid = int(utt.speaker.speaker_id)
        if wanted is not None and sid not in wanted:
            continue
        feats = corpus.features(i)
        rows.append(CodeUtterance(speaker_id=sid,
                                  content=tuple(int(c) for c in utt.content),
                                  grid=codec.encode_utterance(feats),
                                  features=feats))
    return rows


def save_code_corpus(rows, path: str) -> None:
    """Tensor-table file: ids and symbols are exact small integers in f32."""
    table = {}
    for i, row in enumerate(rows):
        table[f"utt{i:05d}.speaker_id"] = np.asarray([row.speaker_id], _f32)
        table[f"utt{i:05d}.content"] = np.asarray(row.content, _f32)
        table[f"utt{i:05d}.grid"] = row.grid.astype(_f32)
    save_checkpoint(table, path)


def load_code_corpus(path: str, corpus: Corpus | None = None) -> list:
    """Rows back from disk; a corpus re-attaches reference features by order."""
    table = load_checkpoint(path)
    count = len(table) // 3
    rows = []
    lookup = None
    if corpus is not None:
        lookup = {}
        for i, utt in enumerate(corpus.utterances):
            key = (int(utt.speaker.speaker_id),
                   tuple(int(c) for c in utt.content))
            lookup.setdefault(key, []).append(i)
    for i in range(count):
        sid = int(table[f"utt{i:05d}.speaker_id"][0])
        content = tuple(int(c) for c in table[f"utt{i:05d}.content"])
        grid = table[f"utt{i:05d}.grid"].astype(np.int64)
        feats = None
        if lookup is not None:
            matches = lookup.get((sid, content))
            if not matches:
                raise ValueError(f"utterance {i} does not match the corpus: "
                                 f"speaker {sid}")
            feats = corpus.features(matches[0])
        rows.append(CodeUtterance(speaker_id=sid, content=content, grid=grid,
                                  features=feats))
    return rows


# -- batched sampling --------------------------------------------------------

def sample_many(model: TokenLM, prefixes, temperature: float, top_k: int,
                seed: int, max_new, ref_embs=None, ref_slot=None) -> list:
    """Sample continuations for many prompts in lockstep batches.

    Row i draws from its own stream ``[seed, 53, i]``, so results do not
    depend on which other prompts share the batch.  ``max_new`` may be one
    bound for all rows or a per-row sequence.  Returns one code-token array
    per prompt.
    """
    cfg = model.config
    count = len(prefixes)
    if np.isscalar(max_new):
        max_new = [int(max_new)] * count
    rngs = [np.random.default_rng([seed, 53, i]) for i in range(count)]
    seqs = [list(np.asarray(p, dtype=np.int64)) for p in prefixes]
    n_codes = [sum(1 for t in s if t < cfg.code_tokens) for s in seqs]
    out = [[] for _ in range(count)]
    active = [i for i in range(count)
              if max_new[i] > 0 and len(seqs[i]) < cfg.max_len]

    while active:
        length = max(len(seqs[i]) for i in active)
        batch = np.full((len(active), length), cfg.pad, dtype=np.int64)
        for row, i in enumerate(active):
            batch[row, : len(seqs[i])] = seqs[i]
        refs = None
        if ref_embs is not None:
            refs = ad.concat([ad.reshape(ref_embs[i], (1, -1)) for i in active],
                             axis=0)
        with ad.no_grad():
            logits = model.forward_batch(batch, refs, ref_slot).data
        survivors = []
        for row, i in enumerate(active):
            vec = logits[row, len(seqs[i]) - 1]
            book = n_codes[i] % cfg.num_books
            allowed = np.arange(book * cfg.book_size, (book + 1) * cfg.book_size)
            allowed = np.concatenate([allowed, [cfg.eos]])
            sub = vec[allowed].astype(np.float64)
            if temperature <= 0 or top_k <= 1:
                pick = int(np.argmax(sub))
            else:
                k = min(top_k, sub.size)
                keep = np.argpartition(sub, -k)[-k:]
                z = sub[keep] / temperature
                z -= z.max()
                probs = np.exp(z) / np.exp(z).sum()
                pick = int(keep[rngs[i].choice(k, p=probs)])
            token = int(allowed[pick])
            if token == cfg.eos:
                continue
            seqs[i].append(token)
            out[i].append(token)
            n_codes[i] += 1
            if len(out[i]) < max_new[i] and len(seqs[i]) < cfg.max_len:
                survivors.append(i)
        active = survivors
    return [np.asarray(o, dtype=np.int64) for o in out]


# -- conversion battery ------------------------------------------------------

def conversion_battery(corpus: Corpus, codec: CodecModel, pairs: int,
                       seed: int) -> dict:
    """Held-out voice conversion scores plus the reconstruction baseline."""
    rng = np.random.default_rng([seed, 23])
    held = [i for i in range(len(corpus.utterances))
            if corpus.utterances[i].speaker.speaker_id
            in set(corpus.heldout_speaker_ids)]
    world = corpus.world
    out = {"secs_target": [], "secs_source": [], "f0_source": [],
           "f0_random": [], "wer_converted": [], "wer_reconstructed": []}
    for _ in range(pairs):
        src = held[int(rng.integers(len(held)))]
        tgt = held[int(rng.integers(len(held)))]
        while (corpus.utterances[tgt].speaker.speaker_id
               == corpus.utterances[src].speaker.speaker_id):
            tgt = held[int(rng.integers(len(held)))]
        other = held[int(rng.integers(len(held)))]
        sf, tf = corpus.features(src), corpus.features(tgt)
        conv = codec.convert_voice(sf, tf)
        recon = codec.reconstruct(sf)
        su = corpus.utterances[src]
        out["secs_target"].append(metrics.secs(world, conv, tf))
        out["secs_source"].append(metrics.secs(world, conv, sf))
        pros_conv = world.oracle_extract_prosody(conv, su.speaker)
        pros_src = world.oracle_extract_prosody(sf, su.speaker)
        out["f0_source"].append(metrics.pearson(pros_conv, pros_src))
        ou = corpus.utterances[other]
        pros_other = world.oracle_extract_prosody(corpus.features(other),
                                                  ou.speaker)
        n = min(len(pros_conv), len(pros_other))
        out["f0_random"].append(metrics.pearson(pros_conv[:n], pros_other[:n]))
        out["wer_converted"].append(
            metrics.wer_analog(world, conv, su.content, su.speaker))
        out["wer_reconstructed"].append(
            metrics.wer_analog(world, recon, su.content, su.speaker))
    return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}


# -- speaker probes ----------------------------------------------------------

def probe_battery(corpus: Corpus, codec: CodecModel, seed: int,
                  utterances_per_speaker: int = 20, train_frac: float = 0.75):
    """Linear-probe accuracies on speaker embeddings and quantized codes."""
    rng = np.random.default_rng([seed, 29])
    held = list(corpus.heldout_speaker_ids)
    per = min(utterances_per_speaker,
              *(len(corpus.indices_for_speaker(s)) for s in held))
    emb_in, code_in, labels = [], [], []
    for label, sid in enumerate(held):
        idxs = corpus.indices_for_speaker(sid)
        take = rng.permutation(len(idxs))[:per]
        for j in take:
            feats = corpus.features(idxs[int(j)])
            emb_in.append(codec.speaker_embedding(feats))
            grid = codec.encode_utterance(feats)
            deq = codec.quantizer.dequantize(grid)
            code_in.append(deq.mean(axis=0))
            labels.append(label)
    emb_in = np.asarray(emb_in, dtype=_f32)
    code_in = np.asarray(code_in, dtype=_f32)
    labels = np.asarray(labels)
    cut = int(round(train_frac * per))
    train_idx, eval_idx = [], []
    for s in range(len(held)):
        base = s * per
        train_idx.extend(range(base, base + cut))
        eval_idx.extend(range(base + cut, base + per))
    acc_emb = metrics.speaker_probe(emb_in, labels, train_idx, eval_idx,
                                    seed=seed)
    acc_code = metrics.speaker_probe(code_in, labels, train_idx, eval_idx,
                                     seed=seed)
    return acc_emb, acc_code, 1.0 / len(held)


# -- prompted generation battery ---------------------------------------------

def tts_battery(corpus: Corpus, codec: CodecModel, model: TokenLM, mode: str,
                count: int, temperature: float, top_k: int, seed: int,
                max_new_tokens: int) -> dict:
    """WER-analog over sampled generations in one prompting mode.

    Items are train-split utterances: the target text is the utterance's
    content; reference material (speech codes or reference features) comes
    from a different utterance of the same speaker.  Generated grids are
    decoded with that speaker's embedding and scored against the target text
    by the content oracle.
    """
    if mode not in ("text", "speech", "text-ref"):
        raise ValueError(f"unknown tts mode {mode!r}")
    cfg = model.config
    world = corpus.world
    fps = corpus.cfg.frames_per_symbol
    rng = np.random.default_rng([seed, 31])
    train = [i for i in range(len(corpus.utterances))
             if corpus.utterances[i].speaker.speaker_id
             in set(corpus.train_speaker_ids)]
    prefixes, ref_embs, items = [], [], []
    slot = None
    for _ in range(count):
        ui = train[int(rng.integers(len(train)))]
        utt = corpus.utterances[ui]
        pool = [j for j in corpus.indices_for_speaker(utt.speaker.speaker_id)
                if j != ui]
        rj = pool[int(rng.integers(len(pool)))]
        ref_feats = corpus.features(rj)
        if mode == "text":
            prompt = PromptSequence(mode="text", text=tuple(utt.content))
        elif mode == "speech":
            prompt = PromptSequence(
                mode="speech", text=tuple(utt.content),
                ref_text=tuple(corpus.utterances[rj].content),
                ref_codes=codec.encode_utterance(ref_feats))
        else:
            prompt = PromptSequence(mode="text-with-reference",
                                    text=tuple(utt.content),
                                    ref_features=ref_feats)
        tokens, slot = build_prompt(prompt, cfg)
        prefixes.append(tokens)
        if mode == "text-ref":
            with ad.no_grad():
                ref_embs.append(model.reference(ref_feats).data)
        items.append((ui, rj))
    # generation budget: room for every target frame plus audible overrun
    caps = [cfg.num_books * (fps * len(corpus.utterances[ui].content) + 6)
            for ui, _ in items]
    caps = [min(c, max_new_tokens) for c in caps]
    embs = [ad.as_tensor(e) for e in ref_embs] if mode == "text-ref" else None
    gens = sample_many(model, prefixes, temperature, top_k, seed, caps,
                       embs, slot if mode == "text-ref" else None)
    wers, lengths = [], []
    for (ui, rj), gen in zip(items, gens):
        utt = corpus.utterances[ui]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            grid = lmmod.unflatten_tokens(gen, cfg.num_books, cfg.book_size)
        lengths.append(len(grid))
        if len(grid) < fps:
            # too short for even one symbol: every target symbol is a deletion
            wers.append(1.0)
            continue
        emb_src = corpus.features(ui if mode == "text" else rj)
        feats = codec.decode_codes(grid, codec.speaker_embedding(emb_src))
        t = (len(feats) // fps) * fps
        wers.append(metrics.wer_analog(world, feats[:t], utt.content,
                                       utt.speaker))
    return {"wer": np.asarray(wers, dtype=np.float64),
            "frames": np.asarray(lengths, dtype=np.float64)}


# -- full evaluation ---------------------------------------------------------

def evaluate(cfg: ExperimentConfig, corpus: Corpus, codec: CodecModel,
             lm_nr: TokenLM | None = None,
             lm_r: TokenLM | None = None) -> metrics.EvalReport:
    """Assemble the metric report for whichever systems are available."""
    ev = cfg.eval
    report = metrics.EvalReport()
    conv = conversion_battery(corpus, codec, ev.conversion_pairs, ev.seed)
    row = {"secs_target": float(conv["secs_target"].mean()),
           "secs_source": float(conv["secs_source"].mean()),
           "f0_source": float(conv["f0_source"].mean()),
           "f0_random": float(conv["f0_random"].mean()),
           "wer_analog": float(conv["wer_converted"].mean()),
           "wer_reconstruction": float(conv["wer_reconstructed"].mean())}
    if ev.probes:
        acc_emb, acc_code, chance = probe_battery(corpus, codec, ev.seed)
        row["probe_embedding"] = acc_emb
        row["probe_codes"] = acc_code
        report.notes.append(f"probe chance level {metrics.fmt(chance)}")
    report.rows.append(metrics.SystemRow("conversion", row))
    t, p = metrics.paired_ttest(conv["secs_target"], conv["secs_source"])
    report.pairs.append(metrics.PairStat("secs_target", "secs_source", "secs",
                                         t, p))
    t, p = metrics.paired_ttest(conv["f0_source"], conv["f0_random"])
    report.pairs.append(metrics.PairStat("f0_source", "f0_random", "f0_corr",
                                         t, p))

    batteries = {}
    if lm_nr is not None:
        for mode, system in (("text", "text-prompting"),
                             ("speech", "speech-prompting")):
            scores = tts_battery(corpus, codec, lm_nr, mode,
                                 ev.tts_generations, ev.temperature, ev.top_k,
                                 ev.seed, ev.max_new_tokens)
            batteries[system] = scores
            report.rows.append(metrics.SystemRow(system, {
                "wer_analog": float(scores["wer"].mean()),
                "mean_frames": float(scores["frames"].mean())}))
    if lm_r is not None:
        scores = tts_battery(corpus, codec, lm_r, "text-ref",
                             ev.tts_generations, ev.temperature, ev.top_k,
                             ev.seed, ev.max_new_tokens)
        batteries["text-prompting-ref"] = scores
        report.rows.append(metrics.SystemRow("text-prompting-ref", {
            "wer_analog": float(scores["wer"].mean()),
            "mean_frames": float(scores["frames"].mean())}))
    if "text-prompting" in batteries and "speech-prompting" in batteries:
        t, p = metrics.paired_ttest(batteries["text-prompting"]["wer"],
                                    batteries["speech-prompting"]["wer"])
        report.pairs.append(metrics.PairStat("text-prompting",
                                             "speech-prompting", "wer_analog",
                                             t, p))
    return report


# -- orchestrated steps (shared by the CLI) ----------------------------------

def run_train_codec(cfg: ExperimentConfig, corpus: Corpus, out_dir: str):
    model, records = train_codec(corpus, cfg.codec, cfg.loss_weights)
    save_codec(model, os.path.join(out_dir, "codec.ckpt"))
    _write_records(records, os.path.join(out_dir, "codec_train.jsonl"))
    return model, records


def run_train_lm(cfg: ExperimentConfig, code_rows, out_dir: str):
    model, records = lmmod.train_lm(
        code_rows, cfg.lm_model, cfg.lm_schedule, steps=cfg.lm_training.steps,
        batch_tokens=cfg.lm_training.batch_tokens,
        mode_mix=cfg.lm_training.mode_mix, seed=cfg.lm_training.seed)
    name = "lm_r.ckpt" if cfg.lm_model.use_reference else "lm_nr.ckpt"
    save_lm(model, os.path.join(out_dir, name))
    _write_records(records, os.path.join(out_dir, "lm_train.jsonl"))
    return model, records


def _write_records(records, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
