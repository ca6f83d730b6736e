"""Scoring and verification: corpus BLEU, teacher-forced loss and accuracy,
zero-shot decoding through the shared weights, frozen-behaviour checks and
the interference report."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import PIVOT, Example, ParallelCorpus, collate
from .model import ModelConfig, forward, greedy_decode
from .packing import SHARED, masked_view

EVAL_BATCH = 128


@dataclass
class BleuScore:
    value: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_n: int = 4) -> BleuScore:
    """Unsmoothed corpus BLEU on token ids, single reference per sentence."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) == 0.0:
        value = 0.0
    else:
        value = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuScore(value, precisions, bp, hyp_len, ref_len, matches, totals)


def _batches(examples: Sequence[Example], size: int = EVAL_BATCH):
    for i in range(0, len(examples), size):
        yield collate(examples[i : i + size])


@torch.no_grad()
def dev_loss(w: Mapping[str, torch.Tensor], cfg: ModelConfig, examples: Sequence[Example]) -> float:
    """Mean per-token cross-entropy under teacher forcing."""
    if not examples:
        raise ValueError("empty split")
    total, count = 0.0, 0
    for b in _batches(examples):
        tout = torch.from_numpy(b.tgt_out)
        logits = forward(w, cfg, torch.from_numpy(b.src), torch.from_numpy(b.tgt_in))
        total += float(F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tout.reshape(-1), ignore_index=0, reduction="sum"))
        count += int((tout != 0).sum())
    return total / count


@torch.no_grad()
def token_accuracy(w: Mapping[str, torch.Tensor], cfg: ModelConfig, examples: Sequence[Example]) -> float:
    """Fraction of reference positions (EOS included) whose teacher-forced
    argmax equals the reference token."""
    if not examples:
        raise ValueError("empty split")
    hit, count = 0, 0
    for b in _batches(examples):
        tout = torch.from_numpy(b.tgt_out)
        logits = forward(w, cfg, torch.from_numpy(b.src), torch.from_numpy(b.tgt_in))
        valid = tout != 0
        hit += int(((logits.argmax(-1) == tout) & valid).sum())
        count += int(valid.sum())
    return hit / count


@torch.no_grad()
def translate(w: Mapping[str, torch.Tensor], cfg: ModelConfig, examples: Sequence[Example]) -> list[list[int]]:
    out = []
    for i in range(0, len(examples), EVAL_BATCH):
        chunk = examples[i : i + EVAL_BATCH]
        src = torch.from_numpy(collate(chunk).src)
        max_len = max(len(e.src) for e in chunk) + 4
        out.extend(greedy_decode(w, cfg, src, max_len))
    return out


@torch.no_grad()
def teacher_forced_logits(w, cfg: ModelConfig, examples: Sequence[Example]) -> list[torch.Tensor]:
    return [forward(w, cfg, torch.from_numpy(b.src), torch.from_numpy(b.tgt_in)) for b in _batches(examples)]


def direction_examples(corpus: ParallelCorpus, pair: str, split: str) -> dict[str, list[Example]]:
    return {
        f"en-{pair}": corpus.examples(pair, split, ("en-xx",)),
        f"{pair}-en": corpus.examples(pair, split, ("xx-en",)),
    }


def evaluate_pair(state, corpus: ParallelCorpus, pair: str, split: str = "dev", with_bleu: bool = True) -> dict:
    """Loss, token accuracy and BLEU for both directions of ``pair`` using
    the pair's inference view of ``state``."""
    w = state.view(pair)
    cfg = state.model_config
    out = {"pair": pair, "split": split, "active": sorted(state.active_set(pair)) if state.mask is not None else None}
    both = corpus.examples(pair, split)
    out["loss"] = dev_loss(w, cfg, both)
    out["token_accuracy"] = token_accuracy(w, cfg, both)
    if with_bleu:
        dirs = {}
        for name, exs in direction_examples(corpus, pair, split).items():
            hyps = translate(w, cfg, exs)
            dirs[name] = bleu(hyps, [e.tgt for e in exs]).value
        out["bleu"] = dirs
        out["bleu_mean"] = float(np.mean(list(dirs.values())))
    return out


def zero_shot_eval(state, corpus: ParallelCorpus, src_lang: str, tgt_lang: str) -> tuple[BleuScore, list[list[int]]]:
    """Decode an unseen xx->yy direction through the shared weights only."""
    if PIVOT in (src_lang, tgt_lang):
        raise ValueError("zero-shot directions exclude the pivot language")
    exs = corpus.zero_shot_examples(src_lang, tgt_lang)
    w = state.tensors() if state.mask is None else masked_view(state.tensors(), state.mask, {SHARED})
    hyps = translate(w, state.model_config, exs)
    return bleu(hyps, [e.tgt for e in exs]), hyps


def random_decode_floor(corpus: ParallelCorpus, src_lang: str, tgt_lang: str, seed: int = 0) -> float:
    """BLEU of uniformly random content tokens of reference length."""
    exs = corpus.zero_shot_examples(src_lang, tgt_lang)
    g = np.random.default_rng(seed)
    lo = corpus.vocab.block_offset(tgt_lang)
    hyps = [[int(t) for t in g.integers(lo, lo + corpus.vocab.n_content, size=len(e.tgt))] for e in exs]
    return bleu(hyps, [e.tgt for e in exs]).value


@dataclass
class StabilityResult:
    passed: bool
    max_deviation: float
    checked: list[str]


def stability_check(before, after, corpus: ParallelCorpus, pairs_to_check: Sequence[str] | None = None, probes=None) -> StabilityResult:
    """Inference logits of every pair adapted in ``before`` (and of the
    shared-only view) must be bitwise identical in ``after``."""
    from .pipeline import make_probes, probe_examples

    if before.model_config != after.model_config or before.corpus_spec != after.corpus_spec:
        raise ValueError("checkpoints disagree on model or corpus configuration")
    for p, o in before.owners.items():
        if after.owners.get(p) != o:
            raise ValueError(f"pair order prefix differs at {p!r}")
    if probes is None:
        probes = make_probes(before.corpus_spec, before.seed)
    if pairs_to_check is None:
        pairs_to_check = list(before.owners)
    views: list[tuple[str, str | None, str]] = [(p, p, p) for p in pairs_to_check]
    # shared-only view on every pair's probes
    views += [(f"zero-shot/{p}", None, p) for p in corpus.pairs]
    max_dev = 0.0
    exact = True
    for label, view_pair, probe_pair in views:
        exs = probe_examples(corpus, probes, probe_pair)
        a = teacher_forced_logits(before.view(view_pair), before.model_config, exs)
        b = teacher_forced_logits(after.view(view_pair), after.model_config, exs)
        for x, y in zip(a, b):
            if not torch.equal(x, y):
                exact = False
                max_dev = max(max_dev, float((x - y).abs().max()))
    return StabilityResult(exact, max_dev, [v[0] for v in views])


# Reference annotations for the interference table (paper-scale averages).
PAPER_REFERENCE_DELTAS = {"xx-en": 1.40, "en-xx": 1.32}


def interference_report(
    evals: Mapping[str, Mapping[str, dict]],
    order: Sequence[str],
    fractions: Mapping[str, float],
    baseline: str = "parent",
) -> list[dict]:
    """One row per pair in training order.

    ``evals[system][pair]`` is an :func:`evaluate_pair` result. Deltas are
    the system's mean BLEU over both directions minus the baseline's.
    """
    rows = []
    for idx, pair in enumerate(order, start=1):
        row = {"order": idx, "pair": pair, "param_fraction": fractions.get(pair, 0.0)}
        base = evals[baseline][pair]["bleu"]
        for system, per_pair in evals.items():
            if pair not in per_pair:
                continue
            b = per_pair[pair]["bleu"]
            for direction, v in b.items():
                row[f"{system}:{direction}"] = v
            if system != baseline:
                row[f"{system}:delta"] = float(np.mean([b[d] - base[d] for d in b]))
        rows.append(row)
    return rows
