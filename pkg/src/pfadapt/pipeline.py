"""Phase orchestration: multilingual training, base pruning, per-pair
adaptation, the Full-FT baseline, and checkpoint I/O for the run state."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .corpus import (
    CorpusSpec,
    Example,
    ParallelCorpus,
    SamplerConfig,
    _zipf_probs,
    build_corpus,
    make_batches,
    rng,
    substream,
)
from .model import ModelConfig, ParamStore, forward, init_params, xavier_uniform
from .numcore import Adam, LrSchedule, backprop
from .packing import (
    FREE,
    SHARED,
    CapacityError,
    OwnershipMask,
    active_masks,
    base_mask,
    claim_survivors,
    gradient_gate,
    magnitude_prune,
    masked_view,
)

log = logging.getLogger(__name__)

PHASE_KINDS = (
    "multilingual_train",
    "base_prune_retrain",
    "pair_adapt",
    "pair_prune_retrain",
    "full_finetune_baseline",
)
NUM_PROBES = 64


@dataclass(frozen=True)
class TrainSettings:
    lr_max: float = 2e-3
    warmup_steps: int = 300
    max_tokens: int = 3050
    temperature: float = 5.0
    # single-pair phases (stage A/B, full fine-tune) see far less data per
    # epoch, so they get their own batch budget and schedule. Peak lr is
    # pair_lr_budget / training examples, capped at pair_lr_max, which keeps
    # the summed lr per epoch about the same for every pair size.
    pair_lr_max: float = 1e-2
    pair_lr_budget: float = 6.0
    pair_warmup_steps: int = 50
    pair_max_tokens: int = 600
    # scale of the xavier draw used to re-seed free weights before stage A
    reinit_scale: float = 0.05

    def __post_init__(self):
        for name in ("lr_max", "pair_lr_max", "pair_lr_budget", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("warmup_steps", "pair_warmup_steps", "max_tokens", "pair_max_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.reinit_scale < 0:
            raise ValueError("reinit_scale must be non-negative")


@dataclass(frozen=True)
class EpochPlan:
    multilingual: int = 30
    base_retrain: int = 8
    pair_adapt: int = 15
    pair_retrain: int = 6


EPOCH_PRESETS = {
    "desk": EpochPlan(),
    "paper": EpochPlan(multilingual=40, base_retrain=10, pair_adapt=20, pair_retrain=10),
}


@dataclass(frozen=True)
class Phase:
    kind: str
    epochs: int
    pair: str | None = None
    prune_ratio: float | None = None
    reset_lr: bool = True


@dataclass
class PhasePlan:
    phases: list[Phase]

    def validate(self, pairs: Sequence[str]) -> None:
        kinds = [p.kind for p in self.phases]
        for k in kinds:
            if k not in PHASE_KINDS:
                raise ValueError(f"unknown phase kind {k!r}")
        if kinds.count("base_prune_retrain") != 1:
            raise ValueError("base_prune_retrain must occur exactly once")
        if "multilingual_train" not in kinds or kinds.index("multilingual_train") > kinds.index("base_prune_retrain"):
            raise ValueError("base_prune_retrain must follow multilingual_train")
        seen_adapt: list[str] = []
        for p in self.phases:
            if p.prune_ratio is not None and not 0.0 <= p.prune_ratio < 1.0:
                raise ValueError(f"prune ratio {p.prune_ratio} outside [0, 1)")
            if p.kind == "pair_adapt":
                if p.pair not in pairs:
                    raise ValueError(f"unknown pair {p.pair!r}")
                if p.pair in seen_adapt:
                    raise ValueError(f"pair {p.pair!r} adapted twice")
                seen_adapt.append(p.pair)
            elif p.kind == "pair_prune_retrain":
                if not seen_adapt or seen_adapt[-1] != p.pair:
                    raise ValueError(f"prune_retrain for {p.pair!r} must directly follow its adapt phase")

    def pair_order(self) -> list[str]:
        return [p.pair for p in self.phases if p.kind == "pair_adapt"]


def make_plan(
    order: Sequence[str],
    second_ratios: Sequence[float],
    first_ratio: float = 0.5,
    epochs: EpochPlan = EpochPlan(),
) -> PhasePlan:
    if len(second_ratios) != len(order):
        raise ValueError("need one second prune ratio per adapted pair")
    phases = [
        Phase("multilingual_train", epochs.multilingual),
        Phase("base_prune_retrain", epochs.base_retrain, prune_ratio=first_ratio),
    ]
    for pair, r2 in zip(order, second_ratios):
        phases.append(Phase("pair_adapt", epochs.pair_adapt, pair=pair))
        phases.append(Phase("pair_prune_retrain", epochs.pair_retrain, pair=pair, prune_ratio=r2))
    return PhasePlan(phases)


@dataclass
class RunState:
    """Everything a checkpoint holds."""

    model_config: ModelConfig
    corpus_spec: CorpusSpec
    settings: TrainSettings
    seed: int
    params: ParamStore
    mask: OwnershipMask | None = None
    owners: dict[str, int] = field(default_factory=dict)
    phase_log: list[dict] = field(default_factory=list)
    label: str = "parent"

    def clone(self) -> "RunState":
        return RunState(
            self.model_config,
            self.corpus_spec,
            self.settings,
            self.seed,
            self.params.clone(),
            self.mask.clone() if self.mask is not None else None,
            dict(self.owners),
            [dict(e) for e in self.phase_log],
            self.label,
        )

    def tensors(self) -> dict[str, torch.Tensor]:
        return self.params.tensors()

    def active_set(self, pair: str | None) -> set[int]:
        """Owners used at inference: {1} for zero-shot / unadapted pairs,
        {1, ..., owner(pair)} for an adapted pair."""
        if pair is None or pair not in self.owners:
            return {SHARED}
        return set(range(SHARED, self.owners[pair] + 1))

    def view(self, pair: str | None = None) -> dict[str, torch.Tensor]:
        if self.mask is None:
            return self.tensors()
        return masked_view(self.tensors(), self.mask, self.active_set(pair))

    # -- persistence ------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "label": self.label,
            "model_config": self.model_config.to_dict(),
            "corpus_spec": self.corpus_spec.to_dict(),
            "vocab": build_vocab_dict(self.corpus_spec),
            "settings": asdict(self.settings),
            "seed": self.seed,
            "owners": self.owners,
            "pair_order": sorted(self.owners, key=self.owners.get),
            "phase_log": self.phase_log,
            "probes": make_probes(self.corpus_spec, self.seed),
        }

    def to_bytes(self) -> bytes:
        return ckpt.encode_checkpoint(self.params, self.mask, self.manifest())

    def save(self, path: str | Path) -> None:
        ckpt.save_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RunState":
        params, mask, m = ckpt.decode_checkpoint(blob)
        try:
            return cls(
                ModelConfig(**m["model_config"]),
                CorpusSpec.from_dict(m["corpus_spec"]),
                TrainSettings(**m["settings"]),
                m["seed"],
                params,
                mask,
                dict(m["owners"]),
                list(m["phase_log"]),
                m.get("label", "parent"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ckpt.CheckpointError(f"manifest is missing or has invalid fields: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "RunState":
        return cls.from_bytes(ckpt.load_bytes(path))


def build_vocab_dict(spec: CorpusSpec) -> dict:
    from .corpus import Vocabulary

    return Vocabulary(spec.languages, spec.n_content, spec.conflict).to_dict()


def make_probes(spec: CorpusSpec, seed: int, count: int = NUM_PROBES) -> dict[str, list[list[int]]]:
    """Seeded English content sentences per pair used by stability checks."""
    probs = _zipf_probs(spec.n_content, spec.zipf_exponent)
    out = {}
    for pair in spec.languages:
        g = rng(seed, "probes", pair)
        sents = []
        for _ in range(count):
            n = int(g.integers(spec.min_len, spec.max_len + 1))
            sents.append([int(t) for t in g.choice(spec.n_content, size=n, p=probs)])
        out[pair] = sents
    return out


def probe_examples(corpus: ParallelCorpus, probes: dict[str, list[list[int]]], pair: str) -> list[Example]:
    from .corpus import PIVOT

    out = []
    for c in probes[pair]:
        out.append(corpus.example(c, PIVOT, pair))
        out.append(corpus.example(c, pair, PIVOT))
    return out


def new_state(model_config: ModelConfig, corpus_spec: CorpusSpec, settings: TrainSettings, seed: int) -> RunState:
    vocab_size = build_vocab_dict(corpus_spec)["size"]
    if model_config.vocab_size != vocab_size:
        model_config = replace(model_config, vocab_size=vocab_size)
    longest = corpus_spec.max_len + 2
    if model_config.max_seq_len < longest:
        model_config = replace(model_config, max_seq_len=longest)
    g = torch.Generator().manual_seed(substream(seed, "init"))
    return RunState(model_config, corpus_spec, settings, seed, init_params(model_config, g))


# -- training core ------------------------------------------------------------


def sequence_loss(logits: torch.Tensor, tgt_out: torch.Tensor) -> torch.Tensor:
    V = logits.shape[-1]
    return F.cross_entropy(logits.reshape(-1, V), tgt_out.reshape(-1), ignore_index=0)


def _train_loop(
    state: RunState,
    datasets: Sequence[Sequence[Example]],
    epochs: int,
    stream: str,
    trainable: set[int] | None,
    active: set[int] | None,
    train_nonprunable: bool,
    single_pair: bool = False,
) -> dict:
    """Train ``state.params`` in place.

    ``trainable``/``active`` are owner sets (ignored while there is no
    mask). Returns step count and per-epoch mean losses.
    """
    cfg = state.model_config
    params = state.params
    mask = state.mask
    w = params.tensors()
    if mask is None:
        names = list(w)
        update_masks = None
        multipliers = None
    else:
        names = []
        update_masks = {}
        for n, p in params.items():
            if n in mask.owners:
                m = mask.member(n, trainable)
                if bool(m.any()):
                    names.append(n)
                    update_masks[n] = m
            elif train_nonprunable:
                names.append(n)
                update_masks[n] = None
        multipliers = active_masks(mask, active)
    total = sum(len(d) for d in datasets)
    st = state.settings
    if single_pair:
        sampler = SamplerConfig(st.temperature, st.pair_max_tokens, state.seed)
        schedule = LrSchedule(pair_peak_lr(st, total), st.pair_warmup_steps)
    else:
        sampler = SamplerConfig(st.temperature, st.max_tokens, state.seed)
        schedule = LrSchedule(st.lr_max, st.warmup_steps)
    opt = Adam(schedule)
    drop_gen = torch.Generator().manual_seed(substream(state.seed, "dropout", stream))
    epoch_losses = []
    steps = 0
    for n in names:
        w[n].requires_grad_(True)
    try:
        for epoch in range(epochs):
            loss_sum, tok_sum = 0.0, 0
            for batch in make_batches(datasets, sampler, total, stream=f"{stream}:{epoch}"):
                src = torch.from_numpy(batch.src)
                tin = torch.from_numpy(batch.tgt_in)
                tout = torch.from_numpy(batch.tgt_out)
                eff = w if multipliers is None else masked_view(w, mask, multipliers=multipliers)
                logits = forward(eff, cfg, src, tin, train_mode=True, dropout_generator=drop_gen)
                loss = sequence_loss(logits, tout)
                grads = backprop(loss, {n: w[n] for n in names})
                if mask is not None:
                    grads = gradient_gate(grads, mask, trainable, include_nonprunable=train_nonprunable)
                opt.step(w, grads, update_masks)
                ntok = int((tout != 0).sum())
                loss_sum += float(loss.detach()) * ntok
                tok_sum += ntok
                steps += 1
            epoch_losses.append(loss_sum / max(tok_sum, 1))
            log.info("%s epoch %d/%d loss %.4f", stream, epoch + 1, epochs, epoch_losses[-1])
    finally:
        for n in names:
            w[n].requires_grad_(False)
    return {"steps": steps, "epoch_losses": epoch_losses, "peak_lr": schedule.lr_max}


def pair_peak_lr(settings: TrainSettings, num_examples: int) -> float:
    return min(settings.pair_lr_max, settings.pair_lr_budget / max(num_examples, 1))


def _log_phase(state: RunState, phase: Phase, stats: dict, **extra) -> None:
    entry = {
        "index": len(state.phase_log),
        "kind": phase.kind,
        "pair": phase.pair,
        "epochs": phase.epochs,
        "prune_ratio": phase.prune_ratio,
        "steps": stats.get("steps", 0),
        "final_loss": stats["epoch_losses"][-1] if stats.get("epoch_losses") else None,
        "peak_lr": stats.get("peak_lr"),
    }
    entry.update(extra)
    state.phase_log.append(entry)


def pair_datasets(corpus: ParallelCorpus, pairs: Sequence[str]) -> list[list[Example]]:
    return [corpus.examples(p, "train") for p in pairs]


def train_multilingual(state: RunState, corpus: ParallelCorpus, epochs: int) -> RunState:
    """Train every parameter on all pairs, both directions, temperature-sampled."""
    if not corpus.pairs or any(corpus.size(p) == 0 for p in corpus.pairs):
        raise ValueError("multilingual training needs a non-empty corpus")
    if state.mask is not None:
        raise ValueError("multilingual training runs before any ownership mask exists")
    phase = Phase("multilingual_train", epochs)
    stats = _train_loop(state, pair_datasets(corpus, corpus.pairs), epochs, f"phase{len(state.phase_log)}", None, None, True)
    _log_phase(state, phase, stats)
    state.label = "parent"
    return state


def base_prune_retrain(state: RunState, corpus: ParallelCorpus, ratio: float, retrain_epochs: int) -> RunState:
    """Prune ``ratio`` of every prunable tensor by magnitude, hand the
    survivors to the shared owner and retrain them on all pairs."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"first prune ratio must be in [0, 1), got {ratio}")
    if state.mask is not None:
        raise ValueError("base pruning already applied")
    pruned = {}
    with torch.no_grad():
        for name in state.params.prunable_names():
            t = state.params[name].tensor
            idx = magnitude_prune(t, None, ratio)
            t.view(-1)[idx] = 0.0
            pruned[name] = idx
    state.mask = base_mask(state.params, pruned)
    phase = Phase("base_prune_retrain", retrain_epochs, prune_ratio=ratio)
    stats = _train_loop(
        state,
        pair_datasets(corpus, corpus.pairs),
        retrain_epochs,
        f"phase{len(state.phase_log)}",
        trainable={SHARED},
        active={SHARED},
        train_nonprunable=True,
    )
    _log_phase(state, phase, stats)
    state.label = "pruned"
    return state


def _reinit_free(state: RunState, pair: str) -> None:
    g = torch.Generator().manual_seed(substream(state.seed, "reinit", pair))
    with torch.no_grad():
        for name in state.mask:
            t = state.params[name].tensor
            fresh = xavier_uniform(tuple(t.shape), g, t.dtype) * state.settings.reinit_scale
            free = state.mask[name] == FREE
            t[free] = fresh[free]


def adapt_pair(
    state: RunState,
    corpus: ParallelCorpus,
    pair: str,
    adapt_epochs: int,
    second_ratio: float,
    retrain_epochs: int,
) -> RunState:
    """Stage A trains the free weights on ``pair``; they are then pruned at
    ``second_ratio``; the survivors become the pair's own weights and are
    retrained in stage B. Nothing owned earlier is touched."""
    if state.mask is None:
        raise ValueError("adapt_pair needs a base-pruned checkpoint")
    if pair in state.owners:
        raise ValueError(f"pair {pair!r} already adapted")
    if not 0.0 <= second_ratio < 1.0:
        raise ValueError(f"second prune ratio must be in [0, 1), got {second_ratio}")
    owner = SHARED + len(state.owners) + 1
    free = {n: state.mask[n] == FREE for n in state.mask}
    if sum(int(f.sum()) for f in free.values()) == 0:
        raise CapacityError(f"no free weights left to adapt pair {pair!r}")

    earlier = set(range(SHARED, owner))
    data = pair_datasets(corpus, [pair])

    _reinit_free(state, pair)
    phase_a = Phase("pair_adapt", adapt_epochs, pair=pair)
    stats = _train_loop(
        state, data, adapt_epochs, f"phase{len(state.phase_log)}", {FREE}, earlier | {FREE}, False, True
    )
    _log_phase(state, phase_a, stats)

    pruned = {}
    with torch.no_grad():
        for name, f in free.items():
            if not bool(f.any()):
                continue
            t = state.params[name].tensor
            idx = magnitude_prune(t, f, second_ratio)
            t.view(-1)[idx] = 0.0
            pruned[name] = idx
    state.mask = claim_survivors(state.mask, free, pruned, owner)
    state.owners[pair] = owner

    phase_b = Phase("pair_prune_retrain", retrain_epochs, pair=pair, prune_ratio=second_ratio)
    stats = _train_loop(
        state, data, retrain_epochs, f"phase{len(state.phase_log)}", {owner}, earlier | {owner}, False, True
    )
    _log_phase(state, phase_b, stats, owner=owner)
    state.label = "adapted"
    return state


def adapt_sequence(
    state: RunState,
    corpus: ParallelCorpus,
    order: Sequence[str],
    second_ratios: Sequence[float],
    epochs: EpochPlan,
    on_pair_done: Callable[[RunState, str], None] | None = None,
) -> RunState:
    if len(order) != len(second_ratios):
        raise ValueError("need one second prune ratio per pair")
    unknown = [p for p in order if p not in corpus.pairs]
    if unknown:
        raise ValueError(f"unknown pairs in order: {unknown}")
    if len(set(order)) != len(order):
        raise ValueError("pair order contains duplicates")
    for pair, r2 in zip(order, second_ratios):
        adapt_pair(state, corpus, pair, epochs.pair_adapt, r2, epochs.pair_retrain)
        if on_pair_done is not None:
            on_pair_done(state, pair)
    return state


def full_finetune_baseline(parent: RunState, corpus: ParallelCorpus, pair: str, epochs: int) -> RunState:
    """Fine-tune every parameter of the parent model on one pair."""
    if parent.mask is not None:
        raise ValueError("Full-FT starts from the unpruned parent model")
    state = parent.clone()
    phase = Phase("full_finetune_baseline", epochs, pair=pair)
    stats = _train_loop(state, pair_datasets(corpus, [pair]), epochs, f"fullft:{pair}", None, None, True, True)
    _log_phase(state, phase, stats)
    state.label = f"fullft:{pair}"
    return state


def second_ratios_for(
    order: Sequence[str],
    r2: float,
    first_ratio: float = 0.5,
    equal_share: bool = False,
    prune_last: bool = True,
) -> list[float]:
    from .packing import equal_share_ratios

    if equal_share:
        return equal_share_ratios(1.0 - first_ratio, len(order))
    ratios = [r2] * len(order)
    if ratios and not prune_last:
        ratios[-1] = 0.0
    return ratios


def descending_order(corpus_spec: CorpusSpec) -> list[str]:
    sizes = dict(zip(corpus_spec.languages, corpus_spec.sizes))
    return sorted(corpus_spec.languages, key=lambda p: (-sizes[p], corpus_spec.languages.index(p)))


def corpus_for(state: RunState) -> ParallelCorpus:
    return build_corpus(state.corpus_spec)


def snapshot(state: RunState) -> dict[str, np.ndarray]:
    return {n: p.tensor.detach().numpy().copy() for n, p in state.params.items()}
