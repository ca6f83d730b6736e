"""Ownership masks over prunable weights.

Every prunable element carries an owner id: 0 is free (and zero-valued
outside a bilingual training stage), 1 is the shared multilingual network,
and ``k + 1`` is the k-th adapted language pair. Owners only ever move from
0 to a new id; an assigned id never changes again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import torch

from .model import ParamStore

FREE = 0
SHARED = 1
MAX_OWNER = 255

# floor(ratio * n) is taken after adding this, so ratios such as 1 - 1/3
# that land a few ulps under an integer still round to it.
_COUNT_SLACK = 1e-9


class CapacityError(RuntimeError):
    """Raised when a phase needs free weights but none are left."""


def pruned_count(ratio: float, n: int) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"prune ratio must be in [0, 1], got {ratio}")
    return min(n, math.floor(ratio * n + _COUNT_SLACK))


def magnitude_prune(tensor: torch.Tensor, candidates: torch.Tensor | None, ratio: float) -> torch.Tensor:
    """Flat indices of the ``floor(ratio * |candidates|)`` smallest-magnitude
    weights among ``candidates``.

    ``candidates`` is a bool mask of the tensor's shape (``None`` = all).
    Equal magnitudes are pruned lower flat index first. Returns a sorted
    int64 tensor; zeroing the weights is the caller's job.
    """
    flat = tensor.detach().reshape(-1)
    if candidates is None:
        idx = torch.arange(flat.numel())
    else:
        idx = torch.nonzero(candidates.reshape(-1), as_tuple=False).reshape(-1)
    k = pruned_count(ratio, idx.numel())
    if ratio > 0 and idx.numel() == 0:
        raise ValueError("no candidates to prune")
    if k == 0:
        return torch.empty(0, dtype=torch.long)
    mags = flat[idx].abs().double()
    # idx is ascending, so a stable sort on magnitude keeps lower indices first among ties
    order = torch.sort(mags, stable=True).indices
    return torch.sort(idx[order[:k]]).values


@dataclass
class CapacityReport:
    counts: dict[int, int]
    total: int

    @property
    def fractions(self) -> dict[int, float]:
        return {o: c / self.total for o, c in sorted(self.counts.items())}

    def rows(self) -> list[tuple[int, int, float]]:
        return [(o, c, c / self.total) for o, c in sorted(self.counts.items())]


class OwnershipMask:
    """Per prunable tensor, a uint8 owner array of the same shape."""

    def __init__(self, owners: Mapping[str, torch.Tensor], num_pairs: int = 0):
        self.owners: dict[str, torch.Tensor] = {n: o.to(torch.uint8) for n, o in owners.items()}
        self.num_pairs = num_pairs

    @classmethod
    def all_shared(cls, params: ParamStore) -> "OwnershipMask":
        return cls({n: torch.full(params[n].tensor.shape, SHARED, dtype=torch.uint8) for n in params.prunable_names()})

    def clone(self) -> "OwnershipMask":
        return OwnershipMask({n: o.clone() for n, o in self.owners.items()}, self.num_pairs)

    def __iter__(self):
        return iter(self.owners)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.owners[name]

    def present_owners(self) -> set[int]:
        seen: set[int] = set()
        for o in self.owners.values():
            seen.update(torch.unique(o).tolist())
        return seen

    def member(self, name: str, owner_set: Iterable[int]) -> torch.Tensor:
        """Bool array: owner of each element is in ``owner_set``."""
        o = self.owners[name]
        out = torch.zeros(o.shape, dtype=torch.bool)
        for v in set(owner_set):
            out |= o == v
        return out

    def histogram(self) -> CapacityReport:
        counts: dict[int, int] = {}
        total = 0
        for o in self.owners.values():
            vals, cnt = torch.unique(o, return_counts=True)
            for v, c in zip(vals.tolist(), cnt.tolist()):
                counts[v] = counts.get(v, 0) + c
            total += o.numel()
        counts.setdefault(FREE, 0)
        return CapacityReport(counts, total)

    def per_tensor_counts(self, owner: int) -> dict[str, int]:
        return {n: int((o == owner).sum()) for n, o in self.owners.items()}

    def equals(self, other: "OwnershipMask") -> bool:
        return self.owners.keys() == other.owners.keys() and all(
            torch.equal(o, other.owners[n]) for n, o in self.owners.items()
        )


def base_mask(params: ParamStore, pruned: Mapping[str, torch.Tensor]) -> OwnershipMask:
    """Owner 1 everywhere except the pruned flat indices, which become free."""
    mask = OwnershipMask.all_shared(params)
    for name, idx in pruned.items():
        mask.owners[name].view(-1)[idx] = FREE
    return mask


def claim_survivors(
    mask: OwnershipMask,
    trained_free: Mapping[str, torch.Tensor],
    pruned: Mapping[str, torch.Tensor],
    new_owner: int,
) -> OwnershipMask:
    """Give ``new_owner`` every trained free element that was not pruned.

    ``trained_free`` holds bool arrays, ``pruned`` flat index tensors.
    """
    if not 2 <= new_owner <= MAX_OWNER:
        raise ValueError(f"owner id must be in [2, {MAX_OWNER}], got {new_owner}")
    if new_owner in mask.present_owners():
        raise ValueError(f"owner {new_owner} already present in mask")
    out = mask.clone()
    for name, tf in trained_free.items():
        o = out.owners[name]
        if bool((tf & (o != FREE)).any()):
            raise ValueError(f"{name}: trained set overlaps already-owned elements")
        pruned_bool = torch.zeros(o.numel(), dtype=torch.bool)
        idx = pruned.get(name)
        if idx is not None and idx.numel():
            pruned_bool[idx] = True
        pruned_bool = pruned_bool.view(o.shape)
        if bool((pruned_bool & ~tf).any()):
            raise ValueError(f"{name}: pruned set is not inside the trained free set")
        o[tf & ~pruned_bool] = new_owner
    out.num_pairs = max(mask.num_pairs, new_owner - 1)
    return out


def active_masks(mask: OwnershipMask, active: Iterable[int], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """0/1 multipliers per prunable tensor for an active owner set."""
    active = set(active)
    return {n: mask.member(n, active).to(dtype) for n in mask}


def masked_view(
    params: Mapping[str, torch.Tensor],
    mask: OwnershipMask,
    active: Iterable[int] | None = None,
    multipliers: Mapping[str, torch.Tensor] | None = None,
) -> dict[str, torch.Tensor]:
    """Effective weights: prunable elements whose owner is inactive read as 0.

    ``params`` is a plain ``name -> tensor`` mapping; tensors not covered
    by the mask pass through untouched. Pass precomputed ``multipliers``
    to avoid rebuilding them every training step.
    """
    if multipliers is None:
        active = set(active or ())
        if not active:
            raise ValueError("active owner set must be non-empty")
        multipliers = active_masks(mask, active)
    out = {}
    for name, t in params.items():
        m = multipliers.get(name)
        out[name] = t if m is None else t * m.to(t.dtype)
    return out


def gradient_gate(
    grads: Mapping[str, torch.Tensor],
    mask: OwnershipMask,
    trainable: Iterable[int],
    include_nonprunable: bool,
) -> dict[str, torch.Tensor]:
    """Zero every gradient element whose owner is outside ``trainable``."""
    trainable = set(trainable)
    out = {}
    for name, g in grads.items():
        if name in mask.owners:
            out[name] = g * mask.member(name, trainable).to(g.dtype)
        elif include_nonprunable:
            out[name] = g
        else:
            out[name] = torch.zeros_like(g)
    return out


def capacity_schedule(free_fraction: float, second_ratio: float, k: int) -> float:
    """Fraction of prunable weights pair ``k`` (1-based) ends up owning under a
    uniform second prune ratio."""
    if not 0.0 < free_fraction <= 1.0:
        raise ValueError("free_fraction must be in (0, 1]")
    if not 0.0 <= second_ratio < 1.0:
        raise ValueError("second_ratio must be in [0, 1)")
    if k < 1:
        raise ValueError("k must be >= 1")
    return free_fraction * (1.0 - second_ratio) * second_ratio ** (k - 1)


def equal_share_ratios(free_fraction: float, num_pairs: int) -> list[float]:
    """Second prune ratios that leave every one of ``num_pairs`` pairs with
    ``free_fraction / num_pairs`` of the prunable weights."""
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    return [1.0 - 1.0 / (num_pairs - k + 1) for k in range(1, num_pairs + 1)]


def free_zero_violations(params: Mapping[str, torch.Tensor], mask: OwnershipMask) -> int:
    """Number of free elements holding a nonzero weight."""
    return sum(int(((mask[n] == FREE) & (params[n] != 0)).sum()) for n in mask)
