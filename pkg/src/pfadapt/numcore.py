"""Numerical core: gradients, Adam and the inverse square root schedule.

Reverse-mode differentiation is delegated to torch autograd; the recorded
autograd graph plays the role of the gradient tape. Everything that the
training phases depend on for exactness (the optimizer update, update
masking, the schedule) is implemented here directly so its arithmetic is
fully under our control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

Tensor = torch.Tensor


def backprop(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters that do not influence the loss get an all-zero gradient.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for name, t, g in zip(names, tensors, grads):
        out[name] = torch.zeros_like(t) if g is None else g
    return out


def finite_diff_grad(
    f: Callable[[Tensor], float | Tensor], x: Tensor, eps: float = 1e-5
) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Used as an independent oracle for :func:`backprop`, so it never touches
    autograd.
    """
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(x))
            flat[i] = orig - eps
            fm = float(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * eps)
    return grad.view_as(x)


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = 3e-4
    warmup_steps: int = 4500

    def __post_init__(self):
        if self.lr_max <= 0 or self.warmup_steps < 1:
            raise ValueError("lr_max must be positive and warmup_steps >= 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to ``lr_max`` followed by inverse square root decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = schedule.warmup_steps
    return schedule.lr_max * min(step / w, math.sqrt(w / step))


@dataclass
class AdamState:
    m: Tensor
    v: Tensor
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(torch.zeros_like(param), torch.zeros_like(param), **hyper)


def adam_step(
    param: Tensor,
    grad: Tensor,
    state: AdamState,
    lr: float,
    update_mask: Tensor | None = None,
) -> tuple[Tensor, AdamState]:
    """One bias-corrected Adam update.

    ``update_mask`` (bool, same shape) restricts which elements may change;
    elements outside it keep their exact previous bits and their moments are
    left untouched.
    """
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"shape mismatch: param {tuple(param.shape)}, grad {tuple(grad.shape)}, "
            f"m {tuple(state.m.shape)}, v {tuple(state.v.shape)}"
        )
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = param - lr * m_hat / (v_hat.sqrt() + state.eps)
    if update_mask is not None:
        new = torch.where(update_mask, new, param)
        m = torch.where(update_mask, m, state.m)
        v = torch.where(update_mask, v, state.v)
    return new, AdamState(m, v, t, b1, b2, state.eps)


@dataclass
class Adam:
    """Adam over a named collection of tensors, updated in place."""

    schedule: LrSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)
    num_updates: int = 0

    def lr(self) -> float:
        return lr_at(self.schedule, self.num_updates + 1)

    @torch.no_grad()
    def step(
        self,
        params: Mapping[str, Tensor],
        grads: Mapping[str, Tensor],
        masks: Mapping[str, Tensor | None] | None = None,
    ) -> float:
        lr = self.lr()
        for name, g in grads.items():
            p = params[name]
            st = self.states.get(name)
            if st is None:
                st = AdamState.zeros_like(p, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            mask = masks.get(name) if masks is not None else None
            new, st = adam_step(p, g, st, lr, mask)
            p.copy_(new)
            self.states[name] = st
        self.num_updates += 1
        return lr
