"""Adam as a pure update on parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import torch

from .autodiff import ParamSet


@dataclass(frozen=True)
class OptimState:
    m: ParamSet
    v: ParamSet
    step: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def adam_init(params: Mapping[str, torch.Tensor], lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> OptimState:
    return OptimState({k: torch.zeros_like(v) for k, v in params.items()},
                      {k: torch.zeros_like(v) for k, v in params.items()}, 0, lr, betas, eps)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: OptimState) -> tuple[ParamSet, OptimState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("params, grads and optimizer state must share the same keys")
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    keys = list(params)
    for k in keys:
        if grads[k].shape != params[k].shape:
            raise ValueError(f"gradient shape {tuple(grads[k].shape)} != parameter {k} {tuple(params[k].shape)}")
    P = [params[k] for k in keys]
    G = [grads[k] for k in keys]
    M = torch._foreach_add(torch._foreach_mul([state.m[k] for k in keys], b1), G, alpha=1.0 - b1)
    V = torch._foreach_add(torch._foreach_mul([state.v[k] for k in keys], b2),
                           torch._foreach_mul(G, G), alpha=1.0 - b2)
    denom = torch._foreach_add(torch._foreach_sqrt(torch._foreach_div(V, c2)), state.eps)
    upd = torch._foreach_div(torch._foreach_mul(M, state.lr / c1), denom)
    new_p = dict(zip(keys, torch._foreach_sub(P, upd)))
    return new_p, replace(state, m=dict(zip(keys, M)), v=dict(zip(keys, V)), step=t)
