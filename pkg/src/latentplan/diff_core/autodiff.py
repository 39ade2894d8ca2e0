"""Pure-function evaluation, reverse-mode gradients and finite-difference checks.

A ``ParamSet`` is a plain ``dict[str, Tensor]`` keyed by dotted layer names.
Networks are used as templates: the parameters actually used in a call are
always the ones passed in, never the module's own.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .nets import ArchSpec, build_net

ParamSet = dict  # dict[str, torch.Tensor]


class GradientError(ArithmeticError):
    pass


def params_of(module: nn.Module) -> ParamSet:
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def param_count(params: Mapping[str, torch.Tensor]) -> int:
    return sum(int(v.numel()) for v in params.values())


def zeros_like_params(params: Mapping[str, torch.Tensor]) -> ParamSet:
    return {k: torch.zeros_like(v) for k, v in params.items()}


@lru_cache(maxsize=64)
def _template(arch: ArchSpec, dtype: torch.dtype) -> nn.Module:
    return build_net(arch, 0).to(dtype)


def init_params(arch: ArchSpec, seed: int, dtype: Optional[torch.dtype] = None) -> ParamSet:
    net = build_net(arch, seed)
    if dtype is not None:
        net = net.to(dtype)
    return params_of(net)


def _call(arch: ArchSpec, params: Mapping[str, torch.Tensor], x: torch.Tensor, aux: Sequence):
    net = _template(arch, x.dtype)
    return functional_call(net, dict(params), (x, *aux))


def forward_eval(arch: ArchSpec, params: Mapping[str, torch.Tensor], x: torch.Tensor,
                 aux: Sequence = ()) -> torch.Tensor:
    with torch.no_grad():
        return _call(arch, params, x, aux)


def check_finite(grads: Mapping[str, torch.Tensor]) -> None:
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise GradientError(f"non-finite gradient in layer {name}")


def backward_grad(arch: ArchSpec, params: Mapping[str, torch.Tensor], x: torch.Tensor,
                  output_adjoint: torch.Tensor, aux: Sequence = ()) -> tuple[ParamSet, torch.Tensor]:
    """Gradients of ``<f(params, x), adjoint>`` with respect to params and input."""
    p = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    xi = x.detach().requires_grad_(True)
    out = _call(arch, p, xi, aux)
    if out.shape != output_adjoint.shape:
        raise ValueError(f"adjoint shape {tuple(output_adjoint.shape)} != output {tuple(out.shape)}")
    names = list(p)
    grads = torch.autograd.grad((out * output_adjoint).sum(), [p[n] for n in names] + [xi],
                                allow_unused=True)
    pg = {n: (g if g is not None else torch.zeros_like(p[n])) for n, g in zip(names, grads[:-1])}
    ig = grads[-1] if grads[-1] is not None else torch.zeros_like(xi)
    check_finite({**pg, "input": ig})
    return pg, ig


def fd_check(fn: Callable[[dict], torch.Tensor], tensors: Mapping[str, torch.Tensor], h: float = 1e-5,
             seed: int = 0, max_coords: Optional[int] = None) -> dict[str, float]:
    """Compare autograd against central differences of a random projection of ``fn``.

    ``fn`` maps a dict of tensors to an output tensor. Returns, per tensor, the
    largest absolute gradient discrepancy divided by the largest gradient
    magnitude across all checked tensors. With ``max_coords`` only a random
    subset of coordinates per tensor is perturbed.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    base = {k: v.detach().to(torch.float64).clone() for k, v in tensors.items()}
    with torch.no_grad():
        out0 = fn(base)
    gen = torch.Generator().manual_seed(seed)
    u = torch.randn(out0.shape, generator=gen, dtype=torch.float64)

    def scalar(ts):
        return (fn(ts) * u).sum()

    leaf = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    names = list(leaf)
    ag = torch.autograd.grad(scalar(leaf), [leaf[n] for n in names], allow_unused=True)
    ag = {n: (g if g is not None else torch.zeros_like(base[n])) for n, g in zip(names, ag)}

    rng = np.random.default_rng(seed)
    diffs: dict[str, float] = {}
    scale = 0.0
    with torch.no_grad():
        for n in names:
            flat = base[n].reshape(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
            worst = 0.0
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + h
                fp = float(scalar(base))
                flat[i] = orig - h
                fm = float(scalar(base))
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                g = float(ag[n].reshape(-1)[i])
                worst = max(worst, abs(g - fd))
                scale = max(scale, abs(g), abs(fd))
            diffs[n] = worst
    scale = max(scale, 1e-300)
    return {n: d / scale for n, d in diffs.items()}


def finite_diff_check(arch: ArchSpec, params: Mapping[str, torch.Tensor], x: torch.Tensor,
                      h: float = 1e-5, aux: Sequence = (), seed: int = 0,
                      max_coords: Optional[int] = None) -> float:
    """Max relative gradient error over parameters and input (each group scaled separately)."""
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    aux64 = tuple(a.to(torch.float64) if torch.is_tensor(a) and a.is_floating_point() else a
                  for a in aux)
    params64 = {k: v.to(torch.float64) for k, v in params.items()}
    x64 = x.to(torch.float64)

    perr = fd_check(lambda ts: _call(arch, ts, x64, aux64), params64, h, seed, max_coords)
    ierr = fd_check(lambda ts: _call(arch, params64, ts["input"], aux64), {"input": x64}, h, seed,
                    max_coords)
    worst = max([*perr.values(), *ierr.values()])
    if not math.isfinite(worst):
        raise GradientError("non-finite gradient")
    return worst
