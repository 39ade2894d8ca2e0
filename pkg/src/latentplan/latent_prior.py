"""Conditional diffusion prior over plan sequences.

Noise schedule, forward perturbation, an epsilon-predicting temporal U-Net
with classifier-free condition dropout, the denoising loss and an ancestral
sampler that accepts an external score hook (used for energy guidance).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .diff_core.nets import ArchSpec, build_net
from .diff_core.train import TrainSettings, train_loop
from .rng import rand, randint, randn, torch_gen

SCHEDULES = ("cosine", "linear")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    K: int
    kind: str
    betas: np.ndarray  # (K + 1,), betas[0] = 0
    alpha_bars: np.ndarray  # (K + 1,), alpha_bars[0] = 1
    alphas: np.ndarray  # sqrt(alpha_bar)
    sigmas: np.ndarray  # sqrt(1 - alpha_bar)

    def posterior_variance(self, k: int) -> float:
        """Variance of q(z_{k-1} | z_k, z_0)."""
        ab = self.alpha_bars
        return float(self.betas[k] * (1.0 - ab[k - 1]) / (1.0 - ab[k]))

    def to_dict(self) -> dict:
        return {"K": self.K, "kind": self.kind}


def _cosine_f(t: np.ndarray, s: float) -> np.ndarray:
    return np.cos((t + s) / (1 + s) * math.pi / 2) ** 2


def make_schedule(K: int, kind: str = "cosine", s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine (squared-cosine cumulative form) or linear per-step-variance schedule.

    Both build per-step betas and take the cumulative product, so
    ``alpha_bar_k = prod_{i<=k} (1 - beta_i)``. Linear betas span
    ``[1e-4, 0.02]`` rescaled by ``1000 / K`` so short schedules still reach noise.
    """
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if kind == "cosine":
        t = np.arange(K + 1, dtype=np.float64) / K
        f = _cosine_f(t, s)
        betas = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    elif kind == "linear":
        scale = 1000.0 / K
        betas = np.minimum(np.linspace(1e-4 * scale, 0.02 * scale, K, dtype=np.float64), max_beta)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alpha_bars = np.cumprod(1.0 - betas)
    alphas = np.sqrt(alpha_bars)
    sigmas = np.sqrt(1.0 - alpha_bars)
    if not (np.all(np.diff(alphas) < 0) and np.all(np.diff(sigmas) > 0)):
        raise ValueError("schedule is not strictly monotone; increase K or change kind")
    return NoiseSchedule(int(K), kind, betas, alpha_bars, alphas, sigmas)


def _coef(values: np.ndarray, k, like: torch.Tensor) -> torch.Tensor:
    """Schedule entries at integer step(s) ``k`` broadcast against ``like``."""
    if torch.is_tensor(k):
        c = torch.as_tensor(values, dtype=like.dtype)[k.long()]
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(values[k]), dtype=like.dtype)


def perturb(z0: torch.Tensor, k, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_k = alpha_k z0 + sigma_k eps; ``k`` is an int or a per-item integer tensor."""
    kk = k if torch.is_tensor(k) else torch.tensor([k])
    if int(kk.min()) < 0 or int(kk.max()) > sched.K:
        raise ValueError(f"diffusion step out of range [0, {sched.K}]: {k}")
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    return _coef(sched.alphas, k, z0) * z0 + _coef(sched.sigmas, k, z0) * eps


@dataclass(frozen=True)
class PriorConfig:
    n_tokens: int
    token_dim: int
    cond_dim: int
    widths: tuple[int, ...] = (32, 64, 64)
    emb_dim: int = 32
    kernel: int = 3
    activation: str = "mish"
    drop_prob: float = 0.25
    K: int = 100
    schedule: str = "cosine"

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must be in [0, 1)")

    def arch(self) -> ArchSpec:
        return ArchSpec("temporal_unet", self.token_dim, self.token_dim, tuple(self.widths), self.activation,
                        emb_dim=self.emb_dim, cond_dim=self.cond_dim, kernel=self.kernel)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class EpsModel(Protocol):
    def predict_eps(self, z_k: torch.Tensor, k: torch.Tensor, s1: Optional[torch.Tensor],
                    cond_mask: Optional[torch.Tensor] = None) -> torch.Tensor: ...


class PriorNet(nn.Module):
    """epsilon_theta(z_k, s1, k). A null condition zeroes the condition embedding."""

    def __init__(self, cfg: PriorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.theta = build_net(cfg.arch(), seed)

    def predict_eps(self, z_k, k, s1=None, cond_mask=None):
        if z_k.ndim != 3 or z_k.shape[1:] != (self.cfg.n_tokens, self.cfg.token_dim):
            raise ValueError(f"expected (B, {self.cfg.n_tokens}, {self.cfg.token_dim}), got {tuple(z_k.shape)}")
        k = torch.as_tensor(k).reshape(-1).expand(z_k.shape[0])
        if s1 is not None and cond_mask is None:
            cond_mask = torch.ones(z_k.shape[0], dtype=z_k.dtype)
        return self.theta(z_k, k, s1, cond_mask)

    forward = predict_eps


class GaussianPrior:
    """Exact epsilon predictor for data ~ N(mean, var) elementwise (an analytic test double)."""

    def __init__(self, sched: NoiseSchedule, mean: float = 0.0, var: float = 1.0):
        self.sched, self.mean, self.var = sched, mean, var

    def predict_eps(self, z_k, k, s1=None, cond_mask=None):
        k = torch.as_tensor(k).reshape(-1).expand(z_k.shape[0])
        a = _coef(self.sched.alphas, k, z_k)
        s = _coef(self.sched.sigmas, k, z_k)
        return s * (z_k - a * self.mean) / (a * a * self.var + s * s)


def score_matching_loss(model: EpsModel, z0: torch.Tensor, s1: Optional[torch.Tensor], sched: NoiseSchedule,
                        generator, drop_prob: float = 0.0,
                        predictor: Optional[Callable] = None) -> torch.Tensor:
    """Mean squared error between injected noise and its prediction.

    Draws ``k ~ U{1..K}`` and ``eps ~ N(0, I)`` per item and drops the
    condition with probability ``drop_prob``. ``predictor(z_k, k, s1, mask, eps)``
    replaces the network when given (for oracle test doubles).
    """
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    B = z0.shape[0]
    k = randint(sched.K + 1, B, generator, low=1)
    eps = randn(z0.shape, generator, z0.dtype)
    z_k = perturb(z0, k, eps, sched)
    mask = None
    if s1 is not None:
        mask = (rand(B, generator, z0.dtype) >= drop_prob).to(z0.dtype)
    if predictor is not None:
        eps_hat = predictor(z_k, k, s1, mask, eps)
    else:
        eps_hat = model.predict_eps(z_k, k, s1, mask)
    return (eps - eps_hat).pow(2).sum(dim=tuple(range(1, z0.ndim))).mean()


def train_prior(z0: torch.Tensor, s1: Optional[torch.Tensor], cfg: PriorConfig, settings: TrainSettings,
                seed: int) -> tuple[PriorNet, list[dict]]:
    if z0.shape[0] == 0:
        raise ValueError("empty latent dataset")
    sched = make_schedule(cfg.K, cfg.schedule)
    prior = PriorNet(cfg, seed).to(z0.dtype)
    gen = torch_gen(seed, "prior", "batches")
    noise = torch_gen(seed, "prior", "noise")
    n = z0.shape[0]
    bs = min(settings.batch_size, n)

    def loss_fn(step):
        idx = torch.randint(0, n, (bs,), generator=gen)
        loss = score_matching_loss(prior, z0[idx], None if s1 is None else s1[idx], sched, noise, cfg.drop_prob)
        return loss, {}

    return prior, train_loop(prior, loss_fn, settings, "train-prior")


ScoreHook = Callable[[torch.Tensor, int, Optional[torch.Tensor]], torch.Tensor]


def cfg_eps(model: EpsModel, z_k: torch.Tensor, k: int, s1: Optional[torch.Tensor], w: float) -> torch.Tensor:
    """Classifier-free combination (1 - w) eps_uncond + w eps_cond.

    Only the needed branch runs at ``w`` = 0 or 1; otherwise both run in one
    batched pass.
    """
    B = z_k.shape[0]
    kt = torch.full((B,), k, dtype=torch.long)
    if s1 is None or w == 0.0:
        return model.predict_eps(z_k, kt, s1, None if s1 is None else torch.zeros(B, dtype=z_k.dtype))
    if w == 1.0:
        return model.predict_eps(z_k, kt, s1, torch.ones(B, dtype=z_k.dtype))
    both = model.predict_eps(torch.cat([z_k, z_k]), torch.cat([kt, kt]), torch.cat([s1, s1]),
                             torch.cat([torch.ones(B, dtype=z_k.dtype), torch.zeros(B, dtype=z_k.dtype)]))
    eps_c, eps_u = both[:B], both[B:]
    return (1.0 - w) * eps_u + w * eps_c


def sample_prior(model: EpsModel, s1: Optional[torch.Tensor], sched: NoiseSchedule, w: float, alpha_temp: float,
                 generator, shape: Sequence[int], guidance: Optional[ScoreHook] = None,
                 z_init: Optional[torch.Tensor] = None, trace: Optional[list] = None,
                 variance: str = "posterior", clip_x0: Optional[float] = None) -> torch.Tensor:
    """Ancestral sampling k = K..1 with classifier-free scale ``w``.

    ``generator`` is one torch.Generator or one per batch row. ``guidance``
    returns an additive score; it enters as ``eps <- eps - sigma_k * score``.
    The injected noise variance is ``alpha_temp`` times the posterior variance
    of q(z_{k-1} | z_k, z_0), or times ``beta_k`` with ``variance="beta"``
    (the upper-bound choice, which has less discretization bias when the data
    are not concentrated at a point).
    With ``clip_x0`` the implied clean sample ``(z_k - sigma_k eps) / alpha_k``
    is clamped to ``[-clip_x0, clip_x0]`` before forming the posterior mean,
    which keeps early high-noise steps from amplifying prediction error.
    When ``trace`` is a list, one row per step is appended.
    """
    if not 0.0 <= alpha_temp <= 1.0:
        raise ValueError("alpha_temp must be in [0, 1]")
    if w < 0:
        raise ValueError("guidance scale w must be >= 0")
    if variance not in ("posterior", "beta"):
        raise ValueError(f"unknown variance choice {variance!r}")
    dtype = torch.get_default_dtype() if z_init is None else z_init.dtype
    z = randn(tuple(shape), generator, dtype) if z_init is None else z_init.clone()
    with torch.no_grad():
        for k in range(sched.K, 0, -1):
            eps = cfg_eps(model, z, k, s1, w)
            sigma = float(sched.sigmas[k])
            if guidance is not None:
                with torch.enable_grad():
                    score = guidance(z, k, s1)
                eps = eps - sigma * score.detach()
            beta = float(sched.betas[k])
            if clip_x0 is None:
                mean = (z - (beta / sigma) * eps) / math.sqrt(1.0 - beta)
            else:
                ab, ab_prev = float(sched.alpha_bars[k]), float(sched.alpha_bars[k - 1])
                x0 = ((z - sigma * eps) / float(sched.alphas[k])).clamp(-clip_x0, clip_x0)
                mean = (math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 \
                    + (math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * z
            var = alpha_temp * (beta if variance == "beta" else sched.posterior_variance(k))
            if k > 1 and var > 0:
                z = mean + math.sqrt(var) * randn(z.shape, generator, z.dtype)
            else:
                z = mean
            if not bool(torch.isfinite(z).all()):
                raise FloatingPointError(f"non-finite sample at diffusion step {k}")
            if trace is not None:
                trace.append({"k": k, "eps_norm": float(eps.norm(dim=tuple(range(1, eps.ndim))).mean()),
                              "mu_mean": float(mean.mean()), "var": var})
    return z


def write_trace(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["k", "eps_norm", "mu_mean", "var"], lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
