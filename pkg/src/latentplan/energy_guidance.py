"""Energy guidance for a pretrained diffusion prior.

A time-dependent energy model ``f(z_k, s1, k)`` is trained so that, over a
support set of prior samples, ``softmax(f)`` of the perturbed members matches
``softmax(-beta * E0)`` of the clean ones. Its input gradient added to the
prior score then samples from ``q(z) exp(-beta E(z)) / Z`` at every noise
level. MSE and exponentiated-MSE regressors are kept as baselines.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .codecs import Codec
from .diff_core.nets import ACTIVATIONS, SinusoidalEmbedding, mlp
from .diff_core.train import TrainSettings, train_loop
from .latent_prior import EpsModel, NoiseSchedule, ScoreHook, cfg_eps, perturb, sample_prior
from .rng import randint, randn, torch_gen

LOSSES = ("contrastive", "mse", "emse")
EXP_CLAMP = 40.0


class StoreError(ValueError):
    pass


# support sets

@dataclass
class SupportStore:
    """Per-state support sets: ``members`` (N, M, n, d), ``energies`` (N, M) float64."""

    s1: torch.Tensor
    members: torch.Tensor
    energies: torch.Tensor
    beta: float
    prior_hash: str = ""

    def __post_init__(self):
        if self.members.ndim != 4 or self.members.shape[:2] != self.energies.shape:
            raise StoreError("members must be (N, M, n, d) with energies (N, M)")
        if self.members.shape[1] < 1:
            raise StoreError("support sets need M >= 1")
        if not bool(torch.isfinite(self.energies).all()):
            raise StoreError("non-finite support energies")

    @property
    def M(self) -> int:
        return self.members.shape[1]

    def __len__(self) -> int:
        return self.members.shape[0]

    def subset(self, idx) -> "SupportStore":
        return SupportStore(self.s1[idx], self.members[idx], self.energies[idx], self.beta, self.prior_hash)

    def split(self, val_fraction: float, seed: int) -> tuple["SupportStore", "SupportStore"]:
        n = len(self)
        n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
        perm = torch.randperm(n, generator=torch_gen(seed, "support", "split"))
        return self.subset(perm[n_val:]), self.subset(perm[:n_val])


def save_store(store: SupportStore, path) -> None:
    """Directory with one JSON line per state plus a meta file carrying the prior hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"format": "latentplan-support/1", "prior_hash": store.prior_hash, "beta": store.beta,
            "n_states": len(store), "M": store.M, "shape": list(store.members.shape[2:])}
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    with open(path / "records.jsonl", "w") as fh:
        for i in range(len(store)):
            rec = {"state": store.s1[i].double().tolist(),
                   "latents": store.members[i].double().tolist(),
                   "energies": store.energies[i].double().tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_store(path, expected_prior_hash: Optional[str] = None) -> SupportStore:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        lines = (path / "records.jsonl").read_text().splitlines()
    except FileNotFoundError as exc:
        raise StoreError(f"support store missing: {exc.filename}") from None
    if expected_prior_hash is not None and meta["prior_hash"] != expected_prior_hash:
        raise StoreError(f"support store was generated by prior {meta['prior_hash'][:12]}, "
                         f"expected {expected_prior_hash[:12]}")
    recs = [json.loads(l) for l in lines]
    dt = torch.get_default_dtype()
    return SupportStore(torch.tensor([r["state"] for r in recs], dtype=dt),
                        torch.tensor([r["latents"] for r in recs], dtype=dt),
                        torch.tensor([r["energies"] for r in recs], dtype=torch.float64),
                        float(meta["beta"]), meta["prior_hash"])


def trajectory_energy(z0: torch.Tensor, s1: torch.Tensor, codec: Codec) -> torch.Tensor:
    """E = -sum_t G_t of the decoded plan, in raw return units."""
    return codec.energy(z0, s1)


def gen_support(prior: EpsModel, codec: Codec, s1: torch.Tensor, M: int, sched: NoiseSchedule, seed: int,
                w: float = 1.0, alpha_temp: float = 1.0, beta: float = 3.0, prior_hash: str = "",
                batch_states: int = 64, clip_x0: Optional[float] = None) -> SupportStore:
    """M unguided prior samples per initial state, each decoded once to cache its energy.

    Member ``j`` of state ``i`` draws all of its noise from its own substream,
    so the store does not depend on ``batch_states``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    N = s1.shape[0]
    shape = (codec.n_tokens, codec.token_dim)
    members, energies = [], []
    for lo in range(0, N, batch_states):
        hi = min(N, lo + batch_states)
        cond = s1[lo:hi].repeat_interleave(M, dim=0)
        gens = [torch_gen(seed, "support", i, j) for i in range(lo, hi) for j in range(M)]
        z = sample_prior(prior, cond, sched, w, alpha_temp, gens, (len(gens), *shape), clip_x0=clip_x0)
        with torch.no_grad():
            e = codec.energy(z, cond).double()
        members.append(z.reshape(hi - lo, M, *shape))
        energies.append(e.reshape(hi - lo, M))
    return SupportStore(s1.clone(), torch.cat(members), torch.cat(energies), float(beta), prior_hash)


# energy model

@dataclass(frozen=True)
class EnergyConfig:
    n_tokens: int
    token_dim: int
    cond_dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    emb_dim: int = 16
    activation: str = "silu"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class EnergyNet(nn.Module):
    """f_eta(z_k, s1, k): MLP over [flattened z_k, condition embedding, sinusoidal k embedding]."""

    def __init__(self, cfg: EnergyConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            e = cfg.emb_dim
            self.k_emb = SinusoidalEmbedding(e)
            self.cond = nn.Sequential(nn.Linear(cfg.cond_dim, e), ACTIVATIONS[cfg.activation]()) if cfg.cond_dim else None
            width = cfg.n_tokens * cfg.token_dim + e + (e if cfg.cond_dim else 0)
            self.net = mlp(width, cfg.hidden, 1, cfg.activation)

    def forward(self, z_k: torch.Tensor, s1: Optional[torch.Tensor], k) -> torch.Tensor:
        B = z_k.shape[0]
        if z_k.shape[1:] != (self.cfg.n_tokens, self.cfg.token_dim):
            raise ValueError(f"expected (B, {self.cfg.n_tokens}, {self.cfg.token_dim}), got {tuple(z_k.shape)}")
        k = torch.as_tensor(k).reshape(-1).expand(B)
        parts = [z_k.reshape(B, -1), self.k_emb(k)]
        if self.cond is not None:
            parts.append(self.cond(s1))
        return self.net(torch.cat(parts, dim=-1))[:, 0]


def zero_energy(cfg: EnergyConfig) -> EnergyNet:
    net = EnergyNet(cfg)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    return net


def _perturbed_members(members, sched, generator, k=None, shared_noise=False):
    """Perturb each set's members at one step k per set; returns (z_k flat (B*M, n, d), k (B,))."""
    B, M = members.shape[:2]
    if k is None:
        k = randint(sched.K + 1, B, generator)
    k = torch.as_tensor(k).reshape(-1).expand(B)
    if shared_noise:
        eps = randn((B, 1, *members.shape[2:]), generator, members.dtype).expand_as(members)
    else:
        eps = randn(members.shape, generator, members.dtype)
    flat = members.reshape(B * M, *members.shape[2:])
    kk = k.repeat_interleave(M)
    return perturb(flat, kk, eps.reshape(flat.shape), sched), k


def contrastive_loss(energy: nn.Module, s1: torch.Tensor, members: torch.Tensor, energies: torch.Tensor,
                     sched: NoiseSchedule, beta: float, generator, k=None,
                     shared_noise: bool = False) -> torch.Tensor:
    """Cross-entropy between softmax(-beta E0) and softmax(f_eta(z_k)) per support set, batch-averaged.

    ``k`` defaults to one draw from U{0..K} per set.
    """
    B, M = energies.shape
    z_k, k = _perturbed_members(members, sched, generator, k, shared_noise)
    cond = None if s1 is None else s1.repeat_interleave(M, dim=0)
    logits = energy(z_k, cond, k.repeat_interleave(M)).reshape(B, M)
    target = torch.softmax((-beta * energies).to(logits.dtype), dim=1)
    logq = torch.log_softmax(logits, dim=1)
    per_set = -(target * logq).sum(dim=1)
    bad = ~torch.isfinite(per_set)
    if bool(bad.any()):
        raise FloatingPointError(f"non-finite contrastive loss for support set {int(bad.nonzero()[0])}")
    return per_set.mean()


def mse_energy_loss(energy: nn.Module, z_k, s1, k, target) -> torch.Tensor:
    """Mean (f_eta - E0)^2."""
    return (energy(z_k, s1, k) - target.to(z_k.dtype)).pow(2).mean()


def emse_energy_loss(energy: nn.Module, z_k, s1, k, target, beta: float) -> tuple[torch.Tensor, int]:
    """Mean (exp(f_eta) - exp(beta E0))^2 with exponents clamped at 40; returns (loss, clamp count)."""
    f = energy(z_k, s1, k)
    t = beta * target.to(z_k.dtype)
    clamped = int((f > EXP_CLAMP).sum()) + int((t > EXP_CLAMP).sum())
    loss = (f.clamp(max=EXP_CLAMP).exp() - t.clamp(max=EXP_CLAMP).exp()).pow(2).mean()
    return loss, clamped


def train_energy(store: SupportStore, cfg: EnergyConfig, sched: NoiseSchedule, settings: TrainSettings, seed: int,
                 beta: Optional[float] = None, loss: str = "contrastive",
                 shared_noise: bool = False) -> tuple[EnergyNet, list[dict]]:
    """Fit f_eta on a support store. Only the energy model is trained."""
    if len(store) == 0:
        raise ValueError("empty support store")
    if loss not in LOSSES:
        raise ValueError(f"unknown energy loss {loss!r}")
    beta = store.beta if beta is None else beta
    if beta < 0:
        raise ValueError("beta must be >= 0")
    net = EnergyNet(cfg, seed).to(store.members.dtype)
    gen = torch_gen(seed, "energy", loss, "batches")
    noise = torch_gen(seed, "energy", loss, "noise")
    n = len(store)
    bs = min(settings.batch_size, n)
    use_cond = cfg.cond_dim > 0
    clamps = [0]

    def loss_fn(step):
        idx = torch.randint(0, n, (bs,), generator=gen)
        s1 = store.s1[idx] if use_cond else None
        if loss == "contrastive":
            return contrastive_loss(net, s1, store.members[idx], store.energies[idx], sched, beta, noise,
                                    shared_noise=shared_noise), {}
        z_k, k = _perturbed_members(store.members[idx], sched, noise, shared_noise=shared_noise)
        M = store.M
        cond = None if s1 is None else s1.repeat_interleave(M, dim=0)
        target = store.energies[idx].reshape(-1)
        if loss == "mse":
            return mse_energy_loss(net, z_k, cond, k.repeat_interleave(M), target), {}
        val, c = emse_energy_loss(net, z_k, cond, k.repeat_interleave(M), target, beta)
        clamps[0] += c
        return val, {"clamped": clamps[0]}

    return net, train_loop(net, loss_fn, settings, f"train-energy-{loss}")


# guidance

def energy_gradient(energy: nn.Module, z_k: torch.Tensor, s1: Optional[torch.Tensor], k) -> torch.Tensor:
    """Input gradient of sum_b f_eta(z_k[b], s1[b], k)."""
    with torch.enable_grad():
        z = z_k.detach().requires_grad_(True)
        (g,) = torch.autograd.grad(energy(z, s1, k).sum(), z)
    if not bool(torch.isfinite(g).all()):
        raise FloatingPointError(f"non-finite energy gradient at diffusion step {k}")
    return g


def energy_hook(energy: nn.Module, scale: float = 1.0, use_cond: bool = True) -> ScoreHook:
    """Score hook ``scale * grad f_eta`` for the sampler."""

    def hook(z_k, k, s1):
        return scale * energy_gradient(energy, z_k, s1 if use_cond else None, k)

    return hook


def baseline_hook(energy: nn.Module, loss: str, beta: float, use_cond: bool = True) -> ScoreHook:
    """MSE regresses E0, so it guides with -beta grad f; E-MSE already includes beta, so -grad f."""
    if loss == "contrastive":
        return energy_hook(energy, 1.0, use_cond)
    if loss == "mse":
        return energy_hook(energy, -beta, use_cond)
    if loss == "emse":
        return energy_hook(energy, -1.0, use_cond)
    raise ValueError(f"unknown energy loss {loss!r}")


def prior_score(prior: EpsModel, z_k, s1, k: int, sched: NoiseSchedule, w: float) -> torch.Tensor:
    with torch.no_grad():
        return -cfg_eps(prior, z_k, k, s1, w) / float(sched.sigmas[k])


def guided_score(prior: EpsModel, energy: nn.Module, z_k, s1, k: int, sched: NoiseSchedule, w: float,
                 use_cond: bool = True) -> torch.Tensor:
    """Prior score -eps_tilde / sigma_k plus the energy model's input gradient."""
    if not 1 <= k <= sched.K:
        raise ValueError(f"diffusion step {k} outside [1, {sched.K}]")
    return prior_score(prior, z_k, s1, k, sched, w) + energy_gradient(energy, z_k, s1 if use_cond else None, k)
