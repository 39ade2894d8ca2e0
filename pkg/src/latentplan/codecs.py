"""Plan spaces: how a diffusion sample maps to a trajectory and an energy.

The prior and energy model only see a ``(n_tokens, token_dim)`` sequence plus
the normalized first state. A codec says what that sequence means:

* ``LatentCodec``: ``H / L`` latent actions decoded by a trajectory VAE.
* ``RawCodec``: ``H`` raw ``(s, a, r, G)`` tokens used directly.
* ``SkillCodec``: latent skills over ``(s, a)`` only; returns come from a
  separately trained return head on the decoded states and actions.

Energies are ``-sum_t G_t`` in raw (denormalized) return units.
"""

from __future__ import annotations

import numpy as np
import torch

from .env_data import Dataset, NormStats
from .trajectory_vae import ReturnHead, TokenizedTrajectories, TrajectoryVAE, split_tokens, tokenize

SPACES = ("latent", "raw", "skill")


class Codec:
    space: str
    seq_len: int  # H, in raw steps
    n_tokens: int
    token_dim: int
    state_dim: int
    action_dim: int

    def __init__(self, norm: NormStats):
        self.norm = norm
        dt = torch.get_default_dtype()
        self._rtg = (torch.tensor(float(norm.mean["rtg"][0]), dtype=dt),
                     torch.tensor(float(norm.std["rtg"][0]), dtype=dt))

    def tokenize(self, dataset: Dataset, stride: int = 1) -> TokenizedTrajectories:
        raise NotImplementedError

    def encode(self, data: TokenizedTrajectories) -> torch.Tensor:
        """Clean prior-space sequences (N, n_tokens, token_dim) for a tokenized dataset."""
        raise NotImplementedError

    def decode(self, z: torch.Tensor, s1: torch.Tensor) -> dict[str, torch.Tensor]:
        """Normalized trajectory channels; always has ``states``, ``actions`` and ``rtg``."""
        raise NotImplementedError

    def denorm_rtg(self, g: torch.Tensor) -> torch.Tensor:
        mean, std = self._rtg
        return g * std.to(g.dtype) + mean.to(g.dtype)

    def energy(self, z: torch.Tensor, s1: torch.Tensor) -> torch.Tensor:
        """E = -sum_t G_t over the decoded plan, in raw units; shape (B,)."""
        return -self.denorm_rtg(self.decode(z, s1)["rtg"]).sum(dim=1)

    def frozen(self):
        for m in self.modules():
            m.requires_grad_(False)
            m.eval()
        return self

    def modules(self) -> list[torch.nn.Module]:
        return []


class _VaeCodec(Codec):
    """Shared VAE plumbing. Latents are standardized per dimension with stats of the encoded dataset."""

    def __init__(self, vae: TrajectoryVAE, norm: NormStats, z_mean=None, z_std=None):
        super().__init__(norm)
        self.vae = vae
        c = vae.cfg
        self.seq_len, self.n_tokens, self.token_dim = c.seq_len, c.n_latents, c.z_dim
        self.state_dim, self.action_dim = c.state_dim, c.action_dim
        dt = torch.get_default_dtype()
        self.z_mean = torch.zeros(c.z_dim, dtype=dt) if z_mean is None else torch.as_tensor(z_mean, dtype=dt)
        self.z_std = torch.ones(c.z_dim, dtype=dt) if z_std is None else torch.as_tensor(z_std, dtype=dt)

    def raw_means(self, data: TokenizedTrajectories) -> torch.Tensor:
        with torch.no_grad():
            return torch.cat([self.vae.encode(data.tokens[i:i + 512])[0] for i in range(0, len(data), 512)])

    def fit_latent_stats(self, data: TokenizedTrajectories, floor: float = 1e-3):
        z = self.raw_means(data)
        self.z_mean = z.mean(dim=(0, 1))
        self.z_std = z.std(dim=(0, 1)).clamp_min(floor)
        return self

    def encode(self, data):
        return (self.raw_means(data) - self.z_mean) / self.z_std

    def unscale(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.z_std.to(z.dtype) + self.z_mean.to(z.dtype)

    def latent_stats(self) -> dict:
        return {"z_mean": self.z_mean.double().tolist(), "z_std": self.z_std.double().tolist()}


class LatentCodec(_VaeCodec):
    space = "latent"

    def __init__(self, vae: TrajectoryVAE, norm: NormStats, z_mean=None, z_std=None):
        if not vae.cfg.with_returns:
            raise ValueError("latent space needs a VAE with reward/return heads")
        super().__init__(vae, norm, z_mean, z_std)

    def tokenize(self, dataset, stride=1):
        return tokenize(dataset, self.seq_len, self.vae.cfg.L, stride, True, self.norm)

    def decode(self, z, s1):
        return self.vae.decode(self.unscale(z), s1)

    def modules(self):
        return [self.vae]


class RawCodec(Codec):
    """Identity codec: the diffusion model works on raw normalized tokens."""

    space = "raw"

    def __init__(self, state_dim: int, action_dim: int, seq_len: int, norm: NormStats):
        super().__init__(norm)
        self.state_dim, self.action_dim = state_dim, action_dim
        self.seq_len = self.n_tokens = seq_len
        self.token_dim = state_dim + action_dim + 2

    def tokenize(self, dataset, stride=1):
        return tokenize(dataset, self.seq_len, 1, stride, True, self.norm)

    def encode(self, data):
        return data.tokens.clone()

    def decode(self, z, s1):
        if z.shape[1:] != (self.n_tokens, self.token_dim):
            raise ValueError(f"expected raw plan ({self.n_tokens}, {self.token_dim}), got {tuple(z.shape[1:])}")
        return split_tokens(z, self.state_dim, self.action_dim, True)


class SkillCodec(_VaeCodec):
    """Latent skills over (state, action) tokens with an external return head."""

    space = "skill"

    def __init__(self, vae: TrajectoryVAE, head: ReturnHead, norm: NormStats, z_mean=None, z_std=None):
        if vae.cfg.with_returns:
            raise ValueError("skill space needs a VAE trained without reward/return channels")
        super().__init__(vae, norm, z_mean, z_std)
        self.head = head

    def tokenize(self, dataset, stride=1):
        data = tokenize(dataset, self.seq_len, self.vae.cfg.L, stride, False, self.norm)
        expect = self.state_dim + self.action_dim
        if data.tokens.shape[-1] != expect:
            raise AssertionError(f"skill tokens must have {expect} channels, got {data.tokens.shape[-1]}")
        return data

    def decode(self, z, s1):
        out = self.vae.decode(self.unscale(z), s1)
        out["rewards"], out["rtg"] = self.head(out["states"], out["actions"])
        return out

    def modules(self):
        return [self.vae, self.head]


def normalized_state(norm: NormStats, state: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(norm.normalize("states", np.asarray(state, dtype=np.float64)),
                           dtype=torch.get_default_dtype())
