"""Trajectory VAE: a learned, temporally abstract latent action space.

Each timestep ``(s_t, a_t, r_t, G_t)`` is one token. The encoder runs a
non-causal attention stack over the ``T`` tokens, max-pools the features with
kernel and stride ``L`` and maps each pooled vector to a Gaussian over one
latent action. The decoder tiles every latent ``L`` times, concatenates the
first state, projects linearly, adds positions and decodes states with an
attention stack; actions come from an inverse-dynamics head on consecutive
decoded states, rewards and returns from a head on decoded (state, action).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diff_core.nets import ArchSpec, build_net
from .diff_core.train import TrainSettings, train_loop
from .env_data import Dataset, NormStats
from .rng import randn, torch_gen

SECTIONS = ("phi", "psi_state", "psi_action", "psi_reward_return")


def token_dim(state_dim: int, action_dim: int, with_returns: bool = True) -> int:
    return state_dim + action_dim + (2 if with_returns else 0)


@dataclass(frozen=True)
class VaeConfig:
    state_dim: int
    action_dim: int
    seq_len: int
    L: int = 4
    z_dim: int = 8
    d_model: int = 32
    n_heads: int = 2
    n_blocks: int = 2
    feat_dim: int = 32
    action_hidden: tuple[int, ...] = (128, 128)
    rr_hidden: tuple[int, ...] = (128, 128, 128)
    with_returns: bool = True
    kl_weight: float = 1e-6
    state_residual: bool = True  # decode states as s1 + offset

    def __post_init__(self):
        if self.seq_len % self.L:
            raise ValueError(f"sequence length {self.seq_len} is not divisible by latent step {self.L}")
        if not self.kl_weight > 0:
            raise ValueError("kl_weight must be positive")

    @property
    def n_latents(self) -> int:
        return self.seq_len // self.L

    @property
    def token_dim(self) -> int:
        return token_dim(self.state_dim, self.action_dim, self.with_returns)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        for k in ("action_hidden", "rr_hidden"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TokenizedTrajectories:
    """A batch of normalized windows: tokens (N, T, token_dim) and first states (N, state_dim)."""

    tokens: torch.Tensor
    s1: torch.Tensor
    L: int
    state_dim: int
    action_dim: int
    with_returns: bool = True
    index: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.tokens.shape[1]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def split_channels(self, tokens=None) -> dict[str, torch.Tensor]:
        return split_tokens(self.tokens if tokens is None else tokens, self.state_dim,
                            self.action_dim, self.with_returns)


def split_tokens(tokens: torch.Tensor, state_dim: int, action_dim: int,
                 with_returns: bool = True) -> dict[str, torch.Tensor]:
    sd, ad = state_dim, action_dim
    out = {"states": tokens[..., :sd], "actions": tokens[..., sd:sd + ad]}
    if with_returns:
        out["rewards"] = tokens[..., sd + ad]
        out["rtg"] = tokens[..., sd + ad + 1]
    return out


def join_tokens(parts: dict[str, torch.Tensor]) -> torch.Tensor:
    cols = [parts["states"], parts["actions"]]
    if "rewards" in parts:
        cols += [parts["rewards"][..., None], parts["rtg"][..., None]]
    return torch.cat(cols, dim=-1)


def tokenize(dataset: Dataset, seq_len: int, L: int, stride: int = 1, with_returns: bool = True,
             norm: NormStats | None = None) -> TokenizedTrajectories:
    """Slice every trajectory into normalized windows of ``seq_len`` steps."""
    if seq_len % L:
        raise ValueError(f"sequence length {seq_len} is not divisible by latent step {L}")
    norm = norm or dataset.norm
    env = dataset.env
    toks, firsts, index = [], [], []
    for i, tr in enumerate(dataset.trajectories):
        if tr.T < seq_len:
            raise ValueError(f"trajectory {i} shorter than window {seq_len}")
        cols = [norm.normalize("states", tr.states), norm.normalize("actions", tr.actions)]
        if with_returns:
            cols += [norm.normalize("rewards", tr.rewards[:, None]), norm.normalize("rtg", tr.rtg[:, None])]
        full = np.concatenate(cols, axis=1)
        for t0 in range(0, tr.T - seq_len + 1, stride):
            toks.append(full[t0:t0 + seq_len])
            firsts.append(full[t0, :env.state_dim])
            index.append((i, t0))
    dtype = torch.get_default_dtype()
    return TokenizedTrajectories(torch.as_tensor(np.stack(toks), dtype=dtype),
                                 torch.as_tensor(np.stack(firsts), dtype=dtype), L,
                                 env.state_dim, env.action_dim, with_returns, index)


def max_pool_time(features: torch.Tensor, L: int) -> torch.Tensor:
    """(B, T, F) -> (B, T / L, F); max over non-overlapping windows, ties to the first index."""
    B, T, Fd = features.shape
    if T % L:
        raise ValueError(f"sequence length {T} is not divisible by latent step {L}")
    return F.max_pool1d(features.transpose(1, 2), kernel_size=L, stride=L).transpose(1, 2)


class TrajectoryVAE(nn.Module):
    def __init__(self, cfg: VaeConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        sd, ad = cfg.state_dim, cfg.action_dim
        widths = (cfg.d_model,) * cfg.n_blocks
        self.enc_arch = ArchSpec("attention_encoder", cfg.token_dim, cfg.feat_dim, widths, "relu",
                                 seq_len=cfg.seq_len, n_heads=cfg.n_heads)
        self.state_arch = ArchSpec("attention_encoder", cfg.z_dim + sd, sd, widths, "relu",
                                   seq_len=cfg.seq_len, n_heads=cfg.n_heads)
        self.action_arch = ArchSpec("mlp", 2 * sd, ad, cfg.action_hidden, "relu")
        self.rr_arch = ArchSpec("mlp", sd + ad, 2, cfg.rr_hidden, "relu")
        self.phi = nn.ModuleDict({
            "enc": build_net(self.enc_arch, seed),
            "head": _seeded_linear(cfg.feat_dim, 2 * cfg.z_dim, seed + 1),
        })
        self.psi_state = build_net(self.state_arch, seed + 2)
        self.psi_action = build_net(self.action_arch, seed + 3)
        if cfg.with_returns:
            self.psi_reward_return = build_net(self.rr_arch, seed + 4)

    # -- encoder ---------------------------------------------------------
    def features(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.phi["enc"](tokens)

    def encode(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = max_pool_time(self.features(tokens), self.cfg.L)
        mean, logvar = self.phi["head"](pooled).chunk(2, dim=-1)
        return mean, logvar

    # -- decoder ---------------------------------------------------------
    def decoder_input(self, z: torch.Tensor, s1: torch.Tensor) -> torch.Tensor:
        """Tiled latents with the first state appended: (B, T, z_dim + state_dim)."""
        n = z.shape[1]
        if n * self.cfg.L != self.cfg.seq_len:
            raise ValueError(f"{n} latents x L={self.cfg.L} != sequence length {self.cfg.seq_len}")
        tiled = z.repeat_interleave(self.cfg.L, dim=1)
        return torch.cat([tiled, s1[:, None, :].expand(-1, tiled.shape[1], -1)], dim=-1)

    def decode_states(self, z, s1):
        out = self.psi_state(self.decoder_input(z, s1))
        return out + s1[:, None, :] if self.cfg.state_residual else out

    def decode_actions(self, states: torch.Tensor) -> torch.Tensor:
        """Inverse dynamics on (s_t, s_{t+1}); the last step pairs (s_T, s_T)."""
        nxt = torch.cat([states[:, 1:], states[:, -1:]], dim=1)
        return self.psi_action(torch.cat([states, nxt], dim=-1))

    def reward_return(self, states, actions):
        out = self.psi_reward_return(torch.cat([states, actions], dim=-1))
        return out[..., 0], out[..., 1]

    def decode(self, z: torch.Tensor, s1: torch.Tensor) -> dict[str, torch.Tensor]:
        states = self.decode_states(z, s1)
        actions = self.decode_actions(states)
        out = {"states": states, "actions": actions}
        if self.cfg.with_returns:
            out["rewards"], out["rtg"] = self.reward_return(states, actions)
        return out

    def reconstruct(self, tokens, s1, generator=None):
        mean, logvar = self.encode(tokens)
        z = mean if generator is None else mean + (0.5 * logvar).exp() * randn(mean.shape, generator, mean.dtype)
        return join_tokens(self.decode(z, s1))

    def section_params(self) -> dict[str, dict[str, torch.Tensor]]:
        out: dict[str, dict[str, torch.Tensor]] = {}
        for name, p in self.named_parameters():
            sec, rest = name.split(".", 1)
            out.setdefault(sec, {})[rest] = p.detach()
        return out

    def load_sections(self, sections: dict[str, dict[str, torch.Tensor]]) -> None:
        flat = {f"{sec}.{k}": v for sec, d in sections.items() for k, v in d.items()}
        self.load_state_dict({k: v.to(self.phi["head"].weight.dtype) for k, v in flat.items()})


def _seeded_linear(a: int, b: int, seed: int) -> nn.Linear:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.Linear(a, b)


def encode(vae: TrajectoryVAE, tokens: torch.Tensor, generator=None):
    """Return (mean, logvar, sample); ``sample = mean + exp(logvar / 2) * eps``."""
    mean, logvar = vae.encode(tokens)
    eps = randn(mean.shape, generator, mean.dtype) if generator is not None else torch.zeros_like(mean)
    return mean, logvar, mean + (0.5 * logvar).exp() * eps


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, 1)) summed over all but the batch axis."""
    kl = 0.5 * (mean.pow(2) + logvar.exp() - logvar - 1.0)
    return kl.reshape(kl.shape[0], -1).sum(-1)


def vae_loss(vae: TrajectoryVAE, tokens: torch.Tensor, s1: torch.Tensor, generator=None):
    """(total, recon_mse, kl) with ``total = recon_mse + kl_weight * kl``; kl averaged over the batch."""
    mean, logvar, z = encode(vae, tokens, generator)
    recon = join_tokens(vae.decode(z, s1))
    recon_mse = (recon - tokens).pow(2).mean()
    kl = gaussian_kl(mean, logvar).mean()
    total = recon_mse + vae.cfg.kl_weight * kl
    if not bool(torch.isfinite(total)):
        raise FloatingPointError(f"non-finite VAE loss: recon={recon_mse.item()} kl={kl.item()}")
    return total, recon_mse, kl


def channel_mse(vae: TrajectoryVAE, data: TokenizedTrajectories, batch: int = 256) -> dict[str, float]:
    """Per-channel reconstruction MSE using posterior means."""
    sums: dict[str, float] = {}
    n = len(data)
    with torch.no_grad():
        for i in range(0, n, batch):
            tok, s1 = data.tokens[i:i + batch], data.s1[i:i + batch]
            rec = split_tokens(vae.reconstruct(tok, s1), data.state_dim, data.action_dim, data.with_returns)
            ref = data.split_channels(tok)
            for k in rec:
                sums[k] = sums.get(k, 0.0) + float((rec[k] - ref[k]).pow(2).sum())
    ref = data.split_channels()
    return {k: v / ref[k].numel() for k, v in sums.items()}


def train_vae(data: TokenizedTrajectories, cfg: VaeConfig, settings: TrainSettings,
              seed: int) -> tuple[TrajectoryVAE, list[dict]]:
    if len(data) == 0:
        raise ValueError("empty dataset")
    vae = TrajectoryVAE(cfg, seed=seed).to(data.tokens.dtype)
    gen = torch_gen(seed, "vae", "batches")
    noise = torch_gen(seed, "vae", "reparam")
    n = len(data)
    bs = min(settings.batch_size, n)

    def loss_fn(step):
        idx = torch.randperm(n, generator=gen)[:bs] if bs < n else torch.arange(n)
        total, recon, kl = vae_loss(vae, data.tokens[idx], data.s1[idx], noise)
        return total, {"recon_mse": recon.item(), "kl": kl.item()}

    curve = train_loop(vae, loss_fn, settings, "train-vae")
    return vae, curve


class ReturnHead(nn.Module):
    """Stand-alone (state, action) -> (reward, return) regressor used by the skill space."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(128, 128, 128), seed: int = 0):
        super().__init__()
        self.arch = ArchSpec("mlp", state_dim + action_dim, 2, tuple(hidden), "relu")
        self.net = build_net(self.arch, seed)

    def forward(self, states, actions):
        out = self.net(torch.cat([states, actions], dim=-1))
        return out[..., 0], out[..., 1]


def train_return_head(dataset: Dataset, settings: TrainSettings, seed: int,
                      hidden=(128, 128, 128), norm: NormStats | None = None) -> tuple[ReturnHead, list[dict]]:
    norm = norm or dataset.norm
    s = np.concatenate([norm.normalize("states", t.states) for t in dataset.trajectories])
    a = np.concatenate([norm.normalize("actions", t.actions) for t in dataset.trajectories])
    r = np.concatenate([norm.normalize("rewards", t.rewards[:, None])[:, 0] for t in dataset.trajectories])
    g = np.concatenate([norm.normalize("rtg", t.rtg[:, None])[:, 0] for t in dataset.trajectories])
    dt = torch.get_default_dtype()
    S, A, R, G = (torch.as_tensor(x, dtype=dt) for x in (s, a, r, g))
    head = ReturnHead(S.shape[1], A.shape[1], hidden, seed).to(dt)
    gen = torch_gen(seed, "return_head", "batches")
    n = S.shape[0]
    bs = min(settings.batch_size, n)

    def loss_fn(step):
        idx = torch.randint(0, n, (bs,), generator=gen)
        rh, gh = head(S[idx], A[idx])
        loss = (rh - R[idx]).pow(2).mean() + (gh - G[idx]).pow(2).mean()
        return loss, {}

    return head, train_loop(head, loss_fn, settings, "train-return-head")
