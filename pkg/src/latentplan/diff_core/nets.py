"""Network families: MLP, non-causal attention encoder, temporal U-Net."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

FAMILIES = ("mlp", "attention_encoder", "temporal_unet")
ACTIVATIONS = {"relu": nn.ReLU, "mish": nn.Mish, "silu": nn.SiLU}


@dataclass(frozen=True)
class ArchSpec:
    """Shape-level description of one network.

    ``widths`` means hidden sizes for ``mlp``, one model width per attention
    block for ``attention_encoder`` and per-level channel counts for
    ``temporal_unet``.
    """

    family: str
    in_dim: int
    out_dim: int
    widths: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    seq_len: int = 0
    n_heads: int = 2
    emb_dim: int = 32
    cond_dim: int = 0
    kernel: int = 5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.family == "attention_encoder":
            if self.seq_len < 1:
                raise ValueError("attention_encoder needs seq_len >= 1")
            if len(set(self.widths)) != 1 or self.widths[0] % self.n_heads:
                raise ValueError("attention widths must be equal and divisible by n_heads")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def mlp(in_dim: int, hidden, out_dim: int, activation: str = "relu") -> nn.Sequential:
    layers: list[nn.Module] = []
    dims = (in_dim, *hidden)
    for a, b in zip(dims[:-1], dims[1:]):
        layers += [nn.Linear(a, b), ACTIVATIONS[activation]()]
    layers.append(nn.Linear(dims[-1], out_dim))
    return nn.Sequential(*layers)


class MLP(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.net = mlp(arch.in_dim, arch.widths, arch.out_dim, arch.activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.arch.in_dim:
            raise ValueError(f"input last dimension is {x.shape[-1]}, expected {self.arch.in_dim}")
        return self.net(x)


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
        self.register_buffer("freqs", freqs.to(torch.get_default_dtype()), persistent=False)

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        ang = k.to(self.freqs.dtype)[:, None] * self.freqs[None]
        emb = torch.cat([ang.sin(), ang.cos()], dim=-1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return emb


class SelfAttention(nn.Module):
    """Multi-head self-attention without a causal mask."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(B, T, 3, h, D // h).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)


class AttentionBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, activation: str):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, 2 * d_model), ACTIVATIONS[activation](),
                                nn.Linear(2 * d_model, d_model))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class AttentionEncoder(nn.Module):
    """Linear token projection, learned positions, pre-norm attention blocks, linear head."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        d = arch.widths[0]
        self.inp = nn.Linear(arch.in_dim, d)
        self.pos = nn.Parameter(torch.randn(arch.seq_len, d) * 0.1)
        self.blocks = nn.ModuleList(AttentionBlock(d, arch.n_heads, arch.activation)
                                    for _ in arch.widths)
        self.ln_f = nn.LayerNorm(d)
        self.out = nn.Linear(d, arch.out_dim)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Token projection plus positional embedding (the first-layer activations)."""
        if x.ndim != 3 or x.shape[1] != self.arch.seq_len or x.shape[2] != self.arch.in_dim:
            raise ValueError(
                f"expected input (B, {self.arch.seq_len}, {self.arch.in_dim}), got {tuple(x.shape)}")
        return self.inp(x) + self.pos[None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.embed(x)
        for blk in self.blocks:
            h = blk(h)
        return self.out(self.ln_f(h))


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ResBlock(nn.Module):
    """Two temporal convolutions with GroupNorm + Mish; the embedding is added after the first."""

    def __init__(self, cin: int, cout: int, emb_dim: int, kernel: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv1d(cin, cout, kernel, padding=kernel // 2)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv1d(cout, cout, kernel, padding=kernel // 2)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.act = ACTIVATIONS[activation]()
        self.emb = nn.Linear(emb_dim, cout)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, e):
        h = self.act(self.norm1(self.conv1(x))) + self.emb(e)[:, :, None]
        h = self.act(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class TemporalUNet(nn.Module):
    """Sequence-to-sequence residual U-Net over (B, length, channels) inputs.

    The sequence is convolved along its length with channels = ``in_dim``.
    Skip connections join matching levels; there is no temporal resampling, so
    any sequence length (including 1) is accepted.
    """

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        e = arch.emb_dim
        act = arch.activation
        self.time_mlp = nn.Sequential(SinusoidalEmbedding(e), nn.Linear(e, 2 * e),
                                      ACTIVATIONS[act](), nn.Linear(2 * e, e))
        self.cond_mlp = (nn.Sequential(nn.Linear(arch.cond_dim, 2 * e), ACTIVATIONS[act](),
                                       nn.Linear(2 * e, e)) if arch.cond_dim else None)
        emb_total = 2 * e if arch.cond_dim else e
        widths = arch.widths
        chans = (arch.in_dim, *widths)
        self.downs = nn.ModuleList(ResBlock(a, b, emb_total, arch.kernel, act)
                                   for a, b in zip(chans[:-1], chans[1:]))
        self.ups = nn.ModuleList(ResBlock(widths[i + 1] + widths[i], widths[i], emb_total,
                                          arch.kernel, act)
                                 for i in reversed(range(len(widths) - 1)))
        self.final = nn.Conv1d(widths[0], arch.out_dim, 1)

    def embedding(self, k: torch.Tensor, cond: Optional[torch.Tensor],
                  cond_mask: Optional[torch.Tensor]) -> torch.Tensor:
        e = self.time_mlp(k)
        if self.cond_mlp is None:
            return e
        if cond is None:
            c = torch.zeros_like(e)
        else:
            c = self.cond_mlp(cond)
            if cond_mask is not None:
                c = c * cond_mask.to(c.dtype)[:, None]
        return torch.cat([e, c], dim=-1)

    def forward(self, x: torch.Tensor, k: torch.Tensor, cond: Optional[torch.Tensor] = None,
                cond_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x.ndim != 3 or x.shape[2] != self.arch.in_dim:
            raise ValueError(f"expected input (B, length, {self.arch.in_dim}), got {tuple(x.shape)}")
        if cond is not None and cond.shape[-1] != self.arch.cond_dim:
            raise ValueError(f"condition dimension is {cond.shape[-1]}, expected {self.arch.cond_dim}")
        e = self.embedding(k, cond, cond_mask)
        h = x.transpose(1, 2)
        skips = []
        for blk in self.downs:
            h = blk(h, e)
            skips.append(h)
        skips.pop()
        for blk in self.ups:
            h = blk(torch.cat([h, skips.pop()], dim=1), e)
        return self.final(h).transpose(1, 2)


_BUILDERS = {"mlp": MLP, "attention_encoder": AttentionEncoder, "temporal_unet": TemporalUNet}


def build_net(arch: ArchSpec, seed: int = 0) -> nn.Module:
    """Instantiate ``arch`` with parameters drawn from ``seed`` (global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _BUILDERS[arch.family](arch)
    net.init_seed = seed
    return net
