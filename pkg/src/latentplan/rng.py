"""Named random substreams derived from a single top-level seed.

Every consumer of randomness asks for a stream by (seed, *names); the
derived integer is a hash of the path, so adding a new consumer never
shifts the numbers another consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def substream_seed(seed: int, *names: object) -> int:
    path = "/".join([str(int(seed)), *[str(n) for n in names]])
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def np_rng(seed: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, *names))


def torch_gen(seed: int, *names: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, *names))
    return g


def randn(shape, generator, dtype=None) -> torch.Tensor:
    """Standard normal draw from one generator or a per-row list of generators.

    With a list, row ``i`` of the result is drawn from ``generator[i]`` alone,
    so batching several independent chains never changes any chain's noise.
    """
    dtype = dtype or torch.get_default_dtype()
    if isinstance(generator, (list, tuple)):
        rows = [torch.randn(tuple(shape[1:]), generator=g, dtype=dtype) for g in generator]
        return torch.stack(rows, 0)
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


def randint(high: int, n: int, generator, low: int = 0) -> torch.Tensor:
    if isinstance(generator, (list, tuple)):
        return torch.cat([torch.randint(low, high, (1,), generator=g) for g in generator])
    return torch.randint(low, high, (n,), generator=generator)


def rand(n: int, generator, dtype=None) -> torch.Tensor:
    dtype = dtype or torch.get_default_dtype()
    if isinstance(generator, (list, tuple)):
        return torch.cat([torch.rand((1,), generator=g, dtype=dtype) for g in generator])
    return torch.rand((n,), generator=generator, dtype=dtype)
