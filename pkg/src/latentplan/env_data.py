"""Toy environments, scripted behavior policies and offline datasets.

Two deterministic environments are provided:

* ``pointmass2d``: a 2-D point mass, state ``(px, py, vx, vy)``, action is an
  acceleration in ``[-1, 1]^2``, explicit Euler integration and a dense
  reward of ``-reward_scale * ||p' - goal||``.
* ``chain_sparse``: a 1-D corridor of ``n_cells`` unit cells, state
  ``(x, t / T)``, action moves ``x`` by ``step * a``. Reward is 1 on the last
  transition of the episode if it ends inside the goal cell, 0 otherwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import np_rng, substream_seed

log = logging.getLogger(__name__)

CHANNELS = ("states", "actions", "rewards", "rtg")
QUALITY_TAGS = ("random", "medium", "expert", "mixed")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    horizon: int
    dt: float
    goal: tuple[float, ...]
    reward_mode: str
    gamma: float
    reward_scale: float = 1.0
    # pointmass2d
    start_low: tuple[float, ...] = ()
    start_high: tuple[float, ...] = ()
    goal_radius: float = 0.1
    # chain_sparse
    n_cells: int = 0
    step: float = 0.0
    start_cells: tuple[int, ...] = ()

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"unknown env {self.name!r}")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have action_dim entries")
        if not all(math.isfinite(v) for v in (*self.action_low, *self.action_high)):
            raise ValueError("action bounds must be finite")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    @property
    def goal_cell(self) -> int:
        return int(self.goal[0])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


ENV_NAMES = ("pointmass2d", "chain_sparse")

_DEFAULTS = {
    "pointmass2d": dict(
        name="pointmass2d", state_dim=4, action_dim=2,
        action_low=(-1.0, -1.0), action_high=(1.0, 1.0),
        horizon=64, dt=0.1, goal=(0.0, 0.0), reward_mode="dense", gamma=0.9,
        reward_scale=0.01, start_low=(-1.0, -1.0), start_high=(1.0, 1.0),
    ),
    "chain_sparse": dict(
        name="chain_sparse", state_dim=2, action_dim=1,
        action_low=(-1.0,), action_high=(1.0,),
        horizon=128, dt=1.0, goal=(15.0,), reward_mode="sparse", gamma=1.0,
        n_cells=16, step=0.5, start_cells=(0, 1, 2, 3),
    ),
}


def make_env(name: str, **overrides) -> EnvSpec:
    if name not in _DEFAULTS:
        raise ValueError(f"unknown env {name!r}; choose from {ENV_NAMES}")
    kw = dict(_DEFAULTS[name])
    kw.update({k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
    return EnvSpec(**kw)


def chain_toy() -> EnvSpec:
    """Three-cell corridor with a four-step horizon, small enough to enumerate."""
    return make_env("chain_sparse", n_cells=3, horizon=4, goal=(2.0,), step=0.5,
                    start_cells=(0, 1, 2))


# ---------------------------------------------------------------------------
# dynamics


def initial_state(env: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    if env.name == "pointmass2d":
        p = rng.uniform(np.asarray(env.start_low), np.asarray(env.start_high))
        return np.concatenate([p, np.zeros(2)])
    cell = env.start_cells[int(rng.integers(len(env.start_cells)))]
    offset = 0.5 * float(rng.integers(2))
    return np.array([min(float(cell) + offset, env.n_cells - env.step), 0.0])


def clamp_actions(env: EnvSpec, actions: np.ndarray) -> tuple[np.ndarray, int]:
    clamped = np.clip(actions, env.low, env.high)
    return clamped, int(np.count_nonzero(np.any(clamped != actions, axis=-1)))


def step(env: EnvSpec, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched transition. ``states`` is (B, state_dim), ``actions`` (B, action_dim), pre-clamped."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if env.name == "pointmass2d":
        p, v = states[:, :2], states[:, 2:]
        p2 = p + env.dt * v
        v2 = v + env.dt * actions
        nxt = np.concatenate([p2, v2], axis=1)
        dist = np.linalg.norm(p2 - np.asarray(env.goal), axis=1)
        return nxt, -env.reward_scale * dist
    x, tau = states[:, 0], states[:, 1]
    x_max = env.n_cells - env.step
    x2 = np.clip(x + env.step * actions[:, 0], 0.0, x_max)
    t_next = np.rint(tau * env.horizon) + 1.0
    tau2 = t_next / env.horizon
    at_goal = np.floor(x2 + 1e-9) == env.goal_cell
    rewards = np.where((t_next >= env.horizon) & at_goal, env.reward_scale, 0.0)
    return np.stack([x2, tau2], axis=1), rewards


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Behavior policy; stochastic policies draw only from the rng passed in."""

    name = "policy"

    def reset(self, env: EnvSpec, rng: np.random.Generator) -> None:
        pass

    def act(self, env: EnvSpec, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class ZeroPolicy(Policy):
    name = "zero"

    def act(self, env, state, rng):
        return np.zeros(env.action_dim)


class UniformRandomPolicy(Policy):
    name = "random"

    def act(self, env, state, rng):
        return rng.uniform(env.low, env.high)


class PointmassPD(Policy):
    """Saturated PD controller towards the goal: ``a = clip(kp (g - p) - kd v)``."""

    name = "expert"

    def __init__(self, kp: float = 8.0, kd: float = 5.0):
        self.kp, self.kd = kp, kd
        self.offset = np.zeros(2)

    def act(self, env, state, rng):
        p, v = state[:2], state[2:]
        target = np.asarray(env.goal) + self.offset
        return np.clip(self.kp * (target - p) - self.kd * v, env.low, env.high)


class PointmassMedium(PointmassPD):
    """PD controller with a per-episode target offset and a per-episode softer gain.

    The offset is uniform in a disk of radius ``offset_radius`` around the goal;
    the gain multiplier is log-uniform in ``[min_gain, 1]``.
    """

    name = "medium"

    def __init__(self, offset_radius: float = 1.0, min_gain: float = 0.1):
        super().__init__()
        self.offset_radius = offset_radius
        self.min_gain = min_gain

    def reset(self, env, rng):
        r = self.offset_radius * math.sqrt(rng.uniform())
        th = rng.uniform(0.0, 2.0 * math.pi)
        self.offset = np.array([r * math.cos(th), r * math.sin(th)])
        g = math.exp(rng.uniform(math.log(self.min_gain), 0.0))
        self.kp = 8.0 * g
        self.kd = 5.0 * math.sqrt(g)


class ChainExpert(Policy):
    name = "expert"

    def act(self, env, state, rng):
        target = env.goal_cell + 0.5
        return np.clip(np.array([(target - state[0]) / env.step]), env.low, env.high)


class ChainMedium(ChainExpert):
    """Expert that idles with an episode-level probability."""

    name = "medium"

    def reset(self, env, rng):
        self.p_idle = rng.uniform(0.3, 0.9)

    def act(self, env, state, rng):
        if rng.random() < self.p_idle:
            return np.zeros(1)
        return super().act(env, state, rng)


class DiscreteRandomPolicy(Policy):
    """Uniform over {-1, 0, 1} per dimension."""

    name = "discrete_random"

    def act(self, env, state, rng):
        return rng.integers(-1, 2, size=env.action_dim).astype(np.float64)


def make_policy(env: EnvSpec, name: str) -> Policy:
    if name == "random":
        return UniformRandomPolicy()
    if name == "zero":
        return ZeroPolicy()
    if name == "discrete_random":
        return DiscreteRandomPolicy()
    table = {
        "pointmass2d": {"expert": PointmassPD, "medium": PointmassMedium},
        "chain_sparse": {"expert": ChainExpert, "medium": ChainMedium},
    }
    try:
        return table[env.name][name]()
    except KeyError:
        raise ValueError(f"no policy {name!r} for env {env.name}") from None


# ---------------------------------------------------------------------------
# trajectories


def reward_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Discounted suffix sums ``G_t = sum_{i >= t} gamma^(i - t) r_i``."""
    r = np.asarray(rewards, dtype=np.float64)
    g = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        g[t] = acc
    return g


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtg: np.ndarray
    episode_return: float
    seed: int
    policy: str = ""
    clamp_count: int = 0

    @property
    def T(self) -> int:
        return len(self.rewards)

    def to_json(self) -> str:
        return (
            "{"
            f'"seed":{int(self.seed)},"policy":{json.dumps(self.policy)},'
            f'"clamp_count":{int(self.clamp_count)},'
            f'"episode_return":{_fmt(self.episode_return)},'
            f'"states":{_fmt(self.states)},"actions":{_fmt(self.actions)},'
            f'"rewards":{_fmt(self.rewards)},"rtg":{_fmt(self.rtg)}'
            "}"
        )

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        d = json.loads(line)
        return cls(
            states=np.asarray(d["states"], dtype=np.float64),
            actions=np.asarray(d["actions"], dtype=np.float64),
            rewards=np.asarray(d["rewards"], dtype=np.float64),
            rtg=np.asarray(d["rtg"], dtype=np.float64),
            episode_return=float(d["episode_return"]),
            seed=int(d["seed"]),
            policy=d.get("policy", ""),
            clamp_count=int(d.get("clamp_count", 0)),
        )


def _fmt(x) -> str:
    """Render floats (or nested arrays of them) with 17 significant digits."""
    if isinstance(x, np.ndarray):
        if x.ndim == 0:
            return _fmt(float(x))
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    v = float(x)
    if not math.isfinite(v):
        raise DatasetError(f"non-finite value {v} cannot be serialized")
    return format(v, ".17g")


def rollout(env: EnvSpec, policy: Policy | str, seed: int,
            start: np.ndarray | None = None) -> Trajectory:
    if isinstance(policy, str):
        policy = make_policy(env, policy)
    rng = np_rng(seed, "rollout", "act")
    s = np.asarray(start, dtype=np.float64) if start is not None else initial_state(
        env, np_rng(seed, "rollout", "start"))
    policy.reset(env, np_rng(seed, "rollout", "policy"))
    T = env.horizon
    states = np.zeros((T, env.state_dim))
    actions = np.zeros((T, env.action_dim))
    rewards = np.zeros(T)
    clamps = 0
    for t in range(T):
        a, n = clamp_actions(env, np.asarray(policy.act(env, s, rng), dtype=np.float64)[None])
        clamps += n
        nxt, r = step(env, s[None], a)
        states[t], actions[t], rewards[t] = s, a[0], r[0]
        s = nxt[0]
    if clamps:
        log.warning("policy %s produced %d out-of-bounds actions (clamped)", policy.name, clamps)
    return Trajectory(states, actions, rewards, reward_to_go(rewards, env.gamma),
                      float(rewards.sum()), int(seed), policy.name, clamps)


# ---------------------------------------------------------------------------
# normalization and datasets


@dataclass
class NormStats:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    floor: float = 1e-6

    @classmethod
    def fit(cls, trajectories: Sequence[Trajectory], floor: float = 1e-6) -> "NormStats":
        mean, std = {}, {}
        for ch in CHANNELS:
            x = np.concatenate([np.asarray(getattr(tr, ch)).reshape(tr.T, -1) for tr in trajectories])
            mean[ch] = x.mean(axis=0)
            std[ch] = np.maximum(x.std(axis=0), floor)
        return cls(mean, std, floor)

    def normalize(self, channel: str, x):
        return (x - self.mean[channel]) / self.std[channel]

    def denormalize(self, channel: str, x):
        return x * self.std[channel] + self.mean[channel]

    def to_dict(self) -> dict:
        return {"floor": self.floor,
                "mean": {k: [float(v) for v in a] for k, a in self.mean.items()},
                "std": {k: [float(v) for v in a] for k, a in self.std.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls({k: np.asarray(v, dtype=np.float64) for k, v in d["mean"].items()},
                   {k: np.asarray(v, dtype=np.float64) for k, v in d["std"].items()},
                   float(d["floor"]))


@dataclass
class Dataset:
    env: EnvSpec
    trajectories: list[Trajectory]
    norm: NormStats
    quality_tag: str = "mixed"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    def split(self, val_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Episode-level train/validation split; both halves keep this dataset's NormStats."""
        n = len(self.trajectories)
        n_val = int(round(n * val_fraction))
        if n_val == 0 or n_val == n:
            return self, self
        perm = np_rng(seed, "split").permutation(n)
        val = set(perm[:n_val].tolist())
        tr = [t for i, t in enumerate(self.trajectories) if i not in val]
        va = [t for i, t in enumerate(self.trajectories) if i in val]
        return (Dataset(self.env, tr, self.norm, self.quality_tag),
                Dataset(self.env, va, self.norm, self.quality_tag))


def quality_tag_for(names: Sequence[str]) -> str:
    names = set(names)
    if len(names) == 1 and next(iter(names)) in ("random", "medium", "expert"):
        return next(iter(names))
    return "mixed"


def build_dataset(env: EnvSpec, mix: Sequence[tuple[str | Policy, float]], n_episodes: int,
                  seed: int, floor: float = 1e-6) -> Dataset:
    if n_episodes < 1:
        raise DatasetError("empty dataset")
    weights = np.asarray([w for _, w in mix], dtype=np.float64)
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise DatasetError("mixture weights must be positive and sum to 1")
    policies = [make_policy(env, p) if isinstance(p, str) else p for p, _ in mix]
    choice = np_rng(seed, "mix").choice(len(policies), size=n_episodes, p=weights)
    trajs = [rollout(env, policies[c], substream_seed(seed, "episode", i))
             for i, c in enumerate(choice)]
    return Dataset(env, trajs, NormStats.fit(trajs, floor),
                   quality_tag_for([p.name for p in policies]))


def enumerate_dataset(env: EnvSpec, starts: Sequence[np.ndarray],
                      action_values: Sequence[float] = (-1.0, 0.0, 1.0)) -> Dataset:
    """Every discrete open-loop action sequence from every start (1-D actions only)."""
    import itertools

    trajs = []
    for si, s0 in enumerate(starts):
        for seq in itertools.product(action_values, repeat=env.horizon):
            s = np.asarray(s0, dtype=np.float64)[None]
            states, rewards = [], []
            for a in seq:
                nxt, r = step(env, s, np.array([[a]]))
                states.append(s[0])
                rewards.append(r[0])
                s = nxt
            rewards = np.asarray(rewards)
            trajs.append(Trajectory(np.asarray(states), np.asarray(seq, dtype=np.float64)[:, None],
                                    rewards, reward_to_go(rewards, env.gamma),
                                    float(rewards.sum()), si, "discrete_random"))
    return Dataset(env, trajs, NormStats.fit(trajs), "random")


def normalized_score(raw_return: float, random_ref: float, expert_ref: float) -> float:
    if expert_ref == random_ref:
        raise DatasetError("degenerate reference")
    return 100.0 * (raw_return - random_ref) / (expert_ref - random_ref)


# Mean undiscounted returns of the scripted expert and the uniform-random policy
# over 500 seeded episodes (seeds substream_seed(0, "reference", policy, i)).
# Recomputed and checked by the test suite.
REFERENCE_RETURNS = {
    "pointmass2d": {"random": -0.7770423158624319, "expert": -0.0666360658713694},
    "chain_sparse": {"random": 0.0, "expert": 1.0},
}


@lru_cache(maxsize=None)
def measure_reference_returns(env: EnvSpec, n_episodes: int = 500) -> dict[str, float]:
    out = {}
    for name in ("random", "expert"):
        pol = make_policy(env, name)
        rets = [rollout(env, pol, substream_seed(0, "reference", name, i)).episode_return
                for i in range(n_episodes)]
        out[name] = float(np.mean(rets))
    return out


def reference_returns(env: EnvSpec) -> dict[str, float]:
    if env == make_env(env.name):
        return REFERENCE_RETURNS[env.name]
    return measure_reference_returns(env)


def env_normalized_score(env: EnvSpec, raw_return: float) -> float:
    ref = reference_returns(env)
    return normalized_score(raw_return, ref["random"], ref["expert"])


# ---------------------------------------------------------------------------
# persistence


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def meta_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_dataset(ds: Dataset, path: str | Path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(tr.to_json() + "\n" for tr in ds.trajectories).encode("utf-8")
    path.write_bytes(body)
    digest = git_blob_hash(body)
    meta = {"env": ds.env.to_dict(), "norm": ds.norm.to_dict(), "quality_tag": ds.quality_tag,
            "n_episodes": len(ds), "content_hash": digest, **ds.meta}
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return digest


def load_dataset(path: str | Path, verify: bool = True) -> Dataset:
    path = Path(path)
    body = path.read_bytes()
    meta = json.loads(meta_path(path).read_text())
    if verify and git_blob_hash(body) != meta["content_hash"]:
        raise DatasetError(f"{path}: content hash does not match its metadata")
    trajs = [Trajectory.from_json(line) for line in body.decode("utf-8").splitlines() if line]
    extra = {k: v for k, v in meta.items()
             if k not in ("env", "norm", "quality_tag", "n_episodes", "content_hash")}
    return Dataset(EnvSpec.from_dict(meta["env"]), trajs, NormStats.from_dict(meta["norm"]),
                   meta["quality_tag"], extra)
