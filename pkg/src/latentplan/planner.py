"""Energy-guided planning and receding-horizon control."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .codecs import SPACES, Codec
from .energy_guidance import baseline_hook
from .env_data import EnvSpec, clamp_actions, env_normalized_score, initial_state, step
from .latent_prior import EpsModel, NoiseSchedule, sample_prior
from .rng import np_rng, torch_gen

CSV_COLUMNS = ("env", "dataset", "mode", "beta", "w", "H", "L", "K", "seed", "episode", "raw_return",
               "normalized", "wallclock_per_plan")


class IncompatibleModels(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    space: str = "latent"
    H: int = 40
    L: int = 4
    replan_interval: int = 1
    beta: float = 3.0
    w: float = 1.4
    alpha_temp: float = 0.5
    K: int = 100
    seed: int = 0
    variance: str = "posterior"
    clip_x0: Optional[float] = None

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown planning space {self.space!r}")
        if self.space != "raw" and self.H % self.L:
            raise ValueError(f"H={self.H} is not divisible by L={self.L}")
        if not 1 <= self.replan_interval <= self.H:
            raise ValueError("replan_interval must be in [1, H]")
        if not 0.0 <= self.alpha_temp <= 1.0:
            raise ValueError("alpha_temp must be in [0, 1]")
        if self.beta < 0 or self.w < 0:
            raise ValueError("beta and w must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlanModels:
    """Everything a plan needs. Hashes link each model to the one it was trained on."""

    codec: Codec
    prior: EpsModel
    sched: NoiseSchedule
    energy: Optional[nn.Module] = None
    energy_loss: str = "contrastive"
    energy_beta: float = 3.0
    codec_hash: str = ""
    prior_hash: str = ""
    prior_parent: str = ""
    energy_parent: str = ""

    def check(self, cfg: PlannerConfig) -> None:
        if self.prior_parent and self.prior_parent != self.codec_hash:
            raise IncompatibleModels("prior was trained on a different encoder checkpoint")
        if self.energy is not None and self.energy_parent and self.energy_parent != self.prior_hash:
            raise IncompatibleModels("energy model was trained on support sets from a different prior")
        if cfg.space != self.codec.space:
            raise IncompatibleModels(f"config space {cfg.space!r} but models are for {self.codec.space!r}")
        if self.codec.seq_len != cfg.H:
            raise IncompatibleModels(f"models plan {self.codec.seq_len} steps, config H={cfg.H}")
        if self.sched.K != cfg.K:
            raise IncompatibleModels(f"prior schedule has K={self.sched.K}, config K={cfg.K}")
        if cfg.beta > 0 and self.energy is not None and self.energy_loss == "contrastive" \
                and not math.isclose(cfg.beta, self.energy_beta):
            raise IncompatibleModels(f"energy model was trained for beta={self.energy_beta}, config beta={cfg.beta}")

    def hook(self, cfg: PlannerConfig):
        if cfg.beta == 0 or self.energy is None:
            return None
        return baseline_hook(self.energy, self.energy_loss, cfg.beta, use_cond=self.energy.cfg.cond_dim > 0)


def plan(models: PlanModels, s1: torch.Tensor, cfg: PlannerConfig, generators,
         hook="auto") -> dict[str, torch.Tensor]:
    """Sample a guided plan for each normalized first state in ``s1`` (B, state_dim) and decode it.

    ``hook="auto"`` uses the energy model unless beta is 0; pass ``None`` or a
    callable to override.
    """
    codec = models.codec
    guidance = models.hook(cfg) if hook == "auto" else hook
    B = s1.shape[0]
    z = sample_prior(models.prior, s1, models.sched, cfg.w, cfg.alpha_temp, generators,
                     (B, codec.n_tokens, codec.token_dim), guidance=guidance, variance=cfg.variance,
                     clip_x0=cfg.clip_x0)
    with torch.no_grad():
        out = codec.decode(z, s1)
    return {"z": z, **out}


@dataclass
class EpisodeResult:
    raw_return: float
    normalized: float
    log: list[dict]
    wallclock_per_plan: float
    n_plans: int = 0
    clamp_count: int = 0
    status: str = "ok"
    error: str = ""
    seed: int = 0
    episode: int = 0


def run_episodes(env: EnvSpec, models: PlanModels, cfg: PlannerConfig, episodes: Sequence,
                 trace: Optional[list] = None) -> list[EpisodeResult]:
    """Run several receding-horizon episodes in lockstep.

    ``episodes`` holds episode indices (using ``cfg.seed``) or ``(seed, episode)``
    pairs. Each episode takes its start state and all sampling noise from
    substreams of its own ``(seed, episode)``, so results do not depend on
    which episodes share a batch.
    """
    models.check(cfg)
    norm = models.codec.norm
    keys = [(int(e[0]), int(e[1])) if isinstance(e, tuple) else (cfg.seed, int(e)) for e in episodes]
    n = len(keys)
    if n == 0:
        return []
    states = np.stack([initial_state(env, np_rng(s, "eval-start", e)) for s, e in keys])
    gens = [torch_gen(s, "plan", e) for s, e in keys]
    logs: list[list[dict]] = [[] for _ in range(n)]
    returns = np.zeros(n)
    clamps = np.zeros(n, dtype=int)
    plan_time, n_plans = 0.0, 0
    actions_plan = None
    offset = 0
    status, err = "ok", ""
    dt = torch.get_default_dtype()
    for t in range(env.horizon):
        replan = t % cfg.replan_interval == 0
        if replan:
            s1 = torch.as_tensor(norm.normalize("states", states), dtype=dt)
            t0 = time.perf_counter()
            try:
                out = plan(models, s1, cfg, gens)
            except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
                status, err = "error", f"plan failed at t={t}: {exc}"
                break
            plan_time += time.perf_counter() - t0
            n_plans += n
            actions_plan = norm.denormalize("actions", out["actions"].double().numpy())
            offset = t
            if trace is not None:
                trace.append({"t": t, "states": out["states"].tolist(), "actions": actions_plan.tolist()})
        a, nc = _clamp_rows(env, actions_plan[:, t - offset])
        clamps += nc
        nxt, r = step(env, states, a)
        for i in range(n):
            logs[i].append({"t": t, "state": states[i].tolist(), "action": a[i].tolist(),
                            "reward": float(r[i]), "replanned": replan})
        returns += r
        states = nxt
    per_plan = plan_time / n_plans if n_plans else 0.0
    return [EpisodeResult(float(returns[i]), env_normalized_score(env, float(returns[i])), logs[i], per_plan,
                          n_plans // n, int(clamps[i]), status, err, s, e)
            for i, (s, e) in enumerate(keys)]


def _clamp_rows(env, actions):
    out = np.empty_like(actions)
    counts = np.zeros(actions.shape[0], dtype=int)
    for i in range(actions.shape[0]):
        out[i:i + 1], counts[i] = clamp_actions(env, actions[i:i + 1])
    return out, counts


def plan_episode(env: EnvSpec, models: PlanModels, cfg: PlannerConfig, episode: int = 0) -> EpisodeResult:
    return run_episodes(env, models, cfg, [episode])[0]


@dataclass
class EvalTable:
    rows: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)

    def seed_means(self) -> dict[int, float]:
        by: dict[int, list[float]] = {}
        for r in self.rows:
            by.setdefault(r["seed"], []).append(r["normalized"])
        return {s: float(np.mean(v)) for s, v in sorted(by.items())}

    def summary(self) -> dict:
        means = list(self.seed_means().values())
        m = float(np.mean(means))
        se = float(np.std(means, ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0
        wc = [t["wallclock_per_plan"] for t in self.timing]
        return {"mean_normalized": m, "stderr_normalized": se, "n_seeds": len(means),
                "n_episodes": len(self.rows), "wallclock_per_plan": float(np.mean(wc)) if wc else 0.0}


def evaluate(env: EnvSpec, models: PlanModels, cfg: PlannerConfig, n_episodes: int, seeds: Sequence[int],
             dataset_tag: str = "", batch_episodes: int = 100) -> EvalTable:
    """Mean and standard error (over seeds) of normalized scores; one row per episode.

    Episodes of all seeds are batched together, ``batch_episodes`` at a time.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    keys = [(int(s), e) for s in seeds for e in range(n_episodes)]
    results: list[EpisodeResult] = []
    for lo in range(0, len(keys), batch_episodes):
        results += run_episodes(env, models, cfg, keys[lo:lo + batch_episodes])
    table = EvalTable()
    for r in results:
        if r.status != "ok":
            raise FloatingPointError(f"episode {r.episode} (seed {r.seed}) failed: {r.error}")
        table.rows.append({"env": env.name, "dataset": dataset_tag, "mode": cfg.space, "beta": cfg.beta,
                           "w": cfg.w, "H": cfg.H, "L": cfg.L if cfg.space != "raw" else 1, "K": cfg.K,
                           "seed": r.seed, "episode": r.episode, "raw_return": r.raw_return,
                           "normalized": r.normalized, "wallclock_per_plan": ""})
        table.timing.append({"seed": r.seed, "episode": r.episode, "wallclock_per_plan": r.wallclock_per_plan})
    return table


def _cell(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_eval_csv(table: EvalTable, path, timing_path=None) -> None:
    """Deterministic CSV; wallclock values go to a separate timing file."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in table.rows:
            wr.writerow([_cell(r[c]) for c in CSV_COLUMNS])
    if timing_path is not None:
        with open(timing_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["seed", "episode", "wallclock_per_plan"])
            for t in table.timing:
                wr.writerow([t["seed"], t["episode"], repr(t["wallclock_per_plan"])])


def time_plans(models: PlanModels, cfg: PlannerConfig, states: np.ndarray) -> float:
    """Mean wallclock of single-state plans over the given raw states."""
    norm = models.codec.norm
    dt = torch.get_default_dtype()
    total = 0.0
    for i, s in enumerate(states):
        s1 = torch.as_tensor(norm.normalize("states", np.asarray(s)[None]), dtype=dt)
        gen = [torch_gen(cfg.seed, "timing", i)]
        t0 = time.perf_counter()
        plan(models, s1, cfg, gen)
        total += time.perf_counter() - t0
    return total / len(states)
