"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion summary is
printed at the end of the session. The behavioural criteria train real models
and take a while on one CPU thread.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from latentplan.config import load_config
from latentplan.diff_core import TrainSettings, fd_check
from latentplan.energy_guidance import (EnergyConfig, EnergyNet, SupportStore, baseline_hook, contrastive_loss,
                                        guided_score, prior_score, train_energy)
from latentplan.env_data import build_dataset, initial_state, make_env
from latentplan.latent_prior import (GaussianPrior, PriorConfig, PriorNet, make_schedule, sample_prior,
                                     score_matching_loss)
from latentplan.pipeline import STAGES, Pipeline, make_env_from, planner_config, run_command
from latentplan.planner import evaluate, plan
from latentplan.rng import np_rng, torch_gen
from latentplan.trajectory_vae import TrajectoryVAE, VaeConfig, channel_mse, tokenize, train_vae, vae_loss

REPORT: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    REPORT[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(REPORT[n])
    assert ok, REPORT[n]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


# 1 -------------------------------------------------------------------------

def test_c01_schedule_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for kind in ("linear", "cosine"):
        for K in (10, 100):
            s = make_schedule(K, kind)
            worst = max(worst, float(np.abs(s.alphas ** 2 + s.sigmas ** 2 - 1).max()))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-12 and dt < 1.0, f"max |a^2+s^2-1| = {worst:.2e}, {dt:.3f}s")


# 2 -------------------------------------------------------------------------

def _vae_case():
    env = make_env("pointmass2d", horizon=16)
    data = tokenize(build_dataset(env, [("medium", 1.0)], 4, seed=0), 16, 4, stride=8)
    cfg = VaeConfig(4, 2, 16, 4, z_dim=4, d_model=16, feat_dim=16, action_hidden=(32,), rr_hidden=(32,),
                    kl_weight=1e-2)
    vae = TrajectoryVAE(cfg).double()
    tok, s1 = data.tokens[:3].double(), data.s1[:3].double()
    names = [n for n, _ in vae.named_parameters()]

    class Loss(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.vae = vae

        def forward(self):
            return vae_loss(self.vae, tok, s1, torch_gen(0, "fd"))[0].reshape(1)

    wrapper = Loss()
    return lambda ts: torch.func.functional_call(wrapper, {f"vae.{n}": ts[n] for n in names}, ()), \
        dict(vae.named_parameters())


def _prior_case():
    cfg = PriorConfig(4, 4, 4, widths=(16, 32), emb_dim=16, K=20)
    prior = PriorNet(cfg, 0).double()
    sched = make_schedule(20)
    g = torch.Generator().manual_seed(1)
    z0, s1 = torch.randn(6, 4, 4, generator=g, dtype=torch.float64), torch.randn(6, 4, generator=g,
                                                                              dtype=torch.float64)
    names = [n for n, _ in prior.named_parameters()]

    class Loss(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.prior = prior

        def forward(self):
            return score_matching_loss(self.prior, z0, s1, sched, torch_gen(0, "fd"), drop_prob=0.25).reshape(1)

    wrapper = Loss()
    return lambda ts: torch.func.functional_call(wrapper, {f"prior.{n}": ts[n] for n in names}, ()), \
        dict(prior.named_parameters())


def _contrastive_case():
    net = EnergyNet(EnergyConfig(4, 4, 4, hidden=(32, 32))).double()
    sched = make_schedule(20)
    g = torch.Generator().manual_seed(2)
    s1 = torch.randn(3, 4, generator=g, dtype=torch.float64)
    members = torch.randn(3, 8, 4, 4, generator=g, dtype=torch.float64)
    energies = torch.randn(3, 8, generator=g, dtype=torch.float64)
    names = [n for n, _ in net.named_parameters()]

    def fn(ts):
        def f(z, c, k):
            return torch.func.functional_call(net, {n: ts[n] for n in names}, (z, c, k))

        return contrastive_loss(f, s1, members, energies, sched, 3.0, torch_gen(0, "fd")).reshape(1)

    return fn, dict(net.named_parameters())


def _guided_gradient_error() -> float:
    """Energy part of the guided score against central differences of f in z."""
    torch.manual_seed(0)
    net = EnergyNet(EnergyConfig(4, 4, 4, hidden=(32, 32))).double()
    sched = make_schedule(20)
    prior = PriorNet(PriorConfig(4, 4, 4, widths=(16, 32), emb_dim=16, K=20), 0).double()
    g = torch.Generator().manual_seed(3)
    z = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    s1 = torch.randn(2, 4, generator=g, dtype=torch.float64)
    k = 7
    grad = guided_score(prior, net, z, s1, k, sched, 1.4) - prior_score(prior, z, s1, k, sched, 1.4)
    h = 1e-6
    fd = torch.zeros_like(z)
    with torch.no_grad():
        for idx in np.ndindex(*z.shape):
            zp, zm = z.clone(), z.clone()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (net(zp, s1, k) - net(zm, s1, k))[idx[0]] / (2 * h)
    return float((grad - fd).abs().max() / grad.abs().max())


def test_c02_gradient_suite():
    torch.set_default_dtype(torch.float64)
    t0 = time.perf_counter()
    errs = {}
    for name, case in (("vae_loss", _vae_case), ("score_matching_loss", _prior_case),
                       ("contrastive_loss", _contrastive_case)):
        fn, params = case()
        errs[name] = max(fd_check(fn, params, max_coords=8).values())
    errs["guided_score energy gradient"] = _guided_gradient_error()
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and dt < 120
    record(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {dt:.1f}s")


# 3 -------------------------------------------------------------------------

class _Const(torch.nn.Module):
    def forward(self, z, s1, k):
        return torch.full((z.shape[0],), 0.37, dtype=z.dtype)


@torch.no_grad()
def test_c03_contrastive_analytics():
    sched = make_schedule(10)
    g = torch.Generator().manual_seed(0)
    net = EnergyNet(EnergyConfig(2, 3, 2, hidden=(16, 16)))
    s1 = torch.randn(5, 2, generator=g)
    one = float(contrastive_loss(net, s1, torch.randn(5, 1, 2, 3, generator=g),
                                 torch.randn(5, 1, generator=g, dtype=torch.float64), sched, 3.0, torch_gen(0)))
    M = 7
    members = torch.randn(5, M, 2, 3, generator=g)
    energies = torch.randn(5, M, generator=g, dtype=torch.float64)
    uni = float(contrastive_loss(_Const(), s1, members, energies, sched, 0.0, torch_gen(0)))
    # dyadic energies keep beta * (E + c) exact, so the shift must leave the loss bit-identical
    dy = torch.randint(-64, 64, (5, M), generator=g).double() / 8
    a = contrastive_loss(net, s1, members, dy, sched, 2.0, torch_gen(1))
    b = contrastive_loss(net, s1, members, dy + 4.0, sched, 2.0, torch_gen(1))
    ok = one == 0.0 and abs(uni - math.log(M)) < 1e-6 and torch.equal(a, b)
    record(3, ok, f"M=1 loss {one}, uniform |loss-log M| {abs(uni - math.log(M)):.1e}, "
                  f"shift delta {float((a - b).abs()):.1e}")


# 4 -------------------------------------------------------------------------

def test_c04_conjugate_gaussian_oracle():
    """N(0,1) prior tilted by exp(-beta (z-1)^2 / 2): mean beta/(1+beta), variance 1/(1+beta)."""
    t0 = time.perf_counter()
    beta, N, M, K = 3.0, 8192, 16, 100
    mean_t, var_t = beta / (1 + beta), 1 / (1 + beta)
    sched = make_schedule(K, "cosine")
    prior = GaussianPrior(sched)
    cfg = EnergyConfig(1, 1, 0, hidden=(64, 64))
    settings = TrainSettings(steps=3000, batch_size=128, lr=3e-3, lr_final_frac=0.1)
    rows, ok = [], True
    for seed in range(5):
        members = torch.randn(N, M, 1, 1, generator=torch_gen(seed, "support"))
        store = SupportStore(torch.zeros(N, 0), members, ((members.reshape(N, M) - 1) ** 2 / 2).double(), beta)
        err = {}
        for loss in ("contrastive", "mse"):
            net, _ = train_energy(store, cfg, sched, settings, seed, loss=loss)
            z = sample_prior(prior, None, sched, 1.0, 1.0, torch_gen(seed, "oracle"), (10_000, 1, 1),
                             guidance=baseline_hook(net, loss, beta, use_cond=False), variance="beta")
            m, v = float(z.mean()), float(z.var())
            err[loss] = (abs(m - mean_t), m, v)
        _, m, v = err["contrastive"]
        within = abs(m - mean_t) / mean_t < 0.05 and abs(v - var_t) / var_t < 0.05
        ok = ok and within and err["mse"][0] > err["contrastive"][0]
        rows.append(f"s{seed}: contrastive ({m:.3f}, {v:.3f}) mse mean {err['mse'][1]:.3f}")
    dt = time.perf_counter() - t0
    ok = ok and dt < 600
    record(4, ok, f"target ({mean_t}, {var_t}); " + "; ".join(rows) + f"; {dt:.0f}s")


# 5 -------------------------------------------------------------------------

def test_c05_vae_memorization():
    t0 = time.perf_counter()
    env = make_env("pointmass2d")
    ds = build_dataset(env, [("medium", 1.0)], 32, seed=0)
    data = tokenize(ds, 64, 4)
    cfg = VaeConfig(env.state_dim, env.action_dim, 64, 4, action_hidden=(64, 64), rr_hidden=(64, 64))
    vae, _ = train_vae(data, cfg, TrainSettings(steps=6000, batch_size=32, lr=6e-3, lr_final_frac=0.05), seed=0)
    mse = channel_mse(vae, data)
    recon = float(np.mean(list(mse.values())))
    with torch.no_grad():
        mu, _ = vae.encode(data.tokens)
        out = vae.decode(mu, data.s1)
    shapes = (len(data) == 32 and tuple(mu.shape) == (32, 64 // 4, cfg.z_dim) and data.tokens.shape[1] == 64
              and all(tuple(v.shape[:2]) == (32, 64) for v in out.values()))
    dt = time.perf_counter() - t0
    record(5, recon < 1e-3 and shapes and dt < 600,
           f"recon MSE {recon:.2e} ({', '.join(f'{k} {v:.1e}' for k, v in mse.items())}), "
           f"latents {tuple(mu.shape)}, {dt:.0f}s")


# 6 -------------------------------------------------------------------------

def _optimal_first_actions(ds):
    by_start: dict[int, list] = {}
    for tr in ds.trajectories:
        by_start.setdefault(tr.seed, []).append(tr)
    out = {}
    for si, trs in sorted(by_start.items()):
        best = max(tr.episode_return for tr in trs)
        out[si] = (trs[0].states[0], {float(tr.actions[0, 0]) for tr in trs if tr.episode_return >= best - 1e-9})
    return out


def test_c06_enumeration_oracle(workdir):
    t0 = time.perf_counter()
    n_plans = 64
    hits, total, per_seed = 0, 0, []
    for seed in range(5):
        cfg = load_config("chain_toy", seed=seed, out=str(workdir / f"chain_toy{seed}"))
        pipe = Pipeline(cfg)
        pipe.ensure("train-energy")
        models = pipe.plan_models()
        pcfg = planner_config(cfg)
        norm = models.codec.norm
        seed_hits = 0
        starts = _optimal_first_actions(pipe.load_dataset())
        for si, (s0, best) in starts.items():
            s1 = torch.as_tensor(norm.normalize("states", s0[None]), dtype=torch.float32).repeat(n_plans, 1)
            out = plan(models, s1, pcfg, [torch_gen(seed, "agree", si, i) for i in range(n_plans)])
            a = norm.denormalize("actions", out["actions"].double().numpy())[:, 0, 0]
            seed_hits += sum(float(v) in best for v in np.clip(np.rint(a), -1, 1))
        hits += seed_hits
        total += n_plans * len(starts)
        per_seed.append(seed_hits / (n_plans * len(starts)))
    rate = hits / total
    dt = time.perf_counter() - t0
    record(6, rate >= 0.9 and dt < 900,
           f"agreement {rate:.3f} over {total} plans (per seed {', '.join(f'{r:.3f}' for r in per_seed)}), {dt:.0f}s")


# 7 -------------------------------------------------------------------------

def test_c07_guidance_efficacy(workdir):
    cfg = load_config("pointmass", ["evaluate.n_episodes=20", "evaluate.seeds=[0,1,2,3,4]"],
                      out=str(workdir / "pointmass"))
    pipe = Pipeline(cfg)
    guided = pipe.ensure("evaluate")["metrics"]["mean_normalized"]
    env = make_env_from(cfg)
    table = evaluate(env, pipe.plan_models(), planner_config(cfg, beta=0.0), 20, [0, 1, 2, 3, 4])
    plain = table.summary()["mean_normalized"]
    record(7, guided - plain >= 15 and guided > 0 and plain > 0,
           f"beta=3 {guided:.1f}, beta=0 {plain:.1f}, gap {guided - plain:.1f} normalized points")


# 8 -------------------------------------------------------------------------

def test_c08_latent_plans_faster_than_raw(workdir):
    setups = {}
    for space in ("latent", "raw"):
        cfg = load_config("chain_sparse", [f"space={space}"], out=str(workdir / f"chain_sparse_{space}"))
        pipe = Pipeline(cfg)
        pipe.ensure("train-energy")
        models = pipe.plan_models()
        pcfg = planner_config(cfg)
        models.check(pcfg)
        setups[space] = (models, pcfg)
    lat, raw = setups["latent"][1], setups["raw"][1]
    assert (lat.H, lat.K) == (raw.H, raw.K)
    env = make_env_from(cfg)
    states = np.stack([initial_state(env, np_rng(0, "timing-start", i)) for i in range(50)])
    totals = {"latent": 0.0, "raw": 0.0}
    for i, s in enumerate(states):
        for space, (models, pcfg) in setups.items():
            s1 = torch.as_tensor(models.codec.norm.normalize("states", s[None]), dtype=torch.float32)
            t = time.perf_counter()
            plan(models, s1, pcfg, [torch_gen(pcfg.seed, "timing", i)])
            totals[space] += time.perf_counter() - t
    per = {k: v / len(states) for k, v in totals.items()}
    record(8, per["latent"] < per["raw"],
           f"wallclock_per_plan latent {per['latent'] * 1e3:.1f} ms, raw {per['raw'] * 1e3:.1f} ms "
           f"(H={lat.H}, K={lat.K})")


# 9 -------------------------------------------------------------------------

def test_c09_ablation(workdir):
    cfg = load_config("ablate", out=str(workdir / "ablate"))
    res = run_command(cfg, "ablate")
    rows = res["settings"]
    swept = ({r["L"] for r in rows}, {r["beta"] for r in rows}, {r["H"] for r in rows}, {r["K"] for r in rows})
    complete = (swept[0] == {1, 4} and swept[1] == {0.3, 3.0, 30.0} and len(swept[2]) >= 2 and len(swept[3]) >= 2
                and (workdir / "ablate" / "ablate_summary.md").exists())
    recon = {}
    for r in rows:
        recon[(r["H"], r["L"])] = r["val_recon"]
    ordered = all(recon[(H, 1)] > recon[(H, 4)] for H in swept[2])
    detail = ", ".join(f"H={H}: L=1 {recon[(H, 1)]:.4f} vs L=4 {recon[(H, 4)]:.4f}" for H in sorted(swept[2]))
    record(9, complete and ordered, f"sweep complete={complete} ({len(rows)} settings); val recon {detail}")


# 10 ------------------------------------------------------------------------

def _snapshot(root: Path) -> dict:
    # wallclock sidecars measure time, not results, and are excluded
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("timing.json", "timing.csv")}


def test_c10_determinism(workdir):
    out = workdir / "determinism"
    cfg = load_config("smoke", out=str(out))
    for stage in STAGES:
        run_command(cfg, stage)
    first = _snapshot(out)
    for stage in STAGES:
        run_command(cfg, stage)
    second = _snapshot(out)
    diff = sorted(str(p) for p in first if first[p] != second.get(p))
    record(10, not diff and first.keys() == second.keys(),
           f"{len(first)} artifacts over {len(STAGES)} stages, {len(diff)} differ" + (f": {diff}" if diff else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
