"""Staged pipeline: dataset -> encoder -> prior -> support sets -> energy -> plans/evaluation.

Each stage writes its artifacts plus a ``manifest.json`` into its own directory.
A manifest records the hash of the knobs the stage consumed, the SHA-256 of
every output file and the SHA-256 of each upstream manifest. Before a stage
reads an upstream artifact it re-verifies the whole upstream chain, so a
changed config or a tampered byte anywhere upstream stops the run with a
message naming the stage to rerun.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .codecs import Codec, LatentCodec, RawCodec, SkillCodec
from .config import Config, ConfigError, check_registry, write_resolved
from .diff_core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .diff_core.train import TrainSettings
from .energy_guidance import (EnergyConfig, EnergyNet, StoreError, gen_support, load_store, save_store,
                              train_energy)
from .env_data import (Dataset, DatasetError, EnvSpec, NormStats, build_dataset, enumerate_dataset,
                       initial_state, load_dataset, make_env, save_dataset)
from .latent_prior import PriorConfig, PriorNet, make_schedule, train_prior
from .planner import CSV_COLUMNS, PlanModels, PlannerConfig, evaluate, plan, write_eval_csv
from .rng import np_rng, torch_gen
from .trajectory_vae import (ReturnHead, TokenizedTrajectories, TrajectoryVAE, VaeConfig, channel_mse, tokenize,
                             train_return_head, train_vae)

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-vae", "train-prior", "gen-support", "train-energy", "plan", "evaluate")
UPSTREAM = {
    "gen-data": None,
    "train-vae": "gen-data",
    "train-prior": "train-vae",
    "gen-support": "train-prior",
    "train-energy": "gen-support",
    "plan": "train-energy",
    "evaluate": "train-energy",
}
MANIFEST = "manifest.json"
MANIFEST_FORMAT = "latentplan-manifest/1"


class ArtifactError(RuntimeError):
    """A needed upstream artifact is missing or stale; ``stage`` is the one to rerun."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{message} (rerun `{stage}`)")
        self.stage = stage


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_curve(rows: list[dict], path: Path) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(keys)
        for r in rows:
            wr.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys])


def _settings(cfg: Config, prefix: str) -> TrainSettings:
    return TrainSettings(steps=cfg[f"{prefix}.steps"], batch_size=cfg[f"{prefix}.batch_size"],
                         lr=cfg[f"{prefix}.lr"], log_every=max(1, cfg[f"{prefix}.steps"] // 50),
                         lr_final_frac=cfg[f"{prefix}.lr_final_frac"])


def module_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], what: str) -> None:
    expect = set(module.state_dict())
    if set(tensors) != expect:
        raise CheckpointError(f"{what}: checkpoint tensors do not match the architecture")
    dtype = next(iter(module.state_dict().values())).dtype
    module.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})


def make_env_from(cfg: Config) -> EnvSpec:
    return make_env(cfg["env.name"], **cfg["env.overrides"])


def planner_config(cfg: Config, **changes) -> PlannerConfig:
    kw = dict(space=cfg["space"], H=cfg["H"], L=cfg["L"], replan_interval=cfg["planner.replan_interval"],
              beta=cfg["planner.beta"], w=cfg["planner.w"], alpha_temp=cfg["planner.alpha_temp"],
              K=cfg["prior.K"], seed=cfg["seed"], variance=cfg["planner.variance"],
              clip_x0=cfg["planner.clip_x0"])
    kw.update(changes)
    return PlannerConfig(**kw)


@dataclass
class Layout:
    """Directory of each stage's artifacts."""

    dirs: dict[str, Path]

    @classmethod
    def flat(cls, out) -> "Layout":
        out = Path(out)
        return cls({s: out / s for s in STAGES})

    def __getitem__(self, stage: str) -> Path:
        return self.dirs[stage]


class Pipeline:
    def __init__(self, cfg: Config, layout: Optional[Layout] = None):
        self.cfg = cfg
        self.layout = layout or Layout.flat(cfg["out"])
        self.seed = cfg["seed"]
        self._runners: dict[str, Callable[[Path], dict]] = {
            "gen-data": self._gen_data, "train-vae": self._train_vae, "train-prior": self._train_prior,
            "gen-support": self._gen_support, "train-energy": self._train_energy, "plan": self._plan,
            "evaluate": self._evaluate,
        }

    # manifests

    def manifest_path(self, stage: str) -> Path:
        return self.layout[stage] / MANIFEST

    def verify(self, stage: str) -> dict:
        """Check ``stage`` and everything upstream of it; return its manifest."""
        path = self.manifest_path(stage)
        if not path.exists():
            raise ArtifactError(stage, f"no `{stage}` artifacts in {path.parent}")
        try:
            man = json.loads(path.read_text())
        except json.JSONDecodeError:
            raise ArtifactError(stage, f"unreadable manifest {path}") from None
        if man.get("format") != MANIFEST_FORMAT or man.get("stage") != stage:
            raise ArtifactError(stage, f"{path} is not a `{stage}` manifest")
        if man["config_hash"] != self.cfg.stage_hash(stage):
            raise ArtifactError(stage, f"configuration changed since `{stage}` ran")
        for rel, digest in man["outputs"].items():
            f = path.parent / rel
            if not f.exists():
                raise ArtifactError(stage, f"missing artifact {f}")
            if sha256_file(f) != digest:
                raise ArtifactError(stage, f"artifact {f} does not match its manifest")
        up = UPSTREAM[stage]
        if up is not None:
            self.verify(up)
            if sha256_file(self.manifest_path(up)) != man["inputs"].get(up):
                raise ArtifactError(stage, f"`{stage}` was built from different `{up}` artifacts")
        return man

    def is_fresh(self, stage: str) -> bool:
        try:
            self.verify(stage)
            return True
        except ArtifactError:
            return False

    def _write_manifest(self, stage: str, outputs: list[str], metrics: dict) -> dict:
        d = self.layout[stage]
        up = UPSTREAM[stage]
        man = {
            "format": MANIFEST_FORMAT,
            "stage": stage,
            "config_hash": self.cfg.stage_hash(stage),
            "inputs": {} if up is None else {up: sha256_file(self.manifest_path(up))},
            "outputs": {rel: sha256_file(d / rel) for rel in sorted(outputs)},
            "metrics": metrics,
        }
        self.manifest_path(stage).write_bytes(_json_bytes(man))
        return man

    # running

    def run(self, stage: str) -> dict:
        """Run one stage unconditionally (upstream must already be fresh)."""
        if stage not in self._runners:
            raise ValueError(f"unknown stage {stage!r}")
        up = UPSTREAM[stage]
        if up is not None:
            self.verify(up)
        d = self.layout[stage]
        d.mkdir(parents=True, exist_ok=True)
        log.info("running %s in %s", stage, d)
        outputs, metrics = self._runners[stage](d)
        return self._write_manifest(stage, outputs, metrics)

    def ensure(self, stage: str) -> dict:
        """Run ``stage`` and its upstream stages only where they are missing or stale."""
        up = UPSTREAM[stage]
        if up is not None:
            self.ensure(up)
        if self.is_fresh(stage):
            return json.loads(self.manifest_path(stage).read_text())
        return self.run(stage)

    def run_all(self, through: str = "evaluate") -> dict:
        return self.ensure(through)

    # loading

    def load_dataset(self) -> Dataset:
        self.verify("gen-data")
        try:
            return load_dataset(self.layout["gen-data"] / "dataset.jsonl")
        except DatasetError as exc:
            raise ArtifactError("gen-data", str(exc)) from None

    def train_val(self) -> tuple[Dataset, Dataset]:
        ds = self.load_dataset()
        return ds.split(self.cfg["dataset.val_fraction"], self.seed)

    def load_codec(self) -> tuple[Codec, str]:
        self.verify("train-vae")
        return read_codec(self.layout["train-vae"] / "codec.ckpt")

    def load_prior(self) -> tuple[PriorNet, dict, str]:
        self.verify("train-prior")
        path = self.layout["train-prior"] / "prior.ckpt"
        header, sections = _read_ckpt(path, "train-prior")
        meta = header["meta"]
        prior = PriorNet(PriorConfig.from_dict(meta["prior"]))
        load_module(prior, sections["prior"], "prior")
        return prior.requires_grad_(False).eval(), meta, sha256_file(path)

    def load_energy(self) -> tuple[EnergyNet, dict, str]:
        self.verify("train-energy")
        path = self.layout["train-energy"] / "energy.ckpt"
        header, sections = _read_ckpt(path, "train-energy")
        meta = header["meta"]
        energy = EnergyNet(EnergyConfig.from_dict(meta["energy"]))
        load_module(energy, sections["energy"], "energy")
        return energy.requires_grad_(False).eval(), meta, sha256_file(path)

    def plan_models(self) -> PlanModels:
        codec, codec_hash = self.load_codec()
        prior, pmeta, prior_hash = self.load_prior()
        energy, emeta, _ = self.load_energy()
        return PlanModels(codec, prior, make_schedule(pmeta["prior"]["K"], pmeta["prior"]["schedule"]), energy,
                          emeta["loss"], emeta["beta"], codec_hash, prior_hash, pmeta["parent"], emeta["parent"])

    def tokenized_train(self, codec: Codec) -> TokenizedTrajectories:
        tr, _ = self.train_val()
        return codec.tokenize(tr, self.cfg["dataset.window_stride"])

    # stages

    def _gen_data(self, d: Path):
        cfg = self.cfg
        env = make_env_from(cfg)
        if cfg["dataset.kind"] == "enumerate":
            n = int(round(env.n_cells / env.step))
            starts = [np.array([i * env.step, 0.0]) for i in range(n)]
            ds = enumerate_dataset(env, starts)
        else:
            ds = build_dataset(env, [(p, w) for p, w in cfg["dataset.mix"]], cfg["dataset.n_episodes"], self.seed)
        digest = save_dataset(ds, d / "dataset.jsonl")
        return ["dataset.jsonl", "dataset.meta.json"], {"n_episodes": len(ds), "content_hash": digest,
                                                        "quality_tag": ds.quality_tag}

    def _train_vae(self, d: Path):
        cfg = self.cfg
        tr, va = self.train_val()
        norm = tr.norm
        env = tr.env
        H, L, space = cfg["H"], cfg["L"], cfg["space"]
        if H > env.horizon:
            raise ConfigError("H", f"H={H} exceeds the episode length {env.horizon}")
        stride = cfg["dataset.window_stride"]
        metrics: dict = {"space": space}
        sections: dict = {}
        meta: dict = {"space": space, "norm": norm.to_dict(), "state_dim": env.state_dim,
                      "action_dim": env.action_dim, "seq_len": H}
        if space == "raw":
            write_curve([], d / "curve.csv")
            save_checkpoint(d / "codec.ckpt", {}, meta)
            return ["codec.ckpt", "curve.csv"], metrics
        with_returns = space == "latent"
        vcfg = VaeConfig(env.state_dim, env.action_dim, H, L, z_dim=cfg["vae.z_dim"], d_model=cfg["vae.d_model"],
                         n_heads=cfg["vae.n_heads"], n_blocks=cfg["vae.n_blocks"], feat_dim=cfg["vae.feat_dim"],
                         action_hidden=tuple(cfg["vae.action_hidden"]), rr_hidden=tuple(cfg["vae.rr_hidden"]),
                         with_returns=with_returns, kl_weight=cfg["vae.kl_weight"],
                         state_residual=cfg["vae.state_residual"])
        data = tokenize(tr, H, L, stride, with_returns, norm)
        vae, curve = train_vae(data, vcfg, _settings(cfg, "vae"), self.seed)
        vae.requires_grad_(False).eval()
        head = None
        if space == "skill":
            head, hcurve = train_return_head(tr, _settings(cfg, "return_head"), self.seed,
                                             tuple(cfg["return_head.hidden"]), norm)
            head.requires_grad_(False).eval()
            write_curve(hcurve, d / "return_head_curve.csv")
            sections["return_head"] = module_tensors(head)
            meta["return_head_hidden"] = list(cfg["return_head.hidden"])
        codec = (LatentCodec(vae, norm) if space == "latent" else SkillCodec(vae, head, norm))
        codec.fit_latent_stats(data)
        sections.update(vae.section_params())
        sections["latent_stats"] = {"z_mean": codec.z_mean, "z_std": codec.z_std}
        meta["vae"] = vcfg.to_dict()
        save_checkpoint(d / "codec.ckpt", sections, meta)
        write_curve(curve, d / "curve.csv")
        train_err = channel_mse(vae, data)
        val_data = tokenize(va, H, L, stride, with_returns, norm)
        val_err = channel_mse(vae, val_data) if len(val_data) else train_err
        metrics.update({"train_recon": train_err, "val_recon": val_err,
                        "val_recon_mean": float(np.mean(list(val_err.values()))),
                        "train_recon_mean": float(np.mean(list(train_err.values())))})
        outputs = ["codec.ckpt", "curve.csv"] + (["return_head_curve.csv"] if head is not None else [])
        return outputs, metrics

    def _train_prior(self, d: Path):
        cfg = self.cfg
        codec, codec_hash = self.load_codec()
        data = self.tokenized_train(codec)
        with torch.no_grad():
            z0 = codec.encode(data)
        pcfg = PriorConfig(codec.n_tokens, codec.token_dim, codec.state_dim, widths=tuple(cfg["prior.widths"]),
                           emb_dim=cfg["prior.emb_dim"], kernel=cfg["prior.kernel"],
                           activation=cfg["prior.activation"], drop_prob=cfg["prior.drop_prob"],
                           K=cfg["prior.K"], schedule=cfg["prior.schedule"])
        prior, curve = train_prior(z0, data.s1, pcfg, _settings(cfg, "prior"), self.seed)
        save_checkpoint(d / "prior.ckpt", {"prior": module_tensors(prior)},
                        {"prior": pcfg.to_dict(), "parent": codec_hash})
        write_curve(curve, d / "curve.csv")
        return ["prior.ckpt", "curve.csv"], {"final_loss": curve[-1]["loss"], "n_windows": len(data)}

    def _gen_support(self, d: Path):
        cfg = self.cfg
        codec, _ = self.load_codec()
        codec.frozen()
        prior, pmeta, prior_hash = self.load_prior()
        sched = make_schedule(pmeta["prior"]["K"], pmeta["prior"]["schedule"])
        data = self.tokenized_train(codec)
        idx = np_rng(self.seed, "support", "states").integers(0, len(data), cfg["support.n_states"])
        s1 = data.s1[torch.as_tensor(idx)]
        store = gen_support(prior, codec, s1, cfg["support.M"], sched, self.seed, w=cfg["support.w"],
                            alpha_temp=cfg["support.alpha_temp"], beta=cfg["planner.beta"],
                            prior_hash=prior_hash, clip_x0=cfg["support.clip_x0"])
        save_store(store, d / "support")
        e = store.energies
        return (["support/meta.json", "support/records.jsonl"],
                {"n_states": len(store), "M": store.M, "energy_mean": float(e.mean()),
                 "energy_min": float(e.min()), "energy_max": float(e.max())})

    def _train_energy(self, d: Path):
        cfg = self.cfg
        _, pmeta, prior_hash = self.load_prior()
        self.verify("gen-support")
        try:
            store = load_store(self.layout["gen-support"] / "support", expected_prior_hash=prior_hash)
        except StoreError as exc:
            raise ArtifactError("gen-support", str(exc)) from None
        sched = make_schedule(pmeta["prior"]["K"], pmeta["prior"]["schedule"])
        pc = pmeta["prior"]
        ecfg = EnergyConfig(pc["n_tokens"], pc["token_dim"], pc["cond_dim"], hidden=tuple(cfg["energy.hidden"]),
                            emb_dim=cfg["energy.emb_dim"], activation=cfg["energy.activation"])
        loss = cfg["energy.loss"]
        beta = cfg["planner.beta"]
        energy, curve = train_energy(store, ecfg, sched, _settings(cfg, "energy"), self.seed, beta=beta, loss=loss,
                                     shared_noise=cfg["energy.shared_noise"])
        save_checkpoint(d / "energy.ckpt", {"energy": module_tensors(energy)},
                        {"energy": ecfg.to_dict(), "loss": loss, "beta": beta, "parent": prior_hash})
        write_curve(curve, d / "curve.csv")
        return ["energy.ckpt", "curve.csv"], {"final_loss": curve[-1]["loss"]}

    def _plan(self, d: Path):
        cfg = self.cfg
        models = self.plan_models()
        pcfg = planner_config(cfg)
        models.check(pcfg)
        env = make_env_from(cfg)
        norm = models.codec.norm
        n = cfg["plan.n_states"]
        states = np.stack([initial_state(env, np_rng(self.seed, "eval-start", e)) for e in range(n)])
        s1 = torch.as_tensor(norm.normalize("states", states), dtype=torch.get_default_dtype())
        out = plan(models, s1, pcfg, [torch_gen(self.seed, "plan", e) for e in range(n)])
        with torch.no_grad():
            energy = models.codec.energy(out["z"], s1)
        plans = []
        for i in range(n):
            plans.append({
                "start": states[i].tolist(),
                "states": norm.denormalize("states", out["states"][i].double().numpy()).tolist(),
                "actions": norm.denormalize("actions", out["actions"][i].double().numpy()).tolist(),
                "energy": float(energy[i]),
            })
        (d / "plans.json").write_bytes(_json_bytes({"planner": pcfg.to_dict(), "plans": plans}))
        return ["plans.json"], {"n_plans": n, "mean_energy": float(energy.mean())}

    def _evaluate(self, d: Path):
        cfg = self.cfg
        models = self.plan_models()
        env = make_env_from(cfg)
        pcfg = planner_config(cfg)
        ds_tag = json.loads((self.layout["gen-data"] / "dataset.meta.json").read_text())["quality_tag"]
        table = evaluate(env, models, pcfg, cfg["evaluate.n_episodes"], cfg["evaluate.seeds"], ds_tag,
                         cfg["evaluate.batch_episodes"])
        write_eval_csv(table, d / "eval.csv", d / "timing.csv")
        summ = table.summary()
        timing = {"wallclock_per_plan": summ.pop("wallclock_per_plan")}
        summ["seed_means"] = {str(k): v for k, v in table.seed_means().items()}
        (d / "summary.json").write_bytes(_json_bytes(summ))
        (d / "timing.json").write_bytes(_json_bytes(timing))
        return ["eval.csv", "summary.json"], summ


def _read_ckpt(path: Path, stage: str):
    try:
        return load_checkpoint(path, torch.get_default_dtype())
    except (CheckpointError, FileNotFoundError) as exc:
        raise ArtifactError(stage, f"{path}: {exc}") from None


def read_codec(path: Path) -> tuple[Codec, str]:
    header, sections = _read_ckpt(path, "train-vae")
    meta = header["meta"]
    norm = NormStats.from_dict(meta["norm"])
    space = meta["space"]
    digest = sha256_file(path)
    if space == "raw":
        return RawCodec(meta["state_dim"], meta["action_dim"], meta["seq_len"], norm), digest
    vcfg = VaeConfig.from_dict(meta["vae"])
    vae = TrajectoryVAE(vcfg)
    vae.load_sections({k: v for k, v in sections.items() if k not in ("latent_stats", "return_head")})
    vae.requires_grad_(False).eval()
    stats = sections["latent_stats"]
    if space == "latent":
        codec: Codec = LatentCodec(vae, norm, stats["z_mean"], stats["z_std"])
    else:
        head = ReturnHead(vcfg.state_dim, vcfg.action_dim, tuple(meta["return_head_hidden"]))
        load_module(head, sections["return_head"], "return head")
        codec = SkillCodec(vae, head, norm, stats["z_mean"], stats["z_std"])
    return codec.frozen(), digest


# ablation

def _fmt_num(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def ablation_layout(out: Path, L: int, H: int, K: int, beta: float) -> Layout:
    base = out / "ablate"
    enc = base / f"H{H}-L{L}"
    pri = enc / f"K{K}"
    gui = pri / f"beta{_fmt_num(float(beta))}"
    return Layout({"gen-data": out / "gen-data", "train-vae": enc / "train-vae", "train-prior": pri / "train-prior",
                   "gen-support": gui / "gen-support", "train-energy": gui / "train-energy", "plan": gui / "plan",
                   "evaluate": gui / "evaluate"})


def ablate(cfg: Config) -> dict:
    """Cross product over the ablate.{L, beta, H, K} lists; shared upstream stages are built once.

    Writes ``ablate.csv`` (every evaluation row) and ``ablate_summary.md`` /
    ``ablate_summary.json`` (one row per setting) into the output directory.
    """
    out = Path(cfg["out"])
    rows, summary = [], []
    for H in cfg["ablate.H"]:
        for L in cfg["ablate.L"]:
            for K in cfg["ablate.K"]:
                for beta in cfg["ablate.beta"]:
                    sub = cfg.with_values({"H": H, "L": L, "prior.K": K, "planner.beta": float(beta),
                                           "planner.replan_interval": min(cfg["planner.replan_interval"], H)})
                    pipe = Pipeline(sub, ablation_layout(out, L, H, K, beta))
                    ev = pipe.ensure("evaluate")
                    vae_m = pipe.verify("train-vae")["metrics"]
                    with open(pipe.layout["evaluate"] / "eval.csv") as fh:
                        rows += list(csv.DictReader(fh))
                    summary.append({"L": L, "H": H, "K": K, "beta": float(beta),
                                    "val_recon": vae_m.get("val_recon_mean", float("nan")),
                                    "mean_normalized": ev["metrics"]["mean_normalized"],
                                    "stderr_normalized": ev["metrics"]["stderr_normalized"]})
    with open(out / "ablate.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    lines = ["# Ablation summary", "",
             "| L | H | K | beta | val recon MSE | normalized score | stderr |",
             "|---|---|---|------|---------------|------------------|--------|"]
    for s in summary:
        lines.append(f"| {s['L']} | {s['H']} | {s['K']} | {_fmt_num(s['beta'])} | {s['val_recon']:.6g} | "
                     f"{s['mean_normalized']:.3f} | {s['stderr_normalized']:.3f} |")
    (out / "ablate_summary.md").write_text("\n".join(lines) + "\n")
    (out / "ablate_summary.json").write_bytes(_json_bytes(summary))
    return {"rows": len(rows), "settings": summary}


def run_command(cfg: Config, command: str) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    check_registry(cfg.resolved())
    write_resolved(cfg, out / "resolved_config.json")
    if command == "ablate":
        return ablate(cfg)
    return Pipeline(cfg).run(command)
