"""Experiment configuration: a versioned JSON document checked against a knob registry.

Every knob the pipeline reads is declared once in ``KNOBS`` with its default,
type and provenance:

* ``published``: value taken from the published defaults.
* ``desk-scale``: a small substitute (training steps, widths, dataset sizes)
  chosen so the pipeline runs on one CPU.
* ``choice``: a design knob with no published value.

Unknown keys are errors, so a typo in a sweep fails loudly instead of silently
using a default.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

from .codecs import SPACES
from .diff_core.nets import ACTIVATIONS
from .energy_guidance import LOSSES
from .env_data import ENV_NAMES, EnvSpec
from .latent_prior import SCHEDULES

SCHEMA_VERSION = 1
PROVENANCE = ("published", "desk-scale", "choice")
PRESET_DIR = Path(__file__).with_name("presets")
ACTIVATION_NAMES = tuple(sorted(ACTIVATIONS))


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class Knob:
    path: str
    default: Any
    kind: str  # int | float | str | bool | int_list | float_list | mix | mapping
    source: str = "choice"
    choices: tuple = ()
    nullable: bool = False
    minimum: Optional[float] = None
    doc: str = ""


def _k(path, default, kind, source="choice", **kw) -> Knob:
    return Knob(path, default, kind, source, **kw)


KNOBS: tuple[Knob, ...] = (
    _k("seed", 0, "int", doc="top-level seed; every stage derives named substreams from it"),
    _k("out", "runs/default", "str", doc="output directory"),
    _k("env.name", "pointmass2d", "str", choices=ENV_NAMES),
    _k("env.overrides", {}, "mapping", doc="EnvSpec field overrides"),
    _k("dataset.kind", "rollout", "str", choices=("rollout", "enumerate"),
       doc="policy rollouts, or every discrete action sequence from every start (1-D actions)"),
    _k("dataset.mix", [["medium", 1.0]], "mix", doc="[[policy, weight], ...]"),
    _k("dataset.n_episodes", 200, "int", "desk-scale", minimum=1),
    _k("dataset.val_fraction", 0.1, "float", minimum=0.0),
    _k("dataset.window_stride", 4, "int", "desk-scale", minimum=1),
    _k("space", "latent", "str", choices=SPACES),
    _k("H", 40, "int", minimum=1, doc="planning horizon in raw steps"),
    _k("L", 4, "int", minimum=1, doc="raw steps per latent action"),
    _k("vae.z_dim", 8, "int", "desk-scale", minimum=1),
    _k("vae.d_model", 32, "int", "desk-scale", minimum=1),
    _k("vae.n_heads", 2, "int", "desk-scale", minimum=1),
    _k("vae.n_blocks", 2, "int", "desk-scale", minimum=1),
    _k("vae.feat_dim", 32, "int", "desk-scale", minimum=1),
    _k("vae.action_hidden", [64, 64], "int_list", "desk-scale"),
    _k("vae.rr_hidden", [64, 64], "int_list", "desk-scale"),
    _k("vae.kl_weight", 1e-6, "float", "published", minimum=0.0),
    _k("vae.state_residual", True, "bool"),
    _k("vae.steps", 5000, "int", "desk-scale", minimum=1),
    _k("vae.batch_size", 64, "int", "desk-scale", minimum=1),
    _k("vae.lr", 3e-3, "float", "desk-scale", minimum=0.0),
    _k("vae.lr_final_frac", 0.05, "float", minimum=0.0),
    _k("return_head.hidden", [128, 128, 128], "int_list", "desk-scale"),
    _k("return_head.steps", 2000, "int", "desk-scale", minimum=1),
    _k("return_head.batch_size", 256, "int", "desk-scale", minimum=1),
    _k("return_head.lr", 1e-3, "float", "desk-scale", minimum=0.0),
    _k("return_head.lr_final_frac", 0.1, "float", minimum=0.0),
    _k("prior.widths", [32, 64, 64], "int_list", "desk-scale"),
    _k("prior.emb_dim", 32, "int", "desk-scale", minimum=1),
    _k("prior.kernel", 3, "int", minimum=1),
    _k("prior.activation", "mish", "str", "published", choices=ACTIVATION_NAMES),
    _k("prior.drop_prob", 0.25, "float", "published", minimum=0.0),
    _k("prior.K", 100, "int", "published", minimum=1),
    _k("prior.schedule", "cosine", "str", choices=SCHEDULES),
    _k("prior.steps", 2000, "int", "desk-scale", minimum=1),
    _k("prior.batch_size", 64, "int", "desk-scale", minimum=1),
    _k("prior.lr", 1e-3, "float", "desk-scale", minimum=0.0),
    _k("prior.lr_final_frac", 0.1, "float", minimum=0.0),
    _k("support.n_states", 256, "int", "desk-scale", minimum=1),
    _k("support.M", 16, "int", "published", minimum=1),
    _k("support.w", 1.4, "float", minimum=0.0),
    _k("support.alpha_temp", 1.0, "float", minimum=0.0),
    _k("support.clip_x0", 4.0, "float", nullable=True, minimum=0.0),
    _k("energy.hidden", [128, 128, 128], "int_list", "desk-scale"),
    _k("energy.emb_dim", 16, "int", "desk-scale", minimum=1),
    _k("energy.activation", "silu", "str", "published", choices=ACTIVATION_NAMES),
    _k("energy.loss", "contrastive", "str", choices=LOSSES),
    _k("energy.shared_noise", False, "bool"),
    _k("energy.steps", 1500, "int", "desk-scale", minimum=1),
    _k("energy.batch_size", 64, "int", "desk-scale", minimum=1),
    _k("energy.lr", 1e-3, "float", "desk-scale", minimum=0.0),
    _k("energy.lr_final_frac", 0.1, "float", minimum=0.0),
    _k("planner.beta", 3.0, "float", "published", minimum=0.0, doc="inverse temperature of the energy"),
    _k("planner.w", 1.4, "float", "published", minimum=0.0, doc="classifier-free guidance scale"),
    _k("planner.alpha_temp", 0.5, "float", "published", minimum=0.0),
    _k("planner.replan_interval", 1, "int", minimum=1),
    _k("planner.variance", "posterior", "str", choices=("posterior", "beta")),
    _k("planner.clip_x0", 4.0, "float", nullable=True, minimum=0.0),
    _k("plan.n_states", 4, "int", minimum=1),
    _k("evaluate.n_episodes", 20, "int", "desk-scale", minimum=1),
    _k("evaluate.seeds", [0, 1, 2, 3, 4], "int_list"),
    _k("evaluate.batch_episodes", 100, "int", minimum=1),
    _k("ablate.L", [1, 4], "int_list"),
    _k("ablate.beta", [0.3, 3.0, 30.0], "float_list"),
    _k("ablate.H", [40], "int_list"),
    _k("ablate.K", [100], "int_list"),
)

REGISTRY: dict[str, Knob] = {k.path: k for k in KNOBS}

# Knobs each stage's output depends on (beyond its upstream artifacts).
STAGE_KNOBS: dict[str, tuple[str, ...]] = {
    "gen-data": ("seed", "env.", "dataset.kind", "dataset.mix", "dataset.n_episodes"),
    "train-vae": ("seed", "dataset.val_fraction", "dataset.window_stride", "space", "H", "L", "vae.",
                  "return_head."),
    "train-prior": ("seed", "prior."),
    "gen-support": ("seed", "support.", "planner.beta"),
    "train-energy": ("seed", "energy.", "planner.beta"),
    "plan": ("seed", "planner.", "plan."),
    "evaluate": ("seed", "planner.", "evaluate."),
}


def _check_value(knob: Knob, value: Any) -> Any:
    path = knob.path
    if value is None:
        if knob.nullable:
            return None
        raise ConfigError(path, "may not be null")
    kind = knob.kind
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif kind == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif kind in ("int_list", "float_list"):
        if not isinstance(value, list) or not value:
            raise ConfigError(path, f"expected a non-empty list, got {value!r}")
        sub = Knob(path, None, kind[:-5], minimum=knob.minimum)
        value = [_check_value(dataclasses.replace(sub, path=f"{path}[{i}]"), v) for i, v in enumerate(value)]
        return value
    elif kind == "mix":
        if not isinstance(value, list) or not value:
            raise ConfigError(path, "expected [[policy, weight], ...]")
        for i, item in enumerate(value):
            if (not isinstance(item, list) or len(item) != 2 or not isinstance(item[0], str)
                    or isinstance(item[1], bool) or not isinstance(item[1], (int, float)) or item[1] <= 0):
                raise ConfigError(f"{path}[{i}]", "expected [policy_name, positive weight]")
        return [[p, float(w)] for p, w in value]
    elif kind == "mapping":
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {value!r}")
        if path == "env.overrides":
            fields = {f.name for f in dataclasses.fields(EnvSpec)} - {"name"}
            for key in value:
                if key not in fields:
                    raise ConfigError(f"{path}.{key}", "unknown environment field")
        return copy.deepcopy(value)
    if knob.choices and value not in knob.choices:
        raise ConfigError(path, f"must be one of {list(knob.choices)}, got {value!r}")
    if knob.minimum is not None and kind in ("int", "float") and value < knob.minimum:
        raise ConfigError(path, f"must be >= {knob.minimum}, got {value!r}")
    return value


def _flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, val in doc.items():
        path = f"{prefix}{key}"
        if path in REGISTRY:
            flat[path] = val
        elif isinstance(val, dict) and any(p.startswith(path + ".") for p in REGISTRY):
            flat.update(_flatten(val, path + "."))
        else:
            raise ConfigError(path, "unknown configuration key")
    return flat


def _nest(flat: dict[str, Any]) -> dict:
    out: dict = {}
    for path, val in flat.items():
        node = out
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


class Config:
    """Validated, fully resolved configuration. Read knobs with ``cfg["vae.steps"]``."""

    def __init__(self, values: dict[str, Any], explicit: Iterable[str] = ()):
        missing = set(REGISTRY) - set(values)
        extra = set(values) - set(REGISTRY)
        if missing or extra:
            raise ConfigError("", f"registry mismatch: missing {sorted(missing)}, unregistered {sorted(extra)}")
        self._values = {p: _check_value(REGISTRY[p], v) for p, v in values.items()}
        self.explicit = frozenset(explicit)
        self.consumed: set[str] = set()
        self._validate()

    def _validate(self):
        v = self._values
        if v["H"] % v["L"] and v["space"] != "raw":
            raise ConfigError("L", f"H={v['H']} is not divisible by L={v['L']}")
        if v["planner.alpha_temp"] > 1.0:
            raise ConfigError("planner.alpha_temp", "must be <= 1")
        if v["support.alpha_temp"] > 1.0:
            raise ConfigError("support.alpha_temp", "must be <= 1")
        if not v["prior.drop_prob"] < 1.0:
            raise ConfigError("prior.drop_prob", "must be < 1")
        if v["dataset.val_fraction"] >= 1.0:
            raise ConfigError("dataset.val_fraction", "must be < 1")
        if v["planner.replan_interval"] > v["H"]:
            raise ConfigError("planner.replan_interval", "must be <= H")
        if v["dataset.kind"] == "enumerate" and v["env.name"] != "chain_sparse":
            raise ConfigError("dataset.kind", "enumeration needs the 1-D chain environment")
        for L in v["ablate.L"]:
            for H in v["ablate.H"]:
                if H % L:
                    raise ConfigError("ablate.L", f"H={H} is not divisible by L={L}")

    def __getitem__(self, path: str) -> Any:
        if path not in REGISTRY:
            raise ConfigError(path, "not a registered knob")
        self.consumed.add(path)
        return copy.deepcopy(self._values[path])

    def section(self, prefix: str) -> dict[str, Any]:
        """Knobs under ``prefix.`` keyed by their last path component."""
        return {p[len(prefix) + 1:]: self[p] for p in REGISTRY if p.startswith(prefix + ".")}

    def replace(self, **changes) -> "Config":
        """New config with dotted-path changes (keyword names use ``__`` for dots)."""
        vals = dict(self._values)
        for key, val in changes.items():
            path = key.replace("__", ".")
            if path not in REGISTRY:
                raise ConfigError(path, "unknown configuration key")
            vals[path] = val
        return Config(vals, self.explicit | {k.replace("__", ".") for k in changes})

    def with_values(self, values: dict[str, Any]) -> "Config":
        for path in values:
            if path not in REGISTRY:
                raise ConfigError(path, "unknown configuration key")
        return Config({**self._values, **values}, self.explicit | set(values))

    def as_dict(self) -> dict:
        return _nest(dict(self._values))

    def resolved(self) -> dict:
        """Full dump: every knob's value plus where its value came from."""
        prov = {}
        for path, knob in REGISTRY.items():
            prov[path] = "set" if path in self.explicit else f"default ({knob.source})"
        return {"version": SCHEMA_VERSION, "config": self.as_dict(), "provenance": prov}

    def stage_hash(self, stage: str) -> str:
        keys = STAGE_KNOBS[stage]
        sel = {p: self._values[p] for p in sorted(REGISTRY) if any(
            p == k or (k.endswith(".") and p.startswith(k)) for k in keys)}
        blob = json.dumps(sel, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def defaults() -> dict[str, Any]:
    return {k.path: copy.deepcopy(k.default) for k in KNOBS}


def from_document(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("", "configuration must be a JSON object")
    doc = dict(doc)
    version = doc.pop("version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError("version", f"expected schema version {SCHEMA_VERSION}, got {version!r}")
    flat = _flatten(doc)
    return Config({**defaults(), **flat}, flat)


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value``; the value is parsed as JSON and falls back to a plain string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in REGISTRY:
        raise ConfigError(key, "unknown configuration key")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key, val


def preset_path(name: str) -> Path:
    return PRESET_DIR / f"{name}.json"


def load_config(path_or_preset: str | Path, overrides: Iterable[str] = (), seed: Optional[int] = None,
                out: Optional[str] = None) -> Config:
    """Read a config file (or a bundled preset by name) and apply CLI-style overrides."""
    path = Path(path_or_preset)
    if not path.exists() and preset_path(str(path_or_preset)).exists():
        path = preset_path(str(path_or_preset))
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from None
    cfg = from_document(doc)
    changes = dict(parse_override(o) for o in overrides)
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out"] = str(out)
    return cfg.with_values(changes) if changes else cfg


def write_resolved(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")


def check_registry(resolved: dict) -> None:
    """Every registered knob must appear in a resolved dump."""
    flat = _flatten({k: v for k, v in resolved["config"].items()})
    missing = set(REGISTRY) - set(flat)
    if missing:
        raise ConfigError("", f"resolved config lacks knobs {sorted(missing)}")
