"""Experiment configuration: schema, validation and YAML round trip."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .core import Grid, Mask, ModelParams
from .profiles import ProfileExpression

__all__ = ["ExperimentConfig", "ConfigError"]

MODES = ("static-reach", "dynamic-reach", "static-grasp")
PROFILE_NAMES = ("rho", "omega", "eps", "nu", "mu", "beta", "gamma")

_SOLVER_DEFAULTS = {
    "max_outer": 40,
    "inner_maxiter": 150,
    "tol_constraint": 1e-8,
    "tol_straightness": 1e-6,
    "tol_stationarity": 1e-6,
    "drop_curvature_bound": False,
    # dynamic-mode options
    "max_iters": 40,
    "tol_control": 1e-4,
    "store_every": 1,
}


class ConfigError(ValueError):
    """Configuration violates the schema."""


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


@dataclass
class ExperimentConfig:
    """Validated experiment description (see ``from_dict`` for the schema)."""

    name: str
    mode: str
    n_nodes: int
    profiles: dict
    tau: float
    target: dict
    mask: dict | None = None
    time: dict | None = None
    solver: dict = field(default_factory=dict)
    output_dir: str | None = None
    seed: int = 0

    # -- schema ---------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        _require(isinstance(data, dict), "config must be a mapping")
        unknown = set(data) - {
            "name", "mode", "n_nodes", "profiles", "tau", "target", "mask",
            "time", "solver", "output_dir", "seed",
        }
        _require(not unknown, f"unknown config keys: {sorted(unknown)}")
        for key in ("name", "mode", "n_nodes", "profiles", "tau", "target"):
            _require(key in data, f"missing config key {key!r}")
        _require(data["mode"] in MODES, f"mode must be one of {MODES}, got {data['mode']!r}")
        _require(
            isinstance(data["n_nodes"], int) and data["n_nodes"] >= 5,
            "n_nodes must be an integer >= 5",
        )
        profiles = data["profiles"]
        _require(isinstance(profiles, dict), "profiles must be a mapping")
        missing = set(PROFILE_NAMES) - set(profiles)
        _require(not missing, f"missing profiles: {sorted(missing)}")
        for key, value in profiles.items():
            _require(key in PROFILE_NAMES, f"unknown profile {key!r}")
            _require(
                isinstance(value, str) or isinstance(value, (list, tuple)),
                f"profile {key!r} must be an expression string or a nodal array",
            )
            if isinstance(value, str):
                try:
                    ProfileExpression(value)
                except Exception as exc:
                    raise ConfigError(f"profile {key!r}: {exc}") from exc
            else:
                _require(
                    len(value) == data["n_nodes"],
                    f"tabulated profile {key!r} must have n_nodes={data['n_nodes']} entries",
                )
        tau = data["tau"]
        _require(isinstance(tau, (int, float)) and tau > 0, "tau must be positive")

        cfg = cls(
            name=str(data["name"]),
            mode=data["mode"],
            n_nodes=data["n_nodes"],
            profiles=copy.deepcopy(profiles),
            tau=float(tau),
            target=copy.deepcopy(data["target"]),
            mask=copy.deepcopy(data.get("mask")),
            time=copy.deepcopy(data.get("time")),
            solver={**_SOLVER_DEFAULTS, **(data.get("solver") or {})},
            output_dir=data.get("output_dir"),
            seed=int(data.get("seed", 0)),
        )
        cfg._validate_target()
        cfg._validate_mask()
        cfg._validate_time()
        cfg._validate_solver()
        return cfg

    def _validate_target(self):
        t = self.target
        _require(isinstance(t, dict), "target must be a mapping")
        if self.mode in ("static-reach", "dynamic-reach"):
            _require(
                "point" in t and len(t["point"]) == 2,
                "reachability target must carry a 2-vector under 'point'",
            )
            _require(
                all(isinstance(v, (int, float)) for v in t["point"]),
                "target point entries must be numbers",
            )
        else:
            _require("shape" in t and "weight" in t, "grasp target needs 'shape' and 'weight'")
            shape = t["shape"]
            _require(shape.get("kind") in ("circle", "square", "polygon"),
                     "shape kind must be circle, square or polygon")
            if shape["kind"] == "circle":
                _require(float(shape.get("radius", 0)) > 0, "circle radius must be positive")
                _require(len(shape.get("center", ())) == 2, "circle needs a 2-vector center")
            elif shape["kind"] == "square":
                _require(float(shape.get("half_side", 0)) > 0, "square half_side must be positive")
                _require(len(shape.get("center", ())) == 2, "square needs a 2-vector center")
            else:
                verts = shape.get("vertices", ())
                _require(len(verts) >= 3 and all(len(v) == 2 for v in verts),
                         "polygon needs at least three 2-vector vertices")
            weight = t["weight"]
            kind = weight.get("kind")
            _require(kind in ("interval", "points"), "weight kind must be interval or points")
            if kind == "interval":
                s0 = weight.get("start")
                _require(isinstance(s0, (int, float)) and 0.0 <= s0 <= 1.0,
                         "interval weight needs 0 <= start <= 1")
            else:
                pts = weight.get("points", ())
                _require(len(pts) >= 1 and all(0.0 <= p <= 1.0 for p in pts),
                         "point weights must lie in [0, 1]")

    def _validate_mask(self):
        if self.mask is None:
            return
        _require(isinstance(self.mask, dict), "mask must be a mapping")
        try:
            Mask.from_dict(self.mask)
        except Exception as exc:
            raise ConfigError(f"bad mask: {exc}") from exc

    def _validate_time(self):
        if self.mode != "dynamic-reach":
            return
        _require(self.time is not None, "dynamic-reach requires a 'time' section")
        t = self.time
        _require(isinstance(t.get("dt"), (int, float)) and t["dt"] > 0, "time.dt must be positive")
        _require(isinstance(t.get("n_steps"), int) and t["n_steps"] >= 1,
                 "time.n_steps must be a positive integer")

    def _validate_solver(self):
        unknown = set(self.solver) - set(_SOLVER_DEFAULTS)
        _require(not unknown, f"unknown solver options: {sorted(unknown)}")

    # -- realization ------------------------------------------------------------

    def grid(self) -> Grid:
        return Grid(self.n_nodes)

    def model_params(self) -> ModelParams:
        grid = self.grid()
        values = {}
        for name in PROFILE_NAMES:
            spec = self.profiles[name]
            if isinstance(spec, str):
                values[name] = ProfileExpression(spec)(grid.s)
            else:
                values[name] = np.asarray(spec, dtype=float)
        return ModelParams(grid, tau=self.tau, **values)

    def mask_obj(self) -> Mask:
        return Mask.from_dict(self.mask)

    # -- serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "mode": self.mode,
            "n_nodes": self.n_nodes,
            "profiles": copy.deepcopy(self.profiles),
            "tau": self.tau,
            "target": copy.deepcopy(self.target),
            "solver": dict(self.solver),
            "seed": self.seed,
        }
        if self.mask is not None:
            out["mask"] = copy.deepcopy(self.mask)
        if self.time is not None:
            out["time"] = copy.deepcopy(self.time)
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(data)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
