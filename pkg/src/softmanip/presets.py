"""Built-in experiment presets (the standard test battery).

Tests 1-4: static reachability with increasingly deactivated control regions.
test2-dynamic: time-dependent optimal reachability on the Test-2 mask.
Tests 5-8: static grasping of a circle/square with interval or point weights.
"""

from __future__ import annotations

from .config import ExperimentConfig

__all__ = ["preset", "PRESET_NAMES", "GLOBAL_PROFILES", "GLOBAL_SETTINGS", "DYNAMIC_SETTINGS"]

GLOBAL_PROFILES = {
    "eps": "1e-1*(1-0.9*s)",
    "mu": "(1-s)*exp(-0.1*s^2/(1-s^2))",
    "omega": "4*pi*(1+s^2)",
    "rho": "exp(-s)",
    "nu": "1e-3*(1-0.09*s)",
    "beta": "2-s",
    "gamma": "1e-6*(2-s)",
}

GLOBAL_SETTINGS = {
    "target": (0.3563, -0.4423),
    "tau": 1e-4,
    "ds": 0.02,
}

DYNAMIC_SETTINGS = {
    "T": 2.0,
    "dt": 0.001,
}

GRASP_SETTINGS = {
    "s0": 0.55,
    "r0": 0.1,
}

_MASKS = {
    "test1": {"intervals": []},
    "test2": {"intervals": [[0.35, 0.65]]},
    "test3": {"intervals": [[0.25, 0.4], [0.6, 0.75]]},
    "test4": {"active_points": [0.0, 0.25, 0.5, 0.75]},
}

PRESET_NAMES = (
    "test1", "test2", "test3", "test4", "test2-dynamic",
    "test5", "test6", "test7", "test8",
)


def _base_config(name: str, mode: str) -> dict:
    n_nodes = round(1.0 / GLOBAL_SETTINGS["ds"]) + 1
    return {
        "name": name,
        "mode": mode,
        "n_nodes": n_nodes,
        "profiles": dict(GLOBAL_PROFILES),
        "tau": GLOBAL_SETTINGS["tau"],
        "seed": 0,
    }


def preset(name: str) -> ExperimentConfig:
    """Fully populated config for a named test."""
    key = name.lower()
    if key not in PRESET_NAMES:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")

    if key in ("test1", "test2", "test3", "test4"):
        data = _base_config(key, "static-reach")
        data["mask"] = _MASKS[key]
        data["target"] = {"point": list(GLOBAL_SETTINGS["target"])}
        data["solver"] = {"drop_curvature_bound": key == "test4"}
        return ExperimentConfig.from_dict(data)

    if key == "test2-dynamic":
        data = _base_config(key, "dynamic-reach")
        data["mask"] = _MASKS["test2"]
        data["target"] = {"point": list(GLOBAL_SETTINGS["target"])}
        data["time"] = {"dt": DYNAMIC_SETTINGS["dt"],
                        "n_steps": round(DYNAMIC_SETTINGS["T"] / DYNAMIC_SETTINGS["dt"])}
        data["solver"] = {}
        return ExperimentConfig.from_dict(data)

    s0 = GRASP_SETTINGS["s0"]
    r0 = GRASP_SETTINGS["r0"]
    center = list(GLOBAL_SETTINGS["target"])
    shapes = {
        "test5": {"kind": "circle", "center": center, "radius": r0},
        "test6": {"kind": "circle", "center": center, "radius": r0},
        "test7": {"kind": "square", "center": center, "half_side": r0},
        "test8": {"kind": "square", "center": center, "half_side": r0},
    }
    weights = {
        "test5": {"kind": "interval", "start": s0},
        "test6": {"kind": "points", "points": [s0, 1.0]},
        "test7": {"kind": "interval", "start": s0},
        "test8": {"kind": "points", "points": [s0, (s0 + 1.0) / 2.0, 1.0]},
    }
    data = _base_config(key, "static-grasp")
    data["mask"] = {"intervals": []}
    data["target"] = {"shape": shapes[key], "weight": weights[key]}
    data["solver"] = {"drop_curvature_bound": key == "test7"}
    return ExperimentConfig.from_dict(data)
