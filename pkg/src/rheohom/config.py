"""Experiment configuration: TOML parsing, validation, hashing, seed streams.

One structured text file drives the whole pipeline.  Validation runs the
admissibility gate on the exponent bounds and cross-checks the medium
parameters against them, rejecting with the computed thresholds in the
message.  The config hash is the SHA-256 of the canonical (sorted-key)
JSON of the normalized config, so formatting and field order never change
it, while any value that can alter numerics does.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .io import canonical_json, sha256_text
from .media import exponent_law_bounds
from .varexp import ConfigurationError, exponent_gate

STAGES = ("media", "growth", "cell", "effective", "gates", "macro", "reports")

_DEFAULTS = {
    "medium": {"kind": "constant", "a_value": 1.0, "p_value": 2.0},
    "law": {"dimension": 2, "alpha": 2.0, "beta": 2.0},
    "rve": {"L": 8.0, "n": 16, "realizations": 4},
    "xi_grid": {"directions": 8, "magnitudes": 6, "r_min": 0.25, "r_max": 8.0},
    "solver": {"tol": 1e-8, "max_iter": 5000},
    "verify": {
        "delta2_lambdas": [0.1, 0.3, 0.5, 1.0, 2.0, 5.0, 10.0],
        "delta2_directions": 5,
        "monotonicity_pairs": 50,
        "det_limit_Ls": [8.0, 16.0, 32.0],
        "det_limit_R": [32, 16, 12],
        "det_limit_xi": [1.0, -1.0, 0.5],
        "birkhoff_windows": [8.0, 16.0, 32.0],
        "birkhoff_R": 32,
        "continuity_steps": 5,
    },
    "macro": {
        "enabled": True, "eps": [0.25, 0.125, 0.0625], "n": 64, "T": 0.25,
        "dt": 0.015625, "u0": "vortex", "amplitude": 0.05,
        "convection": False, "snapshots": 8,
    },
    "run": {"master_seed": 0, "out_dir": "runs", "threads": 1},
}

_MEDIUM_KEYS = {
    "constant": {"a_value", "p_value"},
    "laminate": {"axis", "layer_values_a", "layer_values_p"},
    "checkerboard": {"a_values", "p_values"},
    "voronoi": {"intensity", "exponent_law", "a_value"},
    "percolation": {"q"},
}


@dataclass
class ExperimentConfig:
    medium: dict
    law: dict
    rve: dict
    xi_grid: dict
    solver: dict
    verify: dict
    macro: dict
    run: dict
    gate: object = dc_field(default=None, repr=False)

    def to_dict(self):
        return {"medium": self.medium, "law": self.law, "rve": self.rve,
                "xi_grid": self.xi_grid, "solver": self.solver,
                "verify": self.verify, "macro": self.macro, "run": self.run}

    @property
    def hash(self) -> str:
        return config_hash(self)

    def medium_params(self) -> dict:
        """Generator parameters in the form media.regenerate understands."""
        med = dict(self.medium)
        kind = med["kind"]
        params = {"kind": kind, "seed": 0}
        if kind == "percolation":
            params.update(q=med["q"], alpha=self.law["alpha"], beta=self.law["beta"])
        else:
            for key in _MEDIUM_KEYS[kind]:
                params[key] = med[key]
        return params

    def stage_seed(self, stage: str) -> int:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        ss = np.random.SeedSequence(entropy=int(self.run["master_seed"]),
                                    spawn_key=(STAGES.index(stage),))
        return int(ss.generate_state(1, dtype=np.uint64)[0])


def _merge(defaults, user, path=""):
    out = dict(defaults)
    for key, val in user.items():
        if key not in defaults and path in ("medium",):
            out[key] = val      # medium sections carry kind-specific keys
        elif key not in defaults:
            raise ConfigurationError(f"unknown config field {path + '.' + key!r}")
        elif isinstance(defaults.get(key), dict) and isinstance(val, dict):
            out[key] = _merge(defaults[key], val, path + "." + key if path else key)
        else:
            out[key] = val
    return out


def _normalize(obj):
    """Plain JSON types with floats kept exact; lists of numbers coerced to float."""
    if isinstance(obj, dict):
        return {k: _normalize(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, bool):
        return obj
    if isinstance(obj, (int, float, str)) or obj is None:
        return obj
    raise ConfigurationError(f"unsupported config value {obj!r}")


def validate_config(text: str) -> ExperimentConfig:
    """Parse and validate the TOML config; raises with named inequalities."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config parse error: {exc}") from exc
    merged = {}
    for section, defaults in _DEFAULTS.items():
        user = raw.get(section, {})
        if not isinstance(user, dict):
            raise ConfigurationError(f"section [{section}] must be a table")
        merged[section] = _merge(defaults, user, section)
    for section in raw:
        if section not in _DEFAULTS:
            raise ConfigurationError(f"unknown config section [{section}]")

    law = merged["law"]
    gate = exponent_gate(float(law["alpha"]), float(law["beta"]),
                         int(law["dimension"]))

    med = merged["medium"]
    kind = med.get("kind")
    if kind not in _MEDIUM_KEYS:
        raise ConfigurationError(f"unknown medium kind {kind!r}")
    missing = _MEDIUM_KEYS[kind] - set(med)
    # optional coefficients fall back to defaults where they exist
    missing -= {k for k in missing if k in _DEFAULTS["medium"]}
    if kind == "voronoi":
        med.setdefault("a_value", 1.0)
        if "exponent_law" not in med:
            raise ConfigurationError("voronoi medium needs an exponent_law table")
        lo, hi = exponent_law_bounds(med["exponent_law"])
        if lo < law["alpha"] - 1e-12 or hi > law["beta"] + 1e-12:
            raise ConfigurationError(
                f"exponent law range [{lo}, {hi}] must lie within "
                f"[alpha, beta] = [{law['alpha']}, {law['beta']}]")
        if "intensity" not in med:
            raise ConfigurationError("voronoi medium needs an intensity")
    elif kind == "percolation":
        if "q" not in med:
            raise ConfigurationError("percolation medium needs q")
    elif kind == "laminate":
        if missing:
            raise ConfigurationError(f"laminate medium missing {sorted(missing)}")
        pvals = med["layer_values_p"]
        if min(pvals) < law["alpha"] - 1e-12 or max(pvals) > law["beta"] + 1e-12:
            raise ConfigurationError("laminate exponents must lie in [alpha, beta]")
    elif kind == "constant":
        if not (law["alpha"] - 1e-12 <= med["p_value"] <= law["beta"] + 1e-12):
            raise ConfigurationError("constant exponent must lie in [alpha, beta]")

    rve = merged["rve"]
    for key in ("L", "n", "realizations"):
        if rve[key] <= 0:
            raise ConfigurationError(f"rve.{key} must be positive")
    if merged["solver"]["tol"] <= 0:
        raise ConfigurationError("solver.tol must be positive")
    ver = merged["verify"]
    if len(ver["det_limit_Ls"]) != len(ver["det_limit_R"]):
        raise ConfigurationError("det_limit_Ls and det_limit_R must pair up")
    mac = merged["macro"]
    if mac["enabled"]:
        for eps in mac["eps"]:
            k = 1.0 / eps
            if abs(k - round(k)) > 1e-9:
                raise ConfigurationError(f"macro.eps entry {eps} is not 1/k")
        n_steps = mac["T"] / mac["dt"]
        if abs(n_steps - round(n_steps)) > 1e-9:
            raise ConfigurationError("macro.T must be an integer multiple of macro.dt")
        steps_per_snap = round(n_steps) / mac["snapshots"]
        if abs(steps_per_snap - round(steps_per_snap)) > 1e-9:
            raise ConfigurationError("macro.dt must divide T/snapshots")

    cfg = ExperimentConfig(medium=_normalize(med), law=_normalize(law),
                           rve=_normalize(rve), xi_grid=_normalize(merged["xi_grid"]),
                           solver=_normalize(merged["solver"]),
                           verify=_normalize(ver), macro=_normalize(mac),
                           run=_normalize(merged["run"]), gate=gate)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return validate_config(fh.read())


def config_hash(cfg: ExperimentConfig) -> str:
    payload = cfg.to_dict()
    # output location and worker count cannot alter numerics
    payload["run"] = {k: v for k, v in payload["run"].items()
                      if k not in ("out_dir", "threads")}
    return sha256_text(canonical_json(_normalize(payload)))[:16]
