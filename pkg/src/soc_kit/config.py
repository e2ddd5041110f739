"""Experiment configuration: parsing, validation, defaults, builders.

Configs are JSON with sections plant / initial_belief / cost / optimizer /
sysid / lqg / evaluation plus output_dir.  Unknown keys are rejected and
every violated invariant is reported with its field path.  Scalar weight
entries expand to scaled identity matrices of the right dimension.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .enkf import GaussianBelief
from .exceptions import ConfigError
from .plant import HeatPlantConfig, HeatSlabPlant, LinearPlant, Plant
from .serialize import config_hash
from .trajopt import CostSpec, GradientConfig

_HEAT_FIELDS = {
    "L": 0.6, "n_grid": 100, "kappa0": 1e-5, "kappa1": 1e-3, "eta": 0.005,
    "source_positions": [0.1, 0.3, 0.5, 0.7, 0.9],
    "sensor_positions": [0.1, 0.3, 0.5, 0.7, 0.9],
    "T_init": 100.0, "T_right": 150.0, "source_scaling": "density",
    "right_bc": "dirichlet", "substeps": 1,
}

_SCHEMA = {
    "plant": {
        "type": "heat", "dt": 0.25, "N": 250, "W": 1.0, "V": 1.0,
        **_HEAT_FIELDS, "A": None, "B": None, "C": None,
    },
    "initial_belief": {"mean": None, "cov": 1.0},
    "cost": {
        "q_track": 1.0, "q_cov": 0.0, "r_ctrl": 1e-3, "q_term": 1.0,
        "target": 150.0, "hold_from": 0,
    },
    "optimizer": {
        "alpha": 1e-4, "h": 1e-4, "epsilon": 1e-6, "max_iters": 50,
        "line_search": True, "m": 200, "seed": 1234, "u_init": 0.0,
    },
    "sysid": {"magnitude": 0.01, "p": 15, "q": 15, "rank_tol": 1e-6,
              "n_r_fixed": None},
    "lqg": {"q_output": 1.0, "r_control": 1e-3, "q_output_terminal": None,
            "p0_scale": 1.0, "state_cost_epsilon": 1e-8, "v_filter": None},
    "evaluation": {
        "n_runs": 100, "seed": 90000, "noise_scales": [0.01, 1.0],
        "theorem_runs": 200, "probe_fractions": [0.4, 0.9],
        "band_tolerance": 3.0, "band_checkpoints": None, "sample_x0": True,
    },
}


def _as_matrix(value, n: int, path: str, errors: list[str],
               allow_zero: bool = True) -> np.ndarray:
    """Scalar -> value * I_n; nested list -> (n, n) matrix."""
    if np.isscalar(value):
        if value < 0 or (value == 0 and not allow_zero):
            errors.append(f"{path}: must be {'>=' if allow_zero else '>'} 0")
            return np.eye(n)
        return float(value) * np.eye(n)
    mat = np.asarray(value, dtype=float)
    if mat.shape != (n, n):
        errors.append(f"{path}: expected scalar or {n}x{n} matrix, "
                      f"got shape {mat.shape}")
        return np.eye(n)
    return mat


def _as_vector(value, n: int, path: str, errors: list[str]) -> np.ndarray:
    if np.isscalar(value):
        return np.full(n, float(value))
    vec = np.asarray(value, dtype=float).reshape(-1)
    if vec.shape != (n,):
        errors.append(f"{path}: expected scalar or length-{n} vector, "
                      f"got {vec.shape}")
        return np.zeros(n)
    return vec


@dataclass
class ExperimentConfig:
    """Validated configuration with resolved defaults."""

    raw: dict
    resolved: dict
    hash: str

    # ---------------------------------------------------------------- build
    def build_plant(self) -> Plant:
        p = self.resolved["plant"]
        errors: list[str] = []
        if p["type"] == "heat":
            cfg = HeatPlantConfig(
                L=p["L"], n_grid=p["n_grid"], kappa0=p["kappa0"],
                kappa1=p["kappa1"], eta=p["eta"],
                source_positions=tuple(p["source_positions"]),
                sensor_positions=tuple(p["sensor_positions"]),
                T_init=p["T_init"], T_right=p["T_right"],
                source_scaling=p["source_scaling"], right_bc=p["right_bc"],
                substeps=p["substeps"])
            n_u = len(cfg.source_positions)
            n_y = len(cfg.sensor_positions)
            W = _as_matrix(p["W"], n_u, "plant.W", errors)
            V = _as_matrix(p["V"], n_y, "plant.V", errors)
            _raise_if(errors)
            return HeatSlabPlant(cfg, dt=p["dt"], N=p["N"], W=W, V=V)
        A = np.atleast_2d(np.asarray(p["A"], dtype=float))
        B = np.asarray(p["B"], dtype=float)
        C = np.asarray(p["C"], dtype=float)
        B = B.reshape(A.shape[0], -1)
        C = np.atleast_2d(C).reshape(-1, A.shape[0])
        W = _as_matrix(p["W"], B.shape[1], "plant.W", errors)
        V = _as_matrix(p["V"], C.shape[0], "plant.V", errors)
        _raise_if(errors)
        return LinearPlant(A, B, C, W=W, V=V, dt=p["dt"], N=p["N"])

    def build_initial_belief(self, plant: Plant) -> GaussianBelief:
        sec = self.resolved["initial_belief"]
        errors: list[str] = []
        n_x = plant.spec.n_x
        if sec["mean"] is None:
            mean = (plant.initial_state() if isinstance(plant, HeatSlabPlant)
                    else np.zeros(n_x))
        else:
            mean = _as_vector(sec["mean"], n_x, "initial_belief.mean", errors)
        cov = _as_matrix(sec["cov"], n_x, "initial_belief.cov", errors)
        _raise_if(errors)
        return GaussianBelief(mean=mean, covariance=cov)

    def build_cost(self, plant: Plant) -> CostSpec:
        sec = self.resolved["cost"]
        errors: list[str] = []
        n_x, n_u = plant.spec.n_x, plant.spec.n_u
        spec = CostSpec(
            Q_track=_as_matrix(sec["q_track"], n_x, "cost.q_track", errors),
            q_cov=sec["q_cov"],
            R_ctrl=_as_matrix(sec["r_ctrl"], n_u, "cost.r_ctrl", errors),
            Q_term=_as_matrix(sec["q_term"], n_x, "cost.q_term", errors),
            target=_as_vector(sec["target"], n_x, "cost.target", errors),
            hold_from=sec["hold_from"])
        _raise_if(errors)
        return spec

    def build_gradient_config(self) -> GradientConfig:
        sec = self.resolved["optimizer"]
        return GradientConfig(alpha=sec["alpha"], h=sec["h"],
                              epsilon=sec["epsilon"],
                              max_iters=sec["max_iters"],
                              line_search=sec["line_search"])

    def initial_controls(self, plant: Plant) -> np.ndarray:
        """u_init: scalar, piecewise [[step, value], ...], or full (N, n_u)."""
        u_init = self.resolved["optimizer"]["u_init"]
        N, n_u = plant.spec.N, plant.spec.n_u
        if np.isscalar(u_init):
            return np.full((N, n_u), float(u_init))
        arr = np.asarray(u_init, dtype=float)
        if arr.ndim == 2 and arr.shape == (N, n_u):
            return arr.copy()
        if arr.ndim == 2 and arr.shape[1] == 2:
            U = np.zeros((N, n_u))
            knots = sorted((int(s), float(v)) for s, v in arr)
            for start, value in knots:
                U[start:, :] = value
            return U
        raise ConfigError([
            f"optimizer.u_init: expected scalar, [[step, value], ...] knots, "
            f"or {N}x{n_u} array"])


def _raise_if(errors: list[str]) -> None:
    if errors:
        raise ConfigError(errors)


def _validate_section(name: str, raw: dict, schema: dict,
                      errors: list[str]) -> dict:
    resolved = dict(schema)
    for key, value in raw.items():
        if key not in schema:
            errors.append(f"{name}.{key}: unknown key")
            continue
        resolved[key] = value
    return resolved


def _positive(resolved, section, key, errors, allow_zero=False):
    value = resolved[section][key]
    if value is None or not np.isscalar(value):
        return
    if value < 0 or (value == 0 and not allow_zero):
        errors.append(f"{section}.{key}: must be > 0"
                      if not allow_zero else f"{section}.{key}: must be >= 0")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config dict; raises ConfigError listing violations."""
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    errors: list[str] = []
    resolved: dict = {}
    for key in raw:
        if key not in _SCHEMA and key != "output_dir":
            errors.append(f"{key}: unknown section")
    for name, schema in _SCHEMA.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            errors.append(f"{name}: must be an object")
            section = {}
        resolved[name] = _validate_section(name, section, schema, errors)
    resolved["output_dir"] = raw.get("output_dir", "out")

    plant = resolved["plant"]
    if plant["type"] not in ("heat", "linear"):
        errors.append("plant.type: must be 'heat' or 'linear'")
    if plant["type"] == "linear":
        for key in ("A", "B", "C"):
            if plant[key] is None:
                errors.append(f"plant.{key}: required for linear plants")
    if np.isscalar(plant["dt"]) and not plant["dt"] > 0:
        errors.append("plant.dt: must be > 0")
    if not (isinstance(plant["N"], int) and plant["N"] >= 1):
        errors.append("plant.N: must be an integer >= 1")
    if plant["type"] == "heat":
        if not (isinstance(plant["n_grid"], int) and plant["n_grid"] >= 3):
            errors.append("plant.n_grid: must be an integer >= 3")
        for field in ("source_positions", "sensor_positions"):
            for pos in plant[field]:
                if not 0.0 < pos < 1.0:
                    errors.append(f"plant.{field}: fractions must lie in (0, 1)")
                    break
        if plant["kappa0"] is not None and plant["kappa0"] < 0:
            errors.append("plant.kappa0: must be >= 0")

    cost = resolved["cost"]
    if (not isinstance(cost["hold_from"], int) or cost["hold_from"] < 0
            or (isinstance(plant["N"], int)
                and cost["hold_from"] > plant["N"])):
        errors.append("cost.hold_from: must be an integer in [0, plant.N]")
    _positive(resolved, "cost", "q_cov", errors, allow_zero=True)

    for key in ("alpha", "h", "epsilon"):
        _positive(resolved, "optimizer", key, errors)
    opt = resolved["optimizer"]
    if not (isinstance(opt["max_iters"], int) and opt["max_iters"] >= 1):
        errors.append("optimizer.max_iters: must be an integer >= 1")
    if not (isinstance(opt["m"], int) and opt["m"] >= 2):
        errors.append("optimizer.m: must be an integer >= 2")
    if not isinstance(opt["seed"], int) or opt["seed"] < 0:
        errors.append("optimizer.seed: must be a nonnegative integer")

    sysid = resolved["sysid"]
    _positive(resolved, "sysid", "magnitude", errors, allow_zero=True)
    for key in ("p", "q"):
        if not (isinstance(sysid[key], int) and sysid[key] >= 1):
            errors.append(f"sysid.{key}: must be an integer >= 1")
    if not (np.isscalar(sysid["rank_tol"]) and 0 < sysid["rank_tol"] < 1):
        errors.append("sysid.rank_tol: must lie in (0, 1)")

    ev = resolved["evaluation"]
    if not (isinstance(ev["n_runs"], int) and ev["n_runs"] >= 2):
        errors.append("evaluation.n_runs: must be an integer >= 2")
    if not isinstance(ev["seed"], int) or ev["seed"] < 0:
        errors.append("evaluation.seed: must be a nonnegative integer")

    # cross-section invariants that only need dimensions
    if plant["type"] == "heat" and isinstance(sysid.get("n_r_fixed"), int):
        n_y = len(plant["sensor_positions"])
        n_u = len(plant["source_positions"])
        if isinstance(sysid["p"], int) and isinstance(sysid["q"], int):
            if min(sysid["p"] * n_y, sysid["q"] * n_u) < sysid["n_r_fixed"]:
                errors.append(
                    "sysid.n_r_fixed: violates the Hankel rank constraint "
                    "min(p*n_y, q*n_u) >= n_r")
    if (isinstance(plant["N"], int) and isinstance(sysid["p"], int)
            and isinstance(sysid["q"], int)
            and sysid["q"] > plant["N"] - sysid["p"]):
        errors.append("sysid.p/q: realization window [q, N-p] is empty")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(raw=raw, resolved=resolved, hash=config_hash(raw))


def load_config(path) -> ExperimentConfig:
    """Load and validate a JSON config file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(
            [f"config parse error at line {err.lineno}, column {err.colno}: "
             f"{err.msg}"]) from err
    return parse_config(raw)


def resolved_table(config: ExperimentConfig) -> str:
    """Human-readable table of every resolved parameter."""
    lines = []
    for section in sorted(config.resolved):
        value = config.resolved[section]
        if isinstance(value, dict):
            for key in sorted(value):
                lines.append(f"{section}.{key} = {json.dumps(value[key])}")
        else:
            lines.append(f"{section} = {json.dumps(value)}")
    return "\n".join(lines)
