"""Batch command-line front end.

Subcommands: pipeline (optimize -> identify -> synthesize -> evaluate,
resumable with --stage), the four individual stages, and validate.  Each
stage consumes the previous stage's artifacts from the output directory:

    nominal.csv / nominal_meta.json   optimized open-loop trajectory
    markov.json                       estimated Markov parameters
    ltv_model.json                    identified ROM triples
    controller.json                   LQG gains and covariances
    rollouts/, summary.json           Monte Carlo evaluation

Exit codes: 0 success, 1 validation, 2 I/O, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import enkf, harness, lqg, serialize, trajopt, tvera
from .config import ExperimentConfig, load_config, resolved_table
from .exceptions import (ConfigError, ContractViolationError, DivergenceError,
                         SocKitError, StallError, SynthesisError,
                         UnderdeterminedError)

STAGES = ("optimize", "identify", "synthesize", "evaluate")


# --------------------------------------------------------------------- stages

class StageContext:
    """Shared state handed from stage to stage (built lazily from disk)."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, seed: int,
                 threads: int):
        self.config = config
        self.out = out_dir
        self.seed = seed
        self.threads = threads
        self.plant = config.build_plant()
        self.b0 = config.build_initial_belief(self.plant)
        self.cost = config.build_cost(self.plant)
        self.nominal: trajopt.NominalTrajectory | None = None
        self.markov: tvera.MarkovParameterSet | None = None
        self.model: tvera.LtvModel | None = None
        self.controller: lqg.LqgController | None = None

    def stamp(self) -> dict:
        return {"config_hash": self.config.hash, "seed": self.seed}

    def check_stamp(self, payload: dict, path: Path) -> None:
        if payload.get("config_hash") != self.config.hash:
            raise ConfigError(
                [f"{path}: artifact was produced by a different config "
                 f"(hash {payload.get('config_hash')!r})"])


def stage_optimize(ctx: StageContext) -> None:
    opt = ctx.config.resolved["optimizer"]
    result = trajopt.optimize_open_loop(
        ctx.plant, ctx.b0, ctx.config.initial_controls(ctx.plant), ctx.cost,
        ctx.config.build_gradient_config(), opt["m"], ctx.seed)
    ctx.nominal = result.trajectory
    _write_nominal(ctx, result)


def stage_identify(ctx: StageContext) -> None:
    if ctx.nominal is None:
        ctx.nominal = _load_nominal(ctx)
    sysid = ctx.config.resolved["sysid"]
    archive = tvera.run_impulse_experiments(
        ctx.plant, ctx.nominal, sysid["magnitude"], threads=ctx.threads)
    ctx.markov = tvera.estimate_markov(archive)
    cfg = tvera.HankelConfig(p=sysid["p"], q=sysid["q"],
                             rank_tol=sysid["rank_tol"],
                             n_r_fixed=sysid["n_r_fixed"])
    ctx.model = tvera.era_realize(ctx.markov, sysid["p"], sysid["q"], cfg)
    _write_markov(ctx)
    _write_model(ctx)


def stage_synthesize(ctx: StageContext) -> None:
    if ctx.model is None:
        ctx.model = _load_model(ctx)
    sec = ctx.config.resolved["lqg"]
    spec = ctx.plant.spec
    errors: list[str] = []
    from .config import _as_matrix
    q_y = _as_matrix(sec["q_output"], spec.n_y, "lqg.q_output", errors)
    r = _as_matrix(sec["r_control"], spec.n_u, "lqg.r_control", errors)
    q_y_term = (None if sec["q_output_terminal"] is None else
                _as_matrix(sec["q_output_terminal"], spec.n_y,
                           "lqg.q_output_terminal", errors))
    v_filter = (None if sec["v_filter"] is None else
                _as_matrix(sec["v_filter"], spec.n_y, "lqg.v_filter", errors))
    if errors:
        raise ConfigError(errors)
    ctx.controller = lqg.synthesize_lqg(
        ctx.model, spec.N, spec.W, spec.V, q_y, r, q_y_term,
        p0_scale=sec["p0_scale"], eps=sec["state_cost_epsilon"],
        v_filter=v_filter)
    _write_controller(ctx)


def stage_evaluate(ctx: StageContext) -> None:
    if ctx.nominal is None:
        ctx.nominal = _load_nominal(ctx)
    if ctx.model is None:
        ctx.model = _load_model(ctx)
    if ctx.controller is None:
        ctx.controller = _load_controller(ctx)
    ev = ctx.config.resolved["evaluation"]
    spec = ctx.plant.spec
    checkpoints = ev["band_checkpoints"] or [int(round(0.6 * spec.N)), spec.N]
    stats = harness.monte_carlo(
        ctx.plant, ctx.nominal, ctx.model, ctx.controller, ev["n_runs"],
        ev["seed"], ctx.cost, probe_fractions=tuple(ev["probe_fractions"]),
        band_tolerance=ev["band_tolerance"], band_checkpoints=checkpoints,
        sample_x0=ev["sample_x0"], threads=ctx.threads)
    theorem = harness.theorem1_check(
        ctx.plant, ctx.nominal, ctx.model, ctx.controller, ctx.cost,
        ev["noise_scales"], ev["theorem_runs"], ev["seed"] + ev["n_runs"],
        sample_x0=ev["sample_x0"])
    _write_summary(ctx, stats, theorem)


# ------------------------------------------------------------------ artifacts

def _write_nominal(ctx: StageContext, result: trajopt.OpenLoopResult) -> None:
    nominal = result.trajectory
    spec = ctx.plant.spec
    header = (["step"] + [f"u_{i}" for i in range(spec.n_u)]
              + [f"mean_{i}" for i in range(spec.n_x)] + ["trace_cov"]
              + [f"obs_{i}" for i in range(spec.n_y)])
    rows = []
    for k in range(spec.N + 1):
        u = list(nominal.controls[k]) if k < spec.N else [""] * spec.n_u
        b = nominal.beliefs[k]
        rows.append([k] + u + list(b.mean) + [b.trace]
                    + list(nominal.nominal_observations[k]))
    comments = [f"config_hash={ctx.config.hash}", f"seed={ctx.seed}"]
    serialize.write_csv(ctx.out / "nominal.csv", header, rows, comments)
    enkf.beliefs_to_csv(nominal.beliefs, ctx.out / "beliefs.csv",
                        header_lines=comments)
    serialize.dump_json(ctx.out / "nominal_meta.json", {
        **ctx.stamp(), "cost": nominal.cost, "iterations": result.iterations,
        "converged": result.converged, "grad_norm": result.grad_norm,
        "cost_history": result.cost_history,
        "optimizer": ctx.config.resolved["optimizer"],
    })


def _load_nominal(ctx: StageContext) -> trajopt.NominalTrajectory:
    path = ctx.out / "nominal.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}; run optimize first")
    meta = serialize.load_json(ctx.out / "nominal_meta.json")
    ctx.check_stamp(meta, path)
    spec = ctx.plant.spec
    _, rows = serialize.read_csv(path)
    controls = np.array([row[1:1 + spec.n_u] for row in rows[:spec.N]])
    # the noiseless trajectory and beliefs are recomputed deterministically
    states, obs = trajopt.nominal_rollout(ctx.plant, ctx.b0.mean, controls)
    beliefs = enkf.enkf_propagate(ctx.plant, ctx.b0, controls,
                                  ctx.config.resolved["optimizer"]["m"],
                                  ctx.seed)
    return trajopt.NominalTrajectory(
        controls=controls, beliefs=beliefs, nominal_observations=obs,
        cost=meta["cost"], mean_states=states)


def _write_markov(ctx: StageContext) -> None:
    markov = ctx.markov
    data = []
    for k in range(1, markov.N + 1):
        for j in range(k):
            data.extend(float(x) for x in markov.blocks[k, j].ravel())
    serialize.dump_json(ctx.out / "markov.json", {
        **ctx.stamp(), "N": markov.N, "n_y": markov.n_y, "n_u": markov.n_u,
        "order": "k=1..N, j=0..k-1, row-major blocks",
        "data_causal": data,
    })


def _load_markov(ctx: StageContext) -> tvera.MarkovParameterSet:
    payload = serialize.load_json(ctx.out / "markov.json")
    ctx.check_stamp(payload, ctx.out / "markov.json")
    N, n_y, n_u = payload["N"], payload["n_y"], payload["n_u"]
    blocks = np.zeros((N + 1, N, n_y, n_u))
    flat = np.asarray(payload["data_causal"], dtype=float)
    pos = 0
    size = n_y * n_u
    for k in range(1, N + 1):
        for j in range(k):
            blocks[k, j] = flat[pos:pos + size].reshape(n_y, n_u)
            pos += size
    return tvera.MarkovParameterSet(blocks=blocks)


def _write_model(ctx: StageContext) -> None:
    model = ctx.model
    lo, hi = model.valid_range
    payload = {
        **ctx.stamp(), "n_r": model.n_r, "valid_range": [lo, hi],
        "singular_values": [float(s) for s in model.singular_values],
        "A_hat": {str(k): serialize.matrix_to_json(model.A_hat[k])
                  for k in range(lo, hi + 1)},
        "B_hat": {str(k): serialize.matrix_to_json(model.B_hat[k])
                  for k in range(lo, hi + 1)},
        "C_hat": {str(k): serialize.matrix_to_json(model.C_hat[k])
                  for k in range(lo, hi + 1)},
    }
    serialize.dump_json(ctx.out / "ltv_model.json", payload)


def _load_model(ctx: StageContext) -> tvera.LtvModel:
    path = ctx.out / "ltv_model.json"
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}; run identify first")
    payload = serialize.load_json(path)
    ctx.check_stamp(payload, path)
    lo, hi = payload["valid_range"]
    return tvera.LtvModel(
        A_hat={k: serialize.matrix_from_json(payload["A_hat"][str(k)])
               for k in range(lo, hi + 1)},
        B_hat={k: serialize.matrix_from_json(payload["B_hat"][str(k)])
               for k in range(lo, hi + 1)},
        C_hat={k: serialize.matrix_from_json(payload["C_hat"][str(k)])
               for k in range(lo, hi + 1)},
        n_r=payload["n_r"], valid_range=(lo, hi),
        singular_values=np.asarray(payload["singular_values"]))


def _write_controller(ctx: StageContext) -> None:
    c = ctx.controller
    payload = {
        **ctx.stamp(),
        "L": [serialize.matrix_to_json(m) for m in c.L],
        "S": [serialize.matrix_to_json(m) for m in c.S],
        "K": [serialize.matrix_to_json(m) for m in c.K],
        "P": [serialize.matrix_to_json(m) for m in c.P],
        "P0": serialize.matrix_to_json(c.P0),
    }
    serialize.dump_json(ctx.out / "controller.json", payload)


def _load_controller(ctx: StageContext) -> lqg.LqgController:
    path = ctx.out / "controller.json"
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}; run synthesize first")
    payload = serialize.load_json(path)
    ctx.check_stamp(payload, path)
    stack = lambda items: np.stack([serialize.matrix_from_json(m)
                                    for m in items])
    controller = lqg.LqgController(
        L=stack(payload["L"]), S=stack(payload["S"]), K=stack(payload["K"]),
        P=stack(payload["P"]), P0=serialize.matrix_from_json(payload["P0"]),
        a_hat0=np.zeros(payload["L"][0]["cols"]))
    return controller


def _write_summary(ctx: StageContext, stats: harness.MonteCarloStats,
                   theorem: list[harness.Theorem1Row]) -> None:
    rollout_dir = ctx.out / "rollouts"
    rollout_dir.mkdir(parents=True, exist_ok=True)
    spec = ctx.plant.spec
    comments = [f"config_hash={ctx.config.hash}", f"seed={ctx.seed}"]
    header = (["step"] + [f"mean_{i}" for i in range(spec.n_x)]
              + [f"std_{i}" for i in range(spec.n_x)])
    rows = [[k] + list(stats.mean_traj[k]) + list(stats.std_traj[k])
            for k in range(spec.N + 1)]
    serialize.write_csv(rollout_dir / "timeseries.csv", header, rows, comments)
    serialize.dump_json(ctx.out / "summary.json", {
        **ctx.stamp(),
        "n_runs": stats.n_runs, "failures": stats.failures,
        "band_tolerance": stats.band_tolerance,
        "band_fractions": {str(k): v for k, v in stats.band_fractions.items()},
        "probe_indices": stats.probe_indices,
        "probe_rms_closed": stats.probe_rms_closed,
        "probe_rms_open": stats.probe_rms_open,
        "mean_cost_closed": stats.mean_cost_closed,
        "mean_cost_open": stats.mean_cost_open,
        "complexity_ratio": stats.complexity_ratio,
        "theorem1": [{"scale": row.scale, "mean_dj": row.mean_dj,
                      "se_dj": row.se_dj, "n_runs": row.n_runs}
                     for row in theorem],
    })


# ----------------------------------------------------------------------- main

def _run_stages(args, stages) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out) if args.out else Path(config.resolved["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = (args.seed if args.seed is not None
            else config.resolved["optimizer"]["seed"])
    ctx = StageContext(config, out_dir, seed, max(1, args.threads))
    timings = {}
    for name in stages:
        t0 = time.perf_counter()
        try:
            globals()[f"stage_{name}"](ctx)
        except SocKitError as err:
            print(f"stage {name} failed: {err}", file=sys.stderr)
            raise
        timings[name] = time.perf_counter() - t0
    serialize.dump_json(out_dir / "run_meta.json", {
        "stages": list(stages), "timings_s": timings,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    return 0


def cmd_pipeline(args) -> int:
    stages = STAGES
    if args.stage:
        if args.stage not in STAGES:
            raise ConfigError([f"--stage must be one of {', '.join(STAGES)}"])
        stages = STAGES[STAGES.index(args.stage):]
    return _run_stages(args, stages)


def cmd_validate(args) -> int:
    config = load_config(args.config)
    print(resolved_table(config))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soc-kit",
        description="Separation-based data-driven stochastic optimal control")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the optimizer seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for parallel experiments/rollouts")
        p.add_argument("--out", default=None, help="override output directory")
        return p

    p = add("pipeline", "run optimize -> identify -> synthesize -> evaluate")
    p.add_argument("--stage", default=None,
                   help="resume the pipeline from this stage")
    for name in STAGES:
        add(name, f"run only the {name} stage")
    add("validate", "check the config and print resolved parameters")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pipeline":
            return cmd_pipeline(args)
        if args.command == "validate":
            return cmd_validate(args)
        return _run_stages(args, (args.command,))
    except ConfigError as err:
        for violation in err.violations:
            print(f"invalid config: {violation}", file=sys.stderr)
        return 1
    except ContractViolationError as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(str(err), file=sys.stderr)
        return 2
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return 2
    except (DivergenceError, SynthesisError, StallError,
            UnderdeterminedError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
