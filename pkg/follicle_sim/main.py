import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import artifacts, fv_oracle
from .characteristics import FrozenControls
from .config import DEFAULT_LOG_LEVEL, DEFAULT_OUTPUT_DIR, RunConfig, load_run_config, parse_resolutions
from .errors import FollicleSimError, exit_code_for
from .fixedpoint import MarchResult, compute_constants, march
from .graph import create_verify_workflow
from .initial_data import InitialData
from .solution import check_bounds

logger = logging.getLogger(__name__)

SAMPLE_POINTS = 17
CONVERGENCE_COLUMNS = ["t", "h", "L1_error_vs_char", "maturity_error", "order_estimate", "maturity_order"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="follicle_sim", description="Follicle population dynamics: characteristics solver with a finite-volume oracle")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="Path to the run configuration JSON")
    common.add_argument("--out", type=Path, default=None, help="Output directory (default FOLLICLE_OUTPUT_DIR or ./output)")
    common.add_argument("--threads", type=int, default=None, help="Worker threads (mirrors FOLLICLE_THREADS)")
    common.add_argument("--fp-tol", type=float, default=None, help="Picard tolerance, scaled by max(1, K)")
    common.add_argument("--fp-max-iter", type=int, default=None, help="Picard iteration cap")
    common.add_argument("--window-safety", type=float, default=None, help="Fraction of min(1/(2 K1), T) used as window length")
    common.add_argument("--freeze-controls", type=Path, default=None, help="CSV with t,u_1..u_n,U replacing the feedback controls")
    common.add_argument("--disable-mitosis", action="store_true", help="Test hook: mitosis factor 1 instead of 2")
    common.add_argument("--zero-loss", action="store_true", help="Test hook: no cell loss")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--log-level", default=DEFAULT_LOG_LEVEL, help="Logging level (default FOLLICLE_LOG_LEVEL or INFO)")

    run = commands.add_parser("run", parents=[common], help="Solve and write maturity series, snapshots and the manifest")
    run.add_argument("--method", choices=["char", "fv", "both"], default=None)
    run.add_argument("--resolution", type=int, default=None, help="Snapshot grid cells per side")
    run.add_argument("--dump-chains", action="store_true", help="Also write the characteristic chains behind each snapshot center")

    converge = commands.add_parser("converge", parents=[common], help="L1 errors of the finite-volume oracle against the characteristics solution")
    converge.add_argument("--resolutions", nargs="+", default=["64", "128", "256"])
    converge.add_argument("--method", choices=["char", "fv"], default="fv", help="Method compared with the characteristics reference")

    commands.add_parser("verify", parents=[common], help="Run the property suite and write verify_report.json")
    commands.add_parser("constants", parents=[common], help="Print K, K1, K2, delta, C1f, C2f")
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load(args: argparse.Namespace) -> RunConfig:
    """Run config with every CLI override applied."""
    run = load_run_config(
        args.config,
        threads=args.threads,
        fp_tol=args.fp_tol,
        fp_max_iter=args.fp_max_iter,
        window_safety=args.window_safety,
    )
    hooks = run.hooks
    if args.disable_mitosis:
        hooks = replace(hooks, disable_mitosis=True)
    if args.zero_loss:
        hooks = replace(hooks, zero_loss=True)
    run = run.with_changes(hooks=hooks)
    if args.freeze_controls is not None:
        run = run.with_changes(freeze_controls=args.freeze_controls)
    if args.seed is not None:
        run = run.with_changes(seed=args.seed, solver=run.solver.with_changes(seed=args.seed))
    if getattr(args, "method", None) and args.command == "run":
        run = run.with_changes(method=args.method)
    if getattr(args, "resolution", None):
        run = run.with_changes(output_resolution=args.resolution)
    return run


def frozen_controls(run: RunConfig) -> Optional[FrozenControls]:
    if run.freeze_controls is None:
        return None
    return FrozenControls.from_csv(run.freeze_controls, run.params.n)


def manifest_base(run: RunConfig, command: str) -> Dict[str, Any]:
    return {
        "command": command,
        "config": run.source,
        "params": run.params.to_dict(),
        "solver": run.solver.to_dict(),
        "hooks": {**run.hooks.__dict__, "freeze_controls": run.freeze_controls},
        "seed": run.seed,
        "method": run.method,
        "output_times": run.output_times,
        "output_resolution": run.output_resolution,
        "verify": run.verify.__dict__,
    }


def char_controls(result: MarchResult, times: np.ndarray) -> np.ndarray:
    controls = result.handle.controls
    n = result.trajectory.n
    return np.vstack([np.asarray(controls.u(f, times)) * np.ones_like(times) for f in range(n)] + [np.asarray(controls.U(times)) * np.ones_like(times)])


def cmd_run(run: RunConfig, out: Path, dump_chains: bool = False) -> int:
    initial = InitialData.from_specs(run.initial_data, run.params)
    frozen = frozen_controls(run)
    manifest = manifest_base(run, "run")
    written: List[Path] = []

    if run.method in ("char", "both"):
        result = march(initial, run.params, run.solver, run.hooks, frozen)
        bounds = check_bounds(result.handle, result.trajectory, result.constants, run.verify.bound_samples, seed=run.seed)
        times = result.trajectory.times
        written.append(artifacts.write_maturity_series(out / "maturity_char.csv", times, result.trajectory.values, char_controls(result, times), "char"))
        written.append(artifacts.write_frozen_controls(out / "controls_char.csv", times, char_controls(result, times)))
        for i, t in enumerate(run.output_times):
            written.append(artifacts.write_snapshot(out / f"snapshot_char_{i:03d}.csv", t, result.handle.sample_grid(t, run.output_resolution), "char"))
        if dump_chains:
            centre = 0.5
            chains = [
                result.handle.chain(f, phase, k, t, centre, centre)
                for t in run.output_times
                for f in range(run.params.n)
                for phase in (1, 2, 3)
                for k in range(1, run.params.N + 1)
            ]
            artifacts.write_chains(out / "chains.json", chains)
        manifest.update(
            constants=result.constants.to_dict(),
            windows=result.windows,
            reanchor_times=result.reanchor_times,
            quadrature=result.handle.plan.to_dict(),
            bounds=bounds.to_dict(),
        )

    if run.method in ("fv", "both"):
        fv = fv_oracle.run(run.params.T, initial, run.params, run.output_resolution, run.hooks, frozen, snapshot_times=run.output_times)
        written.append(artifacts.write_maturity_series(out / "maturity_fv.csv", fv.times, fv.maturities, fv.controls, "fv"))
        written.append(artifacts.write_frozen_controls(out / "controls_fv.csv", fv.times, fv.controls))
        for i, t in enumerate(run.output_times):
            written.append(artifacts.write_snapshot(out / f"snapshot_fv_{i:03d}.csv", t, fv.snapshots[t].components(), "fv"))
        manifest["fv"] = {"resolution": run.output_resolution, "steps": int(fv.times.size - 1), "cfl": fv_oracle.CFL}

    manifest["csv_sha256"] = artifacts.checksums(written, out)
    artifacts.write_json(out / "manifest.json", manifest)
    logger.info("📦 wrote %d CSV files and the manifest to %s", len(written), out)
    return 0


def _order(previous: Optional[Dict[str, float]], h: float, error: float, column: str = "L1_error_vs_char") -> float:
    """Observed order of ``column`` between the previous resolution and this one."""
    if previous is None or previous[column] <= 0 or error <= 0:
        return float("nan")
    return float(np.log(previous[column] / error) / np.log(previous["h"] / h))


def cmd_converge(run: RunConfig, out: Path, resolutions: List[int], method: str = "fv") -> int:
    """Errors of each resolution against the characteristics solution at every output time."""
    initial = InitialData.from_specs(run.initial_data, run.params)
    frozen = frozen_controls(run)
    reference = march(initial, run.params, run.solver, run.hooks, frozen)
    handle = reference.handle
    t0 = initial.t_anchor
    sample_times = np.union1d(np.linspace(t0, run.params.T, SAMPLE_POINTS), run.output_times)
    reference_maturities = handle.maturities(sample_times)

    rows: List[Dict[str, Any]] = []
    previous: Dict[float, Dict[str, float]] = {}
    for res in resolutions:
        h = 1.0 / res
        if method == "char":
            grids = {t: handle.sample_grid(t, res) for t in run.output_times}
            maturities = reference_maturities
        else:
            fv = fv_oracle.run(run.params.T, initial, run.params, res, run.hooks, frozen, snapshot_times=run.output_times)
            grids = {t: fv.snapshots[t].components() for t in run.output_times}
            maturities = np.vstack([np.interp(sample_times, fv.times, fv.maturities[f]) for f in range(run.params.n)])
        for t in run.output_times:
            char = handle.sample_grid(t, res)
            error = float(sum(np.sum(np.abs(grids[t][key] - char[key])) for key in char) * h * h)
            upto = sample_times <= t + 1e-14
            maturity_error = float(np.max(np.abs(maturities[:, upto] - reference_maturities[:, upto])))
            row = {
                "t": t,
                "h": h,
                "L1_error_vs_char": error,
                "maturity_error": maturity_error,
                "order_estimate": _order(previous.get(t), h, error),
                "maturity_order": _order(previous.get(t), h, maturity_error, "maturity_error"),
            }
            rows.append(row)
            previous[t] = row
            logger.info("📦 h=%.6g t=%.6g L1 error %.3e order %.3f, maturity error %.3e order %.3f", h, t, error, row["order_estimate"], maturity_error, row["maturity_order"])

    path = artifacts.write_rows(out / "convergence.csv", rows, columns=CONVERGENCE_COLUMNS)
    manifest = manifest_base(run, "converge")
    manifest.update(resolutions=resolutions, compared_method=method, constants=reference.constants.to_dict(), windows=reference.windows)
    manifest["csv_sha256"] = artifacts.checksums([path], out)
    artifacts.write_json(out / "manifest.json", manifest)
    return 0


def cmd_verify(run: RunConfig, out: Path) -> int:
    initial = InitialData.from_specs(run.initial_data, run.params)
    app = create_verify_workflow()
    state = {
        "run": run,
        "initial": initial,
        "frozen": frozen_controls(run),
        "march": None,
        "results": [],
        "passed": False,
        "report": {},
    }
    final = app.invoke(state, config={"recursion_limit": 64})
    report = dict(final["report"])
    report["manifest"] = manifest_base(run, "verify")
    artifacts.write_json(out / "verify_report.json", report)
    return 0 if final["passed"] else 1


def cmd_constants(run: RunConfig) -> int:
    initial = InitialData.from_specs(run.initial_data, run.params)
    constants = compute_constants(initial, run.params, run.solver)
    keys = ("K", "K1", "K2", "delta", "C1f", "C2f")
    print(json.dumps({key: constants.to_dict()[key] for key in keys}, indent=2, sort_keys=True))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """
    Command-line entry point.
    Returns the process exit code: 0 on success, 1 for a failed property,
    and the error's own code for configuration, assumption, convergence
    and bound failures.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        run = load(args)
        out = Path(args.out or DEFAULT_OUTPUT_DIR)
        if args.command == "run":
            return cmd_run(run, out, dump_chains=args.dump_chains)
        if args.command == "converge":
            return cmd_converge(run, out, parse_resolutions(args.resolutions), args.method)
        if args.command == "verify":
            return cmd_verify(run, out)
        return cmd_constants(run)
    except FollicleSimError as error:
        logger.error("❌ %s: %s", type(error).__name__, error)
        return exit_code_for(error)


if __name__ == "__main__":
    sys.exit(main())
