"""``crowd-scaling`` command line.

Exit codes: 0 success, 1 input error, 2 empty after filtering, 3 fit failure,
4 simulation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import (
    LoessRegressor,
    NoBreakError,
    SegmentedFit,
    SegmentedRegressor,
    fit_power_law,
)
from .ingestion import (
    EmptyAfterFilteringError,
    FilterConfig,
    MissingHeaderError,
    RejectedRow,
    apply_filters,
    load_snapshot,
    load_snapshot_dir,
    save_snapshot_dir,
    write_rejects,
)
from .metrics import SelectionModel, calibrate, fmax_array, metric_table, scaled_entropies
from .simulator import (
    SimConfig,
    SyntheticParams,
    VolatilityConfig,
    entropy_under_volatility,
    generate_synthetic_universe,
    simulate_universe,
)
from .universe import EmptyInputError, UniverseSnapshot

log = logging.getLogger("crowd_scaling")

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_FIT, EXIT_SIM = 0, 1, 2, 3, 4
MAX_FAILURE_RATE = 0.01


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# output helpers


class Run:
    """Tracks written files and writes the manifest last."""

    def __init__(self, subcommand, out_dir, inputs=(), configs=()):
        self.subcommand = subcommand
        self.out_dir = Path(out_dir)
        self.inputs = [str(p) for p in inputs if p is not None]
        self.configs = [str(p) for p in configs if p is not None]
        self.outputs: list[str] = []
        self.started = time.monotonic()
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        p = self.out_dir / name
        self.outputs.append(p.name)
        return p

    def json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2)
            fh.write("\n")

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])

    def finish(self, manifest_name="manifest.json"):
        manifest = {
            "subcommand": self.subcommand,
            "inputs": self.inputs,
            "configs": self.configs,
            "config_sha256": {p: _file_sha256(p) for p in self.configs},
            "output_dir": str(self.out_dir),
            "outputs": sorted(set(self.outputs)),
            "version": __version__,
            "wall_clock_seconds": round(time.monotonic() - self.started, 3),
        }
        with open(self.out_dir / manifest_name, "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return v


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(EXIT_INPUT, f"cannot read {path}: {exc}") from exc


def _loess_table(x, y, grid, span, iters):
    est = LoessRegressor(span=span, robustness_iters=iters).fit(x, y)
    return est.predict(grid)


# ---------------------------------------------------------------------------
# analyze


def _fit_segmented(snapshot: UniverseSnapshot, n_init: int) -> SegmentedFit:
    u = np.log10(snapshot.fund_positions)
    y = np.log10(snapshot.fund_value)
    try:
        return SegmentedRegressor(n_init=n_init).fit(u, y).fit_
    except (NoBreakError, ValueError) as exc:
        raise CommandError(EXIT_FIT, f"segmented fit of W vs n failed: {exc}") from exc


def cmd_analyze(args) -> int:
    run = Run("analyze", args.out, [args.securities, args.holdings], [args.filters])
    try:
        config = FilterConfig.from_json(args.filters) if args.filters else FilterConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise CommandError(EXIT_INPUT, f"bad filter config: {exc}") from exc
    rejects_path = run.path("rejects.csv")
    try:
        snap = load_snapshot(args.securities, args.holdings, rejects_path)
    except (MissingHeaderError, EmptyInputError, OSError, ValueError) as exc:
        write_rejects([RejectedRow(1, str(exc))], rejects_path)
        raise CommandError(EXIT_INPUT, str(exc)) from exc
    if snap.rejected and args.strict:
        raise CommandError(EXIT_INPUT, f"{len(snap.rejected)} malformed row(s); see {rejects_path}")

    try:
        filtered, report = apply_filters(snap, config)
    except EmptyAfterFilteringError as exc:
        report_path = run.path("filter_report.json")
        exc.report.to_json(report_path)
        raise CommandError(EXIT_EMPTY, "empty after filtering") from exc
    report.to_json(run.path("filter_report.json"))
    run.json("filters.json", config.to_dict())
    save_snapshot_dir(filtered, args.out)
    run.outputs += ["securities.csv", "holdings.csv"]

    seg = _fit_segmented(filtered, args.n_init)
    run.json("segmented_fit.json", seg.to_dict())

    m = filtered.security_investors
    held = m > 0
    try:
        pl = fit_power_law(
            np.column_stack([m[held], filtered.capitalization[held]]), x_min=args.m_threshold
        )
    except ValueError as exc:
        raise CommandError(EXIT_FIT, f"power-law fit of C vs m failed: {exc}") from exc
    run.json("power_law_fit.json", pl.to_dict())

    log_n = np.log10(filtered.fund_positions)
    log_w = np.log10(filtered.fund_value)
    S = scaled_entropies(filtered)
    f = fmax_array(filtered)
    run.csv("entropy.csv", ("fund_id", "n_i", "value"), metric_table(filtered, S))
    run.csv("fmax.csv", ("fund_id", "n_i", "value"), metric_table(filtered, f))

    try:
        grid_n = np.linspace(log_n.min(), log_n.max(), args.n_eval)
        run.csv(
            "loess_w_vs_n.csv",
            ("log10_n", "log10_W"),
            zip(grid_n, _loess_table(log_n, log_w, grid_n, args.span, args.robustness_iters)),
        )
        run.csv(
            "loess_entropy_vs_n.csv",
            ("log10_n", "S"),
            zip(grid_n, _loess_table(log_n, S, grid_n, args.span, args.robustness_iters)),
        )
        log_m, log_c = np.log10(m[held]), np.log10(filtered.capitalization[held])
        grid_m = np.linspace(log_m.min(), log_m.max(), args.n_eval)
        run.csv(
            "loess_c_vs_m.csv",
            ("log10_m", "log10_C"),
            zip(grid_m, _loess_table(log_m, log_c, grid_m, args.span, args.robustness_iters)),
        )
    except ValueError as exc:
        raise CommandError(EXIT_FIT, f"LOESS fit failed: {exc}") from exc

    print(
        f"funds={filtered.n_funds} securities={filtered.M} "
        f"mu_below={seg.mu_below:.3f} mu_above={seg.mu_above:.3f} n_star={seg.n_star:.1f} "
        f"gamma={pl.exponent:.3f}"
    )
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate


def cmd_calibrate(args) -> int:
    snap_dir = Path(args.snapshot)
    out = Path(args.out)
    try:
        snap = load_snapshot_dir(snap_dir)
    except (MissingHeaderError, EmptyInputError, OSError, ValueError) as exc:
        raise CommandError(EXIT_INPUT, str(exc)) from exc
    seg_data = _read_json(snap_dir / "segmented_fit.json")
    seg = SegmentedFit.from_dict(seg_data)
    if not seg.converged:
        raise CommandError(EXIT_FIT, "segmented fit did not converge; cannot calibrate")
    min_positions = args.min_positions
    if min_positions is None:
        filt = snap_dir / "filters.json"
        min_positions = _read_json(filt)["min_positions"] if filt.exists() else 5
    model = calibrate(snap, seg, min_positions=min_positions)
    run = Run("calibrate", out.parent, [snap_dir / "securities.csv", snap_dir / "holdings.csv"])
    model.to_json(run.path(out.name))
    for b in model.bins:
        if b.count and b.hi > model.n_star and not b.calibrated:
            print(f"uncalibrated bin [{b.lo}, {b.hi}): {b.count} fund(s)", file=sys.stderr)
    run.finish(out.stem + ".manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _comparison(x_emp, y_emp, x_sim, y_sim, span, iters, n_eval):
    lo, hi = x_sim.min(), x_sim.max()
    if x_emp is not None:
        lo, hi = min(lo, x_emp.min()), max(hi, x_emp.max())
    grid = np.linspace(lo, hi, n_eval)
    sim = _loess_table(x_sim, y_sim, grid, span, iters)
    emp = (
        _loess_table(x_emp, y_emp, grid, span, iters)
        if x_emp is not None
        else np.full(grid.size, np.nan)
    )
    return zip(10.0**grid, emp, sim)


def cmd_simulate(args) -> int:
    model = SelectionModel.from_dict(_read_json(args.model))
    cfg = _read_json(args.config)
    empirical = None
    if cfg.get("snapshot"):
        try:
            empirical = load_snapshot_dir(cfg["snapshot"])
        except (MissingHeaderError, EmptyInputError, OSError, ValueError) as exc:
            raise CommandError(EXIT_INPUT, str(exc)) from exc
    sizes = cfg.get("fund_sizes")
    caps = cfg.get("security_caps")
    ids = cfg.get("security_ids")
    if empirical is not None:
        sizes = sizes if sizes is not None else empirical.fund_positions
        if caps is None:
            caps, ids = empirical.capitalization, empirical.security_ids.tolist()
    if sizes is None or caps is None:
        raise CommandError(EXIT_INPUT, "config needs fund_sizes and security_caps, or a snapshot")
    try:
        config = SimConfig(
            seed=args.seed,
            model=model,
            fund_sizes=sizes,
            security_caps=caps,
            max_retries=cfg.get("max_retries", 1000),
            security_ids=ids,
        )
    except ValueError as exc:
        raise CommandError(EXIT_INPUT, f"bad simulation config: {exc}") from exc

    run = Run("simulate", args.out, [cfg.get("snapshot")], [args.model, args.config])
    sim = simulate_universe(config, workers=args.workers)
    run.json("provenance.json", sim.provenance())
    if sim.snapshot is not None:
        save_snapshot_dir(sim.snapshot, args.out)
        run.outputs += ["securities.csv", "holdings.csv"]
        s = sim.snapshot
        xe = ye = xm = ym = None
        if empirical is not None:
            xe, ye = np.log10(empirical.fund_positions), np.log10(empirical.fund_value)
            me = empirical.security_investors
            xm, ym = np.log10(me[me > 0]), np.log10(empirical.capitalization[me > 0])
        try:
            run.csv(
                "comparison_w_vs_n.csv",
                ("n", "loess_empirical", "loess_simulated"),
                _comparison(
                    xe, ye, np.log10(s.fund_positions), np.log10(s.fund_value),
                    args.span, args.robustness_iters, args.n_eval,
                ),
            )
            ms = s.security_investors
            run.csv(
                "comparison_c_vs_m.csv",
                ("m", "loess_empirical", "loess_simulated"),
                _comparison(
                    xm, ym, np.log10(ms[ms > 0]), np.log10(s.capitalization[ms > 0]),
                    args.span, args.robustness_iters, args.n_eval,
                ),
            )
        except ValueError as exc:
            log.warning("comparison tables skipped: %s", exc)
    run.finish()

    if sim.failure_rate > MAX_FAILURE_RATE:
        reasons: dict[str, int] = {}
        for f in sim.failures:
            reasons[f["reason"]] = reasons.get(f["reason"], 0) + 1
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(reasons.items()))
        raise CommandError(
            EXIT_SIM, f"{len(sim.failures)} fund(s) failed ({sim.failure_rate:.1%}): {detail}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entropy-mc, generate


def _parse_grid(text: str) -> list[int]:
    try:
        grid = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise CommandError(EXIT_INPUT, f"bad --n-grid {text!r}: {exc}") from exc
    if not grid or min(grid) < 1:
        raise CommandError(EXIT_INPUT, "--n-grid needs positive integers")
    return grid


def cmd_entropy_mc(args) -> int:
    try:
        vol = VolatilityConfig.from_json(args.vol) if args.vol else VolatilityConfig()
    except (OSError, TypeError, ValueError) as exc:
        raise CommandError(EXIT_INPUT, f"bad volatility config: {exc}") from exc
    curve = entropy_under_volatility(_parse_grid(args.n_grid), vol, args.replicas, args.seed)
    out = Path(args.out)
    run = Run("entropy-mc", out.parent, configs=[args.vol])
    run.csv(out.name, ("n", "mean_entropy", "stderr", "replicas"), curve.rows())
    run.finish(out.stem + ".manifest.json")
    return EXIT_OK


def cmd_generate(args) -> int:
    data = _read_json(args.params)
    data["seed"] = args.seed
    try:
        params = SyntheticParams.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(EXIT_INPUT, f"bad generator params: {exc}") from exc
    run = Run("generate", args.out, configs=[args.params])
    sim = generate_synthetic_universe(params, workers=args.workers)
    run.json("provenance.json", sim.provenance())
    run.json("ground_truth.json", sim.ground_truth)
    if sim.snapshot is not None:
        save_snapshot_dir(sim.snapshot, args.out)
        run.outputs += ["securities.csv", "holdings.csv"]
    run.finish()
    if sim.failure_rate > MAX_FAILURE_RATE:
        raise CommandError(EXIT_SIM, f"{len(sim.failures)} synthetic fund(s) failed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_loess_args(p):
    p.add_argument("--span", type=float, default=0.3)
    p.add_argument("--robustness-iters", type=int, default=3)
    p.add_argument("--n-eval", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowd-scaling", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="filter a snapshot and fit the scaling laws")
    p.add_argument("--securities", required=True)
    p.add_argument("--holdings", required=True)
    p.add_argument("--filters", help="FilterConfig JSON (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--m-threshold", type=float, default=100.0)
    p.add_argument("--n-init", type=int, default=5, help="break-point starts for the segmented fit")
    p.add_argument("--strict", action="store_true", help="exit 1 if any row is rejected")
    _add_loess_args(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calibrate", help="fit the per-bin selection model")
    p.add_argument("--snapshot", required=True, help="output directory of analyze")
    p.add_argument("--out", required=True)
    p.add_argument("--min-positions", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="simulate portfolios from a selection model")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_loess_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("entropy-mc", help="entropy of equal-weight portfolios after price moves")
    p.add_argument("--vol")
    p.add_argument("--n-grid", required=True)
    p.add_argument("--replicas", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_entropy_mc)

    p = sub.add_parser("generate", help="write a synthetic snapshot with known parameters")
    p.add_argument("--params", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"crowd-scaling {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
