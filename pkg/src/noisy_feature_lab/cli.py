"""Command line: ``run``, ``grid`` and ``check``.

Exit codes: 0 ok, 1 configuration error, 2 divergence, 3 check failure.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .analysis import crossover_with_dominance, two_stage_accuracy_pattern
from .config import (EPSILON, ConfigError, ExperimentConfig, config_from_mapping,
                     parse_kv_text, preset_text)
from .trainer import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("noisy_feature_lab")

# flag dest -> config field
FLAG_FIELDS = {"T": "T", "eta": "eta", "m": "m", "sigma0": "sigma_0", "n_test": "n_test",
               "d": "d", "n": "n", "sigma_xi": "sigma_xi", "flip_mode": "flip_mode"}


def parse_seeds(text: str) -> list[int]:
    """``3``, ``0..7`` (inclusive) or ``1,4,9``."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ConfigError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


def parse_floats(text: str) -> list[float]:
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc
    if not vals:
        raise ConfigError("empty list")
    return vals


def _layered_values(args) -> tuple[dict, dict]:
    """Preset, then config file. Returns (config values, grid.* values)."""
    values: dict[str, str] = {}
    if args.preset:
        values.update(parse_kv_text(preset_text(args.preset), args.preset))
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        values.update(parse_kv_text(text, args.config))
    grid = {k[len("grid."):]: values.pop(k) for k in list(values) if k.startswith("grid.")}
    return values, grid


def resolve_config(args, *, allow_grid: bool = False):
    values, grid = _layered_values(args)
    if grid and not allow_grid:
        raise ConfigError("this configuration defines a sweep (grid.* keys); use the grid command")
    cfg = config_from_mapping(values)
    changes = {field: getattr(args, dest) for dest, field in FLAG_FIELDS.items()
               if getattr(args, dest, None) is not None}
    if getattr(args, "mu", None) is not None and not allow_grid:
        changes["mu_mag"] = args.mu
    if getattr(args, "tau", None) is not None and not allow_grid:
        changes["tau_plus"] = changes["tau_minus"] = args.tau
    cfg = config_from_mapping(changes, base=cfg) if changes else cfg
    if args.seeds:
        seeds = parse_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = grid.get("seeds") and parse_seeds(grid["seeds"]) or None
    return cfg, seeds, grid


def _common(p: argparse.ArgumentParser, list_valued: bool = False) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", help="fig1-noisy, fig1-clean or fig3-grid")
    p.add_argument("--seed", type=int, help="one seed for data, init and test streams")
    p.add_argument("--seeds", help="seed range A..B (inclusive) or comma list")
    p.add_argument("--T", type=int)
    p.add_argument("--eta", type=float)
    if list_valued:
        p.add_argument("--mu", help="comma list of signal magnitudes")
        p.add_argument("--tau", help="comma list of flip probabilities (both classes)")
    else:
        p.add_argument("--mu", type=float, help="signal magnitude")
        p.add_argument("--tau", type=float, help="flip probability for both classes")
    p.add_argument("--m", type=int)
    p.add_argument("--sigma0", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--sigma-xi", dest="sigma_xi", type=float)
    p.add_argument("--flip-mode", dest="flip_mode", choices=("bernoulli", "exact"))
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--plot", action="store_true", help="write SVG figures")
    p.add_argument("--deterministic", action="store_true",
                   help="omit timestamps and wall time so outputs are byte-stable")
    p.add_argument("--out", default="out")
    p.add_argument("--epsilon", type=float, default=0.05, help="training-loss target")
    p.add_argument("--t-star-epsilon", type=float, default=EPSILON)
    p.add_argument("--C", type=float, default=1.0, help="constant for the scale conditions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisy-feature-lab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration and run every check")
    _common(run)
    run.set_defaults(func=cmd_run)

    grid = sub.add_parser("grid", help="sweep signal strength and flip probability")
    _common(grid, list_valued=True)
    grid.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    grid.set_defaults(func=cmd_grid)

    check = sub.add_parser("check", help="re-verify a stored run")
    check.add_argument("record", help="run.json or its directory")
    check.set_defaults(func=cmd_check)
    return parser


# --------------------------------------------------------------------------
# run


def _print_run(result, root) -> None:
    r = result.reports
    st = r["stage_obj"]
    es = r["early_stopping"]
    print(f"[{root}]")
    print(f"  n*SNR^2 = {r['condition'].n_snr2:.4g}   T1 estimate = {r['condition'].t1_estimate:.4g}")
    print(f"  noisy samples: {result.traj.dataset.noisy_idx.size} / {result.cfg.n}")
    print(f"  Stage-I window: {st.t1_window}   crossover: {r['crossover'].t}"
          f"   tau' = {r['crossover'].tau_prime:.3f}")
    if r["selection"] is not None:
        s = r["selection"]
        print(f"  selection at t={s.t}: accuracy {s.accuracy:.3f} "
              f"(clean {s.clean_below}/{s.clean_below + s.clean_above} below log 2, "
              f"noisy {s.noisy_above}/{s.noisy_below + s.noisy_above} above)")
    if es.get("status") == "ok":
        e, f = es["early"], es["final"]
        print(f"  test error: early {e.estimate:.4f} [{e.interval[0]:.4f}, {e.interval[1]:.4f}]"
              f"  final {f.estimate:.4f} [{f.interval[0]:.4f}, {f.interval[1]:.4f}]  -> {es['verdict']}")
    else:
        print(f"  early stopping: {es.get('status')}")
    dec = r["decomposition"]
    print(f"  decomposition: max disagreement {dec['max_disagreement']:.2e}, "
          f"max residual {dec['max_residual']:.2e}")


def cmd_run(args) -> int:
    from .pipeline import run_experiment, write_run
    cfg, seeds, _ = resolve_config(args)
    for seed in seeds if seeds is not None else [None]:
        c = cfg.with_seed(seed) if seed is not None else cfg
        result = run_experiment(c, epsilon=args.epsilon, C=args.C, t_star_epsilon=args.t_star_epsilon)
        root = write_run(result, args.out, plot=args.plot, deterministic=args.deterministic,
                         epsilon=args.epsilon, C=args.C)
        _print_run(result, root)
    return EXIT_OK


# --------------------------------------------------------------------------
# grid

SUMMARY_COLUMNS = ("mu", "tau", "seed", "status", "n_noisy", "t1_start", "t1_end", "crossover_t",
                   "tau_prime", "early_test_error", "final_test_error", "selection_accuracy",
                   "acc_noisy_final", "acc_clean_final", "two_stage_pattern", "crossover_dominance")


def summary_from_result(result) -> dict:
    row = {**result.summary_row(), "status": "ok"}
    row["two_stage_pattern"] = two_stage_accuracy_pattern(result.traj)["holds"]
    row["crossover_dominance"] = crossover_with_dominance(result.traj, result.stage)["holds"]
    return row


def run_cell(cfg: ExperimentConfig, epsilon: float, plot_dir: str | None, deterministic: bool) -> dict:
    from .pipeline import run_experiment
    key = {"mu": cfg.mu_mag, "tau": cfg.tau_plus, "seed": cfg.seed_data}
    try:
        result = run_experiment(cfg, epsilon=epsilon)
    except DivergenceError as exc:
        return {**key, "status": f"diverged at iteration {exc.iteration}"}
    except Exception as exc:  # recorded per cell, never fatal for the sweep
        return {**key, "status": f"error: {type(exc).__name__}: {exc}"}
    row = summary_from_result(result)
    if plot_dir:
        from .plotting import plot_dynamics
        plot_dynamics(result.traj.metrics(), Path(plot_dir) / f"mu{cfg.mu_mag:g}_tau{cfg.tau_plus:g}_seed{cfg.seed_data}.svg",
                      stage_end=result.stage.t1_end, crossover=result.reports["crossover"].t,
                      T=cfg.T, title=f"mu={cfg.mu_mag:g}, tau={cfg.tau_plus:g}, seed={cfg.seed_data}",
                      deterministic=deterministic)
    return row


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summary(rows: list[dict], path) -> None:
    rows = sorted(rows, key=lambda r: (r["mu"], r["tau"], r["seed"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in SUMMARY_COLUMNS])


def grid_cells(cfg: ExperimentConfig, mus, taus, seeds) -> list[ExperimentConfig]:
    return [cfg.replace(mu_mag=mu, tau_plus=tau, tau_minus=tau).with_seed(seed)
            for mu, tau, seed in itertools.product(mus, taus, seeds)]


def run_grid(cfg, mus, taus, seeds, *, out, jobs=1, epsilon=0.05, plot=False, deterministic=False):
    cells = grid_cells(cfg, mus, taus, seeds)
    root = Path(out) / f"grid-{cfg.config_hash()}"
    root.mkdir(parents=True, exist_ok=True)
    plot_dir = None
    if plot:
        plot_dir = root / "plots"
        plot_dir.mkdir(exist_ok=True)
    args = [(c, epsilon, str(plot_dir) if plot_dir else None, deterministic) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_cell, *zip(*args)))
    else:
        rows = [run_cell(*a) for a in args]
    write_summary(rows, root / "summary.csv")
    if plot:
        from .plotting import plot_grid_summary
        plot_grid_summary([r for r in rows if r["status"] == "ok"], root / "plots" / "summary.svg",
                          deterministic=deterministic)
    return root, rows


def cmd_grid(args) -> int:
    cfg, seeds, grid = resolve_config(args, allow_grid=True)
    mus = parse_floats(args.mu) if args.mu else parse_floats(grid.get("mu", "15,20,25"))
    taus = parse_floats(args.tau) if args.tau else parse_floats(grid.get("tau", "0.1,0.15,0.2,0.25"))
    seeds = seeds if seeds is not None else list(range(8))
    for t in taus:
        ExperimentConfig(tau_plus=t, tau_minus=t)  # validates before any work
    root, rows = run_grid(cfg, mus, taus, seeds, out=args.out, jobs=args.jobs, epsilon=args.epsilon,
                          plot=args.plot, deterministic=args.deterministic)
    ok = [r for r in rows if r["status"] == "ok"]
    print(f"{len(ok)}/{len(rows)} cells ok; summary at {root / 'summary.csv'}")
    for r in rows:
        if r["status"] != "ok":
            print(f"  mu={r['mu']:g} tau={r['tau']:g} seed={r['seed']}: {r['status']}")
    if ok:
        return EXIT_OK
    return EXIT_DIVERGENCE if all(r["status"].startswith("diverged") for r in rows) else EXIT_CONFIG


# --------------------------------------------------------------------------
# check


def cmd_check(args) -> int:
    from .checks import check_run
    results = check_run(args.record)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
