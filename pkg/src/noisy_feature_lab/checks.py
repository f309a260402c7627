"""Re-verify a stored run against a deterministic replay."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import config_from_mapping
from .datagen import make_dataset, read_dataset
from .decomposition import (BasisSolver, reconstruct, read_coeffs_csv, solve_coeffs,
                            structure_violations)
from .model import batch_gradient, empirical_loss, read_weights
from .trainer import train, trajectory_csv_text

DISAGREEMENT_TOL = 1e-6
RESIDUAL_TOL = 1e-8
FD_STEP = 1e-6
FD_RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def central_difference(loss, w: np.ndarray, index: tuple, h: float = FD_STEP) -> float:
    wp, wm = w.copy(), w.copy()
    wp[index] += h
    wm[index] -= h
    return (loss(wp) - loss(wm)) / (2 * h)


def kink_free_coordinates(w, ds, rng, count: int, h: float = FD_STEP, guard: float = 10.0):
    """Random (j, r, k) whose +-h perturbation cannot move any pre-activation
    across zero (with a safety factor ``guard``)."""
    sig = np.multiply.outer(w @ ds.mu, ds.y.astype(float))
    noi = (w.reshape(-1, w.shape[2]) @ ds.noise.T).reshape(w.shape[0], w.shape[1], ds.n)
    picks = []
    for _ in range(50 * count):
        j, r, k = rng.integers(0, 2), rng.integers(0, w.shape[1]), rng.integers(0, w.shape[2])
        noise_safe = np.all(np.abs(noi[j, r]) > guard * h * np.abs(ds.noise[:, k]))
        signal_safe = np.all(np.abs(sig[j, r]) > guard * h * abs(ds.mu[k]))
        if noise_safe and signal_safe:
            picks.append((int(j), int(r), int(k)))
            if len(picks) == count:
                break
    return picks


def gradient_spot_check(w, ds, count: int = 8, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    g = batch_gradient(w, ds)
    worst = 0.0
    coords = kink_free_coordinates(w, ds, rng, count)
    for idx in coords:
        fd = central_difference(lambda v: empirical_loss(v, ds), w, idx)
        err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-9)
        worst = max(worst, err)
    ok = bool(coords) and worst < FD_RTOL
    return CheckResult("gradient_finite_difference", ok,
                       f"{len(coords)} coordinates, worst relative error {worst:.2e}")


def _guard(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (OSError, ValueError, KeyError) as exc:
                return CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        return inner
    return wrap


def check_run(record_path) -> list[CheckResult]:
    record_path = Path(record_path)
    if record_path.is_dir():
        record_path = record_path / "run.json"
    try:
        record = json.loads(record_path.read_text())
        cfg = config_from_mapping(record["config"])
    except (OSError, ValueError, KeyError) as exc:
        return [CheckResult("run_record", False, f"{type(exc).__name__}: {exc}")]
    root = record_path.parent
    files = record["files"]
    results = [CheckResult("run_record", True, str(record_path))]

    missing = [files[k] for k in ("trajectory", "coefficients", "dataset", "weights")
               if not (root / files[k]).exists()]
    missing += [p for p in files["reports"].values() if not (root / p).exists()]
    results.append(CheckResult("files_present", not missing, ", ".join(missing)))

    W, traj = train(cfg)
    ds = traj.dataset

    @_guard("dataset_replay")
    def dataset_replay():
        stored = read_dataset(root / files["dataset"])
        fresh = make_dataset(cfg)
        same = (np.array_equal(stored.noise, fresh.noise) and np.array_equal(stored.y, fresh.y)
                and np.array_equal(stored.y_obs, fresh.y_obs) and np.array_equal(stored.mu, fresh.mu))
        return CheckResult("dataset_replay", same)

    @_guard("trajectory_replay")
    def trajectory_replay():
        same = (root / files["trajectory"]).read_text() == trajectory_csv_text(traj)
        return CheckResult("trajectory_replay", same)

    @_guard("final_weights_replay")
    def weights_replay():
        stored = read_weights(root / files["weights"])
        same = np.array_equal(stored.w, W.w) and np.array_equal(stored.w0, W.w0)
        return CheckResult("final_weights_replay", same)

    results += [dataset_replay(), trajectory_replay(), weights_replay()]

    try:
        stored = read_coeffs_csv(root / files["coefficients"])
    except (OSError, ValueError) as exc:
        results.append(CheckResult("coefficients_readable", False, f"{type(exc).__name__}: {exc}"))
        results.append(gradient_spot_check(W.w, ds))
        return results

    viol = structure_violations(stored, ds.y_obs)
    bad = {k: v for k, v in viol.items() if v}
    results.append(CheckResult("coefficient_signs_and_support",
                               not any(bad.get(k) for k in ("rho_bar_negative", "rho_under_positive",
                                                            "rho_bar_off_support", "rho_under_off_support",
                                                            "nonzero_at_start")),
                               str(bad) if bad else ""))
    results.append(CheckResult("coefficient_monotonicity",
                               not (viol["rho_bar_decreasing"] or viol["rho_under_increasing"]),
                               str(bad) if bad else ""))

    solver = BasisSolver(ds.mu, ds.noise)
    worst_dis, worst_res, missing_t = 0.0, 0.0, []
    for t in stored.ts:
        if int(t) not in traj.snapshots:
            missing_t.append(int(t))
            continue
        live = traj.snapshots[int(t)]
        tab = stored.at(t)
        g_hat, r_hat = solve_coeffs(live, traj.w0, ds.mu, ds.noise, solver)
        worst_dis = max(worst_dis, float(np.abs(g_hat - tab.gamma).max()),
                        float(np.abs(r_hat - tab.rho).max()))
        _, res = reconstruct(traj.w0, tab, ds.mu, ds.noise, live)
        worst_res = max(worst_res, res)
    results.append(CheckResult("tracker_vs_solver", worst_dis < DISAGREEMENT_TOL and not missing_t,
                               f"max disagreement {worst_dis:.2e}"
                               + (f"; no live snapshot at t={missing_t}" if missing_t else "")))
    results.append(CheckResult("reconstruction_residual", worst_res < RESIDUAL_TOL,
                               f"max relative residual {worst_res:.2e}"))
    results.append(gradient_spot_check(W.w, ds))
    return results
