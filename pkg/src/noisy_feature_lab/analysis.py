"""Empirical checkers for the two-stage picture.

Every function here is a pure function of recorded run data (a
:class:`~noisy_feature_lab.trainer.Trajectory`, its coefficient history, or
weight snapshots) and returns plain dataclasses that serialize to JSON.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .config import derive_scales
from .datagen import TestSampler
from .model import forward_batch

SCHEMA_VERSION = 1
LOG2 = math.log(2.0)
Z95 = 1.959963984540054


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) else v
    return obj


def _longest_run(mask) -> tuple[int, int] | None:
    best, start = None, None
    for k, ok in enumerate(list(mask) + [False]):
        if ok and start is None:
            start = k
        elif not ok and start is not None:
            if best is None or (k - 1 - start) > (best[1] - best[0]):
                best = (start, k - 1)
            start = None
    return best


# --------------------------------------------------------------------------
# stages


@dataclass
class StageReport:
    t1_window: tuple[int, int] | None
    clean_fit: np.ndarray
    noisy_antifit: np.ndarray
    gamma_dominance: np.ndarray
    predicate: np.ndarray
    crossover_t: int | None = None
    t1_estimate: float = math.nan
    schema_version: int = SCHEMA_VERSION

    @property
    def t1_end(self) -> int | None:
        return None if self.t1_window is None else self.t1_window[1]


def stage1_trace(margins, clean_idx, noisy_idx, gamma, rho_bar):
    """Per-iteration truth of the three Stage-I clauses.

    gamma is (k, 2, m) and rho_bar (k, 2, m, n). Because rho_bar is zero off
    the observed-label bank, max_i rho_bar[y~_i, r, i] = max over (j, i).
    """
    clean_fit = (margins[:, clean_idx] >= 0).all(axis=1)
    noisy_antifit = (margins[:, noisy_idx] <= 0).all(axis=1)
    dom = (gamma.min(axis=1) > rho_bar.max(axis=(1, 3))).all(axis=1)
    return clean_fit, noisy_antifit, dom


def detect_stage1(traj, coeffs=None) -> StageReport:
    """Longest window of iterations where the Stage-I predicate holds.

    Clauses: every clean margin >= 0, every noisy margin <= 0, and
    gamma_{j,r} > rho_bar_{y~_i,r,i} for all j, r, i (strict, so all-zero
    coefficients at t = 0 fail). Ties between equally long windows go to the
    earliest.
    """
    co = coeffs if coeffs is not None else traj.coeffs
    ds = traj.dataset
    if list(co.ts) != list(traj.t):
        raise ValueError("coefficient history must cover the trajectory iterations")
    clean_fit, noisy_antifit, dom = stage1_trace(
        traj.margins, ds.clean_idx, ds.noisy_idx, co.gamma, co.rho_bar)
    pred = clean_fit & noisy_antifit & dom
    window = _longest_run(pred)
    if window is not None:
        window = (int(traj.t[window[0]]), int(traj.t[window[1]]))
    return StageReport(
        t1_window=window,
        clean_fit=clean_fit,
        noisy_antifit=noisy_antifit,
        gamma_dominance=dom,
        predicate=pred,
        crossover_t=detect_crossover(co, ds).t,
        t1_estimate=derive_scales(traj.cfg).t1_estimate,
    )


@dataclass
class Crossover:
    t: int | None
    count_final: int
    tau_prime: float


def crossover_mask(co, ds) -> np.ndarray:
    """(k, |S_f|) truth of mean_r rho_bar[y~_i] > mean_r gamma[-y~_i]."""
    noisy = ds.noisy_idx
    if noisy.size == 0:
        return np.zeros((len(co.ts), 0), dtype=bool)
    jb = np.where(ds.y_obs[noisy] == 1, 0, 1)
    # advanced indices split by a slice put the sample axis first: (|S_f|, k, m)
    own = co.rho_bar[:, jb, :, noisy].mean(axis=2).T
    other = co.gamma[:, 1 - jb, :].mean(axis=2)  # (k, |S_f|)
    return own > other


def detect_crossover(co, ds) -> Crossover:
    mask = crossover_mask(co, ds)
    if mask.shape[1] == 0:
        return Crossover(None, 0, 0.0)
    hit = np.flatnonzero(mask.any(axis=1))
    count = int(mask[-1].sum())
    return Crossover(int(co.ts[hit[0]]) if hit.size else None, count, count / ds.n)


# --------------------------------------------------------------------------
# sample selection


@dataclass
class SelectionReport:
    threshold: float
    losses: np.ndarray
    clean_below: int
    clean_above: int
    noisy_below: int
    noisy_above: int
    accuracy: float
    precision: float
    recall: float
    near_threshold: int
    t: int | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def n(self) -> int:
        return self.clean_below + self.clean_above + self.noisy_below + self.noisy_above


def small_loss_select(losses, clean_idx, noisy_idx, threshold: float = LOG2,
                      t: int | None = None, near: float = 1e-3) -> SelectionReport:
    """Predict clean iff loss <= threshold and score against the true split."""
    losses = np.asarray(losses, dtype=float)
    below = losses <= threshold
    cb = int(below[clean_idx].sum())
    ca = int(len(clean_idx) - cb)
    nb = int(below[noisy_idx].sum())
    na = int(len(noisy_idx) - nb)
    total = cb + ca + nb + na
    return SelectionReport(
        threshold=threshold,
        losses=losses,
        clean_below=cb,
        clean_above=ca,
        noisy_below=nb,
        noisy_above=na,
        accuracy=(cb + na) / total if total else math.nan,
        precision=cb / (cb + nb) if cb + nb else math.nan,
        recall=cb / (cb + ca) if cb + ca else math.nan,
        near_threshold=int((np.abs(losses - threshold) <= near * abs(threshold)).sum()),
        t=t,
    )


# --------------------------------------------------------------------------
# test error


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n <= 0:
        return (0.0, 1.0)
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return (lo, hi)


@dataclass
class GeneralizationReport:
    estimate: float
    errors: int
    count: int
    interval: tuple[float, float]
    t: int | None = None
    lower_bound: float = math.nan        # 0.5 * min(tau+, tau-)
    above_lower_bound: bool | None = None
    bounds: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def half_width(self) -> float:
        return (self.interval[1] - self.interval[0]) / 2


def estimate_test_error(W, sampler: TestSampler, count: int, t: int | None = None,
                        cfg=None) -> GeneralizationReport:
    """Monte-Carlo 0-1 error, P(y f < 0); f = 0 counts as correct."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mu = sampler.dataset.mu
    errors = 0
    for ys, xis in sampler.shards(count):
        f = forward_batch(W, np.multiply.outer(ys.astype(float), mu), xis)
        errors += int((ys * f < 0).sum())
    est = errors / count
    rep = GeneralizationReport(estimate=est, errors=errors, count=count,
                               interval=wilson_interval(errors, count), t=t)
    if cfg is not None:
        lb = 0.5 * min(cfg.tau_plus, cfg.tau_minus)
        rep.lower_bound = lb
        rep.above_lower_bound = est >= lb
        # exponential bounds carry unspecified constants; report their ingredients only
        rep.bounds = {
            "d_over_n": cfg.d / cfg.n,
            "n_mu4_over_sigma4_d": cfg.n * cfg.mu_mag**4 / (cfg.sigma_xi**4 * cfg.d),
        }
    return rep


def early_stopping_compare(traj, snapshots: dict, sampler: TestSampler, count: int,
                           stage: StageReport | None = None) -> dict:
    """Test error at the Stage-I window end against the final iterate."""
    stage = stage or detect_stage1(traj)
    if stage.t1_end is None:
        return {"status": "no Stage-I window detected", "schema_version": SCHEMA_VERSION}
    if not snapshots:
        raise ValueError("no weight snapshots available")
    target = stage.t1_end
    t_early = min(snapshots, key=lambda s: (abs(s - target), s))
    t_final = max(snapshots)
    early = estimate_test_error(snapshots[t_early], sampler, count, t_early, traj.cfg)
    final = estimate_test_error(snapshots[t_final], sampler, count, t_final, traj.cfg)
    disjoint = early.interval[1] < final.interval[0] or final.interval[1] < early.interval[0]
    if disjoint:
        verdict = "improvement" if early.estimate < final.estimate else "harm"
    else:
        verdict = "no-harm"
    return {
        "status": "ok",
        "stage1_end": target,
        "early_t": t_early,
        "snapshot_offset": t_early - target,
        "early": early,
        "final": final,
        "intervals_disjoint": disjoint,
        "improvement": disjoint and early.estimate < final.estimate,
        "verdict": verdict,
        "schema_version": SCHEMA_VERSION,
    }


def loss_convergence_find(traj, epsilon: float) -> int | None:
    """First iteration with training loss <= epsilon."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    hit = np.flatnonzero(traj.train_loss <= epsilon)
    return int(traj.t[hit[0]]) if hit.size else None


# --------------------------------------------------------------------------
# noiseless regime


def noiseless_diagnostics(traj, coeffs=None, band: float = 10.0) -> dict:
    """Loss-derivative balance, coefficient gap and signal/noise ratio traces.

    Only defined for runs without label noise.
    """
    if not traj.cfg.noiseless or traj.dataset.noisy_idx.size:
        raise ValueError("noiseless diagnostics need a run with tau_plus = tau_minus = 0")
    co = coeffs if coeffs is not None else traj.coeffs
    ds = traj.dataset
    a = np.abs(traj.lprime)
    ratio = a.max(axis=1) / a.min(axis=1)

    jb = np.where(ds.y == 1, 0, 1)
    idx = np.arange(ds.n)
    own_rho = co.rho_bar[:, jb, :, idx]          # (n, k, m)
    own_rho = np.moveaxis(own_rho, 0, 1).mean(axis=2)  # (k, n)
    own_gamma = co.gamma[:, jb, :].mean(axis=2)  # (k, n)
    q = own_rho + own_gamma
    gap = q.max(axis=1) - q.min(axis=1)

    snr2 = derive_scales(traj.cfg).snr ** 2
    rho_sum = co.rho_bar.sum(axis=3)  # (k, 2, m)
    with np.errstate(invalid="ignore", divide="ignore"):
        sig_noise = co.gamma / rho_sum / snr2
    final = sig_noise[-1]
    in_band = (final >= 1 / band) & (final <= band)
    return {
        "lprime_ratio": ratio,
        "lprime_ratio_max": float(ratio.max()),
        "kappa_gap": gap,
        "kappa_gap_max": float(gap.max()),
        "signal_noise_ratio_over_snr2": sig_noise,
        "final_ratio_over_snr2": final,
        "final_ratio_over_snr2_range": ((float(np.nanmin(final)), float(np.nanmax(final)))
                                        if np.isfinite(final).any() else None),
        "band_factor": band,
        "filters_in_band": int(in_band.sum()),
        "filters_total": int(final.size),
        "schema_version": SCHEMA_VERSION,
    }


def margin_proxy_deviation(traj, coeffs=None) -> dict:
    """Worst |y~_i f(W(t), x_i) - proxy_i(t)| over the run."""
    from .decomposition import margin_proxies
    co = coeffs if coeffs is not None else traj.coeffs
    dev = np.array([np.abs(traj.margins[k] - margin_proxies(co.at(t), traj.dataset)).max()
                    for k, t in enumerate(co.ts)])
    return {"max_deviation": float(dev.max()), "per_t": dev}


# --------------------------------------------------------------------------
# run-level verdicts used by grid summaries and the acceptance battery


def two_stage_accuracy_pattern(traj, final_noisy_min: float = 0.8) -> dict:
    """Noisy accuracy falls to 0 while clean accuracy is 1, then recovers."""
    ac, an = traj.acc_clean, traj.acc_noisy
    if np.isnan(an).all():
        return {"holds": False, "dip_t": None, "reason": "no noisy samples"}
    dip = np.flatnonzero((ac == 1.0) & (an == 0.0))
    holds = bool(dip.size and an[-1] >= final_noisy_min and ac[-1] == 1.0)
    return {"holds": holds, "dip_t": int(traj.t[dip[0]]) if dip.size else None,
            "final_acc_noisy": float(an[-1]), "final_acc_clean": float(ac[-1])}


def crossover_with_dominance(traj, stage: StageReport | None = None) -> dict:
    """A crossover happens within the run and signal dominates noise at the
    Stage-I end: max gamma > max rho_bar there."""
    stage = stage or detect_stage1(traj)
    cross = detect_crossover(traj.coeffs, traj.dataset)
    dominance = None
    if stage.t1_end is not None:
        tab = traj.coeffs.at(stage.t1_end)
        dominance = bool(tab.gamma.max() > tab.rho_bar.max())
    holds = cross.t is not None and cross.t <= traj.T and bool(dominance)
    return {"holds": holds, "crossover_t": cross.t, "dominance_at_t1_end": dominance,
            "tau_prime": cross.tau_prime}
