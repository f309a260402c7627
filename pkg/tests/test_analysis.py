import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisy_feature_lab.analysis import (LOG2, _longest_run, crossover_mask, detect_crossover,
                                        detect_stage1, early_stopping_compare, estimate_test_error,
                                        loss_convergence_find, noiseless_diagnostics,
                                        small_loss_select, to_jsonable, two_stage_accuracy_pattern,
                                        wilson_interval)
from noisy_feature_lab.config import ExperimentConfig
from noisy_feature_lab.datagen import TestSampler, make_dataset
from noisy_feature_lab.trainer import train

CLEAN = ExperimentConfig(tau_plus=0.0, tau_minus=0.0)


@pytest.fixture(scope="module")
def clean_run():
    return train(CLEAN)


def test_predicate_false_at_start(default_run):
    st_ = detect_stage1(default_run[1])
    assert not st_.predicate[0]
    assert st_.t1_window[0] >= 1


def test_noiseless_window_starts_at_first_full_fit(clean_run):
    _, traj = clean_run
    rep = detect_stage1(traj)
    assert rep.noisy_antifit.all()
    first_fit = int(np.flatnonzero((traj.margins >= 0).all(axis=1) & rep.gamma_dominance)[0])
    assert rep.t1_window[0] == first_fit
    assert rep.t1_window[1] == CLEAN.T


def test_window_is_longest_earliest_run():
    assert _longest_run([False, True, True, False, True, True]) == (1, 2)
    assert _longest_run([True, False, True, True, True]) == (2, 4)
    assert _longest_run([False, False]) is None
    assert _longest_run([]) is None


def test_stage_clauses_by_hand(default_run):
    _, traj = default_run
    ds = traj.dataset
    rep = detect_stage1(traj)
    co = traj.coeffs
    for t in (0, 5, rep.t1_end, rep.t1_end + 1, traj.T):
        clean_ok = all(traj.margins[t, i] >= 0 for i in ds.clean_idx)
        noisy_ok = all(traj.margins[t, i] <= 0 for i in ds.noisy_idx)
        dom = all(co.gamma[t, j, r] > co.rho_bar[t, 0 if ds.y_obs[i] == 1 else 1, r, i]
                  for j in range(2) for r in range(traj.cfg.m) for i in range(ds.n))
        assert rep.predicate[t] == (clean_ok and noisy_ok and dom)


def test_no_crossover_without_noise(clean_run):
    _, traj = clean_run
    c = detect_crossover(traj.coeffs, traj.dataset)
    assert c.t is None and c.count_final == 0 and c.tau_prime == 0.0


def test_default_crossover(default_run):
    _, traj = default_run
    ds = traj.dataset
    c = detect_crossover(traj.coeffs, ds)
    assert c.t is not None and 0 < c.t <= traj.T
    slack = 3 * math.sqrt(0.1 * 0.9 / ds.n)
    assert 0 < c.tau_prime <= 0.1 + slack
    assert c.count_final <= ds.noisy_idx.size


def test_crossover_mask_by_loops(default_run):
    _, traj = default_run
    ds, co = traj.dataset, traj.coeffs
    mask = crossover_mask(co, ds)
    for t in (0, 30, 60, traj.T):
        for k, i in enumerate(ds.noisy_idx):
            j = 0 if ds.y_obs[i] == 1 else 1
            lhs = co.rho_bar[t, j, :, i].mean()
            rhs = co.gamma[t, 1 - j, :].mean()
            assert mask[t, k] == (lhs > rhs)


def test_selection_all_zero_losses():
    rep = small_loss_select(np.zeros(6), np.array([0, 1, 2, 3]), np.array([4, 5]))
    assert rep.clean_below == 4 and rep.noisy_below == 2
    assert rep.recall == 1.0
    assert rep.accuracy == pytest.approx(4 / 6)


def test_selection_at_start_flags_ties():
    _, traj = train(ExperimentConfig(sigma_0=1e-5, T=0))
    ds = traj.dataset
    rep = small_loss_select(traj.losses[0], ds.clean_idx, ds.noisy_idx)
    assert rep.near_threshold >= ds.n * 0.9
    assert rep.n == ds.n


def test_selection_confusion_by_hand():
    losses = np.array([0.1, 0.9, LOG2, 0.2, 1.5])
    rep = small_loss_select(losses, np.array([0, 1, 2]), np.array([3, 4]))
    assert (rep.clean_below, rep.clean_above, rep.noisy_below, rep.noisy_above) == (2, 1, 1, 1)
    assert rep.accuracy == pytest.approx(3 / 5)
    assert rep.precision == pytest.approx(2 / 3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(0.1, 10), b=st.floats(-5, 5))
def test_selection_invariant_under_monotone_maps(seed, a, b):
    rng = np.random.default_rng(seed)
    losses = rng.exponential(size=12)
    clean, noisy = np.arange(8), np.arange(8, 12)
    base = small_loss_select(losses, clean, noisy, LOG2)
    g = lambda v: a * np.asarray(v) ** 3 + b  # strictly increasing
    moved = small_loss_select(g(losses), clean, noisy, float(g(LOG2)))
    assert (moved.clean_below, moved.noisy_below) == (base.clean_below, base.noisy_below)


def test_test_error_zero_weights():
    ds = make_dataset(ExperimentConfig(d=20, n=4))
    s = TestSampler(ds, 1.0, 0)
    rep = estimate_test_error(np.zeros((2, 3, 20)), s, 200)
    assert rep.estimate == 0.0 and rep.errors == 0


def test_single_draw_error(default_run):
    W, traj = default_run
    s = TestSampler(traj.dataset, 1.0, 1)
    assert estimate_test_error(W, s, 1).estimate in (0.0, 1.0)
    with pytest.raises(ValueError):
        estimate_test_error(W, s, 0)


def test_test_error_matches_scalar_forward(default_run):
    from noisy_feature_lab.datagen import sample_test
    from noisy_feature_lab.model import forward
    W, traj = default_run
    s = TestSampler(traj.dataset, 1.0, 5)
    count = 300
    errors = sum(y * forward(W, (a, b)) < 0 for a, b, y in sample_test(s, count))
    assert estimate_test_error(W, s, count).errors == errors


def test_wilson_interval_values():
    lo, hi = wilson_interval(50, 1000)
    # reference values from the closed form
    p, n, z = 0.05, 1000, 1.959963984540054
    c = (p + z * z / (2 * n)) / (1 + z * z / n)
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    assert (lo, hi) == pytest.approx((c - h, c + h), rel=1e-12)
    assert wilson_interval(0, 10)[0] == 0.0
    assert wilson_interval(10, 10)[1] == pytest.approx(1.0)
    assert wilson_interval(0, 0) == (0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0.0, 1.0), n=st.integers(10, 10**5))
def test_wilson_shrinks_with_count(p, n):
    k1, k2 = round(p * n), round(p * 4 * n)
    w1 = np.subtract(*wilson_interval(k1, n)[::-1])
    w2 = np.subtract(*wilson_interval(k2, 4 * n)[::-1])
    assert w2 < w1
    lo, hi = wilson_interval(k1, n)
    assert lo <= k1 / n <= hi


def test_noiseless_early_stopping_no_harm(clean_run):
    _, traj = clean_run
    s = TestSampler(traj.dataset, 1.0, 0)
    rep = early_stopping_compare(traj, traj.snapshots, s, 2000)
    assert rep["verdict"] == "no-harm"
    assert rep["final"].estimate <= 0.05


def test_default_early_stopping_improves(default_run):
    _, traj = default_run
    s = TestSampler(traj.dataset, 1.0, 0)
    rep = early_stopping_compare(traj, traj.snapshots, s, 10000)
    assert rep["verdict"] == "improvement"
    assert abs(rep["snapshot_offset"]) <= traj.cfg.snapshot_stride // 2


def test_early_stopping_without_window(default_run):
    _, traj = default_run
    rep = detect_stage1(traj)
    rep.t1_window = None
    out = early_stopping_compare(traj, traj.snapshots, TestSampler(traj.dataset, 1.0, 0), 10, rep)
    assert out["status"] == "no Stage-I window detected"


def test_convergence_thresholds(default_run):
    _, traj = default_run
    assert loss_convergence_find(traj, 1.0) == 0
    assert loss_convergence_find(traj, 1e-300) is None
    with pytest.raises(ValueError):
        loss_convergence_find(traj, 0.0)


@pytest.mark.xfail(strict=True, reason="seeds 1 and 7 draw 16 flipped labels and end at loss 0.052/0.058")
def test_convergence_on_most_seeds():
    hits = [loss_convergence_find(train(ExperimentConfig().with_seed(s))[1], 0.05) for s in range(8)]
    assert sum(h is not None for h in hits) >= 7


def test_noiseless_diagnostics(clean_run):
    _, traj = clean_run
    rep = noiseless_diagnostics(traj)
    tiny = noiseless_diagnostics(train(CLEAN.replace(sigma_0=1e-5, T=0))[1])
    assert tiny["lprime_ratio"][0] == pytest.approx(1.0, abs=1e-3)
    assert rep["lprime_ratio_max"] >= 1.0
    assert rep["filters_total"] == 2 * CLEAN.m
    assert rep["kappa_gap"][0] == 0.0


def test_noiseless_diagnostics_reject_noisy_runs(default_run):
    with pytest.raises(ValueError):
        noiseless_diagnostics(default_run[1])


def test_two_stage_pattern(default_run, clean_run):
    assert two_stage_accuracy_pattern(default_run[1])["holds"]
    assert not two_stage_accuracy_pattern(clean_run[1])["holds"]


def test_json_conversion():
    out = to_jsonable({"a": np.float64(math.nan), 1: (np.int64(3), np.bool_(True)),
                       "arr": np.arange(2)})
    assert out == {"a": None, "1": [3, True], "arr": [0, 1]}
