"""Full-batch gradient descent with per-iteration bookkeeping."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datagen import Dataset, make_dataset
from .decomposition import CoeffHistory, CoeffTable, iterate_coeffs
from .model import (ModelWeights, gradient_from_parts, init_weights, logistic_loss,
                    loss_derivative, outputs_from_preactivations, preactivations)

log = logging.getLogger(__name__)

LOSS_JUMP_WARN = 10.0


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite weights after iteration {iteration}")


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Quantities at W(t) that the update W(t) -> W(t+1) consumes."""

    t: int
    outputs: np.ndarray   # f(W, x_i)
    margins: np.ndarray   # y~_i f(W, x_i)
    losses: np.ndarray
    lprime: np.ndarray
    act_sig: np.ndarray   # ReLU'(<w_{j,r}, y_i mu>), (2, m, n) float 0/1
    act_noi: np.ndarray   # ReLU'(<w_{j,r}, xi_i>)


def step_record(W, ds: Dataset, t: int = 0) -> StepRecord:
    sig, noi = preactivations(W, ds)
    f = outputs_from_preactivations(sig, noi)
    return StepRecord(
        t=t,
        outputs=f,
        margins=ds.y_obs * f,
        losses=logistic_loss(f, ds.y_obs),
        lprime=loss_derivative(f, ds.y_obs),
        act_sig=(sig > 0).astype(float),
        act_noi=(noi > 0).astype(float),
    )


def gd_step(W: ModelWeights, ds: Dataset, eta: float, t: int = 0):
    """One gradient step. Returns the new weights and the pre-step record."""
    if eta < 0:
        raise ValueError(f"learning rate must be nonnegative, got {eta}")
    rec = step_record(W, ds, t)
    grad = gradient_from_parts(ds, rec.lprime, rec.act_sig, rec.act_noi)
    with np.errstate(over="ignore", invalid="ignore"):
        new = W.with_weights(W.w - eta * grad)
    if not np.isfinite(new.w).all():
        raise DivergenceError(t)
    return new, rec


@dataclass(eq=False)
class Trajectory:
    cfg: ExperimentConfig
    dataset: Dataset
    w0: np.ndarray
    t: np.ndarray
    margins: np.ndarray   # (T+1, n)
    losses: np.ndarray    # (T+1, n)
    lprime: np.ndarray    # (T+1, n)
    coeffs: CoeffHistory  # every iteration
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.t[-1])

    @property
    def train_loss(self) -> np.ndarray:
        return self.losses.mean(axis=1)

    @property
    def correct(self) -> np.ndarray:
        # a zero margin counts as a mistake
        return self.margins > 0

    @property
    def acc_all(self) -> np.ndarray:
        return self.correct.mean(axis=1)

    @property
    def acc_clean(self) -> np.ndarray:
        c = self.correct[:, self.dataset.clean_idx]
        return c.mean(axis=1) if c.shape[1] else np.full(len(self.t), np.nan)

    @property
    def acc_noisy(self) -> np.ndarray:
        c = self.correct[:, self.dataset.noisy_idx]
        return c.mean(axis=1) if c.shape[1] else np.full(len(self.t), np.nan)

    def correct_counts(self):
        c = self.correct
        return (c.sum(axis=1), c[:, self.dataset.clean_idx].sum(axis=1),
                c[:, self.dataset.noisy_idx].sum(axis=1))

    def weights_at(self, t: int) -> np.ndarray:
        return self.snapshots[int(t)]

    def metrics(self) -> dict[str, np.ndarray]:
        """Per-iteration scalar columns, in CSV order."""
        ds, co = self.dataset, self.coeffs
        clean, noisy = ds.clean_idx, ds.noisy_idx
        nan = np.full(len(self.t), np.nan)
        rho = co.rho_bar + co.rho_under
        return {
            "t": self.t,
            "train_loss": self.train_loss,
            "acc_all": self.acc_all,
            "acc_clean": self.acc_clean,
            "acc_noisy": self.acc_noisy,
            "min_clean_margin": self.margins[:, clean].min(axis=1) if clean.size else nan,
            "max_noisy_margin": self.margins[:, noisy].max(axis=1) if noisy.size else nan,
            "max_gamma": co.gamma.max(axis=(1, 2)),
            "max_rho_clean": rho[..., clean].max(axis=(1, 2, 3)) if clean.size else nan,
            "max_rho_noisy": rho[..., noisy].max(axis=(1, 2, 3)) if noisy.size else nan,
            "min_urho": co.rho_under.min(axis=(1, 2, 3)),
        }


TRAJECTORY_COLUMNS = ("t", "train_loss", "acc_all", "acc_clean", "acc_noisy",
                      "min_clean_margin", "max_noisy_margin", "max_gamma",
                      "max_rho_clean", "max_rho_noisy", "min_urho")


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def trajectory_csv_text(traj: Trajectory) -> str:
    cols = traj.metrics()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for k in range(len(traj.t)):
        w.writerow([_cell(cols[c][k]) for c in TRAJECTORY_COLUMNS])
    return buf.getvalue()


def write_trajectory_csv(traj: Trajectory, path) -> None:
    Path(path).write_text(trajectory_csv_text(traj))


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) if r[c] != "" else np.nan for r in rows])
            for c in TRAJECTORY_COLUMNS}


def train(cfg: ExperimentConfig, ds: Dataset | None = None, W: ModelWeights | None = None,
          snapshot_stride: int | None = None):
    """Run T full-batch GD steps from the seeded data and initialization.

    Returns the final weights and a :class:`Trajectory` with every
    iteration's per-sample margins, losses and coefficient table, plus
    weight snapshots every ``snapshot_stride`` iterations and at T.
    """
    ds = ds if ds is not None else make_dataset(cfg)
    W = W if W is not None else init_weights(cfg)
    stride = snapshot_stride or cfg.snapshot_stride
    n, m = ds.n, W.m

    table = CoeffTable.zeros(m, n)
    tables, records, snaps = [], [], {}
    prev_loss = None
    for t in range(cfg.T + 1):
        if t % stride == 0 or t == cfg.T:
            snaps[t] = W.w.copy()
        tables.append(table)
        if t == cfg.T:
            records.append(step_record(W, ds, t))
            break
        W, rec = gd_step(W, ds, cfg.eta, t)
        records.append(rec)
        loss = float(rec.losses.mean())
        if prev_loss is not None and loss > LOSS_JUMP_WARN * prev_loss:
            log.warning("training loss jumped from %.4g to %.4g at iteration %d", prev_loss, loss, t)
        prev_loss = loss
        table = iterate_coeffs(table, rec, ds, cfg.eta)

    traj = Trajectory(
        cfg=cfg,
        dataset=ds,
        w0=np.array(W.w0),
        t=np.arange(cfg.T + 1),
        margins=np.array([r.margins for r in records]),
        losses=np.array([r.losses for r in records]),
        lprime=np.array([r.lprime for r in records]),
        coeffs=CoeffHistory.from_tables(range(cfg.T + 1), tables),
        snapshots=snaps,
    )
    return W, traj
