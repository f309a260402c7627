"""Two-layer ReLU CNN with a fixed +-1/m second layer.

Filters are held in one array of shape (2, m, d); bank 0 is j = +1 and
bank 1 is j = -1. ReLU'(0) is taken as 0 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datagen import INIT, Dataset, rng_for

SIGNS = np.array([1.0, -1.0])


@dataclass(eq=False)
class ModelWeights:
    w: np.ndarray
    w0: np.ndarray
    sigma_0: float = 0.0
    seed_init: int = 0

    def __post_init__(self):
        if not (isinstance(self.w0, np.ndarray) and not self.w0.flags.writeable):
            self.w0 = np.array(self.w0, dtype=float)
            self.w0.setflags(write=False)
        if self.w.ndim != 3 or self.w.shape[0] != 2 or self.w.shape != self.w0.shape:
            raise ValueError(f"weights must be (2, m, d) matching the init, got {self.w.shape} "
                             f"and {self.w0.shape}")

    @property
    def m(self) -> int:
        return self.w.shape[1]

    @property
    def d(self) -> int:
        return self.w.shape[2]

    @property
    def w_pos(self):
        return self.w[0]

    @property
    def w_neg(self):
        return self.w[1]

    @property
    def w_pos_init(self):
        return self.w0[0]

    @property
    def w_neg_init(self):
        return self.w0[1]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.w.copy(), self.w0, self.sigma_0, self.seed_init)

    def with_weights(self, w) -> "ModelWeights":
        return ModelWeights(np.array(w, dtype=float), self.w0, self.sigma_0, self.seed_init)


def init_weights(cfg: ExperimentConfig) -> ModelWeights:
    rng = rng_for(cfg.seed_init, INIT)
    w = cfg.sigma_0 * rng.standard_normal((2, cfg.m, cfg.d))
    return ModelWeights(w, w.copy(), cfg.sigma_0, cfg.seed_init)


def _filters(W) -> np.ndarray:
    return W.w if isinstance(W, ModelWeights) else np.asarray(W, dtype=float)


def relu(z):
    return np.maximum(z, 0.0)


def forward(W, patches) -> float:
    """Network output on a single two-patch input."""
    w = _filters(W)
    a, b = (np.asarray(p, dtype=float) for p in patches)
    if a.shape != (w.shape[2],) or b.shape != (w.shape[2],):
        raise ValueError(f"patches must have dimension {w.shape[2]}, got {a.shape}, {b.shape}")
    F = (relu(w @ a) + relu(w @ b)).sum(axis=1) / w.shape[1]
    return float(F[0] - F[1])


def preactivations(W, ds: Dataset):
    """<w_{j,r}, y_i mu> and <w_{j,r}, xi_i>, each shaped (2, m, n)."""
    w = _filters(W)
    sig = np.multiply.outer(w @ ds.mu, ds.y.astype(float))
    noi = (w.reshape(-1, w.shape[2]) @ ds.noise.T).reshape(2, w.shape[1], ds.n)
    return sig, noi


def outputs_from_preactivations(sig, noi) -> np.ndarray:
    F = (relu(sig) + relu(noi)).sum(axis=1) / sig.shape[1]
    return F[0] - F[1]


def forward_dataset(W, ds: Dataset) -> np.ndarray:
    return outputs_from_preactivations(*preactivations(W, ds))


def forward_batch(W, signal_patches, noise_patches) -> np.ndarray:
    """Outputs for rows of (signal, noise) patch pairs, shaped (k, d) each."""
    w = _filters(W)
    flat = w.reshape(-1, w.shape[2])
    k = len(signal_patches)
    sig = (flat @ np.asarray(signal_patches).T).reshape(2, w.shape[1], k)
    noi = (flat @ np.asarray(noise_patches).T).reshape(2, w.shape[1], k)
    return outputs_from_preactivations(sig, noi)


def logistic_loss(f, y_obs):
    """log(1 + exp(-f * y)), stable for large |f|."""
    z = -np.asarray(f, dtype=float) * y_obs
    big = z > 30
    safe = np.where(big, 0.0, z)
    out = np.where(big, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(safe)))
    return float(out) if out.ndim == 0 else out


def loss_derivative(f, y_obs):
    """-1 / (1 + exp(y * f)); the derivative of the loss in the margin."""
    z = np.asarray(f, dtype=float) * y_obs
    with np.errstate(over="ignore"):
        out = -1.0 / (1.0 + np.exp(z))
    return float(out) if out.ndim == 0 else out


def empirical_loss(W, ds: Dataset) -> float:
    return float(np.mean(logistic_loss(forward_dataset(W, ds), ds.y_obs)))


def gradient_from_parts(ds: Dataset, lprime, act_sig, act_noi) -> np.ndarray:
    """Full-batch gradient given loss derivatives and ReLU' indicators.

    grad_{j,r} = 1/(nm) sum_i l'_i [ReLU'(<w,xi_i>) j y~_i xi_i
                                     + ReLU'(<w,y_i mu>) j y_i y~_i mu]
    """
    n, m = ds.n, act_sig.shape[1]
    yo = ds.y_obs.astype(float)
    noise_w = act_noi * (lprime * yo)  # (2, m, n)
    sig_w = act_sig @ (lprime * yo * ds.y)  # (2, m)
    g = (noise_w.reshape(2 * m, n) @ ds.noise).reshape(2, m, -1) + np.multiply.outer(sig_w, ds.mu)
    return g * SIGNS[:, None, None] / (n * m)


def batch_gradient(W, ds: Dataset) -> np.ndarray:
    sig, noi = preactivations(W, ds)
    f = outputs_from_preactivations(sig, noi)
    lprime = loss_derivative(f, ds.y_obs)
    return gradient_from_parts(ds, lprime, (sig > 0).astype(float), (noi > 0).astype(float))


# --------------------------------------------------------------------------
# text serialization

_FMT = "%.16e"


def write_weights(W: ModelWeights, path) -> None:
    """Header (m, d, sigma_0, seed_init), then 2m live rows, then 2m init rows."""
    lines = [f"{W.m} {W.d} {_FMT % W.sigma_0} {W.seed_init}"]
    for bank in (W.w, W.w0):
        for row in bank.reshape(-1, W.d):
            lines.append(" ".join(_FMT % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_weights(path) -> ModelWeights:
    rows = Path(path).read_text().splitlines()
    m, d, sigma_0, seed = rows[0].split()
    m, d = int(m), int(d)
    data = np.array([r.split() for r in rows[1:]], dtype=float)
    if data.shape != (4 * m, d):
        raise ValueError(f"{path}: expected {4 * m}x{d} weight rows, got {data.shape}")
    w = data[: 2 * m].reshape(2, m, d)
    w0 = data[2 * m:].reshape(2, m, d)
    return ModelWeights(w, w0, float(sigma_0), int(seed))
