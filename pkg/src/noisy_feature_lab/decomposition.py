"""Signal-noise coefficients of the filters, tracked two ways.

Writing Delta w_{j,r} = w_{j,r}(t) - w_{j,r}(0) as

    j * gamma_{j,r} * mu / |mu|^2 + sum_i rho_{j,r,i} * xi_i / |xi_i|^2

the coefficients are either accumulated step by step from the trainer's
records (:func:`iterate_coeffs`) or recovered after the fact with a
least-squares solve against the same basis (:func:`solve_coeffs`). The basis
is linearly independent almost surely, so both must agree.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import SIGNS

MAX_CONDITION = 1e8


class DegenerateBasisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CoeffTable:
    gamma: np.ndarray      # (2, m)
    rho_bar: np.ndarray    # (2, m, n), >= 0
    rho_under: np.ndarray  # (2, m, n), <= 0

    @classmethod
    def zeros(cls, m: int, n: int) -> "CoeffTable":
        return cls(np.zeros((2, m)), np.zeros((2, m, n)), np.zeros((2, m, n)))

    @property
    def rho(self) -> np.ndarray:
        return self.rho_bar + self.rho_under


class CoeffHistory:
    """Coefficient tables at a sorted list of iterations."""

    def __init__(self, ts, gamma, rho_bar, rho_under):
        self.ts = np.asarray(ts, dtype=int)
        self.gamma = np.asarray(gamma)
        self.rho_bar = np.asarray(rho_bar)
        self.rho_under = np.asarray(rho_under)
        self._pos = {int(t): k for k, t in enumerate(self.ts)}

    @classmethod
    def from_tables(cls, ts, tables) -> "CoeffHistory":
        return cls(ts, [c.gamma for c in tables], [c.rho_bar for c in tables],
                   [c.rho_under for c in tables])

    def __len__(self):
        return len(self.ts)

    def __contains__(self, t):
        return int(t) in self._pos

    def at(self, t: int) -> CoeffTable:
        k = self._pos[int(t)]
        return CoeffTable(self.gamma[k], self.rho_bar[k], self.rho_under[k])

    def subset(self, ts) -> "CoeffHistory":
        idx = [self._pos[int(t)] for t in ts]
        return CoeffHistory(ts, self.gamma[idx], self.rho_bar[idx], self.rho_under[idx])


def iterate_coeffs(table: CoeffTable, record, ds, eta: float) -> CoeffTable:
    """One step of the coefficient recursion driven by a trainer step record.

    ``record`` carries the loss derivatives and the ReLU' indicators that
    the weight update used, so both sides agree on every kink.
    """
    m = table.gamma.shape[1]
    scale = eta / (ds.n * m)
    lp = record.lprime
    sig_w = lp * ds.y * ds.y_obs * float(ds.mu @ ds.mu)
    gamma = table.gamma - scale * (record.act_sig @ sig_w)

    inc = -scale * record.act_noi * (lp * ds.noise_sq_norms)  # >= 0, (2, m, n)
    own = (ds.y_obs[None, :] == SIGNS[:, None])[:, None, :]  # y~_i == j
    rho_bar = table.rho_bar + np.where(own, inc, 0.0)
    rho_under = table.rho_under - np.where(own, 0.0, inc)
    return CoeffTable(gamma, rho_bar, rho_under)


# --------------------------------------------------------------------------
# projection solve


class BasisSolver:
    """Normal-equations solver for the basis {mu/|mu|^2, xi_i/|xi_i|^2}.

    The Gram matrix depends only on the dataset, so its Cholesky factor is
    computed once and reused for every filter and snapshot.
    """

    def __init__(self, mu, noise):
        basis = np.vstack([mu / (mu @ mu), noise / np.einsum("nd,nd->n", noise, noise)[:, None]])
        gram = basis @ basis.T
        # conditioning of the column-equilibrated Gram matrix
        scale = 1.0 / np.sqrt(np.diag(gram))
        cond = np.linalg.cond(gram * np.outer(scale, scale))
        if not np.isfinite(cond) or cond >= MAX_CONDITION:
            raise DegenerateBasisError(f"basis Gram matrix is ill-conditioned (condition number {cond:.3g})")
        self.condition = float(cond)
        self.basis = basis
        self._factor = scipy.linalg.cho_factor(gram)

    def solve(self, delta: np.ndarray) -> np.ndarray:
        """Least-squares coefficients for rows of ``delta`` (k, d) -> (k, n+1)."""
        rhs = self.basis @ delta.T
        return scipy.linalg.cho_solve(self._factor, rhs).T

    def residual(self, delta: np.ndarray, coeffs: np.ndarray) -> float:
        fit = coeffs @ self.basis
        return float(np.linalg.norm(delta - fit) / max(np.linalg.norm(delta), np.finfo(float).tiny))


def solve_coeffs(w_t, w_0, mu, noise, solver: BasisSolver | None = None):
    """(gamma_hat (2, m), rho_hat (2, m, n)) for weights ``w_t`` against ``w_0``."""
    solver = solver or BasisSolver(mu, noise)
    w_t, w_0 = np.asarray(w_t), np.asarray(w_0)
    _, m, d = w_t.shape
    c = solver.solve((w_t - w_0).reshape(2 * m, d)).reshape(2, m, -1)
    gamma_hat = c[:, :, 0] * SIGNS[:, None]
    return gamma_hat, c[:, :, 1:]


def reconstruct(w_0, table: CoeffTable, mu, noise, w_live=None):
    """Weights rebuilt from coefficients; with ``w_live`` also the relative
    Frobenius residual against them."""
    w_0 = np.asarray(w_0)
    sig_dir = mu / (mu @ mu)
    noise_dir = noise / np.einsum("nd,nd->n", noise, noise)[:, None]
    w = (w_0
         + np.multiply.outer(table.gamma * SIGNS[:, None], sig_dir)
         + (table.rho_bar.reshape(-1, len(noise)) @ noise_dir).reshape(w_0.shape)
         + (table.rho_under.reshape(-1, len(noise)) @ noise_dir).reshape(w_0.shape))
    if w_live is None:
        return w
    w_live = np.asarray(w_live)
    res = np.linalg.norm(w_live - w) / max(np.linalg.norm(w_live), np.finfo(float).tiny)
    return w, float(res)


def margin_proxy(table: CoeffTable, i: int, y_obs: int, side: str) -> float:
    jb = 0 if y_obs == 1 else 1
    own = table.rho_bar[jb, :, i].mean()
    if side == "clean":
        return float(table.gamma[jb].mean() + own)
    if side == "noisy":
        return float(own - table.gamma[1 - jb].mean())
    raise ValueError(f"side must be 'clean' or 'noisy', got {side!r}")


def margin_proxies(table: CoeffTable, ds) -> np.ndarray:
    """Vectorized proxy for every sample, using each one's own side."""
    jb = np.where(ds.y_obs == 1, 0, 1)
    idx = np.arange(ds.n)
    own = table.rho_bar[jb, :, idx].mean(axis=1)
    g = table.gamma.mean(axis=1)
    return np.where(ds.noisy_mask, own - g[1 - jb], g[jb] + own)


# --------------------------------------------------------------------------
# structural checks (exact, no tolerance)


def structure_violations(hist: CoeffHistory, y_obs) -> dict[str, int]:
    own = (np.asarray(y_obs)[None, :] == SIGNS[:, None])[None, :, None, :]
    out = {
        "rho_bar_negative": int((hist.rho_bar < 0).sum()),
        "rho_under_positive": int((hist.rho_under > 0).sum()),
        "rho_bar_off_support": int(((hist.rho_bar != 0) & ~own).sum()),
        "rho_under_off_support": int(((hist.rho_under != 0) & own).sum()),
        "rho_bar_decreasing": int((np.diff(hist.rho_bar, axis=0) < 0).sum()),
        "rho_under_increasing": int((np.diff(hist.rho_under, axis=0) > 0).sum()),
    }
    if len(hist):
        out["nonzero_at_start"] = int(
            (hist.ts[0] == 0) and (np.any(hist.gamma[0]) or np.any(hist.rho_bar[0]) or np.any(hist.rho_under[0])))
    return out


# --------------------------------------------------------------------------
# CSV

COEFF_COLUMNS = ("t", "j", "r", "i", "gamma", "rho_bar", "rho_under")


def write_coeffs_csv(hist: CoeffHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COEFF_COLUMNS)
        m, n = hist.rho_bar.shape[2], hist.rho_bar.shape[3]
        for k, t in enumerate(hist.ts):
            for jb, j in enumerate((1, -1)):
                for r in range(m):
                    w.writerow((t, j, r, "", repr(float(hist.gamma[k, jb, r])), "", ""))
                for r in range(m):
                    rb, ru = hist.rho_bar[k, jb, r], hist.rho_under[k, jb, r]
                    for i in range(n):
                        w.writerow((t, j, r, i, "", repr(float(rb[i])), repr(float(ru[i]))))


def read_coeffs_csv(path) -> CoeffHistory:
    rows = {}
    m = n = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COEFF_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for t, j, r, i, g, rb, ru in reader:
            t, r = int(t), int(r)
            jb = 0 if int(j) == 1 else 1
            entry = rows.setdefault(t, ({}, {}))
            if i == "":
                entry[0][(jb, r)] = float(g)
            else:
                entry[1][(jb, r, int(i))] = (float(rb), float(ru))
                n = max(n, int(i) + 1)
            m = max(m, r + 1)
    ts = sorted(rows)
    gamma = np.zeros((len(ts), 2, m))
    rho_bar = np.zeros((len(ts), 2, m, n))
    rho_under = np.zeros((len(ts), 2, m, n))
    for k, t in enumerate(ts):
        for (jb, r), g in rows[t][0].items():
            gamma[k, jb, r] = g
        for (jb, r, i), (rb, ru) in rows[t][1].items():
            rho_bar[k, jb, r, i] = rb
            rho_under[k, jb, r, i] = ru
    return CoeffHistory(ts, gamma, rho_bar, rho_under)
