"""Signal-noise training data, label flipping and the spurious-feature test source.

Gaussian draws use numpy's PCG64 generator (``Generator.standard_normal``,
ziggurat method). Every consumer gets its own stream, keyed by a seed and a
stream tag through ``SeedSequence.spawn_key``, so equal seeds for data, init
and test never share draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, DELTA, ExperimentConfig, check_flip_probability

# stream tags
DATA, FLIP, INIT, TEST = 1, 2, 3, 4

TEST_SHARD = 1000


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=stream))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    patch_a: np.ndarray
    patch_b: np.ndarray
    y: int
    y_obs: int
    signal_slot: str  # "A" or "B"


@dataclass(frozen=True, eq=False)
class Dataset:
    """n two-patch samples stored column-wise.

    ``noise[i]`` is the non-signal patch of sample i; the signal patch is
    ``y[i] * mu``. ``slot_b[i]`` says whether the signal sits in the second
    patch (bookkeeping only, the network is patch-order invariant).
    """

    y: np.ndarray
    y_obs: np.ndarray
    slot_b: np.ndarray
    noise: np.ndarray
    mu: np.ndarray
    sigma_xi: float

    def __post_init__(self):
        for name in ("y", "y_obs", "slot_b", "noise", "mu"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return len(self.mu)

    @property
    def noisy_mask(self) -> np.ndarray:
        return self.y_obs != self.y

    @property
    def clean_idx(self) -> np.ndarray:
        return np.flatnonzero(self.y_obs == self.y)

    @property
    def noisy_idx(self) -> np.ndarray:
        return np.flatnonzero(self.y_obs != self.y)

    @property
    def noise_sq_norms(self) -> np.ndarray:
        return np.einsum("nd,nd->n", self.noise, self.noise)

    def signal_patch(self, i: int) -> np.ndarray:
        return self.y[i] * self.mu

    def patches(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        sig, xi = self.signal_patch(i), self.noise[i]
        return (xi, sig) if self.slot_b[i] else (sig, xi)

    def sample(self, i: int) -> Sample:
        a, b = self.patches(i)
        return Sample(a, b, int(self.y[i]), int(self.y_obs[i]), "B" if self.slot_b[i] else "A")

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(self.n)]


def signal_vector(cfg: ExperimentConfig, direction=None) -> np.ndarray:
    if direction is None:
        mu = np.zeros(cfg.d)
        mu[0] = cfg.mu_mag
        return mu
    u = np.asarray(direction, dtype=float)
    if u.shape != (cfg.d,):
        raise ConfigError(f"signal direction must have shape ({cfg.d},), got {u.shape}")
    return cfg.mu_mag * u / np.linalg.norm(u)


def generate_train(cfg: ExperimentConfig, direction=None) -> Dataset:
    """Balanced training set with all observed labels equal to the true ones."""
    rng = rng_for(cfg.seed_data, DATA)
    half = cfg.n // 2
    y = np.array([1] * half + [-1] * half, dtype=np.int64)
    rng.shuffle(y)
    noise = cfg.sigma_xi * rng.standard_normal((cfg.n, cfg.d))
    slot_b = rng.integers(0, 2, cfg.n).astype(bool)
    return Dataset(y=y, y_obs=y.copy(), slot_b=slot_b, noise=noise,
                   mu=signal_vector(cfg, direction), sigma_xi=cfg.sigma_xi)


def flip_labels(ds: Dataset, tau_plus: float, tau_minus: float, seed: int,
                mode: str = "bernoulli") -> Dataset:
    """Flip observed labels away from the true class.

    ``bernoulli`` flips each sample independently with the class-dependent
    probability. ``exact`` flips floor(tau * n/2) uniformly chosen samples
    per class.
    """
    check_flip_probability(tau_plus, "tau_plus")
    check_flip_probability(tau_minus, "tau_minus")
    rng = rng_for(seed, FLIP)
    y = ds.y
    tau = np.where(y == 1, tau_plus, tau_minus)
    if mode == "bernoulli":
        flip = rng.random(ds.n) < tau
    elif mode == "exact":
        flip = np.zeros(ds.n, dtype=bool)
        for cls, t in ((1, tau_plus), (-1, tau_minus)):
            members = np.flatnonzero(y == cls)
            k = math.floor(t * ds.n / 2)
            flip[rng.choice(members, size=k, replace=False)] = True
    else:
        raise ConfigError(f"unknown flip mode {mode!r}")
    return replace(ds, y_obs=np.where(flip, -y, y))


def make_dataset(cfg: ExperimentConfig, direction=None) -> Dataset:
    ds = generate_train(cfg, direction)
    return flip_labels(ds, cfg.tau_plus, cfg.tau_minus, cfg.seed_data, cfg.flip_mode)


# --------------------------------------------------------------------------
# test distribution


@dataclass(frozen=True, eq=False)
class TestSampler:
    """Test points [y mu, xi_U + zeta] with U uniform over the training noise."""

    __test__ = False  # keep pytest from collecting this

    dataset: Dataset
    sigma_xi: float
    seed: int

    def _shard(self, k: int):
        rng = rng_for(self.seed, TEST, k)
        y = np.where(rng.integers(0, 2, TEST_SHARD) == 1, 1, -1)
        u = rng.integers(0, self.dataset.n, TEST_SHARD)
        zeta = self.sigma_xi * rng.standard_normal((TEST_SHARD, self.dataset.d))
        return y, self.dataset.noise[u] + zeta

    def shards(self, count: int):
        """Yield (labels, noise patches) in fixed-size shards.

        Every shard is drawn at full size and truncated, so the first k
        draws never depend on ``count``.
        """
        done, k = 0, 0
        while done < count:
            y, xi = self._shard(k)
            take = min(TEST_SHARD, count - done)
            yield y[:take], xi[:take]
            done += take
            k += 1


def sample_test(sampler: TestSampler, count: int):
    """List of (signal patch, noise patch, y) test draws."""
    if sampler.dataset.n == 0:
        raise ValueError("test sampler needs a nonempty training set")
    mu = sampler.dataset.mu
    out = []
    for ys, xis in sampler.shards(count):
        out.extend((int(y) * mu, xi, int(y)) for y, xi in zip(ys, xis))
    return out


# --------------------------------------------------------------------------
# concentration diagnostics at initialization


def init_geometry_report(ds: Dataset, W0, delta: float = DELTA) -> dict:
    """Activation-set sizes and inner-product extrema at initialization,
    next to the high-probability brackets they are expected to satisfy."""
    n, d = ds.n, ds.d
    w = W0.w0  # (2, m, d), bank 0 is j=+1
    m = w.shape[1]
    sigma_0, sx = W0.sigma_0, ds.sigma_xi
    mu_norm = float(np.linalg.norm(ds.mu))

    pre_noise = np.einsum("jrd,nd->jrn", w, ds.noise)
    bank_of = np.where(ds.y_obs == 1, 0, 1)
    own = pre_noise[bank_of, :, np.arange(n)]  # (n, m)
    s_i = (own > 0).sum(axis=1)
    s_jr = np.stack([((pre_noise[jb] > 0) & (bank_of == jb)[None, :]).sum(axis=1)
                     for jb in (0, 1)])

    sq = ds.noise_sq_norms
    gram = ds.noise @ ds.noise.T
    off = np.abs(gram[~np.eye(n, dtype=bool)]) if n > 1 else np.zeros(1)
    w_sq = np.einsum("jrd,jrd->jr", w, w)

    brackets = {
        "noise_sq_norm": (sx**2 * d / 2, 3 * sx**2 * d / 2),
        "noise_cross": 2 * sx**2 * math.sqrt(d * math.log(6 * n**2 / delta)),
        "noise_signal": mu_norm * sx * math.sqrt(2 * math.log(6 * n / delta)),
        "init_sq_norm": (sigma_0**2 * d / 2, 3 * sigma_0**2 * d / 2),
        "init_signal": math.sqrt(2 * math.log(12 * m / delta)) * sigma_0 * mu_norm,
        "init_noise": 2 * math.sqrt(math.log(12 * m * n / delta)) * sigma_0 * sx * math.sqrt(d),
    }
    stats = {
        "activation_set_sizes": s_i.tolist(),
        "min_activation_set": int(s_i.min()),
        "activation_set_ok": bool((s_i >= 0.4 * m).all()),
        "min_class_activation_set": int(s_jr.min()),
        "class_activation_set_ok": bool((s_jr >= n / 8).all()),
        "noise_sq_norm_range": (float(sq.min()), float(sq.max())),
        "max_noise_cross": float(off.max()),
        "max_noise_signal": float(np.abs(ds.noise @ ds.mu).max()),
        "init_sq_norm_range": (float(w_sq.min()), float(w_sq.max())),
        "max_init_signal": float(np.abs(w @ ds.mu).max()),
        "max_init_noise": float(np.abs(pre_noise).max()),
    }
    lo, hi = brackets["noise_sq_norm"]
    ilo, ihi = brackets["init_sq_norm"]
    stats["within"] = {
        "noise_sq_norm": bool(lo <= sq.min() and sq.max() <= hi),
        "noise_cross": stats["max_noise_cross"] <= brackets["noise_cross"],
        "noise_signal": stats["max_noise_signal"] <= brackets["noise_signal"],
        "init_sq_norm": bool(ilo <= w_sq.min() and w_sq.max() <= ihi),
        "init_signal": stats["max_init_signal"] <= brackets["init_signal"],
        "init_noise": stats["max_init_noise"] <= brackets["init_noise"],
    }
    stats["brackets"] = brackets
    return stats


# --------------------------------------------------------------------------
# text serialization (17 significant digits round-trips float64)

_FMT = "%.16e"


def _fmt_row(values) -> str:
    return " ".join(_FMT % v for v in values)


def write_dataset(ds: Dataset, path) -> None:
    lines = [f"{ds.d} {ds.n} {_FMT % ds.sigma_xi} {_fmt_row(ds.mu)}"]
    for i in range(ds.n):
        a, b = ds.patches(i)
        slot = "B" if ds.slot_b[i] else "A"
        lines.append(f"{ds.y[i]:d} {ds.y_obs[i]:d} {slot} {_fmt_row(a)} {_fmt_row(b)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    rows = Path(path).read_text().splitlines()
    head = rows[0].split()
    d, n, sigma_xi = int(head[0]), int(head[1]), float(head[2])
    mu = np.array(head[3:], dtype=float)
    if mu.shape != (d,) or len(rows) - 1 != n:
        raise ValueError(f"{path}: malformed dataset header")
    y, y_obs, slot_b, noise = [], [], [], np.empty((n, d))
    for i, row in enumerate(rows[1:]):
        parts = row.split()
        y.append(int(parts[0]))
        y_obs.append(int(parts[1]))
        b = parts[2] == "B"
        slot_b.append(b)
        vals = np.array(parts[3:], dtype=float)
        noise[i] = vals[:d] if b else vals[d:]
    return Dataset(y=np.array(y), y_obs=np.array(y_obs), slot_b=np.array(slot_b),
                   noise=noise, mu=mu, sigma_xi=sigma_xi)
