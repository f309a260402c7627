"""SVG figures: coefficient growth over accuracy, one column per run."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
    "svg.hashsalt": "noisy-feature-lab",
}

COLORS = {"gamma": "#1f77b4", "clean": "#2ca02c", "noisy": "#d62728", "all": "#444444"}


def _has_data(values) -> bool:
    return any(not math.isnan(v) for v in values)


def _save(fig, path, deterministic: bool):
    metadata = {"Date": None} if deterministic else {}
    fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)


def _stage_marks(ax, stage_end, crossover, T):
    if stage_end is not None and stage_end < T:
        ax.axvline(stage_end, color="gray", linestyle="--", linewidth=1.0)
    if crossover is not None:
        ax.axvspan(0, crossover, color="tab:blue", alpha=0.08, linewidth=0)
        ax.axvspan(crossover, T, color="tab:orange", alpha=0.08, linewidth=0)


def plot_dynamics(metrics: dict, path, *, stage_end=None, crossover=None, T=None,
                  title: str = "", deterministic: bool = False) -> None:
    """Two stacked panels: max coefficients (top) and training accuracy (bottom).

    A dashed gray rule marks the Stage-I end. When ``crossover`` is given the
    background is shaded blue before it and orange after.
    """
    t = metrics["t"]
    T = T if T is not None else int(t[-1])
    noisy = _has_data(metrics["acc_noisy"])
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(4.2, 5.0), sharex=True)
        top.plot(t, metrics["max_gamma"], color=COLORS["gamma"], label=r"$\max\,\gamma_{j,r}$")
        top.plot(t, metrics["max_rho_clean"], color=COLORS["clean"],
                 label=r"$\max\,\rho_{j,r,i}$, clean")
        if noisy:
            top.plot(t, metrics["max_rho_noisy"], color=COLORS["noisy"],
                     label=r"$\max\,\rho_{j,r,i}$, noisy")
        top.set_ylabel("coefficient")
        top.legend(loc="upper left")
        if title:
            top.set_title(title)

        bottom.plot(t, metrics["acc_all"], color=COLORS["all"], label="all")
        bottom.plot(t, metrics["acc_clean"], color=COLORS["clean"], label="clean")
        if noisy:
            bottom.plot(t, metrics["acc_noisy"], color=COLORS["noisy"], label="noisy")
        bottom.set_ylim(-0.05, 1.05)
        bottom.set_xlabel("iteration")
        bottom.set_ylabel("training accuracy")
        bottom.legend(loc="lower right")

        for ax in (top, bottom):
            _stage_marks(ax, stage_end, crossover, T)
            ax.set_xlim(0, max(T, 1))
        fig.tight_layout()
        _save(fig, path, deterministic)


def plot_grid_summary(rows: list[dict], path, deterministic: bool = False) -> None:
    """Mean crossover iteration and final test error per (mu, tau) cell."""
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["mu"], r["tau"]), []).append(r)
    mus = sorted({k[0] for k in cells})
    with plt.rc_context(STYLE):
        fig, (left, right) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        for mu in mus:
            keys = sorted(k for k in cells if k[0] == mu)
            taus = [k[1] for k in keys]
            cross, err = [], []
            for k in keys:
                xs = [r["crossover_t"] for r in cells[k] if r.get("crossover_t") is not None]
                es = [r["final_test_error"] for r in cells[k] if r.get("final_test_error") is not None]
                cross.append(sum(xs) / len(xs) if xs else math.nan)
                err.append(sum(es) / len(es) if es else math.nan)
            left.plot(taus, cross, marker="o", label=f"mu={mu:g}")
            right.plot(taus, err, marker="o", label=f"mu={mu:g}")
        left.set_xlabel("flip probability")
        left.set_ylabel("mean crossover iteration")
        right.set_xlabel("flip probability")
        right.set_ylabel("mean final test error")
        left.legend()
        fig.tight_layout()
        _save(fig, path, deterministic)
