"""Figures rendered next to the sweep tables."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .finite_size import KeyRateReport  # noqa: E402


def _series(reports: list[KeyRateReport]) -> dict:
    by_n: dict = defaultdict(list)
    for r in reports:
        if r.status == "failed":
            continue
        by_n[r.N].append((float(r.settings.get("loss_db", math.nan)), r.rate))
    return {n: sorted(pts) for n, pts in by_n.items()}


def plot_rate_vs_loss(reports: list[KeyRateReport], path: str | Path, title: str = "") -> Path:
    """Key rate against loss, one curve per block length (log scale)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for n, pts in sorted(_series(reports).items()):
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        label = "asymptotic" if math.isinf(n) else f"N = {n:.0e}"
        style = ":" if math.isinf(n) else "-"
        positive = [(x, y) for x, y in zip(xs, ys) if y > 0]
        if positive:
            ax.semilogy(*zip(*positive), style, marker="o", label=label)
    ax.set_xlabel("loss (dB)")
    ax.set_ylabel("key rate (bits per round)")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rate_vs_n(reports: list[KeyRateReport], path: str | Path) -> Path:
    """Finite key rate against block length, one curve per loss."""
    path = Path(path)
    by_loss: dict = defaultdict(list)
    asym = {}
    for r in reports:
        if r.status == "failed":
            continue
        loss = float(r.settings.get("loss_db", math.nan))
        if math.isinf(r.N):
            asym[loss] = r.rate
        else:
            by_loss[loss].append((r.N, r.rate))
    fig, ax = plt.subplots(figsize=(6, 4))
    for loss, pts in sorted(by_loss.items()):
        pts.sort()
        line = ax.semilogx(*zip(*pts), marker="o", label=f"{loss:g} dB")[0]
        if loss in asym:
            ax.axhline(asym[loss], ls=":", color=line.get_color())
    ax.set_xlabel("rounds N")
    ax.set_ylabel("key rate (bits per round)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render(reports: list[KeyRateReport], csv_path: str | Path) -> list[Path]:
    """Write the figures that fit the data beside ``csv_path``."""
    csv_path = Path(csv_path)
    stem = csv_path.with_suffix("")
    out = [plot_rate_vs_loss(reports, stem.with_name(stem.name + "_rate_vs_loss.png"))]
    if any(not math.isinf(r.N) for r in reports):
        out.append(plot_rate_vs_n(reports, stem.with_name(stem.name + "_rate_vs_n.png")))
    return out
