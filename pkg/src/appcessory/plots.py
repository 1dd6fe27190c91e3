"""Matplotlib figures written next to the tabular outputs."""
from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .coupon import UDOLLARS_PER_DOLLAR  # noqa: E402

# PNG metadata would otherwise carry the matplotlib version
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def pretty_plot(width: float = 7, height: float = 4.2):
    fig, ax = plt.subplots(figsize=(width, height))
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out")
    return fig, ax


def _save(fig, path) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def plot_author_earnings(events: list[dict], path) -> str:
    """Cumulative net credit per author against simulated hours."""
    series: dict[str, list[tuple[float, float]]] = defaultdict(lambda: [(0.0, 0.0)])
    totals: dict[str, int] = defaultdict(int)

    def bump(author, t, delta):
        totals[author] += delta
        series[author].append((t / 3600, totals[author] / UDOLLARS_PER_DOLLAR))

    for e in events:
        p = e["payload"]
        if e["kind"] == "redeem_result" and p["result"] == "accepted":
            bump(p["author"], e["time"], p["credited"])
        elif e["kind"] == "abuse_report" and p["clawed_back"]:
            bump(p["author"], e["time"], -totals[p["author"]])
            for author, amount in p["redistributed"]:
                bump(author, e["time"], amount)

    fig, ax = pretty_plot()
    for author in sorted(series):
        xs, ys = zip(*series[author])
        ax.step(xs, ys, where="post", label=author)
    for e in events:
        if e["kind"] == "abuse_report":
            ax.axvline(e["time"] / 3600, color="0.6", ls="--", lw=0.8)
    ax.set_xlabel("simulated time (h)")
    ax.set_ylabel("net credit ($)")
    if series:
        ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_emissions(events: list[dict], path) -> str:
    """Cumulative coupons emitted per accessory."""
    counts: dict[str, list[tuple[float, int]]] = defaultdict(lambda: [(0.0, 0)])
    for e in events:
        if e["kind"] == "coupon_emitted":
            seq = counts[e["actor"]]
            seq.append((e["time"] / 3600, seq[-1][1] + 1))
    fig, ax = pretty_plot()
    for acc in sorted(counts):
        xs, ys = zip(*counts[acc])
        ax.step(xs, ys, where="post", label=acc)
    ax.set_xlabel("simulated time (h)")
    ax.set_ylabel("coupons emitted")
    if counts:
        ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_table(rows: list[dict], label_keys: tuple[str, ...], value_key: str, path,
               title: str = "", money: bool = False) -> str:
    labels = [" / ".join(str(r[k]) for k in label_keys) for r in rows]
    values = [r[value_key] / UDOLLARS_PER_DOLLAR if money else r[value_key] for r in rows]
    fig, ax = pretty_plot(7, max(2.0, 0.35 * len(rows) + 1.2))
    ax.barh(range(len(rows)), values, color="#4c72b0")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel(f"{value_key} ($)" if money else value_key)
    if title:
        ax.set_title(title, fontsize=10)
    return _save(fig, path)
