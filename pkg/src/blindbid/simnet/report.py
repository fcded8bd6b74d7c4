"""Run-report rendering.

Turns a metrics document into a flat key,value CSV and a small set of
matplotlib figures written next to it. Rendering is pure output — nothing
here feeds back into a run.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bench import (  # noqa: E402
    KB,
    REF_AD_REQUEST_KB,
    REF_PROFILE_KB,
    REF_RANKING_REQUEST_KB,
)


def flatten(data: dict, prefix: str = "") -> list[tuple[str, object]]:
    """Depth-first dotted keys; lists become JSON so every value is a cell."""
    rows: list[tuple[str, object]] = []
    for key in sorted(data):
        value = data[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            rows.append((name, json.dumps(value)))
        else:
            rows.append((name, value))
    return rows


def write_csv(metrics: dict, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerows(flatten(metrics))


def _save(fig, path: str, created: list[str]) -> None:
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    created.append(path)


def render_report(metrics: dict, out_dir: str) -> list[str]:
    """Write metrics.csv plus the figures; returns the created file paths."""
    os.makedirs(out_dir, exist_ok=True)
    created: list[str] = []

    csv_path = os.path.join(out_dir, "metrics.csv")
    write_csv(metrics, csv_path)
    created.append(csv_path)

    win_rates = metrics.get("win_rates", {})
    if win_rates:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        names = sorted(win_rates)
        ax.bar(names, [win_rates[n] for n in names], color="#4878a8")
        ax.axhline(1 / len(names), color="gray", linestyle="--", linewidth=1,
                   label=f"uniform 1/{len(names)}")
        ax.set_ylabel("share of filled auctions")
        ax.set_title("Auction win rates")
        ax.legend(frameon=False)
        _save(fig, os.path.join(out_dir, "win_rates.png"), created)

    messages = metrics.get("messages", {})
    if messages:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        labels = ["product profile", "ad request", "ranking request"]
        keys = ["profile_bytes", "ad_request_bytes", "ranking_request_bytes"]
        measured = [messages.get(k, {}).get("mean", 0) / KB for k in keys]
        refs = [REF_PROFILE_KB, REF_AD_REQUEST_KB, REF_RANKING_REQUEST_KB]
        x = range(len(labels))
        ax.bar([i - 0.2 for i in x], measured, width=0.4, label="measured (mean)",
               color="#4878a8")
        ax.bar([i + 0.2 for i in x], refs, width=0.4,
               label="original encoding (reference)", color="#b0b0b0")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels)
        ax.set_ylabel("KB")
        ax.set_title("Message sizes")
        ax.legend(frameon=False)
        _save(fig, os.path.join(out_dir, "message_sizes.png"), created)

    counts = metrics.get("counts", {})
    if counts:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        order = [k for k in ("visits", "ad_requests", "auctions", "filled",
                             "impressions", "clicks") if k in counts]
        ax.bar(order, [counts[k] for k in order], color="#6a9a58")
        ax.set_ylabel("events")
        ax.set_title("Scenario funnel")
        ax.tick_params(axis="x", rotation=20)
        _save(fig, os.path.join(out_dir, "funnel.png"), created)

    return created
