"""Render run figures from a metrics CSV.

Four PNGs land next to the CSV (or in an explicit output directory):
latency, replicas, utilization, and rps. Latency and rps aggregate
replicas per service; utilization stays per replica since that is the
signal the placement limit acts on.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def read_rows(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({
                "time_s": float(row["time_s"]),
                "service": row["service"],
                "replica_id": row["replica_id"],
                "rps": float(row["rps"]),
                "utilization": float(row["utilization"]),
                "mean_latency_ms": float(row["mean_latency_ms"]),
                "p99_latency_ms": float(row["p99_latency_ms"]),
                "replica_count": int(row["replica_count"]),
            })
    if not rows:
        raise ValueError(f"no data rows in {path}")
    return rows


def service_series(rows: list[dict]):
    """Per-service time series: total rps, weighted mean, worst p99, count."""
    buckets: dict[tuple[str, float], list[dict]] = defaultdict(list)
    for row in rows:
        buckets[(row["service"], row["time_s"])].append(row)
    series: dict[str, dict[str, list[float]]] = defaultdict(
        lambda: {"t": [], "rps": [], "mean": [], "p99": [], "count": []})
    for (svc, t) in sorted(buckets):
        group = buckets[(svc, t)]
        total = sum(r["rps"] for r in group)
        mean = (sum(r["rps"] * r["mean_latency_ms"] for r in group) / total
                if total else 0.0)
        out = series[svc]
        out["t"].append(t)
        out["rps"].append(total)
        out["mean"].append(mean)
        out["p99"].append(max(r["p99_latency_ms"] for r in group))
        out["count"].append(group[0]["replica_count"])
    return series


def replica_series(rows: list[dict], field: str):
    series: dict[tuple[str, str], tuple[list[float], list[float]]] = \
        defaultdict(lambda: ([], []))
    for row in rows:
        t, v = series[(row["service"], row["replica_id"])]
        t.append(row["time_s"])
        v.append(row[field])
    return series


def _finish(fig, ax, title, ylabel, path):
    ax.set_title(title)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render(csv_path: str, out_dir: str | None = None) -> list[str]:
    """Write the four figures; returns the paths written."""
    rows = read_rows(csv_path)
    out_dir = out_dir or (os.path.dirname(os.path.abspath(csv_path)))
    os.makedirs(out_dir, exist_ok=True)
    per_service = service_series(rows)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    for svc, s in per_service.items():
        ax.plot(s["t"], s["mean"], label=f"{svc} mean")
        ax.plot(s["t"], s["p99"], linestyle="--", label=f"{svc} p99")
    path = os.path.join(out_dir, "latency.png")
    _finish(fig, ax, "Request latency", "latency (ms)", path)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for svc, s in per_service.items():
        ax.step(s["t"], s["count"], where="post", label=svc)
    ax.set_ylim(bottom=0)
    path = os.path.join(out_dir, "replicas.png")
    _finish(fig, ax, "Replica count", "instances", path)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for (svc, rid), (t, v) in sorted(replica_series(rows, "utilization").items()):
        ax.plot(t, v, label=f"{svc}/{rid}", alpha=0.8)
    ax.set_ylim(0, 1.05)
    path = os.path.join(out_dir, "utilization.png")
    _finish(fig, ax, "Per-replica utilization", "busy fraction", path)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for (svc, rid), (t, v) in sorted(replica_series(rows, "rps").items()):
        ax.plot(t, v, alpha=0.6, label=f"{svc}/{rid}")
    for svc, s in per_service.items():
        ax.plot(s["t"], s["rps"], linewidth=2, label=f"{svc} total")
    path = os.path.join(out_dir, "rps.png")
    _finish(fig, ax, "Completion rate", "requests/s", path)
    written.append(path)
    return written
