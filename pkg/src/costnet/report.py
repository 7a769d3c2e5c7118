"""Bucketed aggregation of run CSVs, paired comparisons and SVG reward curves."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pipeline import MetricsParseError, read_rows

AGG_COLUMNS = ("label", "timestep", "runs", "mean", "std", "q1", "median", "q3")
BUCKET = 1000


def run_label(run_id: str) -> str:
    """Experiment name of a run id ``<name>-<digest>-s<seed>``."""
    parts = run_id.rsplit("-", 2)
    return parts[0] if len(parts) == 3 else run_id


def episode_returns(rows: Iterable[dict]) -> tuple[np.ndarray, np.ndarray]:
    """``(timesteps, returns)`` of finished agent episodes."""
    ts, rs = [], []
    for r in rows:
        if r["phase"] == "agent" and r["episodic_return"] is not None:
            ts.append(r["timestep"])
            rs.append(r["episodic_return"])
    return np.array(ts, dtype=np.int64), np.array(rs, dtype=np.float64)


def bucket_means(rows: Iterable[dict], bucket: int = BUCKET) -> dict[int, float]:
    """Mean return of episodes finishing in each ``(end - bucket, end]`` window, keyed by ``end``."""
    ts, rs = episode_returns(rows)
    if len(ts) == 0:
        return {}
    ends = -(-ts // bucket) * bucket
    return {int(e): float(rs[ends == e].mean()) for e in np.unique(ends)}


def aggregate(runs: Sequence[list[dict]], bucket: int = BUCKET, label: str | None = None) -> list[dict]:
    """Across-run statistics of per-run bucket means."""
    if label is None:
        ids = {r["run_id"] for rows in runs for r in rows[:1]}
        labels = {run_label(i) for i in ids}
        label = labels.pop() if len(labels) == 1 else "runs"
    per_run = [bucket_means(rows, bucket) for rows in runs]
    ends = sorted({e for m in per_run for e in m})
    out = []
    for e in ends:
        vals = np.array([m[e] for m in per_run if e in m])
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out.append({
            "label": label, "timestep": e, "runs": len(vals), "mean": float(vals.mean()),
            "std": float(vals.std()), "q1": float(q1), "median": float(med), "q3": float(q3),
        })
    return out


def aggregate_files(paths: Sequence, bucket: int = BUCKET) -> list[dict]:
    return aggregate([read_rows(p) for p in paths], bucket)


def format_aggregate(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_COLUMNS)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(float(r[c])) for c in AGG_COLUMNS])
    return buf.getvalue()


def write_aggregate(path, rows: Sequence[dict]) -> None:
    Path(path).write_text(format_aggregate(rows), encoding="utf-8", newline="")


def read_aggregate(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != AGG_COLUMNS:
        raise MetricsParseError(f"{path}: row 1: header does not match the aggregate schema")
    out = []
    for lineno, fields in enumerate(reader, start=2):
        if len(fields) != len(AGG_COLUMNS):
            raise MetricsParseError(f"{path}: row {lineno}: expected {len(AGG_COLUMNS)} fields, got {len(fields)}")
        try:
            row = {"label": fields[0], "timestep": int(fields[1]), "runs": int(fields[2])}
            row.update({c: float(v) for c, v in zip(AGG_COLUMNS[3:], fields[3:])})
        except ValueError:
            raise MetricsParseError(f"{path}: row {lineno}: non-numeric field") from None
        out.append(row)
    return out


# ---------------------------------------------------------------- comparison


def steps_to_fraction(rows: list[dict], optimal: float, worst: float, fraction: float = 0.95, window: int = 5):
    """First timestep where the ``window``-episode moving average of the normalised return reaches ``fraction``."""
    ts, rs = episode_returns(rows)
    if len(rs) < window:
        return None
    norm = (rs - worst) / (optimal - worst)
    avg = np.convolve(norm, np.ones(window) / window, mode="valid")
    hit = np.nonzero(avg >= fraction)[0]
    return None if hit.size == 0 else int(ts[hit[0] + window - 1])


def final_mean(rows: list[dict], total_steps: int, window: int = 10_000) -> float:
    """Mean return of episodes finishing in the last ``window`` agent steps (NaN if none)."""
    ts, rs = episode_returns(rows)
    sel = rs[ts > total_steps - window]
    return float(sel.mean()) if sel.size else float("nan")


def compare_runs(
    shaped: dict[int, list[dict]],
    baseline: dict[int, list[dict]],
    optimal: float,
    worst: float,
    total_steps: int,
    window: int = 10_000,
) -> tuple[list[dict], dict]:
    """Paired per-seed table and summary: who reaches 95% of optimal first, and final-window spread.

    A run that never reaches the threshold counts as slower than one that does;
    two such runs are a tie (no win).
    """
    table = []
    for seed in sorted(set(shaped) & set(baseline)):
        a = steps_to_fraction(shaped[seed], optimal, worst)
        b = steps_to_fraction(baseline[seed], optimal, worst)
        faster = a is not None and (b is None or a < b)
        table.append({
            "seed": seed, "shaped_steps": a, "baseline_steps": b, "shaped_faster": faster,
            "shaped_final": final_mean(shaped[seed], total_steps, window),
            "baseline_final": final_mean(baseline[seed], total_steps, window),
        })
    sf = np.array([r["shaped_final"] for r in table])
    bf = np.array([r["baseline_final"] for r in table])
    summary = {
        "pairs": len(table),
        "shaped_faster": sum(r["shaped_faster"] for r in table),
        "shaped_final_var": float(np.var(sf)) if len(sf) else float("nan"),
        "baseline_final_var": float(np.var(bf)) if len(bf) else float("nan"),
        "shaped_final_mean": float(np.mean(sf)) if len(sf) else float("nan"),
        "baseline_final_mean": float(np.mean(bf)) if len(bf) else float("nan"),
    }
    return table, summary


def format_comparison(table: list[dict], summary: dict) -> str:
    lines = ["seed,shaped_steps,baseline_steps,shaped_faster,shaped_final,baseline_final"]
    for r in table:
        lines.append(",".join(
            "" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else str(r[k]))
            for k in ("seed", "shaped_steps", "baseline_steps", "shaped_faster", "shaped_final", "baseline_final")
        ))
    lines.append("")
    lines += [f"# {k} = {v}" for k, v in summary.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- plotting


def plot(aggregate_paths: Sequence, output, labels: Sequence[str] | None = None) -> Path:
    """Mean return per bucket with a shaded one-std band, one series per aggregate CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = [read_aggregate(p) for p in aggregate_paths]
    if labels is None:
        labels = [s[0]["label"] if s else Path(p).stem for s, p in zip(series, aggregate_paths)]
    with matplotlib.rc_context({"svg.hashsalt": "costnet", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4))
        for rows, label in zip(series, labels):
            t = np.array([r["timestep"] for r in rows], dtype=float)
            m = np.array([r["mean"] for r in rows])
            s = np.array([r["std"] for r in rows])
            (line,) = ax.plot(t, m, label=label)
            ax.fill_between(t, m - s, m + s, color=line.get_color(), alpha=0.25, linewidth=0)
        ax.set_xlabel("timestep")
        ax.set_ylabel("episodic return")
        ax.legend(loc="lower right")
        fig.tight_layout()
        out = Path(output)
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out
