"""Parameter sweeps over lambda and training-set size."""

from __future__ import annotations

import csv
import logging
import os
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import adapters
from .artifacts import run_directory, write_json
from .config import RunConfig
from .pipeline import run_pipeline, save_contact_sheet

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_SIZES = (200, 500, 800, 1000, 1200)
METRICS = ("FID", "KID", "FID-H", "KID-H", "HAND-CONF")


def _point(cfg: RunConfig) -> dict[str, Any]:
    row: dict[str, Any] = {"config_hash": cfg.digest(), "status": "ok", "error": ""}
    try:
        manifest = run_pipeline(cfg)
        metrics = manifest["report"]["metrics"]
        for m in METRICS:
            row[m] = metrics[m]["value"] if m in metrics else float("nan")
    except Exception as exc:  # recorded, the sweep goes on
        log.exception("sweep point %s failed", cfg.digest()[:8])
        row.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        row.update({m: float("nan") for m in METRICS})
    return row


def sweep(base: RunConfig, param: str, values: Sequence[Any], out_dir: str | os.PathLike) -> list[dict[str, Any]]:
    """Run the full pipeline once per value of `param` ("lambda" or "train_size").

    Writes `<param>_sweep.csv`, `<param>_sweep.png` (FID-H curve),
    `<param>_samples.png` (one row of samples per point) and a JSON summary.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, sample_rows = [], []
    for v in values:
        cfg = base.replace(**{param: v})
        row = {param: v, **_point(cfg)}
        rows.append(row)
        log.info("%s=%s: FID-H %s (%s)", param, v, row["FID-H"], row["status"])
        samples = run_directory(cfg.run_dir, cfg.digest()) / "samples"
        pngs = sorted(p for p in samples.glob("*.png") if p.name != "grid.png")[:8]
        sample_rows.append([adapters.load_png(p) for p in pngs])

    fields = [param, *METRICS, "status", "config_hash", "error"]
    with open(out_dir / f"{param}_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in fields})
    write_json(out_dir / f"{param}_sweep.json", {"param": param, "rows": rows})
    plot_curve(rows, param, out_dir / f"{param}_sweep.png")

    width = max((len(r) for r in sample_rows), default=0)
    shape = next((r[0].shape for r in sample_rows if r), None)
    if shape is not None:
        blank = np.zeros(shape, dtype=np.float32)
        flat = [img for r in sample_rows for img in r + [blank] * (width - len(r))]
        save_contact_sheet(out_dir / f"{param}_samples.png", flat, columns=width)
    return rows


def plot_curve(rows: Sequence[dict], param: str, path: str | os.PathLike) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[param] for r in rows if r["status"] == "ok"]
    ys = [r["FID-H"] for r in rows if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("lambda" if param == "lambda" else "training pairs")
    ax.set_ylabel("FID-H")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def lambda_sweep(base: RunConfig, values: Sequence[float] = DEFAULT_LAMBDAS, out_dir: str | os.PathLike = "ablation") -> list[dict]:
    return sweep(base, "lambda", [float(v) for v in values], out_dir)


def trainsize_sweep(base: RunConfig, sizes: Sequence[int] = DEFAULT_SIZES, out_dir: str | os.PathLike = "ablation") -> list[dict]:
    return sweep(base, "train_size", [int(s) for s in sizes], out_dir)
