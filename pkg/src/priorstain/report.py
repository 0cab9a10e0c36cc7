"""Aggregate tables and qualitative panels from finished run directories."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .training import ARCHS, CONDITIONS

log = logging.getLogger(__name__)

CONDITION_ORDER = [c[0] for c in CONDITIONS]
TABLE_COLUMNS = ["arch", "condition", "ssim", "lpips_like", "quant", "quant_value",
                 "nuclei_count_delta", "config_hash", "status"]


def _sort_key(row: dict):
    arch = ARCHS.index(row["arch"]) if row["arch"] in ARCHS else len(ARCHS)
    cond = CONDITION_ORDER.index(row["condition"]) if row["condition"] in CONDITION_ORDER else len(CONDITION_ORDER)
    return arch, row["arch"], cond, row["condition"]


def row_from_report(report, arch: str, condition: str, status: str = "ok") -> dict:
    t = report.table_row()
    quant = "ki67_error" if "ki67_error" in t else "pmae"
    return {
        "arch": arch, "condition": condition,
        "ssim": t["ssim"], "lpips_like": t["lpips_like"],
        "quant": quant, "quant_value": t[quant],
        "nuclei_count_delta": t["nuclei_count_delta"],
        "config_hash": report.config_hash, "status": status,
    }


def _empty_row(arch, condition, status) -> dict:
    row = dict.fromkeys(TABLE_COLUMNS)
    row.update(arch=arch, condition=condition, status=status)
    return row


def table_rows_from_cells(cells) -> list[dict]:
    rows = []
    for c in cells:
        if c.report is not None:
            rows.append(row_from_report(c.report, c.arch, c.condition))
        else:
            rows.append(_empty_row(c.arch, c.condition, f"failed: {c.error}" if c.error else "not evaluated"))
    return sorted(rows, key=_sort_key)


def find_report(run_dir) -> Path | None:
    run_dir = Path(run_dir)
    for cand in (run_dir / "report_test.json", run_dir / "eval" / "report_test.json"):
        if cand.exists():
            return cand
    return None


def collect_rows(run_dirs: Sequence) -> tuple[list[dict], list[str]]:
    """Table rows for every run with a test report, plus the runs that had none."""
    from .metrics import MetricReport

    rows, missing = [], []
    for d in run_dirs:
        path = find_report(d)
        if path is None:
            missing.append(str(d))
            continue
        rep = MetricReport.load(path)
        rows.append(row_from_report(rep, rep.meta.get("arch", "?"), rep.meta.get("condition", "?")))
    return sorted(rows, key=_sort_key), missing


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def format_markdown(rows: Sequence[dict]) -> str:
    quant = next((r["quant"] for r in rows if r.get("quant")), "ki67_error")
    head = ["Arch", "Condition", "SSIM", "LPIPS-like", quant, "Nuclei count delta", "Status"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        vals = [r["arch"], r["condition"], r["ssim"], r["lpips_like"], r["quant_value"],
                r["nuclei_count_delta"], r["status"]]
        lines.append("| " + " | ".join(_fmt(v) for v in vals) + " |")
    return "\n".join(lines) + "\n"


def write_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in TABLE_COLUMNS})


def tiles_per_row(n_channels: int) -> int:
    """Input IHC, prior, then every ground-truth channel and every predicted channel."""
    return 2 + 2 * n_channels


def panel_grid(ihc, prior, gt, pred) -> list[list[np.ndarray]]:
    """Tiles for each sample row, as 2-D or RGB arrays in [0,1]."""
    rows = []
    for i in range(ihc.shape[0]):
        k = gt.shape[-1]
        row = [ihc[i], prior[i]]
        row += [gt[i, :, :, c] for c in range(k)]
        row += [pred[i, :, :, c] for c in range(k)]
        rows.append(row)
    return rows


def write_panel(npz_path, png_path, title: str = "") -> int:
    """Render a saved panel sample file to PNG; returns the number of tiles per row."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    z = np.load(npz_path)
    names = [str(n) for n in z["channel_names"]]
    grid = panel_grid(z["ihc"], z["prior"], z["gt"], z["pred"])
    ncols = tiles_per_row(len(names))
    headers = ["IHC", "prior"] + [f"GT {n}" for n in names] + [f"pred {n}" for n in names]
    fig, axes = plt.subplots(len(grid), ncols, figsize=(1.6 * ncols, 1.6 * len(grid)), squeeze=False)
    for r, row in enumerate(grid):
        for c, tile in enumerate(row):
            ax = axes[r, c]
            ax.imshow(np.clip(tile, 0, 1), cmap=None if tile.ndim == 3 else "gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(headers[c], fontsize=7)
    if title:
        fig.suptitle(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return ncols


def build_report(run_dirs: Sequence, out_dir) -> dict:
    """Write ``table.md``, ``table.csv`` and one panel PNG per run into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, missing = collect_rows(run_dirs)
    write_csv(rows, out / "table.csv")
    (out / "table.md").write_text(format_markdown(rows))
    panels = []
    for d in run_dirs:
        rep = find_report(d)
        if rep is None:
            continue
        npz = rep.parent / "panel_samples.npz"
        if npz.exists():
            png = out / f"panel_{Path(d).name}.png"
            write_panel(npz, png, title=Path(d).name)
            panels.append(str(png))
    for m in missing:
        log.warning("no test report in %s", m)
    summary = {"rows": len(rows), "missing": missing, "panels": panels}
    (out / "report_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
