"""Metric tables, summaries, and static curve plots.

All emitted text is byte-deterministic: rows are sorted, floats are written
with shortest round-trip repr, and the SVG writer lays elements out in a fixed
order.  Reruns over the same metrics produce identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .metrics import AggregateReport, KShotCurve, aggregate_report, auhproc, defect_size_fractions

CSV_COLUMNS = ("dataset", "category", "k", "seed", "image_auroc", "pixel_aupr", "hproc")


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv_text(rows) -> str:
    """Per-run CSV, sorted by (category, k, seed)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    ordered = sorted(rows, key=lambda r: (r.category, r.k, r.seed))
    for r in ordered:
        writer.writerow(
            [r.dataset, r.category, r.k, r.seed, fmt(r.image_auroc), fmt(r.pixel_aupr), fmt(r.hproc)]
        )
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            rows.append(
                {
                    "dataset": raw["dataset"],
                    "category": raw["category"],
                    "k": int(raw["k"]),
                    "seed": int(raw["seed"]),
                    "image_auroc": float(raw["image_auroc"]),
                    "pixel_aupr": float(raw["pixel_aupr"]),
                    "hproc": float(raw["hproc"]),
                }
            )
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    return rows


def summary_json_text(report: AggregateReport, config_echo: dict | None = None) -> str:
    doc = {
        "auhproc": {
            "mean": report.auhproc_mean,
            "std": report.auhproc_std,
            "per_category": {c.category: c.auhproc for c in report.categories},
        },
        "per_category": {
            c.category: {str(k): v for k, v in c.per_k.items()} for c in report.categories
        },
        "per_k": {str(k): v for k, v in report.per_k_dataset.items()},
        "shots_average": report.shots_average,
    }
    if config_echo is not None:
        doc["config"] = config_echo
    return json.dumps(doc, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Curves


def curve_table(rows: list[dict]) -> list[dict]:
    """Seed-averaged curves per category plus the cross-category 'ALL' row set."""
    categories = sorted({r["category"] for r in rows})
    shots = sorted({r["k"] for r in rows})
    seeds = sorted({r["seed"] for r in rows})
    report = aggregate_report(rows, shots=shots, seeds=seeds, categories=categories)
    table = []
    for cat in report.categories:
        for k in shots:
            table.append(
                {
                    "category": cat.category,
                    "k": k,
                    "image_auroc": cat.per_k[k]["image_auroc"],
                    "hproc": cat.per_k[k]["hproc"],
                    "auhproc": cat.auhproc,
                }
            )
    all_curve = KShotCurve(
        tuple((k, float(np.mean([c.per_k[k]["hproc"] for c in report.categories]))) for k in shots)
    )
    all_auhproc = auhproc(all_curve)
    for k in shots:
        table.append(
            {
                "category": "ALL",
                "k": k,
                "image_auroc": float(np.mean([c.per_k[k]["image_auroc"] for c in report.categories])),
                "hproc": float(np.mean([c.per_k[k]["hproc"] for c in report.categories])),
                "auhproc": all_auhproc,
            }
        )
    return table


def curves_csv_text(table: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "k", "image_auroc", "hproc", "auhproc"])
    for row in table:
        writer.writerow(
            [row["category"], row["k"], fmt(row["image_auroc"]), fmt(row["hproc"]), fmt(row["auhproc"])]
        )
    return buf.getvalue()


_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def svg_line_chart(
    series: dict[str, list[tuple[float, float]]],
    title: str,
    x_label: str,
    y_label: str,
    width: int = 640,
    height: int = 420,
) -> str:
    """Minimal multi-series line chart; one <polyline> per series."""
    pad_l, pad_r, pad_t, pad_b = 60, 160, 40, 45
    plot_w, plot_h = width - pad_l - pad_r, height - pad_t - pad_b
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_max = x_min + 1.0
    if y_max == y_min:
        y_max = y_min + 1.0

    def sx(x: float) -> float:
        return pad_l + (x - x_min) / (x_max - x_min) * plot_w

    def sy(y: float) -> float:
        return pad_t + plot_h - (y - y_min) / (y_max - y_min) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + plot_h}" x2="{pad_l + plot_w}" '
        f'y2="{pad_t + plot_h}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + plot_h}" stroke="black"/>',
        f'<text x="{pad_l + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{x_label}</text>',
        f'<text x="16" y="{pad_t + plot_h / 2:.1f}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {pad_t + plot_h / 2:.1f})">{y_label}</text>',
        f'<text x="{pad_l - 6}" y="{pad_t + plot_h + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{y_min:.4g}</text>',
        f'<text x="{pad_l - 6}" y="{pad_t + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{y_max:.4g}</text>',
        f'<text x="{pad_l}" y="{pad_t + plot_h + 16}" text-anchor="middle" font-size="10" '
        f'font-family="sans-serif">{x_min:.4g}</text>',
        f'<text x="{pad_l + plot_w}" y="{pad_t + plot_h + 16}" text-anchor="middle" '
        f'font-size="10" font-family="sans-serif">{x_max:.4g}</text>',
    ]
    for idx, (name, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[idx % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'
        )
        for x, y in pts:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}"/>')
        ly = pad_t + 14 * idx
        out.append(
            f'<line x1="{pad_l + plot_w + 10}" y1="{ly}" x2="{pad_l + plot_w + 28}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        out.append(
            f'<text x="{pad_l + plot_w + 32}" y="{ly + 4}" font-size="10" '
            f'font-family="sans-serif">{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(metrics_csv_path, out_dir, index=None) -> list[Path]:
    """Emit curves CSV + SVG plots (+ defect-size CSV when an index is given)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_metrics_csv(metrics_csv_path)
    table = curve_table(rows)
    written = []

    curves_path = out_dir / "curves.csv"
    curves_path.write_text(curves_csv_text(table))
    written.append(curves_path)

    categories = sorted({row["category"] for row in table})
    for metric, fname, label in (
        ("hproc", "hproc_vs_k.svg", "HPROC"),
        ("image_auroc", "image_auroc_vs_k.svg", "image-AUROC"),
    ):
        series = {
            c: [(row["k"], row[metric]) for row in table if row["category"] == c]
            for c in categories
        }
        svg = svg_line_chart(series, f"{label} vs k-shot", "k", label)
        path = out_dir / fname
        path.write_text(svg)
        written.append(path)

    if index is not None:
        from .datasets import load_image, load_mask

        hist_path = out_dir / "defect_sizes.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "fraction"])
        for cat in index.categories:
            masks = []
            for t in cat.test:
                if t.mask_id is None:
                    continue
                img = load_image(index.resolve(cat.name, t.image_id))
                masks.append(load_mask(index.resolve(cat.name, t.mask_id), img.shape[:2]))
            for fraction in defect_size_fractions(masks):
                writer.writerow([cat.name, fmt(fraction)])
        hist_path.write_text(buf.getvalue())
        written.append(hist_path)
    return written
