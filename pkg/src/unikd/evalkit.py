"""Image metrics, forgetting summaries and report files (CSV, JSON, SVG, PPM)."""
import csv
import io
import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import UsageError

PSNR_CAP = 99.0


def psnr(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise UsageError("psnr: peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse / peak ** 2)))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the first two axes
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a, b, data_range=1.0, window=11, sigma=1.5):
    """Mean SSIM over valid window positions, computed per channel then averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise UsageError(f"ssim: image {a.shape[:2]} smaller than the {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(window, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(0, 1))
    return float(per_channel.mean())


def roc_auc(negatives, positives):
    """Probability that a positive scores above a negative (ties count half)."""
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    pos = np.asarray(positives, dtype=np.float64).ravel()
    if not len(neg) or not len(pos):
        raise UsageError("roc_auc: need at least one score per class")
    order = np.sort(neg)
    below = np.searchsorted(order, pos, side="left")
    ties = np.searchsorted(order, pos, side="right") - below
    return float((below + 0.5 * ties).sum() / (len(neg) * len(pos)))


# ---------------------------------------------------------------------------
# image files


def to_ppm(img):
    """P6 bytes of an RGB float image (clamp to [0, 1], scale by 255, round)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_ppm(path, img):
    Path(path).write_bytes(to_ppm(img))


def read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise UsageError(f"{path}: not a P6 file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def image_grid(rows, pad=2):
    """Tile a list of rows of equally sized images (None leaves a blank cell)."""
    ref = next(img for row in rows for img in row if img is not None)
    h, w = ref.shape[:2]
    ncol = max(len(r) for r in rows)
    grid = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            if img is None:
                continue
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y:y + h, x:x + w] = img
    return grid


# ---------------------------------------------------------------------------
# SVG charts


def _fmt(v):
    return f"{v:.2f}".rstrip("0").rstrip(".")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def svg_line_chart(series, title, xlabel, ylabel, width=520, height=320):
    """Self-contained SVG polyline chart; ``series`` maps label -> list of (x, y)."""
    pts = [p for s in series.values() for p in s if p[1] is not None]
    if not pts:
        raise UsageError("svg_line_chart: no data")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    ml, mr, mt, mb = 60, 130, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for k in range(5):
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{ml - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
        out.append(f'<line x1="{ml}" y1="{sy(yv):.1f}" x2="{ml + pw}" y2="{sy(yv):.1f}" stroke="#ddd"/>')
    for xv in sorted(set(xs)):
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(xv)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s if y is not None)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# reports


def metric_rows(record):
    rows = []
    for e in record["per_step"]:
        for metric in ("psnr", "ssim"):
            if e.get(metric) is not None:
                rows.append((record["strategy"], e["step"], metric, e[metric], record["seed"]))
    for step, mem in enumerate(record.get("memory_bytes", [])):
        if mem is not None:
            rows.append((record["strategy"], step, "memory_bytes", mem, record["seed"]))
    return rows


def _mean(values):
    """Mean over the steps that had test views (None when none did)."""
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(records):
    """Per-strategy averages and the forgetting gap against a batch record, if present."""
    fps = {r["dataset_fingerprint"] for r in records}
    if len(fps) > 1:
        raise UsageError("records were produced on different datasets")
    batch = next((r for r in records if r["strategy"] == "batch"), None)
    out = {"strategies": {}}
    for r in records:
        psnrs = [e["psnr"] for e in r["per_step"]]
        ssims = [e["ssim"] for e in r["per_step"]]
        entry = {"avg_psnr": _mean(psnrs), "avg_ssim": _mean(ssims),
                 "per_step_psnr": psnrs, "per_step_ssim": ssims,
                 "final_memory_bytes": r["memory_bytes"][-1] if r.get("memory_bytes") else None,
                 "seed": r["seed"]}
        if batch is not None:
            entry["forgetting_gap"] = [None if b["psnr"] is None or e["psnr"] is None else b["psnr"] - e["psnr"]
                                       for b, e in zip(batch["per_step"], r["per_step"])]
        out["strategies"][r["strategy"]] = entry
    out["notes"] = ["LPIPS is not reported (requires a pretrained perceptual network)."]
    return out


def build_report(records, out_dir, previews=None, ground_truth=None):
    """Write ``metrics.csv``, ``summary.json``, SVG charts and a preview grid.

    ``previews`` maps strategy -> list of per-step images; ``ground_truth``
    is the matching list of reference images (first row of the grid).
    Returns the summary dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(records)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "step", "metric", "value", "seed"])
    for r in records:
        for row in metric_rows(r):
            w.writerow([row[0], row[1], row[2], repr(float(row[3])) if row[2] != "memory_bytes" else int(row[3]),
                        row[4]])
    (out / "metrics.csv").write_text(buf.getvalue())
    summary["configs"] = {r["strategy"]: r["config"] for r in records}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    psnr_series = {r["strategy"]: [(e["step"], e["psnr"]) for e in r["per_step"]] for r in records}
    (out / "psnr_by_step.svg").write_text(
        svg_line_chart(psnr_series, "Final-model PSNR per step", "step", "PSNR (dB)"))
    mem_series = {r["strategy"]: [(i, m / 1e6) for i, m in enumerate(r.get("memory_bytes", []))]
                  for r in records if r.get("memory_bytes")}
    if mem_series:
        (out / "memory_by_step.svg").write_text(
            svg_line_chart(mem_series, "Auxiliary memory after each step", "step", "MB"))

    if previews:
        rows = []
        if ground_truth is not None:
            rows.append(list(ground_truth))
        for r in records:
            if r["strategy"] in previews:
                rows.append(list(previews[r["strategy"]]))
        write_ppm(out / "previews.ppm", image_grid(rows))
    return summary


def format_summary(summary):
    lines = [f"{'strategy':<18}{'avg PSNR':>10}{'avg SSIM':>10}{'memory MB':>12}"]
    for name, e in summary["strategies"].items():
        mem = e["final_memory_bytes"]
        psnr_v = e["avg_psnr"] if e["avg_psnr"] is not None else float("nan")
        ssim_v = e["avg_ssim"] if e["avg_ssim"] is not None else float("nan")
        lines.append(f"{name:<18}{psnr_v:>10.2f}{ssim_v:>10.4f}"
                     f"{(mem / 1e6 if mem is not None else float('nan')):>12.3f}")
    return "\n".join(lines)
