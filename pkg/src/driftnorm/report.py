"""Drift reporting: per-site intensity-versus-day tables, SVG plots, and
the focal intensity-change map of baseline versus follow-up scans in
atlas space.

SVG output is hand-written text: deterministic, diffable, and free of
rendering dependencies.
"""

from __future__ import annotations

import os

import numpy as np
import pandas as pd

from .plds import DriftModel, ShiftEvent, model_intensity
from .registration import resample_values
from .volume import Volume, interior_region, load_metaimage, mean_intensity


def intensity_samples_from_manifest(manifest: pd.DataFrame, base_dir: str,
                                    margin_fraction: float = 0.15) -> pd.DataFrame:
    """Scan mean interior intensity per cohort scan: site_id, day,
    mean_intensity (plus subject/visit for traceability)."""
    rows = []
    for r in manifest.itertuples():
        v = load_metaimage(os.path.join(base_dir, r.volume_path))
        rows.append({
            "site_id": r.site_id,
            "day": int(r.day),
            "mean_intensity": mean_intensity(v, interior_region(v, margin_fraction)),
            "subject_id": r.subject_id,
            "visit": r.visit,
        })
    return pd.DataFrame(rows)


def drift_table(samples: pd.DataFrame, model: DriftModel | None) -> pd.DataFrame:
    """Per-sample observed intensity with the model value alongside."""
    rows = samples.sort_values(["day", "subject_id"] if "subject_id" in samples.columns
                               else ["day"], kind="stable")
    out = rows[["site_id", "day", "mean_intensity"]].copy()
    if model is not None:
        out["model_intensity"] = [model_intensity(model, int(d)) for d in out["day"]]
        out["residual"] = out["mean_intensity"] - out["model_intensity"]
    return out.reset_index(drop=True)


def _svg_coords(x, y, x_range, y_range, size=(640, 400), pad=50):
    w, h = size
    x0, x1 = x_range
    y0, y1 = y_range
    sx = pad + (x - x0) / (x1 - x0) * (w - 2 * pad)
    sy = h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)
    return sx, sy


def drift_plot_svg(samples: pd.DataFrame, model: DriftModel | None,
                   events: list[ShiftEvent], site_id: str) -> str:
    """Scatter of observed mean intensities with the piecewise model
    overlay and vertical lines at shift events."""
    w, h = 640, 400
    days = samples["day"].to_numpy(dtype=float)
    vals = samples["mean_intensity"].to_numpy(dtype=float)
    x0, x1 = 0.0, max(float(days.max()) * 1.05, 1.0)
    lo = min(float(vals.min()), *( [model_intensity(model, int(d)) for d in days] if model else [vals.min()] ))
    hi = max(float(vals.max()), *( [model_intensity(model, int(d)) for d in days] if model else [vals.max()] ))
    span = max(hi - lo, 1e-6)
    y0, y1 = lo - 0.1 * span, hi + 0.1 * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w // 2}" y="20" text-anchor="middle" font-size="14">'
        f'site {site_id}: scan mean intensity vs day</text>',
    ]
    # axes
    ax0, ay0 = _svg_coords(x0, y0, (x0, x1), (y0, y1))
    ax1, ay1 = _svg_coords(x1, y1, (x0, x1), (y0, y1))
    parts.append(f'<line x1="{ax0:.1f}" y1="{ay0:.1f}" x2="{ax1:.1f}" y2="{ay0:.1f}" stroke="black"/>')
    parts.append(f'<line x1="{ax0:.1f}" y1="{ay0:.1f}" x2="{ax0:.1f}" y2="{ay1:.1f}" stroke="black"/>')
    parts.append(f'<text x="{ax0:.1f}" y="{ay0 + 30:.1f}" font-size="11">day {x0:.0f}</text>')
    parts.append(f'<text x="{ax1 - 40:.1f}" y="{ay0 + 30:.1f}" font-size="11">day {x1:.0f}</text>')
    parts.append(f'<text x="5" y="{ay0:.1f}" font-size="11">{y0:.1f}</text>')
    parts.append(f'<text x="5" y="{ay1 + 10:.1f}" font-size="11">{y1:.1f}</text>')

    site_events = sorted({e.day for e in events if e.site_id == site_id and e.day > 0})
    for day in site_events:
        ex, _ = _svg_coords(day, y0, (x0, x1), (y0, y1))
        parts.append(f'<line x1="{ex:.1f}" y1="{ay1:.1f}" x2="{ex:.1f}" y2="{ay0:.1f}" '
                     f'stroke="red" stroke-dasharray="4 3" class="shift-event"/>')
        parts.append(f'<text x="{ex + 3:.1f}" y="{ay1 + 12:.1f}" font-size="10" '
                     f'fill="red">shift d{day}</text>')

    for d, v in zip(days, vals):
        cx, cy = _svg_coords(d, v, (x0, x1), (y0, y1))
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="steelblue" '
                     f'fill-opacity="0.7"/>')

    if model is not None:
        boundaries = list(model.boundaries) + [int(x1)]
        for i in range(len(model.boundaries)):
            seg_start = boundaries[i]
            seg_end = max(boundaries[i + 1] - 1, seg_start) if i + 1 < len(boundaries) \
                else int(x1)
            if seg_end < seg_start:
                continue
            pts = []
            for d in (seg_start, seg_end):
                px, py = _svg_coords(d, model_intensity(model, int(d)), (x0, x1), (y0, y1))
                pts.append(f"{px:.1f},{py:.1f}")
            parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                         f'stroke="darkorange" stroke-width="2" class="model-segment"/>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def focal_change_volume(manifest: pd.DataFrame, base_dir: str, atlas_set,
                        margin_fraction: float = 0.15,
                        threads: int = 1) -> Volume:
    """Relative focal intensity change, follow-up versus baseline, in atlas
    space with the outer margin cleared.

    Every scan is registered to the atlas center; per-voxel means over the
    baseline scans and over the follow-up scans give
    (mean_fu - mean_bl) / mean_bl.
    """
    reference = atlas_set.reference
    sums = {"BL": np.zeros(reference.dims, dtype=np.float64),
            "FU": np.zeros(reference.dims, dtype=np.float64)}
    counts = {"BL": np.zeros(reference.dims, dtype=np.int64),
              "FU": np.zeros(reference.dims, dtype=np.int64)}
    for r in manifest.itertuples():
        group = "BL" if str(r.visit).upper().startswith(("BL", "S1")) else "FU"
        scan = load_metaimage(os.path.join(base_dir, r.volume_path))
        regs = atlas_set.register_scan(scan, threads)
        fused = atlas_set.center_transform_for(regs)
        vals, inside = resample_values(scan, reference, fused)
        sums[group][inside] += vals[inside]
        counts[group][inside] += 1
    if counts["BL"].max() == 0 or counts["FU"].max() == 0:
        raise ValueError("need at least one baseline and one follow-up scan")
    valid = (counts["BL"] > 0) & (counts["FU"] > 0)
    mean_bl = np.where(counts["BL"] > 0, sums["BL"] / np.maximum(counts["BL"], 1), 0.0)
    mean_fu = np.where(counts["FU"] > 0, sums["FU"] / np.maximum(counts["FU"], 1), 0.0)
    rel = np.zeros(reference.dims, dtype=np.float32)
    ok = valid & (np.abs(mean_bl) > 1e-9)
    rel[ok] = ((mean_fu[ok] - mean_bl[ok]) / mean_bl[ok]).astype(np.float32)
    cleared = np.zeros(reference.dims, dtype=np.float32)
    region = interior_region(reference, margin_fraction)
    cleared[region.slices()] = rel[region.slices()]
    return Volume(cleared, reference.spacing, reference.origin)
