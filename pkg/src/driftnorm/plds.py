"""Piecewise linear drift-shift correction of biomarker tables.

Per site, scan mean intensity versus scan day is modeled as independent
linear segments between shift events (L1-fitted, so single hot scans do
not drag the model). A per-marker sensitivity (marker units per intensity
unit) is regressed from longitudinal pairs, and biomarker values are
corrected by the modeled intensity change since study start.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .metrics import ols_fit

BIOMARKER_COLUMNS = ["subject_id", "knee_side", "site_id", "visit", "day", "marker", "value"]


class DriftFitError(Exception):
    """Unfittable drift model or sensitivity regression."""


@dataclass
class ShiftEvent:
    site_id: str
    day: int
    source: str = "header"  # log | header | manual


@dataclass
class IntensitySample:
    site_id: str
    day: int
    mean_intensity: float


@dataclass
class MarkerSensitivity:
    marker: str
    beta: float  # marker units per intensity unit
    intercept: float
    n_pairs: int = 0

    def to_dict(self) -> dict:
        return {"marker": self.marker, "beta": self.beta,
                "intercept": self.intercept, "n_pairs": self.n_pairs}

    @classmethod
    def from_dict(cls, d: dict) -> "MarkerSensitivity":
        return cls(d["marker"], float(d["beta"]), float(d["intercept"]),
                   int(d.get("n_pairs", 0)))


@dataclass
class DriftModel:
    """Per-site piecewise linear intensity model.

    boundaries[i] is the start day of segment i (boundaries[0] == 0); a
    segment is affine in (day - start); a shift day belongs to the segment
    it starts.
    """

    site_id: str
    boundaries: list[int] = field(default_factory=lambda: [0])
    slopes: list[float] = field(default_factory=lambda: [0.0])
    intercepts: list[float] = field(default_factory=lambda: [0.0])

    def segment_index(self, day: int) -> int:
        if day < 0:
            raise ValueError(f"day must be >= 0, got {day}")
        return int(np.searchsorted(np.asarray(self.boundaries), day, side="right") - 1)

    def value(self, day: int) -> float:
        i = self.segment_index(day)
        return self.slopes[i] * (day - self.boundaries[i]) + self.intercepts[i]

    def to_dict(self) -> dict:
        return {"site_id": self.site_id, "boundaries": list(self.boundaries),
                "slopes": list(self.slopes), "intercepts": list(self.intercepts)}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftModel":
        return cls(d["site_id"], [int(b) for b in d["boundaries"]],
                   [float(s) for s in d["slopes"]],
                   [float(i) for i in d["intercepts"]])


def model_intensity(model: DriftModel, day: int) -> float:
    """Model value at a scan day; shift days use the post-shift segment."""
    return model.value(day)


def detect_shift_events(metadata: pd.DataFrame) -> list[ShiftEvent]:
    """Shift events from scanner metadata: one event on the first day either
    StationName or SoftwareVersion differs from the previous scan at the
    same site; duplicates collapse."""
    required = {"site_id", "day", "station_name", "software_version"}
    missing = required - set(metadata.columns)
    if missing:
        raise ValueError(f"metadata is missing columns {sorted(missing)}")
    events: list[ShiftEvent] = []
    for site, group in metadata.groupby("site_id", sort=True):
        group = group.sort_values("day", kind="stable")
        prev = None
        seen_days = set()
        for _, row in group.iterrows():
            key = (row["station_name"], row["software_version"])
            if prev is not None and key != prev and int(row["day"]) not in seen_days:
                events.append(ShiftEvent(str(site), int(row["day"]), "header"))
                seen_days.add(int(row["day"]))
            prev = key
    return events


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cum = np.cumsum(w)
    return float(v[np.searchsorted(cum, 0.5 * cum[-1])])


def _l1_objective(x, y, slope, intercept):
    return float(np.abs(y - slope * x - intercept).sum())


def fit_l1_line(x: np.ndarray, y: np.ndarray, max_iter: int = 200,
                tol: float = 1e-9) -> tuple[float, float]:
    """L1 line fit: OLS seed, then coordinate descent with (weighted)
    median steps until the objective stops improving."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = ols_fit(x, y)
    best = _l1_objective(x, y, slope, intercept)
    nonzero = x != 0.0
    for _ in range(max_iter):
        intercept = float(np.median(y - slope * x))
        if nonzero.any():
            r = (y[nonzero] - intercept) / x[nonzero]
            slope = _weighted_median(r, np.abs(x[nonzero]))
        obj = _l1_objective(x, y, slope, intercept)
        if best - obj < tol:
            break
        best = obj
    return slope, intercept


def fit_drift_model(samples: list[IntensitySample] | pd.DataFrame,
                    events: list[ShiftEvent]) -> DriftModel:
    """Fit one site's piecewise linear model; ``samples`` must belong to a
    single site. Segments are fitted independently between shift days."""
    if isinstance(samples, pd.DataFrame):
        rows = [IntensitySample(str(r.site_id), int(r.day), float(r.mean_intensity))
                for r in samples.itertuples()]
    else:
        rows = list(samples)
    if not rows:
        raise DriftFitError("no intensity samples")
    sites = {s.site_id for s in rows}
    if len(sites) != 1:
        raise DriftFitError(f"samples span multiple sites: {sorted(sites)}")
    site = rows[0].site_id
    event_days = sorted({int(e.day) for e in events if e.site_id == site and e.day > 0})
    boundaries = [0] + event_days

    days = np.array([s.day for s in rows])
    vals = np.array([s.mean_intensity for s in rows])
    slopes: list[float] = []
    intercepts: list[float] = []
    for i, start in enumerate(boundaries):
        end = boundaries[i + 1] if i + 1 < len(boundaries) else None
        sel = (days >= start) if end is None else ((days >= start) & (days < end))
        x = (days[sel] - start).astype(np.float64)
        y = vals[sel].astype(np.float64)
        if len(x) == 0:
            # no data: hold the previous segment's endpoint flat
            if i == 0:
                slopes.append(0.0)
                intercepts.append(float(np.median(vals)))
            else:
                prev_val = slopes[-1] * (start - boundaries[i - 1]) + intercepts[-1]
                slopes.append(0.0)
                intercepts.append(prev_val)
        elif len(np.unique(x)) < 2:
            slopes.append(0.0)
            intercepts.append(float(np.median(y)))
        else:
            slope, intercept = fit_l1_line(x, y)
            slopes.append(slope)
            intercepts.append(intercept)
    return DriftModel(site, boundaries, slopes, intercepts)


def fit_drift_models(samples: pd.DataFrame, events: list[ShiftEvent]) -> dict[str, DriftModel]:
    """Fit every site present in a samples table."""
    return {
        str(site): fit_drift_model(group, events)
        for site, group in samples.groupby("site_id", sort=True)
    }


# ---------------------------------------------------------------------------
# Biomarker tables


def validate_biomarker_table(table: pd.DataFrame) -> pd.DataFrame:
    missing = set(BIOMARKER_COLUMNS) - set(table.columns)
    if missing:
        raise ValueError(f"biomarker table is missing columns {sorted(missing)}")
    if (table["day"] < 0).any():
        raise ValueError("scan days must be >= 0")
    key = ["subject_id", "knee_side", "visit", "marker"]
    if table.duplicated(subset=key).any():
        raise ValueError("duplicate (subject, knee, visit, marker) rows")
    if "corrected" not in table.columns:
        table = table.assign(corrected=False)
    return table


def longitudinal_pairs(table: pd.DataFrame, marker: str) -> pd.DataFrame:
    """First/last visit value pairs per (subject, knee) for one marker."""
    rows = table[table["marker"] == marker]
    out = []
    for (subject, knee), group in rows.groupby(["subject_id", "knee_side"], sort=True):
        if len(group) < 2:
            continue
        group = group.sort_values("day", kind="stable")
        first = group.iloc[0]
        last = group.iloc[-1]
        out.append({
            "subject_id": subject, "knee_side": knee, "site_id": first["site_id"],
            "day_bl": int(first["day"]), "day_fu": int(last["day"]),
            "value_bl": float(first["value"]), "value_fu": float(last["value"]),
        })
    return pd.DataFrame(out)


def fit_marker_sensitivity(table: pd.DataFrame, models: dict[str, DriftModel],
                           marker: str) -> MarkerSensitivity:
    """Regress longitudinal marker change on modeled intensity change."""
    pairs = longitudinal_pairs(validate_biomarker_table(table), marker)
    if len(pairs) < 3:
        raise DriftFitError(f"need >= 3 longitudinal pairs for {marker!r}, "
                            f"got {len(pairs)}")
    d_marker = pairs["value_fu"].to_numpy() - pairs["value_bl"].to_numpy()
    d_int = np.array([
        model_intensity(models[str(r.site_id)], r.day_fu)
        - model_intensity(models[str(r.site_id)], r.day_bl)
        for r in pairs.itertuples()
    ])
    if np.ptp(d_int) == 0.0:
        raise DriftFitError("no intensity variation across pairs to regress on")
    beta, intercept = ols_fit(d_int, d_marker)
    return MarkerSensitivity(marker, beta, intercept, len(pairs))


def correct_marker(table: pd.DataFrame, models: dict[str, DriftModel],
                   sensitivities: dict[str, MarkerSensitivity]) -> pd.DataFrame:
    """Correct values by the modeled intensity change since day 0:
    value - beta * (I(day) - I(0)). Tables carry a ``corrected`` flag and
    refuse double correction."""
    table = validate_biomarker_table(table)
    if table["corrected"].any():
        raise ValueError("table already contains corrected rows")
    out = table.copy()
    for idx, row in table.iterrows():
        marker = row["marker"]
        site = str(row["site_id"])
        if marker not in sensitivities:
            raise DriftFitError(f"no sensitivity fitted for marker {marker!r}")
        if site not in models:
            raise DriftFitError(f"no drift model fitted for site {site!r}")
        model = models[site]
        delta = model_intensity(model, int(row["day"])) - model_intensity(model, 0)
        out.at[idx, "value"] = row["value"] - sensitivities[marker].beta * delta
    out["corrected"] = True
    return out


# ---------------------------------------------------------------------------
# Persistence


def save_plds_document(path: str, models: dict[str, DriftModel],
                       sensitivities: dict[str, MarkerSensitivity]) -> None:
    doc = {
        "models": {site: m.to_dict() for site, m in models.items()},
        "sensitivities": {mk: s.to_dict() for mk, s in sensitivities.items()},
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_plds_document(path: str) -> tuple[dict[str, DriftModel], dict[str, MarkerSensitivity]]:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    models = {site: DriftModel.from_dict(d) for site, d in doc["models"].items()}
    sens = {mk: MarkerSensitivity.from_dict(d) for mk, d in doc["sensitivities"].items()}
    return models, sens


def load_events_csv(path: str) -> list[ShiftEvent]:
    df = pd.read_csv(path)
    required = {"site_id", "day"}
    if not required <= set(df.columns):
        raise ValueError("events CSV needs site_id,day[,source] columns")
    source = df["source"] if "source" in df.columns else ["log"] * len(df)
    return [ShiftEvent(str(s), int(d), str(src))
            for s, d, src in zip(df["site_id"], df["day"], source)]
