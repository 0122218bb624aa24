"""Command-line pipeline driver.

Subcommands mirror the workflow: phantom generation, training,
segmentation (with or without intensity normalization), standalone
normalization, drift-model fitting, biomarker correction, evaluation, and
drift reporting. Commands communicate only through filesystem artifacts;
all randomness is seeded through configs, and re-running a command with
identical inputs reproduces identical outputs.

Exit codes: 0 success, 1 computational failure, 2 usage or input error.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import dataclass, field

import click
import numpy as np
import pandas as pd

from . import aan as aan_mod
from . import metrics, report
from . import plds as plds_mod
from .phantom import PhantomConfig, generate_cohort, load_manifest
from .registration import RegistrationConfig
from .segmenter import (
    TrainingConfig,
    TrainingError,
    load_model,
    save_model,
    segment,
    train,
)
from .volume import MetaImageError, Volume, load_metaimage, save_metaimage

logger = logging.getLogger("driftnorm")

FLOAT_FORMAT = "%.12g"

# Failures of the computation itself (exit 1), as opposed to bad inputs (exit 2).
_COMPUTE_ERRORS = (
    TrainingError,
    aan_mod.IntensityFitError,
    plds_mod.DriftFitError,
    RuntimeError,
    np.linalg.LinAlgError,
)
_INPUT_ERRORS = (FileNotFoundError, NotADirectoryError, MetaImageError,
                 KeyError, ValueError, json.JSONDecodeError,
                 pd.errors.EmptyDataError, pd.errors.ParserError)


@dataclass
class RunConfig:
    """Numeric knobs shared by the pipeline commands; defaults reproduce
    the documented acceptance runs."""

    margin_fraction: float = 0.15
    k: int = 25
    max_samples_per_class: int = 2000
    roi_dilation_mm: float = 5.0
    background_threshold: float = 0.5
    scales_mm: tuple[float, ...] = (1.0, 2.0, 4.0)
    use_aan: bool = True
    use_plds: bool = False
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def training_config(self) -> TrainingConfig:
        from .features import FeatureSpec
        return TrainingConfig(
            k=self.k,
            max_samples_per_class=self.max_samples_per_class,
            roi_dilation_mm=self.roi_dilation_mm,
            background_threshold=self.background_threshold,
            margin_fraction=self.margin_fraction,
            feature_spec=FeatureSpec(scales_mm=self.scales_mm),
            registration=self.registration,
        )

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="ascii") as fh:
            d = json.load(fh)
        cfg = cls()
        for key, value in d.items():
            if key == "registration":
                cfg.registration = RegistrationConfig.from_dict(value)
            elif key == "scales_mm":
                cfg.scales_mm = tuple(value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ValueError(f"unknown run config key {key!r}")
        return cfg


def _load_run_config(path: str | None) -> RunConfig:
    return RunConfig.from_json(path) if path else RunConfig()


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Run a command body with the exit-code contract."""
    try:
        fn()
    except _COMPUTE_ERRORS as exc:
        _fail(1, str(exc))
    except _INPUT_ERRORS as exc:
        _fail(2, str(exc))


def _write_csv(df: pd.DataFrame, path: str):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _load_cohort(manifest_path: str):
    manifest, base = load_manifest(manifest_path)
    required = {"subject_id", "visit", "day", "site_id", "volume_path"}
    missing = required - set(manifest.columns)
    if missing:
        raise ValueError(f"manifest missing columns {sorted(missing)}")
    return manifest, base


@click.group()
@click.option("--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Scanner drift normalization pipeline."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@main.command("phantom")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="PhantomConfig JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def cmd_phantom(config_path, out_dir, seed):
    """Generate a synthetic phantom cohort with ground truth."""
    def body():
        cfg = PhantomConfig.from_json(config_path)
        if seed is not None:
            cfg.seed = seed
        manifest = generate_cohort(cfg, out_dir)
        logger.info("wrote %d scans to %s", len(manifest), out_dir)
        click.echo(os.path.join(out_dir, "manifest.csv"))
    _guarded(body)


@main.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "model_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--threads", type=int, default=1)
def cmd_train(manifest_path, model_dir, config_path, threads):
    """Train the atlas set and voxel classifier from labeled scans."""
    def body():
        run = _load_run_config(config_path)
        manifest, base = _load_cohort(manifest_path)
        if "label_path" not in manifest.columns:
            raise ValueError("training manifest needs a label_path column")
        scans = [load_metaimage(os.path.join(base, p)) for p in manifest["volume_path"]]
        labels = [load_metaimage(os.path.join(base, p)) for p in manifest["label_path"]]
        atlas_set, model = train(scans, labels, run.training_config(), threads)
        save_model(model_dir, atlas_set, model)
        logger.info("model written to %s", model_dir)
        click.echo(model_dir)
    _guarded(body)


@main.command("segment")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--use-aan/--no-aan", default=True, show_default=True,
              help="Apply atlas affine intensity normalization before classification.")
@click.option("--threads", type=int, default=1)
def cmd_segment(manifest_path, model_dir, out_dir, use_aan, threads):
    """Segment every scan in a manifest; write labels, volume table, and
    per-scan mean intensities."""
    def body():
        atlas_set, model = load_model(model_dir)
        manifest, base = _load_cohort(manifest_path)
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "meta"), exist_ok=True)
        volume_rows = []
        intensity_rows = []
        for r in manifest.itertuples():
            scan = load_metaimage(os.path.join(base, r.volume_path))
            result = segment(scan, atlas_set, model, use_aan=use_aan, threads=threads)
            stem = f"{r.subject_id}_{r.visit}"
            label_rel = os.path.join("labels", f"{stem}_seg.mhd")
            save_metaimage(result.labels, os.path.join(out_dir, label_rel))
            meta = {
                "subject_id": r.subject_id,
                "visit": r.visit,
                "transform": result.transform.to_dict(),
                "aan_map": result.aan_map.to_dict() if result.aan_map else None,
                "label_path": label_rel,
            }
            with open(os.path.join(out_dir, "meta", f"{stem}.json"), "w",
                      encoding="ascii") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")
            for marker, value in result.volumes_ml.items():
                volume_rows.append({
                    "subject_id": r.subject_id, "knee_side": "L",
                    "site_id": r.site_id, "visit": r.visit, "day": int(r.day),
                    "marker": marker, "value": value,
                })
            intensity_rows.append({
                "site_id": r.site_id, "day": int(r.day),
                "mean_intensity": result.mean_intensity,
                "subject_id": r.subject_id, "visit": r.visit,
            })
            logger.info("segmented %s", stem)
        _write_csv(pd.DataFrame(volume_rows), os.path.join(out_dir, "volumes.csv"))
        _write_csv(pd.DataFrame(intensity_rows),
                   os.path.join(out_dir, "intensity_samples.csv"))
        click.echo(os.path.join(out_dir, "volumes.csv"))
    _guarded(body)


@main.command("normalize-aan")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--threads", type=int, default=1)
def cmd_normalize_aan(manifest_path, model_dir, out_dir, threads):
    """Write intensity-normalized copies of every scan plus map sidecars."""
    def body():
        atlas_set, _ = load_model(model_dir)
        manifest, base = _load_cohort(manifest_path)
        os.makedirs(out_dir, exist_ok=True)
        for r in manifest.itertuples():
            scan = load_metaimage(os.path.join(base, r.volume_path))
            regs = atlas_set.register_scan(scan, threads)
            fused_map, normalized = aan_mod.normalize_scan(
                scan, regs, atlas_set.images, atlas_set.intensity_maps,
                atlas_set.config.margin_fraction)
            stem = f"{r.subject_id}_{r.visit}"
            save_metaimage(normalized, os.path.join(out_dir, f"{stem}_aan.mhd"))
            with open(os.path.join(out_dir, f"{stem}_aan.json"), "w",
                      encoding="ascii") as fh:
                json.dump(fused_map.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            logger.info("normalized %s", stem)
        click.echo(out_dir)
    _guarded(body)


@main.command("fit-plds")
@click.option("--samples", "samples_path", type=click.Path(exists=True), default=None,
              help="Intensity samples CSV (site_id,day,mean_intensity).")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), default=None,
              help="Cohort manifest; mean intensities are computed from the volumes.")
@click.option("--metadata", "metadata_path", type=click.Path(exists=True), default=None,
              help="Scanner metadata CSV for shift-event detection.")
@click.option("--events", "events_path", type=click.Path(exists=True), default=None,
              help="Explicit shift events CSV (site_id,day,source).")
@click.option("--biomarkers", "biomarkers_path", type=click.Path(exists=True), default=None,
              help="Biomarker CSV; fits per-marker sensitivities when given.")
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_fit_plds(samples_path, manifest_path, metadata_path, events_path,
                 biomarkers_path, out_path):
    """Fit per-site drift models (and optional marker sensitivities)."""
    def body():
        if samples_path is None and manifest_path is None:
            raise ValueError("need --samples or --manifest")
        if samples_path:
            samples = pd.read_csv(samples_path)
        else:
            manifest, base = _load_cohort(manifest_path)
            samples = report.intensity_samples_from_manifest(manifest, base)
        events = []
        if metadata_path:
            events.extend(plds_mod.detect_shift_events(pd.read_csv(metadata_path)))
        if events_path:
            events.extend(plds_mod.load_events_csv(events_path))
        models = plds_mod.fit_drift_models(samples, events)
        sensitivities = {}
        if biomarkers_path:
            table = pd.read_csv(biomarkers_path)
            for marker in sorted(table["marker"].unique()):
                sensitivities[marker] = plds_mod.fit_marker_sensitivity(
                    table, models, marker)
        plds_mod.save_plds_document(out_path, models, sensitivities)
        logger.info("drift models for sites %s written to %s",
                    sorted(models), out_path)
        click.echo(out_path)
    _guarded(body)


@main.command("correct")
@click.option("--biomarkers", "biomarkers_path", required=True, type=click.Path(exists=True))
@click.option("--plds", "plds_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_correct(biomarkers_path, plds_path, out_path):
    """Apply drift-shift correction to a biomarker table."""
    def body():
        models, sensitivities = plds_mod.load_plds_document(plds_path)
        table = pd.read_csv(biomarkers_path)
        corrected = plds_mod.correct_marker(table, models, sensitivities)
        _write_csv(corrected, out_path)
        click.echo(out_path)
    _guarded(body)


def _change_table(table: pd.DataFrame, marker: str) -> pd.DataFrame:
    pairs = plds_mod.longitudinal_pairs(table, marker)
    if len(pairs):
        pairs["change_pct"] = (pairs["value_fu"] - pairs["value_bl"]) \
            / pairs["value_bl"] * 100.0
    return pairs


@main.command("evaluate")
@click.option("--a", "a_path", required=True, type=click.Path(exists=True),
              help="Method biomarker CSV.")
@click.option("--b", "b_path", required=True, type=click.Path(exists=True),
              help="Reference biomarker CSV.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--cohort", default="cohort", show_default=True)
@click.option("--dice-a", type=click.Path(exists=True), default=None,
              help="Manifest with label_path for method segmentations.")
@click.option("--dice-b", type=click.Path(exists=True), default=None,
              help="Manifest with label_path for reference segmentations.")
@click.option("--rms-cv", "rms_cv_flag", is_flag=True,
              help="Treat table A visits as scan-rescan pairs and report RMS CV.")
def cmd_evaluate(a_path, b_path, out_path, cohort, dice_a, dice_b, rms_cv_flag):
    """Compare two biomarker tables (method vs reference): longitudinal
    change statistics with paired t-tests, cross-sectional agreement, and
    optional Dice / scan-rescan precision blocks."""
    def body():
        table_a = plds_mod.validate_biomarker_table(pd.read_csv(a_path))
        table_b = plds_mod.validate_biomarker_table(pd.read_csv(b_path))
        rows = []

        def add(structure, method, metric, value):
            rows.append({"cohort": cohort, "structure": structure,
                         "method": method, "metric": metric, "value": value})

        markers = sorted(set(table_a["marker"]) & set(table_b["marker"]))
        for marker in markers:
            changes_a = _change_table(table_a, marker)
            changes_b = _change_table(table_b, marker)
            merged = changes_a.merge(changes_b, on=["subject_id", "knee_side"],
                                     suffixes=("_a", "_b"))
            if len(merged) >= 2:
                ca = merged["change_pct_a"].to_numpy()
                cb = merged["change_pct_b"].to_numpy()
                add(marker, "a", "n_pairs", float(len(merged)))
                add(marker, "a", "mean_change_pct", float(ca.mean()))
                add(marker, "a", "std_change_pct", float(ca.std(ddof=1)))
                add(marker, "b", "mean_change_pct", float(cb.mean()))
                add(marker, "b", "std_change_pct", float(cb.std(ddof=1)))
                t, p = metrics.paired_t_test(ca, cb)
                add(marker, "a_vs_b", "t_change", t)
                add(marker, "a_vs_b", "p_change", p)
            bl = table_a[table_a["marker"] == marker].merge(
                table_b[table_b["marker"] == marker],
                on=["subject_id", "knee_side", "visit"], suffixes=("_a", "_b"))
            first_visits = bl.groupby(["subject_id", "knee_side"])["day_a"].idxmin()
            bl = bl.loc[first_visits]
            if len(bl) >= 3 and bl["value_a"].nunique() > 1 and bl["value_b"].nunique() > 1:
                add(marker, "a_vs_b", "pearson_r_bl",
                    metrics.pearson_r(bl["value_a"], bl["value_b"]))
                add(marker, "a_vs_b", "mean_signed_relative_diff_bl",
                    metrics.mean_signed_relative_diff(bl["value_a"], bl["value_b"]))
            if rms_cv_flag:
                pairs = []
                for _, group in table_a[table_a["marker"] == marker].groupby(
                        ["subject_id", "knee_side"]):
                    if len(group) == 2:
                        pairs.append(tuple(group["value"]))
                if pairs:
                    add(marker, "a", "rms_cv", metrics.rms_cv(pairs))

        if (dice_a is None) != (dice_b is None):
            raise ValueError("--dice-a and --dice-b must be given together")
        if dice_a:
            man_a, base_a = load_manifest(dice_a)
            man_b, base_b = load_manifest(dice_b)
            merged = man_a.merge(man_b, on=["subject_id", "visit"],
                                 suffixes=("_a", "_b"))
            if not len(merged):
                raise ValueError("no matching (subject, visit) rows for Dice")
            label_ids = sorted(set(np.unique(load_metaimage(os.path.join(
                base_b, merged.iloc[0]["label_path_b"])).data.astype(int))) - {0})
            scores = {lid: [] for lid in label_ids}
            for r in merged.itertuples():
                la = load_metaimage(os.path.join(base_a, r.label_path_a))
                lb = load_metaimage(os.path.join(base_b, r.label_path_b))
                for lid in label_ids:
                    scores[lid].append(metrics.dice(la.data == lid, lb.data == lid))
            for lid in label_ids:
                add(f"label{lid}", "a_vs_b", "dice_mean", float(np.mean(scores[lid])))
                add(f"label{lid}", "a_vs_b", "dice_std", float(np.std(scores[lid], ddof=1))
                    if len(scores[lid]) > 1 else 0.0)

        _write_csv(pd.DataFrame(rows), out_path)
        click.echo(out_path)
    _guarded(body)


@main.command("drift-report")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--plds", "plds_path", type=click.Path(exists=True), default=None,
              help="Fitted drift-model JSON; fitted on the fly when absent.")
@click.option("--events", "events_path", type=click.Path(exists=True), default=None)
@click.option("--metadata", "metadata_path", type=click.Path(exists=True), default=None)
@click.option("--focal", is_flag=True, help="Also write the focal-change volume.")
@click.option("--model", "model_dir", type=click.Path(exists=True), default=None,
              help="Trained model dir (required for --focal registration).")
@click.option("--threads", type=int, default=1)
def cmd_drift_report(manifest_path, out_dir, plds_path, events_path, metadata_path,
                     focal, model_dir, threads):
    """Per-site drift tables and SVG plots; optional focal change map."""
    def body():
        manifest, base = _load_cohort(manifest_path)
        os.makedirs(out_dir, exist_ok=True)
        samples = report.intensity_samples_from_manifest(manifest, base)
        events = []
        if metadata_path:
            events.extend(plds_mod.detect_shift_events(pd.read_csv(metadata_path)))
        if events_path:
            events.extend(plds_mod.load_events_csv(events_path))
        if plds_path:
            models, _ = plds_mod.load_plds_document(plds_path)
        else:
            models = plds_mod.fit_drift_models(samples, events)
        for site, group in samples.groupby("site_id", sort=True):
            model = models.get(str(site))
            table = report.drift_table(group, model)
            _write_csv(table, os.path.join(out_dir, f"drift_{site}.csv"))
            svg = report.drift_plot_svg(group, model, events, str(site))
            with open(os.path.join(out_dir, f"drift_{site}.svg"), "w",
                      encoding="ascii") as fh:
                fh.write(svg)
        if focal:
            if not model_dir:
                raise ValueError("--focal requires --model")
            atlas_set, _ = load_model(model_dir)
            vol = report.focal_change_volume(manifest, base, atlas_set,
                                             threads=threads)
            save_metaimage(vol, os.path.join(out_dir, "focal_change.mhd"))
        click.echo(out_dir)
    _guarded(body)


if __name__ == "__main__":
    main()
