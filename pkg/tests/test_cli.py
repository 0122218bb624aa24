import hashlib
import json
import os

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from driftnorm.cli import main
from driftnorm.phantom import PhantomConfig, SiteConfig
from driftnorm.volume import load_metaimage


def run_cli(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def write_phantom_config(path, **kw):
    base = PhantomConfig(seed=42, subjects=2, visits=2,
                         sites=(SiteConfig(noise_sigma=2.0),),
                         jitter_translation_mm=3.0, jitter_rotation_deg=3.0,
                         jitter_scale_pct=2.0)
    d = base.to_dict()
    d.update(kw)
    with open(path, "w") as fh:
        json.dump(d, fh)
    return path


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestPhantomCommand:
    def test_writes_manifest(self, tmp_path):
        cfg = write_phantom_config(tmp_path / "cfg.json")
        res = run_cli("phantom", "--config", cfg, "--out", tmp_path / "cohort")
        assert res.exit_code == 0, res.output
        manifest = pd.read_csv(tmp_path / "cohort" / "manifest.csv")
        assert len(manifest) == 4

    def test_missing_config_usage_error(self, tmp_path):
        res = run_cli("phantom", "--out", tmp_path / "x")
        assert res.exit_code == 2

    def test_same_seed_identical_manifest(self, tmp_path):
        cfg = write_phantom_config(tmp_path / "cfg.json")
        run_cli("phantom", "--config", cfg, "--out", tmp_path / "a")
        run_cli("phantom", "--config", cfg, "--out", tmp_path / "b")
        assert file_hash(tmp_path / "a" / "manifest.csv") == \
            file_hash(tmp_path / "b" / "manifest.csv")
        img = "images/subj000_BL.raw"
        assert file_hash(tmp_path / "a" / img) == file_hash(tmp_path / "b" / img)

    def test_seed_override_changes_output(self, tmp_path):
        cfg = write_phantom_config(tmp_path / "cfg.json")
        run_cli("phantom", "--config", cfg, "--out", tmp_path / "a")
        run_cli("phantom", "--config", cfg, "--out", tmp_path / "b", "--seed", 99)
        img = "images/subj000_BL.raw"
        assert file_hash(tmp_path / "a" / img) != file_hash(tmp_path / "b" / img)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small end-to-end pipeline: 3 training subjects, 2 test subjects."""
    tmp = tmp_path_factory.mktemp("cli_pipeline")
    train_cfg = write_phantom_config(
        tmp / "train_cfg.json", seed=300, subjects=3, visits=1)
    test_cfg = write_phantom_config(
        tmp / "test_cfg.json", seed=400, subjects=2, visits=2,
        bl_day_range=[0, 30], fu_day_offset_range=[350, 380])
    runner_cfg = tmp / "run.json"
    with open(runner_cfg, "w") as fh:
        json.dump({"max_samples_per_class": 600}, fh)
    assert run_cli("phantom", "--config", train_cfg, "--out", tmp / "train").exit_code == 0
    assert run_cli("phantom", "--config", test_cfg, "--out", tmp / "test").exit_code == 0
    res = run_cli("train", "--manifest", tmp / "train" / "manifest.csv",
                  "--out", tmp / "model", "--config", runner_cfg, "--threads", 2)
    assert res.exit_code == 0, res.output
    res = run_cli("segment", "--manifest", tmp / "test" / "manifest.csv",
                  "--model", tmp / "model", "--out", tmp / "seg", "--no-aan",
                  "--threads", 2)
    assert res.exit_code == 0, res.output
    return tmp


class TestTrainSegment:
    def test_model_artifacts(self, pipeline):
        model = pipeline / "model"
        for name in ("atlasset.json", "knn.json", "labels.json", "roi_mask.mhd",
                     "atlas_00.mhd"):
            assert (model / name).exists()

    def test_volume_table_schema(self, pipeline):
        table = pd.read_csv(pipeline / "seg" / "volumes.csv")
        assert list(table.columns) == ["subject_id", "knee_side", "site_id",
                                       "visit", "day", "marker", "value"]
        assert set(table["marker"]) == {"bone", "cartilage-medial", "cartilage-lateral"}
        assert len(table) == 4 * 3
        assert (table["value"] > 0).all()

    def test_intensity_samples_written(self, pipeline):
        samples = pd.read_csv(pipeline / "seg" / "intensity_samples.csv")
        assert {"site_id", "day", "mean_intensity"} <= set(samples.columns)
        assert len(samples) == 4

    def test_labels_and_meta_written(self, pipeline):
        labels = load_metaimage(str(pipeline / "seg" / "labels" / "subj000_BL_seg.mhd"))
        assert set(np.unique(labels.data)) <= {0.0, 1.0, 2.0, 3.0}
        meta = json.load(open(pipeline / "seg" / "meta" / "subj000_BL.json"))
        assert meta["aan_map"] is None
        assert "transform" in meta


class TestNormalizeAan:
    def test_writes_normalized_volume_and_sidecar(self, pipeline):
        out = pipeline / "aan"
        res = run_cli("normalize-aan", "--manifest", pipeline / "test" / "manifest.csv",
                      "--model", pipeline / "model", "--out", out, "--threads", 2)
        assert res.exit_code == 0, res.output
        vol = load_metaimage(str(out / "subj000_BL_aan.mhd"))
        sidecar = json.load(open(out / "subj000_BL_aan.json"))
        assert vol.dims == (64, 64, 64)
        assert sidecar["scale"] > 0


class TestPldsCommands:
    def test_fit_correct_round_trip(self, pipeline, tmp_path):
        # synthetic intensity samples and biomarkers with known coupling
        rng = np.random.default_rng(1)
        days = np.arange(0, 400, 10)
        samples = pd.DataFrame({
            "site_id": "site0", "day": days,
            "mean_intensity": 100.0 - 0.05 * days,
        })
        samples_path = tmp_path / "samples.csv"
        samples.to_csv(samples_path, index=False)
        rows = []
        for i, fu in enumerate(range(100, 400, 30)):
            base = 20.0 + i
            rows.append(("s%d" % i, "L", "site0", "BL", 0, "vol", base))
            rows.append(("s%d" % i, "L", "site0", "FU", fu, "vol",
                         base + 0.5 * (-0.05 * fu)))
        bio = pd.DataFrame(rows, columns=["subject_id", "knee_side", "site_id",
                                          "visit", "day", "marker", "value"])
        bio_path = tmp_path / "bio.csv"
        bio.to_csv(bio_path, index=False)

        model_path = tmp_path / "plds.json"
        res = run_cli("fit-plds", "--samples", samples_path, "--biomarkers", bio_path,
                      "--out", model_path)
        assert res.exit_code == 0, res.output
        doc = json.load(open(model_path))
        assert doc["models"]["site0"]["slopes"][0] == pytest.approx(-0.05, abs=1e-6)
        assert doc["sensitivities"]["vol"]["beta"] == pytest.approx(0.5, abs=1e-6)

        corrected_path = tmp_path / "corrected.csv"
        res = run_cli("correct", "--biomarkers", bio_path, "--plds", model_path,
                      "--out", corrected_path)
        assert res.exit_code == 0, res.output
        corrected = pd.read_csv(corrected_path)
        assert corrected["corrected"].all()
        fu_rows = corrected[corrected["visit"] == "FU"]
        orig = bio[bio["visit"] == "FU"]
        # correction removes the injected drift coupling
        assert np.allclose(fu_rows["value"].to_numpy(),
                           orig["value"].to_numpy() + 0.5 * 0.05 * orig["day"].to_numpy(),
                           atol=1e-6)

    def test_double_correction_exits_nonzero(self, pipeline, tmp_path):
        samples = pd.DataFrame({"site_id": "A", "day": [0, 100, 200, 300],
                                "mean_intensity": [100, 99, 98, 97]})
        samples.to_csv(tmp_path / "s.csv", index=False)
        rows = [("s0", "L", "A", "BL", 0, "vol", 10.0),
                ("s0", "L", "A", "FU", 300, "vol", 9.0),
                ("s1", "L", "A", "BL", 10, "vol", 10.0),
                ("s1", "L", "A", "FU", 200, "vol", 9.5),
                ("s2", "L", "A", "BL", 20, "vol", 11.0),
                ("s2", "L", "A", "FU", 250, "vol", 10.0)]
        bio = pd.DataFrame(rows, columns=["subject_id", "knee_side", "site_id",
                                          "visit", "day", "marker", "value"])
        bio.to_csv(tmp_path / "b.csv", index=False)
        assert run_cli("fit-plds", "--samples", tmp_path / "s.csv", "--biomarkers",
                       tmp_path / "b.csv", "--out", tmp_path / "m.json").exit_code == 0
        assert run_cli("correct", "--biomarkers", tmp_path / "b.csv", "--plds",
                       tmp_path / "m.json", "--out", tmp_path / "c1.csv").exit_code == 0
        res = run_cli("correct", "--biomarkers", tmp_path / "c1.csv", "--plds",
                      tmp_path / "m.json", "--out", tmp_path / "c2.csv")
        assert res.exit_code == 2

    def test_detect_events_from_metadata(self, tmp_path):
        samples = pd.DataFrame({"site_id": "A", "day": range(0, 400, 10),
                                "mean_intensity": 100.0})
        samples.to_csv(tmp_path / "s.csv", index=False)
        md = pd.DataFrame({
            "site_id": "A", "day": [0, 100, 200, 300],
            "station_name": ["st1"] * 4,
            "software_version": ["v1", "v1", "v2", "v2"],
        })
        md.to_csv(tmp_path / "md.csv", index=False)
        res = run_cli("fit-plds", "--samples", tmp_path / "s.csv", "--metadata",
                      tmp_path / "md.csv", "--out", tmp_path / "m.json")
        assert res.exit_code == 0, res.output
        doc = json.load(open(tmp_path / "m.json"))
        assert doc["models"]["A"]["boundaries"] == [0, 200]


class TestEvaluate:
    def make_truth_table(self, tmp_path):
        rows = []
        for i in range(5):
            bl = 20.0 + i
            rows.append((f"s{i}", "L", "A", "BL", 0, "vol", bl))
            rows.append((f"s{i}", "L", "A", "FU", 365, "vol", bl * 0.99))
        table = pd.DataFrame(rows, columns=["subject_id", "knee_side", "site_id",
                                            "visit", "day", "marker", "value"])
        path = tmp_path / "truth.csv"
        table.to_csv(path, index=False)
        return path

    def test_self_comparison_gives_p_one(self, tmp_path):
        truth = self.make_truth_table(tmp_path)
        out = tmp_path / "metrics.csv"
        res = run_cli("evaluate", "--a", truth, "--b", truth, "--out", out)
        assert res.exit_code == 0, res.output
        table = pd.read_csv(out)
        p = table[(table["metric"] == "p_change")]["value"].iloc[0]
        t = table[(table["metric"] == "t_change")]["value"].iloc[0]
        assert p == 1.0
        assert t == 0.0
        r = table[table["metric"] == "pearson_r_bl"]["value"].iloc[0]
        assert r == pytest.approx(1.0)

    def test_missing_input_usage_error(self, tmp_path):
        res = run_cli("evaluate", "--a", tmp_path / "nope.csv",
                      "--b", tmp_path / "nope.csv", "--out", tmp_path / "o.csv")
        assert res.exit_code == 2

    def test_rms_cv_block(self, tmp_path):
        rows = []
        for i in range(4):
            rows.append((f"s{i}", "L", "A", "S1", 0, "vol", 100.0))
            rows.append((f"s{i}", "L", "A", "S2", 0, "vol", 105.0))
        table = pd.DataFrame(rows, columns=["subject_id", "knee_side", "site_id",
                                            "visit", "day", "marker", "value"])
        path = tmp_path / "rescan.csv"
        table.to_csv(path, index=False)
        out = tmp_path / "m.csv"
        res = run_cli("evaluate", "--a", path, "--b", path, "--out", out, "--rms-cv")
        assert res.exit_code == 0, res.output
        metrics_table = pd.read_csv(out)
        cv = metrics_table[metrics_table["metric"] == "rms_cv"]["value"].iloc[0]
        assert cv == pytest.approx(abs(100 - 105) / np.sqrt(2) / 102.5, rel=1e-9)


class TestDriftReport:
    def test_noiseless_linear_cohort(self, tmp_path):
        cfg = write_phantom_config(
            tmp_path / "cfg.json", seed=77, subjects=6, visits=2,
            sites=[{"site_id": "siteA", "drift_mode": "additive",
                    "slopes_per_day": [-0.05], "shift_days": [], "shift_jumps": [],
                    "noise_sigma": 0.0}],
            size_fraction=0.0, jitter_translation_mm=0.0, jitter_rotation_deg=0.0,
            jitter_scale_pct=0.0, change_fraction=0.0,
            bl_day_range=[0, 200], fu_day_offset_range=[100, 300])
        assert run_cli("phantom", "--config", cfg, "--out", tmp_path / "cohort").exit_code == 0
        out = tmp_path / "report"
        res = run_cli("drift-report", "--manifest", tmp_path / "cohort" / "manifest.csv",
                      "--out", out)
        assert res.exit_code == 0, res.output
        table = pd.read_csv(out / "drift_siteA.csv")
        assert table["residual"].abs().max() < 1e-6
        assert (out / "drift_siteA.svg").exists()

    def test_single_shift_event_line_in_svg(self, tmp_path):
        cfg = write_phantom_config(
            tmp_path / "cfg.json", seed=78, subjects=6, visits=2,
            sites=[{"site_id": "siteB", "drift_mode": "additive",
                    "slopes_per_day": [-0.05, -0.02], "shift_days": [150],
                    "shift_jumps": [4.0], "noise_sigma": 0.0}],
            size_fraction=0.0, jitter_translation_mm=0.0, jitter_rotation_deg=0.0,
            jitter_scale_pct=0.0, change_fraction=0.0,
            bl_day_range=[0, 140], fu_day_offset_range=[60, 260])
        run_cli("phantom", "--config", cfg, "--out", tmp_path / "cohort")
        events = pd.DataFrame({"site_id": ["siteB"], "day": [150], "source": ["log"]})
        events.to_csv(tmp_path / "events.csv", index=False)
        out = tmp_path / "report"
        res = run_cli("drift-report", "--manifest", tmp_path / "cohort" / "manifest.csv",
                      "--out", out, "--events", tmp_path / "events.csv")
        assert res.exit_code == 0, res.output
        svg = open(out / "drift_siteB.svg").read()
        assert svg.count('class="shift-event"') == 1
        # model column discontinuous only at that day
        table = pd.read_csv(out / "drift_siteB.csv")
        assert table["residual"].abs().max() < 1e-6


class TestIdempotency:
    def test_segment_rerun_byte_identical(self, pipeline, tmp_path):
        out1 = tmp_path / "seg1"
        out2 = tmp_path / "seg2"
        for out in (out1, out2):
            res = run_cli("segment", "--manifest", pipeline / "test" / "manifest.csv",
                          "--model", pipeline / "model", "--out", out, "--no-aan",
                          "--threads", 2)
            assert res.exit_code == 0
        assert file_hash(out1 / "volumes.csv") == file_hash(out2 / "volumes.csv")
