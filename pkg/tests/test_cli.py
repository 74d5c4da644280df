"""End-to-end command-line tests on small fixtures."""

import json
from pathlib import Path

import numpy as np
import pytest

from flowcast.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK, main
from flowcast.data import generate_synthetic_family, load_domain, save_domain
from flowcast.lstm import ModelConfig, init_parameters, load_checkpoint
from flowcast.metrics import SUMMARY_COLUMNS


def write_config(path: Path, **sections) -> Path:
    path.write_text(json.dumps(sections, indent=2))
    return path


def tree_bytes(root: Path, skip=("run_meta.json",)) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.fixture
def datasets(tmp_path):
    source = generate_synthetic_family(seed=11, n_basins=3, n_days=140,
                                       train_days=100, role="source")
    target = generate_synthetic_family(seed=12, n_basins=2, n_days=120,
                                       train_days=80, role="target")
    save_domain(source, tmp_path / "source")
    save_domain(target, tmp_path / "target")
    return tmp_path


MODEL = {"hidden_dim": 4, "num_layers": 1, "sequence_length": 8}
TRAIN = {"epochs": 1, "batch_size": 32, "seed": 0}


class TestPrepare:
    def test_synthetic_idempotent(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", prepare={
            "mode": "synthetic", "seed": 1, "n_basins": 2, "n_days": 60,
            "train_days": 40, "role": "target",
        })
        assert main(["prepare", "--config", str(cfg), "--output", str(tmp_path / "a")]) == EXIT_OK
        assert main(["prepare", "--config", str(cfg), "--output", str(tmp_path / "b")]) == EXIT_OK
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        loaded = load_domain(tmp_path / "a")
        assert loaded.n_basins == 2

    def test_synthetic_with_gaps_reports_availability(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", prepare={
            "mode": "synthetic", "seed": 1, "n_basins": 2, "n_days": 80,
            "train_days": 50, "gap_fraction": 0.25,
        })
        out = tmp_path / "out"
        assert main(["prepare", "--config", str(cfg), "--output", str(out)]) == EXIT_OK
        report = (out / "availability_report.csv").read_text().strip().split("\n")
        assert len(report) == 3
        frac = float(report[1].split(",")[1])
        assert frac == pytest.approx(0.75, abs=1e-12)
        assert (out / "availability_heatmap.csv").exists()

    def test_stations_pipeline_masks_sub_datum_stages(self, tmp_path):
        # Rating pairs from Q = 2*(h-0.3)^1.5; stage dips below the datum.
        stages = np.linspace(0.5, 3.0, 12)
        pairs = "\n".join(f"{float(h)!r},{float(2.0 * (h - 0.3) ** 1.5)!r}"
                          for h in stages)
        (tmp_path / "rating.csv").write_text("stage,discharge\n" + pairs + "\n")

        start = np.datetime64("2020-01-01T00:00", "m")
        ts = start + np.arange(4 * 48) * np.timedelta64(30, "m")
        stage_rows = []
        for i, t in enumerate(ts):
            day = i // 48
            stage = 0.1 if day == 2 else 1.3  # day 2 sits below the datum
            stage_rows.append(f"{t},{stage!r}")
        (tmp_path / "stage.csv").write_text("timestamp,stage\n" + "\n".join(stage_rows) + "\n")

        dates = np.datetime64("2020-01-01") + np.arange(8)
        forcing_rows = [f"{d},1.0,10.0,20.0,1000.0" for d in dates]
        (tmp_path / "forcings.csv").write_text(
            "date,precip,tmin,tmax,vapor_pressure\n" + "\n".join(forcing_rows) + "\n")

        statics = {name: 1.0 for name in (
            "area", "elevation", "slope", "precip_mean", "high_prec_freq",
            "high_prec_dur", "low_prec_freq", "low_prec_dur", "pet_mean",
            "aridity", "lai", "ndvi")}
        cfg = write_config(tmp_path / "cfg.json", prepare={
            "mode": "stations", "role": "target",
            "train_range": ["2020-01-01", "2020-01-05"],
            "test_range": ["2020-01-05", "2020-01-09"],
            "stations": [{
                "basin_id": "st01",
                "stage_file": "stage.csv",
                "rating_pairs_file": "rating.csv",
                "forcings_file": "forcings.csv",
                "static_attributes": statics,
            }],
        })
        out = tmp_path / "out"
        assert main(["prepare", "--config", str(cfg), "--output", str(out)]) == EXIT_OK
        ds = load_domain(out)
        b = ds.basins[0]
        # Days 0,1,3 observed with Q = 2*1.0^1.5; day 2 masked; days 4+ have
        # no stage data at all.
        assert b.discharge.mask.tolist() == [True, True, False, True] + [False] * 4
        np.testing.assert_allclose(b.discharge.values[b.discharge.mask], 2.0, rtol=1e-9)

    def test_missing_static_attribute_is_schema_error(self, tmp_path):
        (tmp_path / "rating.csv").write_text("stage,discharge\n1,1\n")
        (tmp_path / "stage.csv").write_text("timestamp,stage\n")
        (tmp_path / "forcings.csv").write_text("date,precip,tmin,tmax,vapor_pressure\n")
        cfg = write_config(tmp_path / "cfg.json", prepare={
            "mode": "stations", "role": "target",
            "train_range": ["2020-01-01", "2020-01-05"],
            "test_range": ["2020-01-05", "2020-01-09"],
            "stations": [{
                "basin_id": "st01", "stage_file": "stage.csv",
                "rating_pairs_file": "rating.csv", "forcings_file": "forcings.csv",
                "static_attributes": {"area": 1.0},
            }],
        })
        assert main(["prepare", "--config", str(cfg),
                     "--output", str(tmp_path / "o")]) == EXIT_DATA

    def test_bad_mode_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", prepare={"mode": "download"})
        assert main(["prepare", "--config", str(cfg),
                     "--output", str(tmp_path / "o")]) == EXIT_CONFIG


class TestTrainCommand:
    def test_zero_epochs_checkpoint_equals_init(self, datasets):
        cfg = write_config(datasets / "cfg.json",
                           data={"dataset": str(datasets / "target")},
                           model=MODEL, train={**TRAIN, "epochs": 0})
        out = datasets / "run"
        assert main(["train", "--config", str(cfg), "--output", str(out)]) == EXIT_OK
        params = load_checkpoint(out / "checkpoint.json")
        expected = init_parameters(ModelConfig(input_dim=4, **MODEL), seed=0)
        np.testing.assert_array_equal(params.flatten(), expected.flatten())

    def test_log_lines_match_epochs_and_rerun_is_identical(self, datasets):
        cfg = write_config(datasets / "cfg.json",
                           data={"dataset": str(datasets / "target")},
                           model=MODEL, train={**TRAIN, "epochs": 3})
        out1, out2 = datasets / "r1", datasets / "r2"
        assert main(["train", "--config", str(cfg), "--output", str(out1)]) == EXIT_OK
        assert main(["train", "--config", str(cfg), "--output", str(out2)]) == EXIT_OK
        log = (out1 / "training_log.jsonl").read_text().strip().split("\n")
        assert len(log) == 3
        assert (out1 / "checkpoint.json").read_bytes() == \
            (out2 / "checkpoint.json").read_bytes()

    def test_missing_dataset_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json",
                           data={"dataset": str(tmp_path / "nope")}, model=MODEL)
        assert main(["train", "--config", str(cfg),
                     "--output", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_corrupt_dataset_is_data_error(self, datasets):
        (datasets / "target" / "manifest.json").write_text("{}")
        cfg = write_config(datasets / "cfg.json",
                           data={"dataset": str(datasets / "target")}, model=MODEL,
                           train=TRAIN)
        assert main(["train", "--config", str(cfg),
                     "--output", str(datasets / "o")]) == EXIT_DATA

    def test_divergence_exit_code_retains_checkpoint(self, datasets):
        cfg = write_config(datasets / "cfg.json",
                           data={"dataset": str(datasets / "target")},
                           model=MODEL,
                           train={**TRAIN, "epochs": 5, "lr_first_epoch": 1e200,
                                  "lr_rest": 1e200, "clip_norm": 1e300})
        out = datasets / "div"
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            code = main(["train", "--config", str(cfg), "--output", str(out)])
        assert code == EXIT_DIVERGENCE
        params = load_checkpoint(out / "checkpoint.json")  # last good weights
        assert np.all(np.isfinite(params.flatten()))

    def test_env_var_resolves_relative_data_paths(self, datasets, monkeypatch):
        monkeypatch.setenv("FLOWCAST_DATA_ROOT", str(datasets))
        cfg = write_config(datasets / "elsewhere.json",
                           data={"dataset": "target"},
                           model=MODEL, train={**TRAIN, "epochs": 0})
        out = datasets / "envrun"
        assert main(["train", "--config", str(cfg), "--output", str(out)]) == EXIT_OK


class TestEvaluateCommand:
    def test_outputs_per_basin_and_summary(self, datasets):
        cfg = write_config(datasets / "cfg.json",
                           data={"dataset": str(datasets / "target")},
                           model=MODEL, train=TRAIN)
        run_dir = datasets / "run"
        main(["train", "--config", str(cfg), "--output", str(run_dir)])
        out = datasets / "eval"
        code = main(["evaluate", "--config", str(cfg), "--output", str(out),
                     "--checkpoint", str(run_dir / "checkpoint.json"),
                     "--range", "test"])
        assert code == EXIT_OK
        rows = (out / "per_basin_nse.csv").read_text().strip().split("\n")
        assert len(rows) == 3  # header + 2 basins
        header = (out / "summary.csv").read_text().split("\n")[0]
        assert header == ",".join(SUMMARY_COLUMNS)


class TestTransferCommand:
    def _pretrain(self, datasets):
        cfg = write_config(datasets / "pre.json",
                           data={"dataset": str(datasets / "source")},
                           model=MODEL, train=TRAIN)
        out = datasets / "pre"
        assert main(["train", "--config", str(cfg), "--output", str(out)]) == EXIT_OK
        return out / "checkpoint.json"

    def test_freeze_preserves_representation_hash(self, datasets):
        ckpt = self._pretrain(datasets)
        cfg = write_config(datasets / "cfg.json",
                           data={"target": str(datasets / "target")},
                           model=MODEL, train=TRAIN,
                           transfer={"variant": "LSTM_TL",
                                     "finetune": {**TRAIN, "epochs": 2}})
        out = datasets / "tl"
        code = main(["transfer", "--config", str(cfg), "--output", str(out),
                     "--source-checkpoint", str(ckpt), "--freeze-representation"])
        assert code == EXIT_OK
        lineage = json.loads((out / "lineage.json").read_text())
        assert lineage["final_representation_sha256"] == \
            lineage["source_representation_sha256"]
        assert lineage["frozen_representation"] is True
        assert (out / "per_basin_nse.csv").exists()

    def test_joint_finetune_changes_representation_hash(self, datasets):
        ckpt = self._pretrain(datasets)
        cfg = write_config(datasets / "cfg.json",
                           data={"target": str(datasets / "target")},
                           model=MODEL, train=TRAIN,
                           transfer={"variant": "LSTM_TL",
                                     "finetune": {**TRAIN, "epochs": 2}})
        out = datasets / "tl2"
        assert main(["transfer", "--config", str(cfg), "--output", str(out),
                     "--source-checkpoint", str(ckpt)]) == EXIT_OK
        lineage = json.loads((out / "lineage.json").read_text())
        assert lineage["final_representation_sha256"] != \
            lineage["source_representation_sha256"]
        assert lineage["handoff_representation_sha256"] == \
            lineage["source_representation_sha256"]

    def test_missing_checkpoint_is_config_error(self, datasets):
        cfg = write_config(datasets / "cfg.json",
                           data={"target": str(datasets / "target")},
                           model=MODEL, train=TRAIN)
        assert main(["transfer", "--config", str(cfg),
                     "--output", str(datasets / "o"),
                     "--source-checkpoint", str(datasets / "missing.json")]) == EXIT_CONFIG


class TestSuiteCommand:
    def _suite_config(self, datasets, seeds=(0,)):
        return write_config(datasets / "suite.json",
                            data={"source": str(datasets / "source"),
                                  "target": str(datasets / "target")},
                            model=MODEL, train=TRAIN,
                            transfer={"variant": "LSTM_TL",
                                      "finetune": {**TRAIN, "epochs": 1}},
                            seeds=list(seeds))

    def test_artifacts_shape(self, datasets):
        cfg = self._suite_config(datasets, seeds=(0, 1))
        out = datasets / "suite"
        assert main(["suite", "--config", str(cfg), "--output", str(out)]) == EXIT_OK

        table = (out / "summary_table.csv").read_text().strip().split("\n")
        assert table[0] == "variant," + ",".join(SUMMARY_COLUMNS)
        assert len(table) == 5  # header + 4 variants

        colormap = (out / "colormap_LSTM_TL.csv").read_text().strip().split("\n")
        assert len(colormap) == 3  # header + 2 basins
        assert colormap[0] == "basin_id,seed0,seed1"

        hydro_dir = out / "hydrographs"
        files = sorted(hydro_dir.glob("*_hydrograph.csv"))
        assert len(files) == 2
        target = load_domain(datasets / "target")
        lines = files[0].read_text().strip().split("\n")
        # One row per valid-window test day.
        expected_days = target.test_range.days - MODEL["sequence_length"] + 1
        assert len(lines) == expected_days + 1
        assert lines[0].split(",")[:2] == ["date", "observed"]

        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["per_variant"]) == {"LSTM", "LSTM_SCA", "LSTM_TL",
                                               "LSTM_TL_SCA"}

    def test_default_seed_protocol_is_thirty(self):
        from argparse import Namespace
        from flowcast.cli import _seeds
        args = Namespace(seeds=None)
        assert _seeds({}, args, default=list(range(30))) == list(range(30))
        assert _seeds({"seeds": [3, 4]}, args, default=list(range(30))) == [3, 4]
        assert _seeds({}, Namespace(seeds="5,6")) == [5, 6]

    def test_single_variant_flag(self, datasets):
        cfg = self._suite_config(datasets)
        out = datasets / "suite1"
        assert main(["suite", "--config", str(cfg), "--output", str(out),
                     "--variant", "LSTM"]) == EXIT_OK
        table = (out / "summary_table.csv").read_text().strip().split("\n")
        assert len(table) == 2

    def test_byte_identical_reruns(self, datasets):
        cfg = self._suite_config(datasets)
        out1, out2 = datasets / "s1", datasets / "s2"
        assert main(["suite", "--config", str(cfg), "--output", str(out1),
                     "--jobs", "2"]) == EXIT_OK
        assert main(["suite", "--config", str(cfg), "--output", str(out2)]) == EXIT_OK
        assert tree_bytes(out1) == tree_bytes(out2)
