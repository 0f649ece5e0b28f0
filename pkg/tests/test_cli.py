import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from petseg import ingest
from petseg.cli import main, read_slice_index

GOLDEN = Path(__file__).parent / "data" / "golden_plan.txt"


@pytest.fixture()
def workdir(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    data = tmp_path / "data"
    shutil.copytree(root, data)
    return tmp_path, data


class TestIndex:
    def test_index_excludes_negatives(self, workdir):
        tmp, data = workdir
        out = tmp / "index.csv"
        assert main(["index", "--data", str(data), "--out", str(out)]) == 0
        views = read_slice_index(out)
        ids = [v.patient_id for v in views]
        assert "patient_000" not in ids  # the negative one
        assert len(ids) == 5
        for view in views:
            assert sorted(view.lesion_slices + view.nonlesion_slices) == list(range(24))

    def test_index_matches_records(self, workdir):
        tmp, data = workdir
        out = tmp / "index.csv"
        main(["index", "--data", str(data), "--out", str(out)])
        views = {v.patient_id: v for v in read_slice_index(out)}
        for pdir in ingest.list_patient_dirs(data):
            record = ingest.load_patient(pdir)
            if record.is_negative:
                continue
            assert views[record.patient_id].lesion_slices == record.lesion_slices


class TestPlan:
    def test_golden_dump(self, workdir):
        tmp, data = workdir
        index = tmp / "index.csv"
        plan = tmp / "plan.txt"
        assert main(["index", "--data", str(data), "--out", str(index)]) == 0
        assert main(["plan", "--index", str(index), "--alpha", "1", "--beta", "5",
                     "--seed", "0", "--epoch", "0", "--epoch", "5",
                     "--out", str(plan)]) == 0
        assert plan.read_text() == GOLDEN.read_text()

    def test_plan_from_data_dir_matches_index_route(self, workdir):
        tmp, data = workdir
        index = tmp / "index.csv"
        main(["index", "--data", str(data), "--out", str(index)])
        a = tmp / "a.txt"
        b = tmp / "b.txt"
        assert main(["plan", "--index", str(index), "--seed", "2",
                     "--out", str(a)]) == 0
        assert main(["plan", "--data", str(data), "--seed", "2",
                     "--out", str(b)]) == 0
        assert a.read_text() == b.read_text()


class TestEvaluate:
    def test_ground_truth_predictions_score_perfectly(self, workdir, capsys):
        tmp, data = workdir
        preds = tmp / "preds"
        preds.mkdir()
        for pdir in ingest.list_patient_dirs(data):
            record = ingest.load_patient(pdir)
            ingest.write_volume(preds / f"{record.patient_id}.vol", record.label)
        out = tmp / "eval"
        assert main(["evaluate", "--data", str(data), "--pred", str(preds),
                     "--out", str(out)]) == 0
        with open(out / "eval.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        for row in rows:
            assert float(row["dice"]) == 1.0
            assert float(row["fpv_ml"]) == 0.0
            assert float(row["fnv_ml"]) == 0.0
        summary = (out / "summary.txt").read_text()
        assert "mean_dice: 1.0" in summary
        assert (out / "eval.png").exists()

    def test_missing_prediction_fails(self, workdir):
        tmp, data = workdir
        preds = tmp / "empty"
        preds.mkdir()
        out = tmp / "eval"
        assert main(["evaluate", "--data", str(data), "--pred", str(preds),
                     "--out", str(out)]) == 1


class TestConfigPrecedence:
    def test_flags_override_config_file(self, workdir):
        tmp, data = workdir
        cfg = tmp / "cfg.json"
        cfg.write_text(json.dumps({
            "scheduler": {"alpha": 2.0, "beta": 3, "seed": 1},
        }))
        out_a = tmp / "a.txt"
        out_b = tmp / "b.txt"
        assert main(["plan", "--data", str(data), "--config", str(cfg),
                     "--out", str(out_a)]) == 0
        assert "alpha: 2.0\nbeta: 3" in out_a.read_text()
        assert main(["plan", "--data", str(data), "--config", str(cfg),
                     "--alpha", "4", "--out", str(out_b)]) == 0
        assert "alpha: 4.0\nbeta: 3" in out_b.read_text()

    def test_bad_data_dir_exits_nonzero(self, tmp_path):
        assert main(["index", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "x.csv")]) == 1


class TestSynth:
    def test_synth_negative_count(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["synth", "--out", str(out), "--patients", "3",
                     "--negatives", "2", "--lesions", "1",
                     "--grid", "16", "32", "32", "--seed", "4"]) == 0
        records = [ingest.load_patient(p) for p in ingest.list_patient_dirs(out)]
        assert sum(r.is_negative for r in records) == 2
        assert (out / "manifest.txt").exists()
