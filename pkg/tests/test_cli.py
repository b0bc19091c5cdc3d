import csv

import numpy as np
import pytest

from mvreem.cli import main
from mvreem.reem import ReemModel
from mvreem.simulate import SimulationConfig, generate_pair


@pytest.fixture
def noise_free_csv(tmp_path):
    cfg = SimulationConfig(scenario="no_random_effect", n_objects=60,
                           n_times=5, sigma_re=0.0, sigma_eps2=1e-14)
    pair = generate_pair(cfg, np.random.default_rng(0))
    path = tmp_path / "panel.csv"
    pair.train.write_csv(path)
    return path, pair


FIT_FLAGS = ["--responses", "y1,y2",
             "--predictors", "x1,x2,x3,x4,x5,x6,x7",
             "--object", "object", "--time", "time"]


class TestFit:
    def test_noise_free_fit_reports_four_leaves(self, noise_free_csv, tmp_path, capsys):
        path, _ = noise_free_csv
        out = tmp_path / "model.json"
        code = main(["fit", "--data", str(path), *FIT_FLAGS,
                     "--seed", "3", "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert "leaves:         4" in text
        model = ReemModel.load(out)
        assert model.tree.n_leaves == 4

    def test_missing_responses_flag_exits_2(self, noise_free_csv, tmp_path):
        path, _ = noise_free_csv
        code = main(["fit", "--data", str(path),
                     "--predictors", "x1", "--object", "object", "--time", "time"])
        assert code == 2

    def test_single_fold_exits_2(self, noise_free_csv, tmp_path):
        path, _ = noise_free_csv
        code = main(["fit", "--data", str(path), *FIT_FLAGS, "--folds", "1",
                     "--out", str(tmp_path / "m.json")])
        assert code == 2

    def test_missing_data_column_exits_3(self, noise_free_csv, tmp_path):
        path, _ = noise_free_csv
        code = main(["fit", "--data", str(path), "--responses", "y1,zzz",
                     "--predictors", "x1", "--object", "object", "--time", "time",
                     "--out", str(tmp_path / "m.json")])
        assert code == 3

    def test_seed_reproducible_bytes(self, noise_free_csv, tmp_path):
        path, _ = noise_free_csv
        out_a = tmp_path / "a.json"
        out_b = tmp_path / "b.json"
        assert main(["fit", "--data", str(path), *FIT_FLAGS,
                     "--seed", "9", "--out", str(out_a)]) == 0
        assert main(["fit", "--data", str(path), *FIT_FLAGS,
                     "--seed", "9", "--out", str(out_b)]) == 0
        assert out_a.read_bytes() == out_b.read_bytes()


class TestPredict:
    def fit_model(self, noise_free_csv, tmp_path):
        path, pair = noise_free_csv
        out = tmp_path / "model.json"
        assert main(["fit", "--data", str(path), *FIT_FLAGS,
                     "--seed", "3", "--out", str(out)]) == 0
        return out, path, pair

    def test_training_round_trip(self, noise_free_csv, tmp_path):
        model_path, data_path, pair = self.fit_model(noise_free_csv, tmp_path)
        pred_path = tmp_path / "pred.csv"
        assert main(["predict", "--model", str(model_path),
                     "--data", str(data_path), "--out", str(pred_path)]) == 0
        rows = list(csv.DictReader(open(pred_path)))
        assert len(rows) == pair.train.n_rows
        by_key = {(r["object"], float(r["time"])): r for r in rows}
        for i in range(pair.train.n_rows):
            row = by_key[(pair.train.object_ids[i], pair.train.times[i])]
            for j, name in enumerate(pair.train.response_names):
                assert float(row[f"pred_{name}"]) == pytest.approx(
                    pair.train.Y[i, j], abs=1e-6)

    def test_population_only_differs_for_object_with_blup(self, tmp_path):
        cfg = SimulationConfig(scenario="simple_bivariate", n_objects=40,
                               n_times=5, sigma_re=0.5, sigma_eps2=1.0)
        pair = generate_pair(cfg, np.random.default_rng(1))
        data_path = tmp_path / "panel.csv"
        pair.train.write_csv(data_path)
        model_path = tmp_path / "model.json"
        assert main(["fit", "--data", str(data_path), *FIT_FLAGS,
                     "--seed", "1", "--out", str(model_path)]) == 0
        out_a = tmp_path / "with_blup.csv"
        out_b = tmp_path / "population.csv"
        assert main(["predict", "--model", str(model_path),
                     "--data", str(data_path), "--out", str(out_a)]) == 0
        assert main(["predict", "--model", str(model_path),
                     "--data", str(data_path), "--out", str(out_b),
                     "--population-only"]) == 0
        assert out_a.read_bytes() != out_b.read_bytes()

    def test_empty_input_header_only(self, noise_free_csv, tmp_path):
        model_path, data_path, pair = self.fit_model(noise_free_csv, tmp_path)
        empty = tmp_path / "empty.csv"
        with open(data_path) as src, open(empty, "w") as dst:
            dst.write(src.readline())
        pred_path = tmp_path / "pred.csv"
        assert main(["predict", "--model", str(model_path),
                     "--data", str(empty), "--out", str(pred_path)]) == 0
        lines = pred_path.read_text().strip().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("object,time,pred_y1")

    def test_unknown_object_gets_warning_column(self, noise_free_csv, tmp_path):
        model_path, data_path, pair = self.fit_model(noise_free_csv, tmp_path)
        alt = tmp_path / "new_objects.csv"
        with open(data_path) as src:
            lines = src.read().splitlines()
        with open(alt, "w") as dst:
            dst.write(lines[0] + "\n")
            dst.write(lines[1].replace("obj00000", "stranger") + "\n")
        pred_path = tmp_path / "pred.csv"
        assert main(["predict", "--model", str(model_path),
                     "--data", str(alt), "--out", str(pred_path)]) == 0
        rows = list(csv.DictReader(open(pred_path)))
        assert rows[0]["warning"] == "unknown_object"


class TestSimulate:
    def test_counting_and_determinism(self, tmp_path):
        args = ["simulate", "--scenario", "no_random_effect",
                "--I", "25", "--T", "4", "--sigma-eps", "1.0",
                "--reps", "2", "--seed", "5",
                "--methods", "multitree,unilme"]
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(args + ["--out-dir", str(out_a)]) == 0
        assert main(args + ["--out-dir", str(out_b)]) == 0
        rows = list(csv.DictReader(open(out_a / "raw.csv")))
        assert len(rows) == 4       # 2 reps x 2 methods, 1 grid point
        assert (out_a / "raw.csv").read_bytes() == (out_b / "raw.csv").read_bytes()
        assert (out_a / "aggregate.csv").read_bytes() == (out_b / "aggregate.csv").read_bytes()

    def test_unknown_method_exits_2(self, tmp_path, capsys):
        code = main(["simulate", "--scenario", "simple_bivariate",
                     "--I", "10", "--T", "3", "--sigma12", "0.5",
                     "--sigma-eps", "1.0", "--reps", "1", "--seed", "1",
                     "--methods", "warp_drive", "--out-dir", str(tmp_path)])
        assert code == 2
        assert "multiREEM_min_marg" in capsys.readouterr().err

    def test_sigma_flag_required_for_bivariate(self, tmp_path):
        code = main(["simulate", "--scenario", "simple_bivariate",
                     "--I", "10", "--T", "3", "--sigma-eps", "1.0",
                     "--reps", "1", "--seed", "1", "--methods", "multitree",
                     "--out-dir", str(tmp_path)])
        assert code == 2


class TestReport:
    def test_aggregate_is_mean_of_raw(self, tmp_path):
        sim_dir = tmp_path / "sim"
        assert main(["simulate", "--scenario", "no_random_effect",
                     "--I", "25", "--T", "4", "--sigma-eps", "1.0",
                     "--reps", "2", "--seed", "5",
                     "--methods", "multitree", "--out-dir", str(sim_dir)]) == 0
        rep_dir = tmp_path / "report"
        assert main(["report", "--results", str(sim_dir / "raw.csv"),
                     "--out-dir", str(rep_dir)]) == 0
        raw = list(csv.DictReader(open(sim_dir / "raw.csv")))
        want = np.mean([float(r["pmse"]) for r in raw])
        got_rows = list(csv.DictReader(open(rep_dir / "pmse.csv")))
        assert len(got_rows) == 1
        assert float(got_rows[0]["pmse"]) == pytest.approx(want, rel=1e-12)

    def test_recovery_table_contains_per_response_rows(self, tmp_path):
        sim_dir = tmp_path / "sim"
        assert main(["simulate", "--scenario", "simple_bivariate",
                     "--I", "25", "--T", "4", "--sigma12", "0.5",
                     "--sigma-eps", "1.0", "--reps", "1", "--seed", "2",
                     "--methods", "uniREEM", "--out-dir", str(sim_dir)]) == 0
        rep_dir = tmp_path / "report"
        assert main(["report", "--results", str(sim_dir / "raw.csv"),
                     "--out-dir", str(rep_dir)]) == 0
        rows = list(csv.DictReader(open(rep_dir / "recovery_rate.csv")))
        methods = {r["method"] for r in rows}
        assert {"uniREEM:y1", "uniREEM:y2"} <= methods

    def test_empty_raw_table_gives_headers(self, tmp_path):
        empty = tmp_path / "raw.csv"
        header = ("scenario,I,T,sigma_re,sigma_eps2,rep,seed,method,"
                  "pmse,emse_fixed,re_pmse,sigma12_emse,recovered,error")
        empty.write_text(header + "\n")
        rep_dir = tmp_path / "report"
        assert main(["report", "--results", str(empty),
                     "--out-dir", str(rep_dir)]) == 0
        lines = (rep_dir / "pmse.csv").read_text().strip().splitlines()
        assert len(lines) == 1

    def test_malformed_results_exits_3(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert main(["report", "--results", str(bad),
                     "--out-dir", str(tmp_path / "r")]) == 3
