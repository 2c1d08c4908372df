import json

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import planted_four_block_tox, write_tox_csv
from hawkfuse.cli import main

SIM_CFG = """
groups = 2
t_horizon = 60
unlabeled_fraction = 0.3
seed = 5
group1.bg = 0.4 0.4 0.1 0.1
group1.mu = 40
group1.k0 = 0.4
group1.omega = 0.5
group1.sigma = 0.01
group2.bg = 0.1 0.1 0.4 0.4
group2.mu = 40
group2.k0 = 0.3
group2.omega = 1.0
group2.sigma = 0.02
"""

FIT_CFG = "max_iters = 12\ntol = 1e-3\n"


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def sim_dir(tmp_path, runner):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text(SIM_CFG)
    out = tmp_path / "sim"
    result = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


class TestSimulate:
    def test_same_seed_byte_identical(self, tmp_path, runner):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text(SIM_CFG)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(out)])
            assert result.exit_code == 0, result.output
            outs.append((out / "events_r000.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_replicates_emit_files(self, tmp_path, runner):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text(SIM_CFG)
        out = tmp_path / "reps"
        result = runner.invoke(main, ["simulate", "--config", str(cfg), "--replicates", "3", "--out", str(out)])
        assert result.exit_code == 0
        for rep in range(3):
            assert (out / f"events_r{rep:03d}.csv").exists()
            assert (out / f"truth_r{rep:03d}.csv").exists()
        assert (out / "manifest.json").exists()

    def test_zero_replicates_error(self, tmp_path, runner):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text(SIM_CFG)
        result = runner.invoke(main, ["simulate", "--config", str(cfg), "--replicates", "0", "--out", str(tmp_path / "x")])
        assert result.exit_code != 0
        assert "replicates" in result.output

    def test_unknown_config_field(self, tmp_path, runner):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text(SIM_CFG + "bogus_field = 1\n")
        result = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert result.exit_code != 0
        assert "bogus_field" in result.output


class TestFit:
    def test_fit_writes_model_and_assignments(self, tmp_path, runner, sim_dir):
        fit_cfg = tmp_path / "fit.cfg"
        fit_cfg.write_text(FIT_CFG)
        out = tmp_path / "fit"
        result = runner.invoke(
            main,
            ["fit", str(sim_dir / "events_r000.csv"), "--k", "2", "--config", str(fit_cfg),
             "--t0", "0", "--t1", "60", "--x0", "0", "--x1", "1", "--y0", "0", "--y1", "1",
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "model.json").exists()
        assert (out / "assignments.csv").exists()
        doc = json.loads((out / "model.json").read_text())
        assert doc["K"] == 2 and len(doc["groups"]) == 2
        lines = (out / "assignments.csv").read_text().strip().split("\n")
        assert lines[0] == "id,group,prob"

    def test_rerun_identical_model(self, tmp_path, runner, sim_dir):
        fit_cfg = tmp_path / "fit.cfg"
        fit_cfg.write_text(FIT_CFG)
        blobs = []
        for name in ("f1", "f2"):
            out = tmp_path / name
            result = runner.invoke(
                main,
                ["fit", str(sim_dir / "events_r000.csv"), "--k", "2", "--config", str(fit_cfg), "--out", str(out)],
            )
            assert result.exit_code == 0, result.output
            blobs.append((out / "model.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_k1_unlabeled_fit(self, tmp_path, runner, sim_dir):
        # strip labels so the single-group path runs
        src = (sim_dir / "events_r000.csv").read_text().strip().split("\n")
        stripped = [src[0]]
        for line in src[1:]:
            parts = line.split(",")
            parts[4] = "A"
            parts[5] = ""
            stripped.append(",".join(parts))
        events = tmp_path / "unlabeled.csv"
        events.write_text("\n".join(stripped) + "\n")
        out = tmp_path / "k1"
        fit_cfg = tmp_path / "fit.cfg"
        fit_cfg.write_text(FIT_CFG)
        result = runner.invoke(main, ["fit", str(events), "--k", "1", "--config", str(fit_cfg), "--out", str(out)])
        assert result.exit_code == 0, result.output
        doc = json.loads((out / "model.json").read_text())
        assert doc["K"] == 1
        assert doc["assignments"] is None

    def test_labels_csv_merges(self, tmp_path, runner, sim_dir):
        src = (sim_dir / "events_r000.csv").read_text().strip().split("\n")
        blanked = [src[0]]
        label_lines = ["id,group"]
        for line in src[1:]:
            parts = line.split(",")
            if parts[4] == "B":
                label_lines.append(f"{parts[0]},{parts[5]}")
                parts[5] = ""
            blanked.append(",".join(parts))
        events = tmp_path / "blank.csv"
        events.write_text("\n".join(blanked) + "\n")
        labels = tmp_path / "labels.csv"
        labels.write_text("\n".join(label_lines) + "\n")
        fit_cfg = tmp_path / "fit.cfg"
        fit_cfg.write_text(FIT_CFG)
        out = tmp_path / "merged"
        result = runner.invoke(
            main, ["fit", str(events), "--k", "2", "--labels", str(labels), "--config", str(fit_cfg), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output


@pytest.fixture()
def fitted_dir(tmp_path, runner, sim_dir):
    fit_cfg = tmp_path / "fit.cfg"
    fit_cfg.write_text(FIT_CFG)
    out = tmp_path / "fitted"
    result = runner.invoke(
        main,
        ["fit", str(sim_dir / "events_r000.csv"), "--k", "2", "--config", str(fit_cfg),
         "--t0", "0", "--t1", "60", "--x0", "0", "--x1", "1", "--y0", "0", "--y1", "1",
         "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    return out


class TestEvaluate:
    def test_report_columns_and_aic(self, tmp_path, runner, sim_dir, fitted_dir):
        out = tmp_path / "eval"
        result = runner.invoke(
            main,
            ["evaluate", str(fitted_dir / "model.json"), str(sim_dir / "events_r000.csv"),
             "--subset", "B", "--grid", "8", "--days", "0:30", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "report.csv").read_text().strip().split("\n")
        assert lines[0] == "model,subset,loglik,df,aic,auc"
        _, subset, ll, df, aic_val, auc_val = lines[1].split(",")
        assert subset == "B"
        assert float(aic_val) == pytest.approx(2 * int(df) - 2 * float(ll), abs=1e-9)
        assert 0.0 <= float(auc_val) <= 1.0
        fc_lines = (out / "forecast.csv").read_text().strip().split("\n")
        assert fc_lines[0] == "day,cell_x,cell_y,score,label"
        assert len(fc_lines) == 1 + 30 * 8 * 8

    def test_single_cell_grid_degenerate(self, tmp_path, runner):
        # one event per day: a single cell is always positive, so the
        # ranking has no negatives to compare against
        events = tmp_path / "dense.csv"
        with open(events, "w") as fh:
            fh.write("id,t,x,y,source,group\n")
            for i in range(10):
                fh.write(f"{i},{i + 0.5},0.5,0.5,A,\n")
        fit_cfg = tmp_path / "fit.cfg"
        fit_cfg.write_text("max_iters = 2\n")
        fit_out = tmp_path / "dfit"
        result = runner.invoke(main, ["fit", str(events), "--k", "1", "--config", str(fit_cfg), "--out", str(fit_out)])
        assert result.exit_code == 0, result.output
        out = tmp_path / "eval1"
        result = runner.invoke(
            main,
            ["evaluate", str(fit_out / "model.json"), str(events),
             "--grid", "1", "--days", "0:9", "--out", str(out)],
        )
        assert result.exit_code != 0
        assert "degenerate labels" in result.output

    def test_with_baselines(self, tmp_path, runner, sim_dir, fitted_dir):
        out = tmp_path / "evalb"
        result = runner.invoke(
            main,
            ["evaluate", str(fitted_dir / "model.json"), str(sim_dir / "events_r000.csv"),
             "--with-baselines", "--config", str(tmp_path / "fit.cfg"), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "report.csv").read_text().strip().split("\n")
        models = {l.split(",")[0] for l in lines[1:]}
        assert models == {"fused", "baseline_A", "baseline_B"}


class TestCluster:
    def test_planted_matrix_selects_four(self, tmp_path, runner):
        tox, truth = planted_four_block_tox(seed=0)
        csv_path = tmp_path / "tox.csv"
        write_tox_csv(tox, csv_path)
        out = tmp_path / "clu"
        result = runner.invoke(
            main,
            ["cluster", str(csv_path), "--k-range", "2:8", "--iters", "300", "--restarts", "3", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        doc = json.loads((out / "topics.json").read_text())
        assert doc["K"] == 4
        labels = (out / "labels.csv").read_text().strip().split("\n")[1:]
        assert len(labels) == tox.n_reports
        table = (out / "coherence.csv").read_text().strip().split("\n")
        assert len(table) == 1 + 7  # k = 2..8

    def test_fixed_k_skips_selection(self, tmp_path, runner):
        tox, _ = planted_four_block_tox(seed=1, per=20)
        csv_path = tmp_path / "tox.csv"
        write_tox_csv(tox, csv_path)
        out = tmp_path / "clu2"
        result = runner.invoke(
            main, ["cluster", str(csv_path), "--k", "3", "--iters", "100", "--restarts", "2", "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        doc = json.loads((out / "topics.json").read_text())
        assert doc["K"] == 3
        assert len(doc["topics"]) == 3
        assert all(len(t["top_terms"]) == 5 for t in doc["topics"])


class TestReport:
    def test_plot_bundle_shapes(self, tmp_path, runner, sim_dir, fitted_dir):
        out = tmp_path / "rep"
        result = runner.invoke(
            main,
            ["report", str(fitted_dir / "model.json"), str(sim_dir / "events_r000.csv"),
             "--grid", "6", "--bins", "10", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        heat = (out / "heatmap.csv").read_text().strip().split("\n")
        assert len(heat) == 1 + 2 * 6 * 6  # 2 groups x 36 cells
        hist = (out / "hist_time.csv").read_text().strip().split("\n")[1:]
        total = sum(int(l.split(",")[4]) for l in hist)
        n_events = len((sim_dir / "events_r000.csv").read_text().strip().split("\n")) - 1
        assert total == n_events  # every resolvable event lands in one bin
        fit_line = (out / "interevent_fit.csv").read_text().strip().split("\n")
        assert fit_line[0] == "rate,mean,n"

    def test_interevent_rate_matches_simulated_stream(self, tmp_path, runner):
        # exponential stream with known rate: fitted rate within 3 sigma
        rng = np.random.default_rng(0)
        rate = 2.5
        gaps = rng.exponential(1.0 / rate, size=4000)
        times = np.cumsum(gaps)
        events = tmp_path / "stream.csv"
        with open(events, "w") as fh:
            fh.write("id,t,x,y,source,group\n")
            for i, t in enumerate(times):
                fh.write(f"{i},{float(t)!r},0.5,0.5,A,\n")
        fit_cfg = tmp_path / "fit.cfg"
        fit_cfg.write_text("max_iters = 2\n")
        fit_out = tmp_path / "sfit"
        result = runner.invoke(main, ["fit", str(events), "--k", "1", "--config", str(fit_cfg), "--out", str(fit_out)])
        assert result.exit_code == 0, result.output
        out = tmp_path / "srep"
        result = runner.invoke(
            main, ["report", str(fit_out / "model.json"), str(events), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        line = (out / "interevent_fit.csv").read_text().strip().split("\n")[1]
        fitted_rate = float(line.split(",")[0])
        sem = rate / np.sqrt(len(times) - 1)
        assert abs(fitted_rate - rate) <= 3 * sem


class TestManifest:
    def test_manifest_records_outputs(self, tmp_path, runner, sim_dir):
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 5
        assert all(len(h) == 64 for h in manifest["outputs"].values())
