import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from committee_kd.cli import (ConfigError, ExperimentConfig, _run_tag,
                              _teacher_train_params, cmd_importance_dump, cmd_report,
                              cmd_run, improvement_percent, main, parse_args,
                              render_table)
from committee_kd.data import generate_synthetic, save_csv
from committee_kd.training import RunReport


def _argv(command="run", out="runs", **over):
    base = dict(n_users="30", n_items="20", latent_dim="3", noise_sd="0.3",
                n_ratings="600", epochs="1", steps_per_epoch="4", batch_size="32",
                embed_dim="4", d_emb="4", d_m="4", seeds="0", out=out)
    base.update(over)
    argv = [command]
    for k, v in base.items():
        argv += [f"--{k.replace('_', '-')}", str(v)]
    return argv


class TestParsing:
    def test_round_trip_through_dict(self):
        config = parse_args(_argv(method="qa", teachers="mlp-l,text",
                                  seeds="0,1,2", alpha="0.5", threshold="0.6"))
        again = ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        assert again == config

    def test_list_flags(self):
        config = parse_args(_argv(method="mt", teachers="mlp-s,mlp-m", seeds="3,1,4"))
        assert config.teachers == ["mlp-s", "mlp-m"]
        assert config.seeds == [3, 1, 4]

    def test_missing_command(self):
        with pytest.raises(ConfigError, match="missing command"):
            parse_args([])

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            parse_args(_argv(method="distill-harder"))

    def test_unknown_teacher(self):
        with pytest.raises(ConfigError, match="unknown teacher"):
            parse_args(_argv(method="qa", teachers="mlp-xxl"))

    def test_single_teacher_methods_enforced(self):
        with pytest.raises(ConfigError, match="exactly one"):
            parse_args(_argv(method="ld", teachers="mlp-s,mlp-m"))

    def test_committee_needs_teachers(self):
        with pytest.raises(ConfigError, match="at least one"):
            parse_args(_argv(method="qa", teachers=""))

    def test_none_clears_teachers(self):
        config = parse_args(_argv(method="none", teachers="mlp-l,text"))
        assert config.teachers == []

    def test_threshold_bounds(self):
        with pytest.raises(ConfigError, match="threshold"):
            parse_args(_argv(method="qa", teachers="mlp-s", threshold="1.0"))

    def test_bad_seed_list(self):
        with pytest.raises(ConfigError, match="comma-separated integers"):
            parse_args(_argv(method="qa", teachers="mlp-s", seeds="0;1"))

    def test_importance_dump_restrictions(self):
        with pytest.raises(ConfigError, match="requires method qa"):
            parse_args(_argv(command="importance-dump", method="ld", teachers="mlp-s"))
        with pytest.raises(ConfigError, match="alpha"):
            parse_args(_argv(command="importance-dump", method="qa",
                             teachers="mlp-s", alpha="0"))

    def test_teacher_epochs_override(self):
        config = parse_args(_argv(method="qa", teachers="mlp-s", teacher_epochs="7"))
        assert _teacher_train_params(config).epochs == 7
        config = parse_args(_argv(method="qa", teachers="mlp-s", epochs="2"))
        assert _teacher_train_params(config).epochs == 2

    def test_run_tag_formatting(self):
        config = parse_args(_argv(method="qa", teachers="mlp-l,text", threshold="0.6"))
        assert _run_tag(config) == "qa-mlp-l+text-thr0.6"
        assert _run_tag(parse_args(_argv(method="none"))) == "none"

    def test_augmenter_lr_flag(self):
        config = parse_args(_argv(method="qa", teachers="mlp-s", augmenter_lr="0.003"))
        assert config.augmenter_lr == 0.003
        assert parse_args(_argv(method="qa", teachers="mlp-s")).augmenter_lr is None
        with pytest.raises(ConfigError, match="augmenter-lr"):
            parse_args(_argv(method="qa", teachers="mlp-s", augmenter_lr="-0.1"))


class TestImprovement:
    def test_textbook_values(self):
        assert improvement_percent(1.00, 0.88, 0.90) == pytest.approx(120.0)
        assert improvement_percent(1.00, 1.00, 0.90) == 0.0
        assert improvement_percent(1.00, 0.90, 0.90) == pytest.approx(100.0)

    def test_direction_flag(self):
        # for accuracy-style metrics both gaps flip sign, leaving the ratio alone
        assert (improvement_percent(0.70, 0.78, 0.80, direction="higher")
                == pytest.approx(80.0))
        with pytest.raises(ValueError, match="direction"):
            improvement_percent(1.0, 0.9, 0.8, direction="sideways")

    def test_zero_gap_rejected(self):
        with pytest.raises(ValueError, match="zero gap"):
            improvement_percent(0.9, 0.85, 0.9)

    @given(st.floats(0.1, 5.0), st.floats(-3.0, 3.0))
    def test_affine_invariance(self, scale, shift):
        base, distilled, teacher = 1.2, 1.05, 0.9
        plain = improvement_percent(base, distilled, teacher)
        mapped = improvement_percent(scale * base + shift, scale * distilled + shift,
                                     scale * teacher + shift)
        np.testing.assert_allclose(mapped, plain, rtol=1e-9)


class TestRunCommand:
    def test_artifact_tree(self, tmp_path):
        out = str(tmp_path / "runs")
        reports = cmd_run(parse_args(_argv(method="qa", teachers="mlp-s",
                                           seeds="0,1", out=out)))
        assert len(reports) == 2
        run_dir = os.path.join(out, "qa-mlp-s")
        for rel in ("config.json", "seed0/report.json", "seed0/epochs.csv",
                    "seed1/report.json", "aggregate.csv", "timings.txt"):
            assert os.path.exists(os.path.join(run_dir, rel)), rel
        cache = os.listdir(os.path.join(out, "teachers"))
        assert len(cache) == 1 and cache[0].startswith("mlp-s-")
        agg = open(os.path.join(run_dir, "aggregate.csv")).read().splitlines()
        assert agg[0] == "seed,final_metric,invoked_passes,skipped_passes,distill_steps"
        assert len(agg) == 4 and agg[-1].startswith("mean,")

    def test_rerun_is_byte_identical(self, tmp_path):
        out = str(tmp_path / "runs")
        argv = _argv(method="qa", teachers="mlp-s", seeds="0", out=out)

        def artifact_bytes():
            found = {}
            for dirpath, _, files in os.walk(out):
                for fn in files:
                    if fn == "timings.txt":
                        continue
                    path = os.path.join(dirpath, fn)
                    found[os.path.relpath(path, out)] = open(path, "rb").read()
            return found

        assert main(argv) == 0
        first = artifact_bytes()
        assert main(argv) == 0
        assert artifact_bytes() == first

    def test_single_teacher_mean_equals_plain_distillation(self, tmp_path):
        out = str(tmp_path / "runs")
        (ld_report,) = cmd_run(parse_args(_argv(method="ld", teachers="mlp-s", out=out)))
        (mt_report,) = cmd_run(parse_args(_argv(method="mt", teachers="mlp-s", out=out)))
        assert mt_report.final_metric == ld_report.final_metric
        assert mt_report.epoch_metrics == ld_report.epoch_metrics

    def test_csv_dataset_input(self, tmp_path):
        data = generate_synthetic(15, 8, 3, 0.2, 300, seed=5)
        csv_path = str(tmp_path / "ratings.csv")
        save_csv(data, csv_path)
        out = str(tmp_path / "runs")
        reports = cmd_run(parse_args(_argv(method="none", dataset=csv_path, out=out)))
        assert np.isfinite(reports[0].final_metric)

    def test_missing_dataset_file(self, tmp_path):
        argv = _argv(method="none", dataset=str(tmp_path / "nope.csv"),
                     out=str(tmp_path / "runs"))
        assert main(argv) == 1


class TestReportCommand:
    def _fake_report(self, method, metric, tag, teachers=(), teacher_metrics=None, seed=0):
        return RunReport(
            method=method, seed=seed, alpha=1.0 if method != "none" else 0.0,
            threshold=None, n_teachers=len(teachers),
            epoch_metrics=[{"epoch": 0, "train": metric, "eval": metric}],
            final_metric=metric, teacher_passes={"invoked": 0, "skipped": 0},
            distill_steps=0, importance_trace=[],
            extra={"run_tag": tag, "teachers": list(teachers),
                   "teacher_metrics": teacher_metrics or {}},
        )

    def test_metrics_survive_aggregation_verbatim(self, tmp_path, capsys):
        for sub, report in (
            ("none/seed0", self._fake_report("none", 0.8132, "none")),
            ("mt-mlp-l/seed0", self._fake_report("mt", 0.8429, "mt-mlp-l", ("mlp-l",),
                                                 {"mlp-l": 0.79})),
        ):
            d = tmp_path / sub
            d.mkdir(parents=True)
            report.save(str(d / "report.json"))
        config = ExperimentConfig(command="report", out=str(tmp_path))
        table = cmd_report(config)
        assert "0.8132" in table and "0.8429" in table
        csv_text = (tmp_path / "report.csv").read_text()
        assert "0.8132" in csv_text and "0.8429" in csv_text
        expected = improvement_percent(0.8132, 0.8429, 0.79)
        assert repr(expected) in csv_text

    def test_missing_baseline_gives_na(self, tmp_path):
        d = tmp_path / "mt-mlp-l/seed0"
        d.mkdir(parents=True)
        self._fake_report("mt", 0.9, "mt-mlp-l", ("mlp-l",)).save(str(d / "report.json"))
        table = cmd_report(ExperimentConfig(command="report", out=str(tmp_path)))
        row = table.splitlines()[-1]
        assert row.endswith("NA")

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="no report.json"):
            cmd_report(ExperimentConfig(command="report", out=str(tmp_path)))

    def test_render_table_alignment(self):
        table = render_table([{"a": 1, "b": None}, {"a": 222, "b": 0.5}], ["a", "b"])
        lines = table.splitlines()
        assert lines[0].split() == ["a", "b"]
        assert "NA" in lines[2]
        # every cell of the second column starts at the same offset
        offset = lines[0].index("b")
        assert lines[2].index("NA") == offset
        assert lines[3].index("0.5") == offset


class TestImportanceDump:
    def test_csv_contract(self, tmp_path, capsys):
        out = str(tmp_path / "imp")
        config = parse_args(_argv(command="importance-dump", method="qa",
                                  teachers="mlp-s,mlp-m", threshold="0.6",
                                  limit="10", out=out))
        csv_path = cmd_importance_dump(config)
        lines = open(csv_path).read().splitlines()
        assert lines[0] == "example_id,teacher_0,teacher_1"
        assert len(lines) == 11
        for line in lines[1:]:
            cells = line.split(",")
            assert len(cells) == 3
            for v in cells[1:]:
                assert 0.0 < float(v) < 1.0
        assert os.path.exists(os.path.join(out, "report.json"))
        printed = capsys.readouterr().out
        assert "skipped" in printed and "%" in printed


class TestExitCodes:
    def test_config_error_is_one(self, capsys):
        assert main(["run", "--method", "ld", "--teachers", "mlp-s,mlp-m"]) == 1
        assert "error:" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_two_and_dumps_last_good_params(self, tmp_path, capsys):
        out = str(tmp_path / "runs")
        argv = _argv(method="none", lr="1e200", steps_per_epoch="30", out=out)
        assert main(argv) == 2
        assert "divergence" in capsys.readouterr().err
        dump = os.path.join(out, "last_good_params.npz")
        assert os.path.exists(dump)
        arrays = np.load(dump)
        assert all(np.all(np.isfinite(arrays[k])) for k in arrays.files)
