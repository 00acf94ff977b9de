"""
Command-line surface: flags, config echo, reports and exit codes
"""
import json

import pytest

from nearquery.exceptions import NonFiniteError
from nearquery.harness.metrics import ClassMetrics, MetricsReport
from nearquery.main import RESOLVED_CONFIG, SAMPLE_STATS_CSV, build_parser, emit_report, main, parse_value
from nearquery.utils.csvlog import read_rows


@pytest.fixture
def run_dir(tmp_path, tiny_dataset, train_cfg):
    """A one-step training run started from the command line"""
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(train_cfg.model_copy(update={"steps": 1}).model_dump_json(), encoding="utf-8")
    out = tmp_path / "run"
    assert main(["train", "--data", str(tiny_dataset), "--out", str(out), "--config", str(cfg_path)]) == 0
    return out


class TestGenData:
    def test_writes_dataset_and_resolved_config(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["gen-data", "--out", str(out), "--n", "4", "--seed", "7", "--image_size", "128"]) == 0
        assert "samples=4" in capsys.readouterr().out
        resolved = json.loads((out / RESOLVED_CONFIG).read_text())
        assert resolved["n"] == 4
        assert resolved["seed"] == 7

    def test_resolved_config_reproduces_dataset(self, tmp_path):
        first = tmp_path / "a"
        main(["gen-data", "--out", str(first), "--n", "2", "--seed", "5", "--image_size", "128"])
        second = tmp_path / "b"
        assert main(["gen-data", "--out", str(second), "--config", str(first / RESOLVED_CONFIG)]) == 0
        for rel in ("manifest.json", "images/00001.f32", "labels/00001.u8"):
            assert (first / rel).read_bytes() == (second / rel).read_bytes()

    def test_unknown_flag_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc_info:
            main(["gen-data", "--out", str(tmp_path), "--sizes", "64"])
        assert exc_info.value.code == 2

    def test_invalid_value_prints_error_line(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--image_size", "48"]) == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("error kind=ValidationError message=")

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 1
        assert "kind=ConfigError" in capsys.readouterr().err


class TestTrainAndEval:
    def test_train_writes_checkpoint_and_config(self, run_dir):
        assert (run_dir / "final.nqckpt").is_file()
        assert (run_dir / RESOLVED_CONFIG).is_file()

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_eval_report_formats(self, tmp_path, run_dir, tiny_dataset, capsys, fmt):
        out = tmp_path / "eval"
        args = ["eval", "--checkpoint", str(run_dir / "final.nqckpt"), "--data", str(tiny_dataset), "--out", str(out)]
        assert main(args + ["--format", fmt]) == 0
        assert "mDice=" in capsys.readouterr().out
        assert (out / f"metrics.{fmt}").is_file()

    def test_csv_and_json_agree(self, tmp_path, run_dir, tiny_dataset):
        base = ["eval", "--checkpoint", str(run_dir / "final.nqckpt"), "--data", str(tiny_dataset)]
        main(base + ["--out", str(tmp_path / "c"), "--format", "csv"])
        main(base + ["--out", str(tmp_path / "j"), "--format", "json"])
        report = MetricsReport.model_validate_json((tmp_path / "j" / "metrics.json").read_text())
        rows = read_rows(tmp_path / "c" / "metrics.csv")
        assert [r["class"] for r in rows] == [c.name for c in report.per_class]
        for row, cls in zip(rows, report.per_class):
            assert float(row["dice"]) == cls.dice
            assert float(row["acc"]) == cls.acc

    def test_eval_missing_checkpoint(self, tmp_path, tiny_dataset, capsys):
        args = ["eval", "--checkpoint", str(tmp_path / "x.nqckpt"), "--data", str(tiny_dataset), "--out", str(tmp_path)]
        assert main(args) == 1
        assert "kind=CheckpointError" in capsys.readouterr().err


class TestEmitReport:
    def test_empty_report_writes_header_only(self, tmp_path):
        path = emit_report(MetricsReport(), "csv", tmp_path / "m.csv")
        assert path.read_text() == "class,tier,dice,iou,acc\n"

    def test_json_round_trip(self, tmp_path):
        report = MetricsReport(
            per_class=[ClassMetrics(class_index=1, name="a", tier="small", dice=0.5, iou=1 / 3, acc=0.75, n_images=2)],
            m_dice=0.5,
            m_iou=1 / 3,
            m_acc=0.75,
            tier_dice={"small": 0.5},
            n_images=2,
        )
        path = emit_report(report, "json", tmp_path / "m.json")
        assert MetricsReport.model_validate_json(path.read_text()) == report

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(NonFiniteError):
            emit_report(MetricsReport(m_dice=float("nan")), "json", tmp_path / "m.json")


class TestOtherCommands:
    def test_gradcheck_single_case(self, capsys):
        assert main(["gradcheck", "--case", "arith", "--case", "softmax"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0].startswith("case=arith")
        assert out[-1].startswith("PASS max_rel_err=")

    def test_gradcheck_unknown_case(self, capsys):
        assert main(["gradcheck", "--case", "bogus"]) == 1
        assert "kind=KeyError" in capsys.readouterr().err

    def test_sample_stats(self, tmp_path, capsys):
        assert main(["sample-stats", "--out", str(tmp_path), "--n_draws", "2000"]) == 0
        rows = read_rows(tmp_path / SAMPLE_STATS_CSV)
        strategies = {r["strategy"] for r in rows}
        assert len(strategies) == 2
        assert "sample_stats=" in capsys.readouterr().out

    def test_parse_value(self):
        assert parse_value("3") == 3
        assert parse_value("true") is True
        assert parse_value("squash") == "squash"
        assert parse_value('["a", 1]') == ["a", 1]

    def test_every_nested_field_has_a_flag(self):
        parser = build_parser()
        args = parser.parse_args(["train", "--data", "d", "--out", "o", "--model.offset.scale_c", "3"])
        assert getattr(args, "cfg:model.offset.scale_c") == "3"
