"""CLI surface: subcommands, exit codes, output determinism."""

import json

import pytest

from fuselab.cli import main
from fuselab.tensor import NonFiniteError
from fuselab.train import TrainingDiverged

TINY_CONFIG = """\
train.steps = 3
train.batch = 2
data.size = 12
eval.samples = 0
schedule.steps = 8
sampler.steps = 4
encoder.text_seq = 8
encoder.text_dim = 10
encoder.llm_seq = 10
encoder.llm_dim = 12
fusion.attn_dim = 10
denoiser.dim = 10
denoiser.ff_dim = 12
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "config.txt"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


def test_parse_subcommand_prints_json_lines(capsys):
    assert main(["parse", "--prompt", "a blue sheep and a red car"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [json.loads(line) for line in lines] == [
        {"attr": "blue", "entity": "sheep", "attr_pos": 1, "entity_pos": 2},
        {"attr": "red", "entity": "car", "attr_pos": 5, "entity_pos": 6},
    ]


def test_train_command_writes_artifacts(tmp_path, cfg_file, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert (out / "train" / "metrics.csv").exists()
    assert (out / "train" / "checkpoint.npz").exists()
    assert "metrics.csv" in capsys.readouterr().out


def test_seeded_cli_runs_are_byte_identical(tmp_path, cfg_file):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg_file), "--seed", "11", "--out", str(out_a)]) == 0
    assert main(["train", "--config", str(cfg_file), "--seed", "11", "--out", str(out_b)]) == 0
    for name in ("metrics.csv", "summary.csv"):
        assert (out_a / "train" / name).read_bytes() == (out_b / "train" / name).read_bytes()


def test_sample_and_heatmaps_from_checkpoint(tmp_path, cfg_file):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    ckpt = out / "train" / "checkpoint.npz"
    assert main(["sample", "--config", str(cfg_file), "--out", str(out),
                 "--checkpoint", str(ckpt), "--prompt", "a red square"]) == 0
    assert (out / "sample" / "sample.png").exists()
    assert main(["heatmaps", "--config", str(cfg_file), "--out", str(out),
                 "--checkpoint", str(ckpt), "--prompt", "a red square"]) == 0
    assert len(list((out / "heatmaps").glob("*.pgm"))) == 2 * 3


def test_sweep_eval_only_cli(tmp_path, cfg_file):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    ckpt = out / "train" / "checkpoint.npz"
    assert main(["sweep-lambda", "--config", str(cfg_file), "--out", str(out),
                 "--lambdas", "0.0,1.0", "--eval-only", "--checkpoint", str(ckpt)]) == 0
    lines = (out / "sweep-lambda" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3


def test_sweep_metric_files_byte_identical_across_invocations(tmp_path, cfg_file):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    ckpt = out / "train" / "checkpoint.npz"
    csvs = []
    for sub in ("s1", "s2"):
        dest = tmp_path / sub
        assert main(["sweep-lambda", "--config", str(cfg_file), "--out", str(dest),
                     "--lambdas", "0.0,0.8", "--eval-only", "--checkpoint", str(ckpt)]) == 0
        csvs.append((dest / "sweep-lambda" / "sweep.csv").read_bytes())
    assert csvs[0] == csvs[1]


def test_audit_derivation_cli(tmp_path, cfg_file):
    out = tmp_path / "out"
    assert main(["audit-derivation", "--config", str(cfg_file), "--out", str(out),
                 "--instances", "5"]) == 0
    report = json.loads((out / "audit-derivation" / "report.json").read_text())
    assert len(report["rows"]) == 11


def test_bad_config_file_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("no.such.key = 1\n", encoding="utf-8")
    assert main(["train", "--config", str(bad)]) == 1
    assert "config error" in capsys.readouterr().err


def test_bad_flag_exits_1(capsys):
    assert main(["train", "--frobnicate"]) == 1
    assert main(["no-such-command"]) == 1


def test_missing_required_flag_exits_1(capsys):
    assert main(["sample", "--prompt", "a red square"]) == 1


def test_sample_steps_beyond_checkpoint_schedule_exits_1(tmp_path, cfg_file):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    ckpt = out / "train" / "checkpoint.npz"
    # default sampler.steps (50) exceeds the tiny checkpoint's 8-step schedule
    assert main(["sample", "--out", str(out), "--checkpoint", str(ckpt),
                 "--prompt", "a red square"]) == 1


def test_out_of_range_sweep_lambda_exits_1(tmp_path, cfg_file):
    assert main(["sweep-lambda", "--config", str(cfg_file), "--out", str(tmp_path),
                 "--lambdas", "0.0,3.0"]) == 1


def test_numerical_failure_exits_2(monkeypatch, cfg_file, tmp_path):
    import fuselab.cli as cli_mod

    def explode(cfg, out_dir):
        raise TrainingDiverged(3, {"l_simple": [1.0]})

    monkeypatch.setattr(cli_mod, "run_train", explode)
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path)]) == 2

    def explode_nonfinite(cfg, out_dir):
        raise NonFiniteError("tensor of shape (2, 2) contains NaN or Inf")

    monkeypatch.setattr(cli_mod, "run_train", explode_nonfinite)
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path)]) == 2
