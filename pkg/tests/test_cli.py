from __future__ import annotations

import json

import pytest

from abra.cli import main
from conftest import DEFAULT_CONFIG
from helpers import small_config


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.delenv("ABRA_JOBS", raising=False)
    doc = small_config(seeds=[0], methods=["zero_shot", "param_delta", "abra"]).to_dict()
    doc["output_dir"] = str(tmp_path / "run")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_default_config_matches_shipped_file(tmp_path, capsys):
    assert main(["default-config"]) == 0
    assert capsys.readouterr().out == DEFAULT_CONFIG.read_text()
    assert main(["default-config", "--output", str(tmp_path / "d.json")]) == 0
    assert (tmp_path / "d.json").read_text() == DEFAULT_CONFIG.read_text()


def test_config_errors_exit_2_and_name_the_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"band": {"half_widht": 2}}))
    assert main(["pretrain", str(bad)]) == 2
    assert "band.half_widht" in capsys.readouterr().err


def test_missing_files_exit_3(tmp_path, capsys):
    assert main(["bench", str(tmp_path / "nope.json")]) == 3
    assert "nope.json" in capsys.readouterr().err
    assert main(["inspect", str(tmp_path / "nope.abra")]) == 3


def test_corrupted_artifact_exits_3(cfg_path, tmp_path, capsys):
    assert main(["pretrain", str(cfg_path)]) == 0
    path = tmp_path / "run" / "seed0" / "theta0.abra"
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    capsys.readouterr()
    assert main(["inspect", str(path)]) == 3
    err = capsys.readouterr().err
    assert "checksum" in err and "theta0.abra" in err


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["transport"])
    assert info.value.code == 2


def test_stage_commands_and_transport(cfg_path, tmp_path, capsys):
    run = tmp_path / "run" / "seed0"
    assert main(["pretrain", str(cfg_path)]) == 0
    assert main(["domain", str(cfg_path), "--domain", "source"]) == 0
    assert main(["domain", str(cfg_path), "--domain", "target"]) == 0
    assert main(["class", str(cfg_path), "--class-id", "3"]) == 0
    for name in ("theta0", "domain_source", "domain_target", "class_3_on_source", "class_3_on_theta0"):
        assert (run / f"{name}.abra").exists()

    # source = target: the composed expert is the source class expert
    out = tmp_path / "same.abra"
    args = ["transport", "--source-domain", str(run / "domain_source.abra"),
            "--target-domain", str(run / "domain_source.abra"), "--adapter", str(run / "class_3_on_source.abra")]
    assert main(args + ["--output", str(out), "--map-output", str(tmp_path / "map.abra")]) == 0
    capsys.readouterr()
    assert main(["inspect", str(out), "--diff", str(run / "class_3_on_source.abra"), "--tol", "1e-9"]) == 0
    assert "max frobenius distance" in capsys.readouterr().out

    assert main(["inspect", str(tmp_path / "map.abra")]) == 0
    assert "orth.res" in capsys.readouterr().out

    shifted = ["transport", "--source-domain", str(run / "domain_source.abra"),
               "--target-domain", str(run / "domain_target.abra"), "--adapter", str(run / "class_3_on_source.abra")]
    for method in ("abra", "param_delta"):
        assert main(shifted + ["--method", method, "--output", str(tmp_path / f"{method}.abra")]) == 0
    assert main(["inspect", str(tmp_path / "abra.abra"), "--diff", str(tmp_path / "param_delta.abra"), "--tol", "1e-9"]) == 1
    capsys.readouterr()
    assert main(shifted + ["--method", "task_analogy", "--output", str(tmp_path / "ta.abra")]) == 2
    assert "--theta0" in capsys.readouterr().err
    ta = shifted[:-1] + [str(run / "class_3_on_theta0.abra"), "--method", "task_analogy",
                         "--theta0", str(run / "theta0.abra"), "--output", str(tmp_path / "ta.abra")]
    assert main(ta) == 0


def test_transport_rejects_wrong_artifact_kind(cfg_path, tmp_path, capsys):
    run = tmp_path / "run" / "seed0"
    assert main(["pretrain", str(cfg_path)]) == 0
    assert main(["domain", str(cfg_path), "--domain", "source"]) == 0
    capsys.readouterr()
    args = ["transport", "--source-domain", str(run / "domain_source.abra"),
            "--target-domain", str(run / "domain_source.abra"), "--adapter", str(run / "theta0.abra"),
            "--output", str(tmp_path / "x.abra")]
    assert main(args) == 2
    assert "--adapter" in capsys.readouterr().err


def test_class_id_must_be_a_source_class(cfg_path, capsys):
    assert main(["class", str(cfg_path), "--class-id", "9"]) == 2
    assert "--class-id" in capsys.readouterr().err


def test_bench_is_deterministic(cfg_path, tmp_path, capsys):
    assert main(["bench", str(cfg_path), "--report", str(tmp_path / "a.json")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[0] == "method"
    assert main(["bench", str(cfg_path), "--report", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["audit"]["violations"] == 0
    assert "output_dir" not in doc["config"]


def test_fewshot_command(cfg_path, tmp_path, capsys):
    assert main(["fewshot", str(cfg_path), "--shots", "1,2", "--metric", "accuracy"]) == 0
    out = capsys.readouterr().out
    assert "shots = 2" in out
    doc = json.loads((tmp_path / "run" / "fewshot_report.json").read_text())
    assert doc["shots"] == [1, 2]
    assert main(["fewshot", str(cfg_path), "--shots", "1,x"]) == 2
    assert main(["fewshot", str(cfg_path), "--shots", "999"]) == 2
