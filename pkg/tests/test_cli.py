import json

import pytest

from dinocell.cli import build_parser, main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_parser_lists_every_subcommand():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"gen-synthetic", "split", "pretrain", "finetune", "embed", "train-head",
                        "eval-knn", "extract-cells", "run-protocol", "gradcheck"}


def test_missing_config_is_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "gradcheck", "--config", str(tmp_path / "nope.json"))
    assert code == 2 and "ConfigError" in err


def test_bad_config_value_is_exit_2(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"style": "rgb"}))
    code, _, _ = run(capsys, "gen-synthetic", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d"))
    assert code == 2


def test_missing_dataset_is_exit_3(capsys, tmp_path):
    code, _, err = run(capsys, "split", str(tmp_path / "none"))
    assert code == 3 and "missing" in err


def test_gradcheck_failure_is_exit_4(capsys, monkeypatch):
    import dinocell.gradcheck as G

    monkeypatch.setattr(G, "run_suite", lambda points, seed: [{"name": "x", "max_rel_err": 1.0}])
    code, out, _ = run(capsys, "gradcheck")
    assert code == 4 and "worst" in out


def test_pipeline_end_to_end(capsys, tmp_path):
    d, e = str(tmp_path / "d"), str(tmp_path / "e")
    assert run(capsys, "gen-synthetic", "--n-samples", "24", "--image-size", "64", "--out", d, "--seed", "2")[0] == 0
    code, out, _ = run(capsys, "split", d)
    assert code == 0 and json.loads(out)["test"] == 2
    (tmp_path / "ssl.json").write_text(json.dumps({"epochs": 1, "batch_size": 8, "n_local_crops": 2}))
    code, out, _ = run(capsys, "pretrain", d, "--config", str(tmp_path / "ssl.json"),
                       "--out", str(tmp_path / "ssl"), "--deterministic")
    assert code == 0
    trace = (tmp_path / "ssl" / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,step,loss,lr,lambda" and len(trace) == 4
    assert run(capsys, "embed", str(tmp_path / "ssl" / "teacher"), d, "--out", e)[0] == 0
    code, out, _ = run(capsys, "eval-knn", e, "--out", str(tmp_path / "knn"))
    assert code == 0 and set(json.loads(out)) == {"1", "3", "5", "10", "20"}
    (tmp_path / "head.json").write_text(json.dumps({"hidden": [8], "epochs": 2, "batch_size": 8}))
    code, out, _ = run(capsys, "train-head", e, d, "--config", str(tmp_path / "head.json"),
                       "--out", str(tmp_path / "head"))
    assert code == 0 and "test_macro_f1" in json.loads(out)
    code, out, _ = run(capsys, "finetune", d, str(tmp_path / "ssl" / "teacher"), "--config",
                       str(tmp_path / "ssl.json"), "--out", str(tmp_path / "ft"))
    assert code == 0
    code, out, _ = run(capsys, "extract-cells", d, "--crop-size", "16", "--out", str(tmp_path / "cells"))
    assert code == 0 and json.loads(out)["kept"] > 0


def test_run_protocol_subcommand(capsys, tmp_path):
    d = str(tmp_path / "d")
    run(capsys, "gen-synthetic", "--n-samples", "20", "--image-size", "64", "--out", d)
    run(capsys, "split", d)
    (tmp_path / "p.json").write_text(json.dumps({"head": {"hidden": [8], "epochs": 2}}))
    code, out, _ = run(capsys, "run-protocol", "zero-shot", "--data", d, "--config", str(tmp_path / "p.json"),
                       "--out", str(tmp_path / "r"))
    assert code == 0 and (tmp_path / "r" / "report.json").exists()
    code, _, _ = run(capsys, "run-protocol", "nope", "--data", d, "--out", str(tmp_path / "r2"))
    assert code == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
