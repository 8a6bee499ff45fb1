import json

import pytest

from dinocell.data import split_dataset
from dinocell.errors import ConfigError, ContractError, DataError
from dinocell.protocols import ExperimentConfig, assert_no_leakage, run_protocol, seeds_for
from dinocell.synthetic import SyntheticConfig, gen_synthetic

HEAD = {"hidden": [16], "epochs": 3, "batch_size": 16, "lr": 1e-3}
SSL = {"epochs": 1, "batch_size": 8, "n_local_crops": 2}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    m = gen_synthetic(SyntheticConfig(n_samples=30, image_size=64), 0, root)
    split_dataset(m, seed=0)
    m.save(root)
    return root


def cfg(dataset, protocol, **kw):
    return ExperimentConfig(protocol=protocol, data=str(dataset), head=HEAD, **kw)


def test_config_validation(dataset):
    with pytest.raises(ConfigError):
        cfg(dataset, "bogus")
    with pytest.raises(ConfigError):
        ExperimentConfig(protocol="zero-shot", data="x", head={"width": 3})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"protocol": "zero-shot", "data": "x", "extra": 1})
    c = cfg(dataset, "zero-shot")
    assert ExperimentConfig.from_dict(c.to_dict()) == c


def test_seeds_are_named_and_stable():
    a = seeds_for(3, ["init", "ssl"])
    assert a == seeds_for(3, ["init", "ssl"]) and a["init"] != a["ssl"]


def test_leakage_guard():
    assert_no_leakage(["a", "b"], ["c"], "x")
    with pytest.raises(ContractError):
        assert_no_leakage(["a", "c"], ["c"], "x")


def test_unsplit_dataset_rejected(tmp_path):
    gen_synthetic(SyntheticConfig(n_samples=12, image_size=40), 0, tmp_path)
    with pytest.raises(DataError):
        run_protocol(cfg(tmp_path, "zero-shot"), tmp_path / "out")


def test_zero_shot_report(dataset, tmp_path):
    rep = run_protocol(cfg(dataset, "zero-shot"), tmp_path)
    (row,) = rep["rows"]
    assert len(row["fold_test"]) == 5 and len(row["fold_val"]) == 5
    assert 0 <= row["test_full_macro_f1"] <= 1
    assert 0 <= row["test_macro_f1"] <= 1
    assert (tmp_path / "zero-shot.csv").exists()
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk["seeds"] == rep["seeds"]


def test_replication_adapter(dataset, tmp_path):
    rep = run_protocol(cfg(dataset, "zero-shot", adapter="replication"), tmp_path)
    assert rep["rows"][0]["adapter"] == "replication"


def test_finetune_writes_checkpoint_and_trace(dataset, tmp_path):
    rep = run_protocol(cfg(dataset, "finetune", ssl=SSL), tmp_path)
    assert (tmp_path / "finetuned").exists() and (tmp_path / "ssl_trace.csv").exists()
    assert len(rep["rows"]) == 1


def test_scaling_rows(dataset, tmp_path):
    rep = run_protocol(cfg(dataset, "scaling", ssl=SSL, fractions=(0.5, 1.0)), tmp_path)
    assert [r["fraction"] for r in rep["rows"]] == [0.5, 1.0]
    assert rep["rows"][0]["n_train"] < rep["rows"][1]["n_train"]


def test_channel_ablation_enumerates(dataset, tmp_path):
    rep = run_protocol(cfg(dataset, "channel-ablation", preset="vit-tiny/4", layout="synthetic-source"),
                       tmp_path)
    assert len(rep["rows"]) == 12
    assert sum(r["natural"] for r in rep["rows"]) == 1


def test_single_cell(dataset, tmp_path):
    rep = run_protocol(cfg(dataset, "single-cell", knn={"ks": [1, 3]}, cells={"crop_size": 32}), tmp_path)
    assert [r["k"] for r in rep["rows"]] == [1, 3]
    assert (tmp_path / "cells" / "cells.csv").exists()


def test_rerun_is_bit_identical(dataset, tmp_path):
    from dinocell.cli import deterministic

    c = cfg(dataset, "finetune", ssl=SSL)
    with deterministic():
        run_protocol(c, tmp_path / "a")
        run_protocol(c, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
