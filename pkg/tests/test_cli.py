import csv
import json

import numpy as np
import pytest

from adamole.checkpoint import MAGIC, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from adamole.cli import main
from adamole.config import apply_overrides, config_from_dict, load_config
from adamole.errors import ConfigError
from adamole.model import RoutedClassifier, ToyModel, ToyModelConfig
from adamole.moe_layer import MixMode

from conftest import CONFIGS

TINY = {
    "seed": 0,
    "mode": {"kind": "adamole", "tau_max": 0.25},
    "model": {"d_model": 8, "n_experts": 4, "lora_rank": 2},
    "train": {"lr": 1e-2, "max_steps": 20},
    "task": {"kind": "cluster_routing", "n_clusters": 4, "dim": 8, "n_samples": 200},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_shipped_configs_load():
    for path in CONFIGS.glob("*.json"):
        cfg = load_config(path)
        assert cfg.mode.kind == "adamole"


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        config_from_dict({**TINY, "extra": 1})
    with pytest.raises(ConfigError):
        config_from_dict({**TINY, "model": {"d_model": 8, "width": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({**TINY, "model": {"seed": 3}})


def test_lora_override_folds_rank():
    cfg = apply_overrides(config_from_dict(TINY), mode="lora")
    assert cfg.model.n_experts == 1 and cfg.model.lora_rank == 8
    assert cfg.resolved_model().total_rank == config_from_dict(TINY).model.total_rank
    assert apply_overrides(config_from_dict(TINY), mode="topk").mode == MixMode.top_k(2)
    assert apply_overrides(config_from_dict(TINY), mode="fixed").mode == MixMode.fixed(0.25)
    with pytest.raises(ConfigError):
        apply_overrides(apply_overrides(config_from_dict(TINY), mode="topk"), tau_max=0.1)


def probe_equal(model, probe):
    restored, extra = from_bytes(to_bytes(model, {"note": "x"}))
    assert extra == {"note": "x"}
    a, _ = model.forward(probe)
    b, _ = restored.forward(probe)
    assert np.array_equal(a, b)
    assert to_bytes(restored, {"note": "x"}) == to_bytes(model, {"note": "x"})


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    router = RoutedClassifier(6, 8, 3, 4, 2, 8.0, MixMode.adaptive(0.25), seed=2)
    for p in router.trainable_parameters():
        p.value[...] = rng.normal(size=p.value.shape)
    probe_equal(router, rng.normal(size=(5, 6)))
    toy = ToyModel(ToyModelConfig(n_layers=1, d_model=8, vocab_size=16, seq_len=4, n_experts=2,
                                  lora_rank=2, mode=MixMode.top_k(1)))
    for p in toy.trainable_parameters():
        p.value[...] = rng.normal(size=p.value.shape)
    probe_equal(toy, rng.integers(0, 16, size=(3, 4)))
    save_checkpoint(toy, tmp_path / "c.bin")
    assert (tmp_path / "c.bin").read_bytes()[:8] == MAGIC
    loaded, _ = load_checkpoint(tmp_path / "c.bin")
    assert loaded.base_hash() == toy.base_hash()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ConfigError):
        from_bytes(b"NOTMAGIC" + bytes(16))
    good = to_bytes(RoutedClassifier(4, 4, 2, 2, 1, 1.0, MixMode.top_k(1)))
    with pytest.raises(ConfigError):
        from_bytes(good[:-8])


def test_run_writes_artifacts(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(tiny_config), "--out", str(out), "--quiet"]) == 0
    for name in ("metrics.json", "loss.csv", "activations.csv", "checkpoint.bin"):
        assert (out / name).is_file(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["steps"] == 20 and metrics["config"]["mode"]["tau_max"] == 0.25
    rows = list(csv.reader((out / "loss.csv").open()))
    assert rows[0] == ["step", "loss", "lr", "aux_loss", "val_acc"] and len(rows) == 21
    assert "val_acc=" in capsys.readouterr().out


def test_run_overrides(tmp_path, tiny_config):
    out = tmp_path / "lora"
    assert main(["run", "--config", str(tiny_config), "--mode", "lora", "--seed", "3",
                 "--out", str(out), "--quiet"]) == 0
    cfg = json.loads((out / "metrics.json").read_text())["config"]
    assert cfg["mode"] == {"kind": "lora"} and cfg["seed"] == 3 and cfg["model"]["lora_rank"] == 8


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["run", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({**TINY, "mode": {"kind": "dense"}}))
    assert main(["run", "--config", str(bad)]) == 2
    assert "dense" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--verbose"]) == 0
    out = capsys.readouterr().out
    for group in ("lora_expert", "gate", "threshold", "layer[adamole]", "attention_block", "model_loss"):
        assert group in out
    assert "worst:" in out
    assert main(["gradcheck", "--tolerance", "1e-15"]) == 1


def test_sweep_command(tmp_path, tiny_config):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(tiny_config), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [float(r["tau_max"]) for r in rows] == [0.125, 0.25, 0.375, 0.5]
    assert set(rows[0]) == {"tau_max", "val_acc", "avg_active_experts"}
    assert (out / "tau_max_3" / "metrics.json").is_file()
    assert main(["sweep", "--config", str(tiny_config), "--mode", "topk", "--out", str(out)]) == 2


def test_parallel_sweep_matches_sequential(tmp_path, tiny_config):
    seq, par = tmp_path / "seq", tmp_path / "par"
    assert main(["sweep", "--config", str(tiny_config), "--out", str(seq), "--tau-max-list", "0.1,0.3"]) == 0
    assert main(["sweep", "--config", str(tiny_config), "--out", str(par), "--tau-max-list", "0.1,0.3",
                 "--parallel"]) == 0
    assert (seq / "sweep.csv").read_text() == (par / "sweep.csv").read_text()
    for i in range(2):
        assert (seq / f"tau_max_{i}" / "checkpoint.bin").read_bytes() == \
               (par / f"tau_max_{i}" / "checkpoint.bin").read_bytes()
