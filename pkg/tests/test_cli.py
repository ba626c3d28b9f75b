import json

import numpy as np
import pytest

from sptlv import cli, phantom
from sptlv.model import LVNet, build_variant
from sptlv.tensor import NumericError


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ph.pqds"
    assert cli.main(["gen-data", "--dataset", str(path), "--subjects", "5", "--data-seed", "3"]) == 0
    return path


def write_cfg(tmp_path, dataset, **kw):
    cfg = {"variant": "Baseline", "dataset": str(dataset), "output_dir": str(tmp_path / "runs"),
           "phantom": {"subjects": 5}, "training": {"epochs": 0}, "folds": [0],
           "grid": [{"kind": "GaussianNoise", "levels": [1]}]}
    for k, v in kw.items():
        cfg[k] = {**cfg[k], **v} if isinstance(v, dict) and k in cfg else v
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


class TestGenData:
    def test_counts(self, tmp_path, capsys):
        path = tmp_path / "d.pqds"
        assert cli.main(["gen-data", "--dataset", str(path), "--subjects", "20"]) == 0
        assert "frames: 400" in capsys.readouterr().out
        assert path.stat().st_size == phantom.dataset_size(20)

    def test_refuses_overwrite(self, dataset):
        assert cli.main(["gen-data", "--dataset", str(dataset), "--subjects", "5"]) == cli.EXIT_CONFIG

    def test_seed_changes_content_not_size(self, tmp_path):
        a, b = tmp_path / "a.pqds", tmp_path / "b.pqds"
        cli.main(["gen-data", "--dataset", str(a), "--subjects", "5", "--data-seed", "1"])
        cli.main(["gen-data", "--dataset", str(b), "--subjects", "5", "--data-seed", "2"])
        assert a.stat().st_size == b.stat().st_size
        assert a.read_bytes() != b.read_bytes()

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.pqds", tmp_path / "b.pqds"
        for p in (a, b):
            cli.main(["gen-data", "--dataset", str(p), "--subjects", "5", "--data-seed", "4"])
        assert a.read_bytes() == b.read_bytes()


class TestConfig:
    def test_defaults(self):
        cfg = cli.normalize_config({})
        assert cfg["variant"] == "SPT_SC_L"
        assert cfg["training"]["batch"] == 60 and cfg["training"]["lam"] == 1e-3
        assert cfg["training"]["lr"] == 4e-4

    @pytest.mark.parametrize("variant,aug", [("Baseline", False), ("BaselineAug", True)])
    def test_augmentation_forced(self, variant, aug):
        for requested in (True, False):
            cfg = cli.normalize_config({"variant": variant, "training": {"augmentation": requested}})
            assert cfg["training"]["augmentation"] is aug

    @pytest.mark.parametrize("bad", [
        {"variant": "Nope"}, {"training": {"batch": 50}}, {"phantom": {"subjects": 7}},
        {"folds": [9]}, {"colour": 1}, {"grid": [{"kind": "Elastic"}]},
    ])
    def test_invalid(self, bad):
        with pytest.raises(cli.ConfigError):
            cli.normalize_config(bad)

    def test_hash_ignores_output_dir(self):
        a = cli.normalize_config({"output_dir": "x"})
        b = cli.normalize_config({"output_dir": "y"})
        assert cli.config_hash(a) == cli.config_hash(b)
        assert cli.config_hash(a) != cli.config_hash(cli.normalize_config({"width_multiplier": 0.5}))

    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv("PQ_SEED", "17")
        assert cli.load_config(None, {})["training"]["seed"] == 17

    def test_bad_config_file_exit_code(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert cli.main(["train", "--config", str(p)]) == cli.EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        assert cli.main(["train", "--dataset", str(tmp_path / "none.pqds")]) == cli.EXIT_CONFIG


class TestTrainSweep:
    def test_zero_epochs_keeps_initialisation(self, tmp_path, dataset):
        cfg = cli.load_config(str(write_cfg(tmp_path, dataset)), {})
        cli.cmd_train(cfg)
        model, header, _ = LVNet.load(tmp_path / "runs" / "Baseline" / "fold0.pqck")
        ref = build_variant("Baseline", 0.25, seed=0)
        for k in ref.params:
            np.testing.assert_array_equal(model.params[k].data, ref.params[k].data)
        assert header["config_hash"] == cli.config_hash(cfg)

    def test_log_header_echoes_lambda(self, tmp_path, dataset):
        cli.main(["train", "--config", str(write_cfg(tmp_path, dataset, training={"epochs": 1}))])
        log = (tmp_path / "runs" / "Baseline" / "train_log_fold0.csv").read_text().splitlines()
        assert log[0].startswith("# lambda=0.001")
        assert log[1].split(",")[:2] == ["epoch", "train_loss"]
        assert len(log) == 3
        eff = json.loads((tmp_path / "runs" / "Baseline" / "config.effective.json").read_text())
        assert eff["training"]["epochs"] == 1

    def test_clean_only_grid(self, tmp_path, dataset):
        p = write_cfg(tmp_path, dataset, grid=[{"kind": "None"}])
        assert cli.main(["train", "--config", str(p)]) == 0
        assert cli.main(["sweep", "--config", str(p)]) == 0
        text = (tmp_path / "runs" / "Baseline" / "report_mean.csv").read_text()
        lines = text.splitlines()
        assert lines[0].startswith("# config_hash=")
        assert len(lines) == 2 + 11
        assert all(r.split(",")[-1] == "1" for r in lines[2:])

    def test_variant_mismatch(self, tmp_path, dataset):
        p = write_cfg(tmp_path, dataset)
        cli.main(["train", "--config", str(p)])
        ckpt = tmp_path / "runs" / "Baseline" / "fold0.pqck"
        other = tmp_path / "runs" / "SPT_AC" / "fold0.pqck"
        other.parent.mkdir(parents=True)
        other.write_bytes(ckpt.read_bytes())
        assert cli.main(["sweep", "--config", str(p), "--variant", "SPT-AC"]) == cli.EXIT_CONFIG

    def test_eval_and_attack(self, tmp_path, dataset):
        p = write_cfg(tmp_path, dataset)
        cli.main(["train", "--config", str(p)])
        assert cli.main(["eval", "--config", str(p)]) == 0
        assert cli.main(["attack", "--config", str(p), "--alpha", "8", "--iters", "50"]) == 0
        out = json.loads((tmp_path / "runs" / "Baseline" / "attack_a8_i50.json").read_text())
        assert len(out["folds"]["0"]["attacked"]) == 11

    def test_report_combines(self, tmp_path, dataset):
        p = write_cfg(tmp_path, dataset)
        cli.main(["train", "--config", str(p)])
        cli.main(["sweep", "--config", str(p)])
        assert cli.main(["report", "--config", str(p)]) == 0
        assert (tmp_path / "runs" / "Baseline" / "report_combined.csv").exists()

    def test_numeric_failure_exit_code(self, tmp_path, dataset, monkeypatch):
        def boom(*a, **k):
            raise NumericError("loss is nan")
        monkeypatch.setattr(cli, "train", boom)
        p = write_cfg(tmp_path, dataset)
        assert cli.main(["train", "--config", str(p)]) == cli.EXIT_NUMERIC
        # the initial checkpoint survives the failure
        assert (tmp_path / "runs" / "Baseline" / "fold0.pqck").exists()


def test_ablate_table(tmp_path, dataset):
    p = write_cfg(tmp_path, dataset, ablate_variants=["Baseline", "BaselineAug", "SPT-SC-L"])
    assert cli.main(["ablate", "--config", str(p)]) == 0
    rows = (tmp_path / "runs" / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("# ")
    header = rows[1].split(",")
    table = {r.split(",")[0]: dict(zip(header, r.split(","))) for r in rows[2:]}
    assert table["SPT_SC_L"]["input_shape"] == "3×3×80×80"
    assert table["SPT_SC_L"]["output_shape"] == "5×3"
    echo = {v: json.loads((tmp_path / "runs" / v / "config.echo.json").read_text())
            for v in ("Baseline", "BaselineAug")}
    diff = {k for k in echo["Baseline"] if echo["Baseline"][k] != echo["BaselineAug"][k]}
    assert diff == {"variant", "training"}
    tb, ta = echo["Baseline"]["training"], echo["BaselineAug"]["training"]
    assert {k for k in tb if tb[k] != ta[k]} == {"augmentation"}
