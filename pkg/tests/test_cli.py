import csv
import json

import numpy as np
import pytest

from lga.cli import main
from lga.tensor_core import FeatureMap, save_feature_map

TINY_TRAIN = ["epochs=1", "n_train=2", "n_test=2", "image_size=32", "object_size=6", "cue_radius=6",
              "width=8", "hidden=8", "layers=2"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        assert main(["cost", "--out-dir", str(tmp_path), "bogus=1"]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_unknown_key_in_file(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\nlayers = 2\nlayerz=3\n")
        assert main(["cost", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2

    def test_bad_value(self, tmp_path):
        assert main(["cost", "--out-dir", str(tmp_path), "layers=four"]) == 2
        assert main(["train", "--out-dir", str(tmp_path), "divergence_loss=maybe"]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["cost", "--config", str(tmp_path / "none.txt"), "--out-dir", str(tmp_path)]) == 2

    def test_malformed_line(self, tmp_path):
        assert main(["cost", "--out-dir", str(tmp_path), "layers"]) == 2

    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_file_then_override(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("layers=2\ngroups=2\n")
        assert main(["cost", "--config", str(cfg), "--out-dir", str(tmp_path), "layers=3"]) == 0
        snap = (tmp_path / "resolved_config.txt").read_text()
        assert "layers=3" in snap and "groups=2" in snap

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LGA_SEED", "17")
        assert main(["dump-graph", "--out-dir", str(tmp_path), "seed=3"]) == 0
        assert "seed=17" in (tmp_path / "resolved_config.txt").read_text()
        assert main(["dump-graph", "--out-dir", str(tmp_path), "--seed", "5"]) == 0
        assert "seed=5" in (tmp_path / "resolved_config.txt").read_text()


class TestCost:
    @pytest.mark.parametrize("preset,params_k,flops_m", [("squeeze-lga", 132, 140), ("squeeze-lga-small", 17, 22)])
    def test_presets(self, tmp_path, preset, params_k, flops_m):
        assert main(["cost", "--paper-config", preset, "--out-dir", str(tmp_path)]) == 0
        row = read_csv(tmp_path / "cost.csv")[0]
        assert abs(float(row["params_total_k"]) - params_k) <= 2
        assert abs(float(row["flops_total_m"]) - flops_m) <= 2

    def test_preset_rejects_extra_keys(self, tmp_path):
        assert main(["cost", "--paper-config", "ccnet", "--out-dir", str(tmp_path), "layers=2"]) == 2

    def test_custom_tiny(self, tmp_path):
        args = ["cost", "--out-dir", str(tmp_path), "in_channels=8", "channels=4", "layers=1", "groups=1",
                "height=2", "width=2"]
        assert main(args) == 0
        row = read_csv(tmp_path / "cost.csv")[0]
        # resize 8*4 = 32; attention 9*4 + 4*4 = 52; FLOPs: resize 4*32, prop 9*4*4, other 4*16 + 9*4*4
        assert (int(row["params_resize"]), int(row["params_attention"])) == (32, 52)
        assert (int(row["flops_resize"]), int(row["flops_info_prop"]), int(row["flops_other"])) == (128, 144, 208)

    def test_model_specific_keys(self, tmp_path):
        assert main(["cost", "--out-dir", str(tmp_path), "model=dense", "qk_channels=4", "n_nodes=16"]) == 0
        assert main(["cost", "--out-dir", str(tmp_path), "model=dense", "layers=2"]) == 2
        assert main(["cost", "--out-dir", str(tmp_path), "model=vit"]) == 2


class TestGradcheck:
    def test_default_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--out-dir", str(tmp_path), "instances=1"]) == 0
        rows = read_csv(tmp_path / "gradcheck.csv")
        names = [r["tensor"] for r in rows]
        assert len(names) == len(set(names))
        assert {"edge.weight", "reducer.weight", "layer0.weight", "layer2.weight", "f_in"} <= set(names)
        assert all(float(r["max_rel_error"]) < 1e-4 for r in rows)
        out = capsys.readouterr().out
        assert all(n in out for n in names)

    def test_zero_threshold_fails(self, tmp_path):
        assert main(["gradcheck", "--out-dir", str(tmp_path), "instances=1", "threshold=0"]) == 1


class TestBench:
    def test_analytic(self, tmp_path):
        assert main(["bench", "--out-dir", str(tmp_path), "analytic=true"]) == 0
        exps = json.loads((tmp_path / "exponents.json").read_text())
        assert {m: round(e["exponent"], 3) for m, e in exps.items()} == {"lga": 1.0, "ccnet": 1.5, "dense": 2.0}
        assert len(read_csv(tmp_path / "bench.csv")) == 12

    def test_unknown_model(self, tmp_path):
        assert main(["bench", "--out-dir", str(tmp_path), "models=lga,vit"]) == 2


class TestTrainAblate:
    def test_train_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--out-dir", str(a), "--seed", "4", *TINY_TRAIN]) == 0
        assert main(["train", "--out-dir", str(b), "--seed", "4", *TINY_TRAIN]) == 0
        assert (a / "history.csv").read_text() == (b / "history.csv").read_text()
        assert (a / "checkpoints" / "checkpoint_epoch000" / "lga" / "manifest.json").exists()

    def test_resolved_config_replays(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--out-dir", str(a), *TINY_TRAIN]) == 0
        assert main(["train", "--out-dir", str(b), "--config", str(a / "resolved_config.txt")]) == 0
        assert (a / "history.csv").read_text() == (b / "history.csv").read_text()

    def test_ablate_layers(self, tmp_path):
        assert main(["ablate", "--out-dir", str(tmp_path), "axis=layers", "values=0,1,2,4", *TINY_TRAIN]) == 0
        rows = read_csv(tmp_path / "ablation_layers.csv")
        assert [r["layers"] for r in rows] == ["0", "1", "2", "4"]

    def test_ablate_bad_axis(self, tmp_path):
        assert main(["ablate", "--out-dir", str(tmp_path), "axis=depth"]) == 2


class TestDumpGraph:
    def test_random(self, tmp_path):
        assert main(["dump-graph", "--out-dir", str(tmp_path), "height=2", "width=3"]) == 0
        g = json.loads((tmp_path / "graph.json").read_text())
        assert len(g["edges"]) == (3 * 2 - 2) * (3 * 3 - 2) and g["eps"] == 1e-6

    def test_from_file(self, tmp_path):
        save_feature_map(FeatureMap(np.zeros((1, 1, 4))), tmp_path / "x.lgaf")
        assert main(["dump-graph", "--out-dir", str(tmp_path), f"input={tmp_path / 'x.lgaf'}"]) == 0
        g = json.loads((tmp_path / "graph.json").read_text())
        assert g["edges"] == [[0, 0, pytest.approx(np.log(2)), pytest.approx(np.log(2) / (np.log(2) + 1e-6))]]
