import json

import numpy as np
import pytest

from localgrad.cli import main
from localgrad.config import ConfigError, RunConfig, parse_layer_string, resolve, write_resolved
from localgrad.network import LayerSpec


def tiny_config(tmp_path, **extra):
    """A config small enough for seconds-long CLI runs."""
    values = {
        "mode": "man",
        "arch": ["linear:24", "relu"] * 4,
        "k": 2,
        "dataset": "spirals",
        "n_per_class": 60,
        "noise": 0.2,
        "epochs": 3,
        "batch_size": 16,
        "lr": 0.02,
        "seeds": [0],
        "out_dir": str(tmp_path / "run"),
    }
    values.update(extra)
    lines = []
    for key, val in values.items():
        if isinstance(val, str):
            lines.append(f'{key} = "{val}"')
        elif isinstance(val, bool):
            lines.append(f"{key} = {str(val).lower()}")
        elif isinstance(val, list):
            if val and isinstance(val[0], str):
                body = ", ".join(f'"{v}"' for v in val)
            else:
                body = ", ".join(str(v) for v in val)
            lines.append(f"{key} = [{body}]")
        else:
            lines.append(f"{key} = {val}")
    path = tmp_path / "run.toml"
    path.write_text("\n".join(lines) + "\n")
    return path, values


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path, _ = tiny_config(tmp_path)
        with open(path, "a") as fh:
            fh.write("mystery_knob = 3\n")
        assert main(["train", "--config", str(path)]) == 2

    def test_type_errors_name_the_field(self):
        with pytest.raises(ConfigError, match="epochs"):
            resolve({"epochs": "ten"})
        with pytest.raises(ConfigError, match="seeds"):
            resolve({"seeds": [0, "one"]})
        with pytest.raises(ConfigError, match="mode"):
            resolve({"mode": "sideways"})

    def test_dataset_requirements(self):
        with pytest.raises(ConfigError, match="csv_path"):
            resolve({"dataset": "csv"})
        with pytest.raises(ConfigError, match="idx_images"):
            resolve({"dataset": "idx"})

    def test_layer_strings(self):
        assert parse_layer_string("linear:64") == LayerSpec("linear", (64,))
        assert parse_layer_string("conv:8:3:same") == LayerSpec(
            "conv2d", (8, 3), padding="same")
        assert parse_layer_string("pool") == LayerSpec("avgpool_global")
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_layer_string("linear:sixty4")
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_layer_string("dropout:0.5")

    def test_resolved_roundtrip(self, tmp_path):
        cfg = resolve({"lr": 0.05, "seeds": [3, 4], "arch": ["linear:8", "relu"]})
        out = tmp_path / "resolved.toml"
        write_resolved(cfg, out)
        from localgrad.config import load_file
        again = resolve(load_file(out))
        assert again == cfg

    def test_flag_overrides_beat_file(self, tmp_path):
        path, _ = tiny_config(tmp_path, epochs=7)
        cfg = resolve({"epochs": 7}, {"epochs": 2})
        assert cfg.epochs == 2


class TestTrainCommand:
    def test_artifacts(self, tmp_path):
        path, values = tiny_config(tmp_path)
        assert main(["train", "--config", str(path)]) == 0
        out = tmp_path / "run"
        assert (out / "resolved.toml").exists()
        assert (out / "metrics_seed0.csv").exists()
        assert (out / "model_seed0.ckpt").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "man"
        assert summary["version"]
        assert len(summary["test_errors"]) == 1
        header = (out / "metrics_seed0.csv").read_text().splitlines()[0]
        assert header == ("epoch,split,mode,block,loss,total_objective,"
                          "accuracy,lr,peak_scalars")

    def test_rerun_from_resolved_is_bitwise_identical(self, tmp_path):
        path, _ = tiny_config(tmp_path)
        assert main(["train", "--config", str(path)]) == 0
        out = tmp_path / "run"
        first_metrics = (out / "metrics_seed0.csv").read_bytes()
        first_summary = (out / "summary.json").read_bytes()

        second = tmp_path / "rerun"
        assert main(["train", "--config", str(out / "resolved.toml"),
                     "--out", str(second)]) == 0
        assert (second / "metrics_seed0.csv").read_bytes() == first_metrics
        rerun_summary = json.loads((second / "summary.json").read_text())
        assert rerun_summary["test_errors"] == \
            json.loads(first_summary)["test_errors"]

    def test_numerical_failure_exit_code(self, tmp_path):
        path, _ = tiny_config(tmp_path, lr=1e9, epochs=2, mode="local")
        assert main(["train", "--config", str(path)]) == 3

    def test_invalid_config_exit_code(self, tmp_path):
        path, _ = tiny_config(tmp_path, k=99)
        assert main(["train", "--config", str(path)]) == 2


class TestEvalProbeCka:
    @pytest.fixture()
    def trained(self, tmp_path):
        path, _ = tiny_config(tmp_path)
        assert main(["train", "--config", str(path)]) == 0
        return path, tmp_path / "run"

    def test_eval(self, trained, tmp_path):
        path, out = trained
        code = main(["eval", "--config", str(path),
                     "--ckpt", str(out / "model_seed0.ckpt"),
                     "--out", str(tmp_path / "ev")])
        assert code == 0
        doc = json.loads((tmp_path / "ev" / "eval.json").read_text())
        assert 0.0 <= doc["test_error"] <= 1.0

    def test_eval_missing_checkpoint(self, trained, tmp_path):
        path, _ = trained
        code = main(["eval", "--config", str(path),
                     "--ckpt", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "ev2")])
        assert code == 2

    def test_probe(self, trained, tmp_path):
        path, out = trained
        code = main(["probe", "--config", str(path),
                     "--ckpt", str(out / "model_seed0.ckpt"),
                     "--probe-epochs", "3",
                     "--out", str(tmp_path / "probe")])
        assert code == 0
        lines = (tmp_path / "probe" / "probe.csv").read_text().splitlines()
        assert lines[0] == "block,accuracy"
        assert len(lines) == 3  # header + one row per block (k=2)

    def test_cka_self_diagonal(self, trained, tmp_path):
        path, out = trained
        ckpt = str(out / "model_seed0.ckpt")
        code = main(["cka", "--config", str(path), "--ckpt-a", ckpt,
                     "--ckpt-b", ckpt, "--samples", "24",
                     "--out", str(tmp_path / "cka")])
        assert code == 0
        lines = (tmp_path / "cka" / "cka.csv").read_text().splitlines()
        assert len(lines) == 3
        first = [float(v) for v in lines[1].split(",")[1:]]
        assert first[0] == pytest.approx(1.0, abs=1e-9)


class TestAblateCommand:
    def test_six_arms(self, tmp_path):
        path, _ = tiny_config(tmp_path, epochs=1, n_per_class=40)
        assert main(["ablate", "--config", str(path)]) == 0
        lines = (tmp_path / "run" / "ablation.csv").read_text().splitlines()
        assert lines[0].startswith("arm,mean_test_error,std_test_error")
        arms = [l.split(",")[0] for l in lines[1:]]
        assert arms == ["none", "ema-only", "bias-only", "ema+bias",
                        "raw-copy", "ema-copy"]

    def test_none_arm_matches_local_train(self, tmp_path):
        path, _ = tiny_config(tmp_path, epochs=2)
        assert main(["ablate", "--config", str(path)]) == 0
        ab = (tmp_path / "run" / "ablation.csv").read_text().splitlines()
        none_err = float(ab[1].split(",")[1])
        assert main(["train", "--config", str(path), "--mode", "local",
                     "--out", str(tmp_path / "loc")]) == 0
        summary = json.loads((tmp_path / "loc" / "summary.json").read_text())
        assert summary["mean_test_error"] == pytest.approx(none_err, abs=0)


class TestMemoryCommand:
    def test_k1_local_equals_e2e(self, tmp_path):
        path, _ = tiny_config(tmp_path)
        code = main(["memory", "--config", str(path), "--ks", "1", "2",
                     "--out", str(tmp_path / "mem")])
        assert code == 0
        reports = json.loads((tmp_path / "mem" / "memory.json").read_text())
        assert len(reports) == 6
        k1 = {r["mode"]: r["peak_scalars"] for r in reports if r["K"] == 1}
        assert k1["e2e"] == k1["local"]
        k2 = {r["mode"]: r["peak_scalars"] for r in reports if r["K"] == 2}
        assert k2["local"] < k2["e2e"]
