import csv
import json
import os

import pytest

from conftest import TINY
from vpl import cli
from vpl import reports as R
from vpl.checkpoint import file_sha256
from vpl.config import ConfigError, load_config, parse_config

BASE_DOC = {
    "backbone": {
        "image_size": 8, "patch_size": 4, "in_channels": 1,
        "dim": 16, "depth": 2, "heads": 2, "num_classes": 3,
    },
    "plan": {"method": "adapter", "hyper": {"bottleneck": 4}},
    "data": {
        "synthetic": {
            "domain_tag": "general", "num_classes": 3, "image_size": 8,
            "class_mean_scale": 3.0, "noise_std": 0.3, "patient_count": 12,
            "per_patient_shift_std": 0.1, "seed": 5,
        },
        "num_samples": 192,
    },
    "train": {
        "steps": 60, "batch_size": 16, "learning_rate": 0.003,
        "weight_decay": 0.0001, "optimizer": "adamw", "seed": 3, "eval_every": 30,
    },
}


def write_config(tmp_path, doc=None, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc if doc is not None else BASE_DOC))
    return str(path)


class TestConfigSchema:
    def test_valid_config_parses(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.backbone == TINY
        assert cfg.plan.method == "adapter"
        assert cfg.data.synthetic.domain_tag == "general"

    def test_unknown_top_level_key_rejected(self):
        doc = {**BASE_DOC, "extra_knob": 1}
        with pytest.raises(ConfigError, match="extra_knob"):
            parse_config(doc)

    def test_unknown_nested_key_rejected(self):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["backbone"]["dropout"] = 0.5
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_unknown_hyper_key_rejected(self):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["plan"]["hyper"] = {"rank": 2}
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_bad_method_rejected(self):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["plan"]["method"] = "lora"
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_semantic_validation_still_applies(self):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["backbone"]["image_size"] = 9  # not divisible by patch_size
        with pytest.raises(ConfigError, match="divisible"):
            parse_config(doc)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/config.json")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config + two pretrained expert checkpoints, built once via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(root)
    general = str(root / "general.ckpt")
    medical = str(root / "medical.ckpt")
    assert cli.main(["pretrain", "--domain", "general", "--config", cfg_path, "--out", general]) == 0
    assert cli.main(["pretrain", "--domain", "medical", "--config", cfg_path, "--out", medical]) == 0
    return {"root": root, "config": cfg_path, "general": general, "medical": medical}


class TestExitCodes:
    def test_usage_error_is_2(self, capsys):
        with pytest.raises(SystemExit) as err:
            cli.main(["pretrain", "--config", "x.json", "--out", "y.ckpt"])  # missing --domain
        assert err.value.code == 2

    def test_unknown_method_is_2(self, workspace):
        with pytest.raises(SystemExit) as err:
            cli.main(["adapt", "--method", "lora", "--backbone", workspace["general"],
                      "--config", workspace["config"], "--out", "z.ckpt"])
        assert err.value.code == 2

    def test_moe_without_backbone2_is_2(self, workspace, capsys):
        code = cli.main(["adapt", "--method", "moe-adapter", "--backbone", workspace["general"],
                         "--config", workspace["config"], "--out", str(workspace["root"] / "x.ckpt")])
        assert code == 2
        assert "backbone2" in capsys.readouterr().err

    def test_tasks_zero_is_2(self, workspace):
        with pytest.raises(SystemExit) as err:
            cli.main(["params", "--method", "full", "--config", workspace["config"], "--tasks", "0"])
        assert err.value.code == 2

    def test_config_error_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{\"nope\": 1}")
        code = cli.main(["params", "--method", "full", "--config", str(bad), "--tasks", "1"])
        assert code == 2

    def test_runtime_error_is_1(self, workspace, tmp_path, capsys):
        # evaluating an empty split is a runtime failure
        data = tmp_path / "data.json"
        data.write_text(json.dumps(BASE_DOC["data"]))
        adapted = str(workspace["root"] / "lin.ckpt")
        assert cli.main(["adapt", "--method", "linear", "--backbone", workspace["general"],
                         "--config", workspace["config"], "--out", adapted]) == 0
        code = cli.main(["eval", "--model", adapted, "--data", str(data),
                         "--split", "test_unseen"])
        assert code == 1


class TestPretrain:
    def test_domains_distinct_tags(self, workspace):
        from vpl.checkpoint import load_backbone

        assert load_backbone(workspace["general"]).domain_tag == "general"
        assert load_backbone(workspace["medical"]).domain_tag == "medical"

    def test_same_seed_identical_hash(self, workspace, tmp_path):
        again = str(tmp_path / "again.ckpt")
        assert cli.main(["pretrain", "--domain", "general", "--config", workspace["config"],
                         "--out", again]) == 0
        assert file_sha256(again) == file_sha256(workspace["general"])


class TestAdaptAndEval:
    def test_linear_trains_head_only_hash_constant(self, workspace):
        out = str(workspace["root"] / "linear.ckpt")
        assert cli.main(["adapt", "--method", "linear", "--backbone", workspace["general"],
                         "--config", workspace["config"], "--out", out]) == 0
        with open(out + ".history.csv") as f:
            rows = list(csv.DictReader(f))
        assert len({r["backbone_hash"] for r in rows}) == 1
        assert [*rows[0].keys()] == ["step", "loss", "accuracy", "backbone_hash"]

    def test_full_changes_backbone_hash(self, workspace):
        out = str(workspace["root"] / "full.ckpt")
        assert cli.main(["adapt", "--method", "full", "--backbone", workspace["general"],
                         "--config", workspace["config"], "--out", out]) == 0
        with open(out + ".history.csv") as f:
            rows = list(csv.DictReader(f))
        assert len({r["backbone_hash"] for r in rows}) > 1

    def test_gmoe_end_to_end_writes_gate_summary(self, workspace, capsys):
        out = str(workspace["root"] / "gmoe.ckpt")
        code = cli.main(["adapt", "--method", "gmoe-adapter", "--backbone", workspace["general"],
                         "--backbone2", workspace["medical"],
                         "--config", workspace["config"], "--out", out])
        assert code == 0
        assert "gate 0" in capsys.readouterr().out
        with open(out + ".gate_summary.csv") as f:
            header = f.readline().strip().split(",")
        assert header == ["gate", "parameterization", "mean", "min", "max"]

    def test_eval_seeds_mean(self, workspace, tmp_path, capsys):
        adapted = str(workspace["root"] / "for_eval.ckpt")
        assert cli.main(["adapt", "--method", "adapter", "--backbone", workspace["general"],
                         "--config", workspace["config"], "--out", adapted]) == 0
        data = tmp_path / "data.json"
        data.write_text(json.dumps(BASE_DOC["data"]))
        assert cli.main(["eval", "--model", adapted, "--data", str(data),
                         "--split", "test_seen", "--seeds", "3"]) == 0
        out = capsys.readouterr().out
        assert out.count("seed=") == 3
        assert "mean over 3 seed(s)" in out

    def test_eval_deterministic(self, workspace, tmp_path, capsys):
        adapted = str(workspace["root"] / "for_eval2.ckpt")
        assert cli.main(["adapt", "--method", "linear", "--backbone", workspace["general"],
                         "--config", workspace["config"], "--out", adapted]) == 0
        capsys.readouterr()  # drop the adapt output
        data = tmp_path / "data.json"
        data.write_text(json.dumps(BASE_DOC["data"]))
        argv = ["eval", "--model", adapted, "--data", str(data), "--split", "train"]
        assert cli.main(argv) == 0
        first = capsys.readouterr().out
        assert cli.main(argv) == 0
        assert capsys.readouterr().out == first


class TestEvalFileManifests:
    def test_eval_backbone_on_raw_tensor_manifest(self, workspace, tmp_path, capsys):
        import numpy as np

        from vpl import datahub as D
        from vpl.config import DataSpec

        # materialize the synthetic domain into headerless raw tensors
        spec_doc = BASE_DOC["data"]["synthetic"]
        from vpl.datahub import SyntheticDomainSpec, synth_dataset

        spec = SyntheticDomainSpec(**spec_doc)
        manifest, gen = synth_dataset(spec, num_samples=24)
        rows = []
        for i, entry in enumerate(manifest.entries):
            path = tmp_path / f"s{i:03d}.raw"
            gen([i])[0].astype("<f8").tofile(path)
            rows.append(f"{path},{entry.label},{entry.patient_id},{entry.modality}")
        csv_path = tmp_path / "files.csv"
        csv_path.write_text("sample_ref,label,patient_id,modality\n" + "\n".join(rows) + "\n")

        code = cli.main(["eval", "--model", workspace["general"], "--data", str(csv_path),
                         "--split", "train"])
        assert code == 0
        out = capsys.readouterr().out
        assert "accuracy=" in out and "mean over 1 seed(s)" in out
        # the raw files round-trip bit-exactly through the loader
        X, y = D.materialize(manifest, gen)
        X2, y2 = D.materialize(
            D.load_manifest(str(csv_path)), expected_shape=(1, 8, 8)
        )
        assert X.tobytes() == X2.tobytes() and (y == y2).all()
        assert DataSpec(manifest=str(csv_path)).task_num_classes() is None

    def test_eval_backbone_on_pgm_manifest(self, workspace, tmp_path, capsys):
        import numpy as np

        # 8x8 single-channel PGMs with one bright quadrant per class
        rows = []
        for i in range(8):
            label = i % 2
            img = np.zeros((8, 8), dtype=np.uint8)
            img[:, :4] = 255 if label == 0 else 16
            path = tmp_path / f"p{i}.pgm"
            path.write_bytes(b"P5\n8 8\n255\n" + img.tobytes())
            rows.append(f"{path},{label},pat{i % 4},xray")
        csv_path = tmp_path / "pgm.csv"
        csv_path.write_text("sample_ref,label,patient_id,modality\n" + "\n".join(rows) + "\n")
        code = cli.main(["eval", "--model", workspace["general"], "--data", str(csv_path),
                         "--split", "train"])
        assert code == 0
        assert "n=" in capsys.readouterr().out


class TestParams:
    def test_ordering_printed_sorted(self, workspace, capsys):
        assert cli.main(["params", "--method", "all", "--config", workspace["config"],
                         "--tasks", "19"]) == 0
        out = capsys.readouterr().out
        lines = [l for l in out.splitlines() if l.startswith("|") and "X" in l]
        methods = [l.split("|")[1].strip() for l in lines]
        assert methods.index("linear") < methods.index("bias") < methods.index("full")

    def test_single_method(self, workspace, capsys):
        assert cli.main(["params", "--method", "linear", "--config", workspace["config"],
                         "--tasks", "19"]) == 0
        out = capsys.readouterr().out
        assert "linear" in out and "51" in out


class TestSweepScaling:
    def test_three_budget_rows_and_trend(self, workspace, capsys):
        out_dir = str(workspace["root"] / "sweep")
        code = cli.main(["sweep-scaling", "--budgets", "1.01,1.05,1.17",
                         "--config", workspace["config"], "--backbone", workspace["general"],
                         "--out-dir", out_dir])
        assert code == 0
        out = capsys.readouterr().out
        assert out.count("X") >= 6
        assert "monotone nondecreasing" in out
        with open(os.path.join(out_dir, "results_scaling.csv")) as f:
            header = f.readline().strip().split(",")
        assert header == list(R.RESULT_COLUMNS)

    def test_achieved_within_ten_percent(self, workspace):
        from vpl.checkpoint import load_backbone

        bb = load_backbone(workspace["general"])
        for budget in (1.01, 1.02, 1.05, 1.10, 1.17, 1.39):
            _, achieved = cli.budget_plan(budget, bb.config, 3)
            assert abs(achieved - budget) / budget <= 0.10, (budget, achieved)

    def test_single_budget_no_trend_report(self, workspace, capsys):
        out_dir = str(workspace["root"] / "sweep1")
        code = cli.main(["sweep-scaling", "--budgets", "1.05",
                         "--config", workspace["config"], "--backbone", workspace["general"],
                         "--out-dir", out_dir])
        assert code == 0
        out = capsys.readouterr().out
        assert "monotone" not in out


class TestOod:
    def test_modes_emit_exact_split_settings(self, workspace, capsys):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["data"]["synthetic"]["patient_count"] = 160
        doc["data"]["num_samples"] = 480
        cfg = write_config(workspace["root"], doc, name="ood.json")
        expectations = {
            1: "(160,0), (100,60), (80,80), (60,100)",
            2: "(80,80), (80,60), (80,40), (80,20)",
            3: "(140,20), (120,20), (100,20), (80,20), (60,20)",
        }
        for mode, expected in expectations.items():
            out_dir = str(workspace["root"] / f"ood{mode}")
            assert cli.main(["ood", "--mode", str(mode), "--config", cfg,
                             "--splits-only", "--out-dir", out_dir]) == 0
            out = capsys.readouterr().out
            assert expected in out
            assert "leakage_free=False" not in out

    def test_mode1_trained_table_has_seven_columns(self, workspace, capsys):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["data"]["synthetic"]["patient_count"] = 160
        doc["data"]["num_samples"] = 320
        doc["train"]["steps"] = 20
        cfg = write_config(workspace["root"], doc, name="ood_train.json")
        out_dir = str(workspace["root"] / "ood_train")
        code = cli.main(["ood", "--mode", "1", "--config", cfg, "--budgets", "1.05",
                         "--backbone", workspace["general"], "--out-dir", out_dir])
        assert code == 0
        out = capsys.readouterr().out
        header = next(l for l in out.splitlines() if l.startswith("| Total Params"))
        labels = [c.strip() for c in header.strip("|").split("|")][1:]
        assert labels == ["160 Seen", "100 Seen", "60 Unseen", "80 Seen",
                          "80 Unseen", "60 Seen", "100 Unseen"]


class TestSweepFallbackPretrain:
    def test_sweep_without_backbone_pretrains_internally(self, workspace, capsys):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["train"]["steps"] = 40
        doc["out_dir"] = str(workspace["root"] / "fallback_out")
        cfg = write_config(workspace["root"], doc, name="fallback.json")
        code = cli.main(["sweep-scaling", "--budgets", "1.02", "--config", cfg])
        assert code == 0
        assert os.path.exists(os.path.join(doc["out_dir"], "results_scaling.csv"))


class TestGmoePerBlockCli:
    def test_adapt_with_per_block_fusion(self, workspace, capsys):
        doc = json.loads(json.dumps(BASE_DOC))
        doc["plan"] = {"method": "gmoe-adapter",
                       "hyper": {"bottleneck": 4, "fusion_mode": "per_block"}}
        doc["train"]["steps"] = 30
        cfg = write_config(workspace["root"], doc, name="perblock.json")
        out = str(workspace["root"] / "perblock.ckpt")
        code = cli.main(["adapt", "--method", "gmoe-adapter",
                         "--backbone", workspace["general"],
                         "--backbone2", workspace["medical"],
                         "--config", cfg, "--out", out])
        assert code == 0
        printed = capsys.readouterr().out
        assert "gate 0" in printed and "gate 1" in printed  # one gate per block


class TestDeterminism:
    def test_sweep_csv_byte_identical(self, workspace):
        dirs = [str(workspace["root"] / f"det{i}") for i in (0, 1)]
        for d in dirs:
            assert cli.main(["sweep-scaling", "--budgets", "1.02,1.05",
                             "--config", workspace["config"],
                             "--backbone", workspace["general"], "--out-dir", d]) == 0
        blobs = [open(os.path.join(d, "results_scaling.csv"), "rb").read() for d in dirs]
        assert blobs[0] == blobs[1]

    def test_parallel_cells_match_sequential(self, workspace, monkeypatch):
        dirs = [str(workspace["root"] / f"par{i}") for i in (0, 1)]
        for d, threads in zip(dirs, ("1", "4")):
            monkeypatch.setenv("VPL_THREADS", threads)
            assert cli.main(["sweep-scaling", "--budgets", "1.02,1.05",
                             "--config", workspace["config"],
                             "--backbone", workspace["general"], "--out-dir", d]) == 0
        blobs = [open(os.path.join(d, "results_scaling.csv"), "rb").read() for d in dirs]
        assert blobs[0] == blobs[1]


class TestGradcheckCli:
    def test_pass_exit_zero(self, capsys):
        assert cli.main(["gradcheck", "--method", "bias"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_with_explicit_config(self, workspace, capsys):
        assert cli.main(["gradcheck", "--method", "adapter",
                         "--config", workspace["config"]]) == 0
        assert "PASS" in capsys.readouterr().out
