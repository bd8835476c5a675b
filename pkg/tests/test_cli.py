import hashlib
import json
from pathlib import Path

import pytest

from teata.cli import main


CONFIG_TEMPLATE = """
[data]
root = "{root}"
domains = ["gen_sc", "gen_cc"]

[[data.generators]]
name = "gen_sc"
seed = 0
num_identities = 8
images_per_identity = 8
clothing_state = "SC"

[[data.generators]]
name = "gen_cc"
seed = 1
num_identities = 8
images_per_identity = 8
clothing_state = "CC"

[train]
stage1_epochs = 2
stage2_epochs = 2
batch_size = 16
instances_per_identity = 4
stage1_lr = 2e-3
stage2_warmup_start = 2e-4
stage2_peak_lr = 2e-3
stage2_warmup_epochs = 2
"""


@pytest.fixture
def workspace(tmp_path):
    config_path = tmp_path / "run.toml"
    config_path.write_text(CONFIG_TEMPLATE.format(root=tmp_path / "data"))
    return tmp_path, config_path


def tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestGenData:
    def test_generates_and_is_idempotent(self, workspace, capsys):
        tmp_path, config_path = workspace
        assert main(["gen-data", "--config", str(config_path)]) == 0
        first = tree_digest(tmp_path / "data")
        meta = json.loads((tmp_path / "data" / "gen_cc" / "meta.json").read_text())
        assert meta["clothing_state"] == "CC"
        assert main(["gen-data", "--config", str(config_path)]) == 0
        assert tree_digest(tmp_path / "data") == first

    def test_bad_clothing_state_is_config_error(self, workspace):
        tmp_path, config_path = workspace
        code = main([
            "gen-data", "--config", str(config_path),
            "--set", "data.generators='oops'",
        ])
        assert code == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.toml")]) == 2


class TestTrainEvalReport:
    @pytest.fixture
    def trained(self, workspace):
        tmp_path, config_path = workspace
        main(["gen-data", "--config", str(config_path)])
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(config_path), "--run-dir", str(run_dir)]) == 0
        return tmp_path, config_path, run_dir

    def test_run_directory_layout(self, trained):
        _, _, run_dir = trained
        assert (run_dir / "config.toml").is_file()
        assert (run_dir / "log.jsonl").is_file()
        for step in (1, 2):
            assert (run_dir / f"step{step}" / "checkpoint" / "checkpoint.json").is_file()
            assert (run_dir / f"step{step}" / "reports" / "aggregate.json").is_file()

    def test_eval_command(self, trained, capsys):
        tmp_path, config_path, run_dir = trained
        out_dir = tmp_path / "eval_out"
        code = main([
            "eval", "--checkpoint", str(run_dir / "step2" / "checkpoint"),
            "--out", str(out_dir),
        ])
        assert code == 0
        assert (out_dir / "gen_sc.json").is_file()
        assert (out_dir / "gen_cc.json").is_file()
        agg = json.loads((out_dir / "aggregate.json").read_text())
        assert "seen_sc" in agg and "seen_cc" in agg

    def test_eval_cc_protocol_on_sc_domain(self, trained):
        tmp_path, config_path, run_dir = trained
        out_dir = tmp_path / "eval_cc"
        code = main([
            "eval", "--checkpoint", str(run_dir / "step2" / "checkpoint"),
            "--domains", "gen_sc", "--protocol", "CC", "--out", str(out_dir),
        ])
        assert code == 0
        report = json.loads((out_dir / "gen_sc.json").read_text())
        assert report["protocol"] == "CC"

    def test_eval_corrupted_checkpoint(self, trained):
        tmp_path, config_path, run_dir = trained
        blob_path = run_dir / "step2" / "checkpoint" / "tensors.bin"
        blob = bytearray(blob_path.read_bytes())
        blob[10] ^= 0xFF
        blob_path.write_bytes(bytes(blob))
        code = main([
            "eval", "--checkpoint", str(run_dir / "step2" / "checkpoint"),
            "--out", str(tmp_path / "x"),
        ])
        assert code == 4

    def test_report_command(self, trained, capsys):
        tmp_path, config_path, run_dir = trained
        assert main(["report", "--run-dir", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "forgetting (mAP)" in out
        payload = json.loads((run_dir / "report.json").read_text())
        assert payload["forgetting"]["mAP"]["matrix"][0][1] is None
        assert len(payload["forgetting"]["mAP"]["matrix"]) == 2

    def test_report_without_reports(self, tmp_path):
        assert main(["report", "--run-dir", str(tmp_path)]) == 4

    def test_resume_equals_uninterrupted(self, trained):
        import shutil

        tmp_path, config_path, run_dir = trained
        resumed_dir = tmp_path / "run_resumed"
        shutil.copytree(run_dir, resumed_dir)
        shutil.rmtree(resumed_dir / "step2")
        assert main([
            "train", "--config", str(config_path),
            "--run-dir", str(resumed_dir), "--resume",
        ]) == 0
        full = json.loads((run_dir / "step2" / "reports" / "gen_sc.json").read_text())
        redo = json.loads((resumed_dir / "step2" / "reports" / "gen_sc.json").read_text())
        assert abs(full["mAP"] - redo["mAP"]) < 1e-6
        assert abs(full["rank1"] - redo["rank1"]) < 1e-6

    def test_export_embeddings(self, trained):
        tmp_path, config_path, run_dir = trained
        out = tmp_path / "emb.jsonl"
        code = main([
            "export-embeddings", "--checkpoint", str(run_dir / "step2" / "checkpoint"),
            "--out", str(out),
        ])
        assert code == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert any(l["split"] == "prototype" for l in lines)
        assert any(l["split"] == "train" for l in lines)

    def test_override_changes_method(self, workspace):
        tmp_path, config_path = workspace
        main(["gen-data", "--config", str(config_path)])
        run_dir = tmp_path / "run_sft"
        code = main([
            "train", "--config", str(config_path), "--run-dir", str(run_dir),
            "--set", "train.method='SFT'",
        ])
        assert code == 0
        assert 'method = "SFT"' in (run_dir / "config.toml").read_text()

    def test_env_var_default_run_dir(self, workspace, monkeypatch):
        tmp_path, config_path = workspace
        main(["gen-data", "--config", str(config_path)])
        monkeypatch.setenv("TEATA_RUN_DIR", str(tmp_path / "envruns"))
        assert main(["train", "--config", str(config_path)]) == 0
        assert (tmp_path / "envruns" / "run" / "config.toml").is_file()


class TestMethodsDiffer:
    def test_sft_reports_differ_from_teata(self, workspace):
        tmp_path, config_path = workspace
        main(["gen-data", "--config", str(config_path)])
        assert main([
            "train", "--config", str(config_path),
            "--run-dir", str(tmp_path / "teata"),
        ]) == 0
        assert main([
            "train", "--config", str(config_path),
            "--run-dir", str(tmp_path / "sft"), "--set", "train.method='SFT'",
        ]) == 0
        a = (tmp_path / "teata" / "step2" / "reports" / "gen_sc.json").read_text()
        b = (tmp_path / "sft" / "step2" / "reports" / "gen_sc.json").read_text()
        assert a != b
