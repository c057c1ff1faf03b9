import json
from pathlib import Path

import pytest

from protofuse.cli import CONFIG_SCHEMA, build_parser, load_config, main
from protofuse.corpus import load_dataset, save_dataset
from conftest import make_domain


def write_domain_files(tmp_path, domain_id="tox", n=12):
    manifest = {
        "domain_id": domain_id,
        "labels": [
            {"name": "toxic", "definition": "rude hurtful language"},
            {"name": "normal", "definition": "everyday benign speech"},
        ],
    }
    mf = tmp_path / f"{domain_id}_manifest.json"
    mf.write_text(json.dumps(manifest))
    rf = tmp_path / f"{domain_id}_records.jsonl"
    rows = []
    for i in range(n):
        rows.append({"text": f"you stink badly m{i}", "label": "toxic"})
        rows.append({"text": f"what a nice day m{i}", "label": "normal"})
    rf.write_text("\n".join(json.dumps(r) for r in rows))
    return mf, rf


class TestIngest:
    def test_roundtrip(self, tmp_path, capsys):
        mf, rf = write_domain_files(tmp_path)
        code = main(["ingest", str(mf), str(rf), "--out", str(tmp_path / "data")])
        assert code == 0
        out = capsys.readouterr().out
        assert "toxic=12" in out and "normal=12" in out
        d = load_dataset(tmp_path / "data" / "tox.json")
        assert len(d) == 24

    def test_bad_label_exit_2(self, tmp_path, capsys):
        mf, rf = write_domain_files(tmp_path)
        rf.write_text(json.dumps({"text": "x", "label": "mystery"}))
        code = main(["ingest", str(mf), str(rf), "--out", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert "mystery" in err and ":1" in err

    def test_binary_collapse(self, tmp_path):
        mf, rf = write_domain_files(tmp_path)
        code = main(
            ["ingest", str(mf), str(rf), "--out", str(tmp_path / "b"), "--binary",
             "--neutral", "normal"]
        )
        assert code == 0
        d = load_dataset(tmp_path / "b" / "tox.json")
        assert d.manifest.label_names == ("Offensive", "Not Offensive")
        assert d.class_counts() == [12, 12]


class TestConfig:
    def test_defaults_load(self):
        config = load_config(None)
        assert config["meta.epochs"] == 5
        assert config["meta.tasks"] == 300
        assert config["eval.k"] == [16, 32, 64, 128, 256]
        assert config["eval.seeds"] == [1, 2, 3, 4, 5]

    def test_file_then_flag_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("meta.epochs = 2\nencoder.d_model = 32  # comment\n")
        config = load_config(cfg)
        assert config["meta.epochs"] == 2
        assert config["encoder.d_model"] == 32

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("meta.bogus = 3\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(cfg)

    def test_flags_bijective_with_schema(self):
        parser = build_parser()
        for sub in ("meta-train", "evaluate"):
            text = parser.format_help()
        help_meta = [a for a in parser._subparsers._group_actions[0].choices["meta-train"]._actions]
        flags = {s for a in help_meta for s in a.option_strings}
        for key in CONFIG_SCHEMA:
            assert f"--{key}" in flags

    def test_help_runs(self, capsys):
        assert main(["--help"]) == 0
        assert main(["evaluate", "--help"]) == 0
        out = capsys.readouterr().out
        assert "--eval.recipe" in out


def _ingested(tmp_path, n_domains=2, n=24):
    data = tmp_path / "data"
    data.mkdir(exist_ok=True)
    for i in range(n_domains):
        d = make_domain(f"dom{i}", counts=(n, n), seed=i)
        save_dataset(d, data / f"dom{i}.json")
    return data


SMALL = [
    "--encoder.d_model", "16", "--encoder.n_layers", "1", "--encoder.n_heads", "2",
    "--encoder.max_len", "16", "--encoder.dropout", "0.0",
]


class TestMetaTrainCommand:
    def test_smoke_and_checkpoint(self, tmp_path, capsys):
        data = _ingested(tmp_path)
        out = tmp_path / "out"
        code = main(
            ["meta-train", "--data", str(data), "--algo", "protonet",
             "--epochs", "1", "--tasks", "2", "--meta.k_choices", "2",
             "--out", str(out), *SMALL]
        )
        assert code == 0
        assert (out / "protonet_none.ckpt").exists()
        log = (out / "meta_protonet_loss.jsonl").read_text().splitlines()
        assert len(log) == 2

    def test_mldg_single_domain_exit_3(self, tmp_path, capsys):
        data = _ingested(tmp_path, n_domains=1)
        code = main(
            ["meta-train", "--data", str(data), "--algo", "mldg",
             "--epochs", "1", "--tasks", "1", "--meta.k_choices", "2",
             "--out", str(tmp_path / "o"), *SMALL]
        )
        assert code == 3
        assert "2 training domains" in capsys.readouterr().err


class TestEvaluateCommand:
    def test_unknown_recipe_exit_2(self, tmp_path, capsys):
        data = _ingested(tmp_path, n_domains=1)
        code = main(
            ["evaluate", "--data", str(data / "dom0.json"), "--recipe", "nope"]
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "valid recipes" in err and "je_protonet_cls" in err

    def test_untrained_end_to_end(self, tmp_path, capsys):
        data = _ingested(tmp_path, n_domains=1, n=30)
        out = tmp_path / "out"
        argv = [
            "evaluate", "--data", str(data / "dom0.json"), "--recipe", "untrained",
            "--k", "2,4", "--seeds", "1,2", "--finetune.epochs", "1",
            "--out", str(out), *SMALL,
        ]
        assert main(argv) == 0
        report = json.loads((out / "dom0_untrained.json").read_text())
        assert len(report["cells"]) == 4
        assert (out / "dom0_untrained.csv").exists()
        assert (out / "dom0_untrained.png").exists()

    def test_byte_identical_reports(self, tmp_path):
        data = _ingested(tmp_path, n_domains=1, n=30)
        argv_base = [
            "evaluate", "--data", str(data / "dom0.json"), "--recipe", "untrained",
            "--k", "2", "--seeds", "1,2", "--finetune.epochs", "1", *SMALL,
        ]
        assert main(argv_base + ["--out", str(tmp_path / "r1")]) == 0
        assert main(argv_base + ["--out", str(tmp_path / "r2")]) == 0
        a = (tmp_path / "r1" / "dom0_untrained.json").read_bytes()
        b = (tmp_path / "r2" / "dom0_untrained.json").read_bytes()
        assert a == b

    def test_meta_checkpoint_pipeline(self, tmp_path):
        data = _ingested(tmp_path, n_domains=2, n=24)
        out = tmp_path / "out"
        assert main(
            ["meta-train", "--data", str(data), "--algo", "protonet",
             "--epochs", "1", "--tasks", "2", "--meta.k_choices", "2",
             "--out", str(out), *SMALL]
        ) == 0
        code = main(
            ["evaluate", "--data", str(data / "dom0.json"), "--recipe", "protonet",
             "--checkpoint", str(out / "protonet_none.ckpt"),
             "--k", "2", "--seeds", "1", "--finetune.epochs", "1",
             "--out", str(out), *SMALL]
        )
        assert code == 0
        report = json.loads((out / "dom0_protonet.json").read_text())
        assert report["cells"][0]["f1"] is not None

    def test_retrained_recipe_runs_mlm(self, tmp_path):
        data = _ingested(tmp_path, n_domains=1, n=30)
        out = tmp_path / "out"
        code = main(
            ["evaluate", "--data", str(data / "dom0.json"), "--recipe", "retrained",
             "--k", "2", "--seeds", "1", "--finetune.epochs", "1",
             "--mlm.epochs", "1", "--out", str(out), *SMALL]
        )
        assert code == 0
        assert (out / "dom0_retrained.json").exists()


class TestReportCommand:
    def test_rerender(self, tmp_path):
        data = _ingested(tmp_path, n_domains=1, n=30)
        out = tmp_path / "out"
        main(
            ["evaluate", "--data", str(data / "dom0.json"), "--recipe", "untrained",
             "--k", "2", "--seeds", "1", "--finetune.epochs", "1",
             "--out", str(out), *SMALL]
        )
        again = tmp_path / "again"
        code = main(["report", "--report", str(out / "dom0_untrained.json"), "--out", str(again)])
        assert code == 0
        a = json.loads((out / "dom0_untrained.json").read_text())
        b = json.loads((again / "dom0_untrained.json").read_text())
        assert a == b

    def test_missing_file_exit_2(self, capsys):
        assert main(["report", "--report", "/nowhere.json"]) == 2
