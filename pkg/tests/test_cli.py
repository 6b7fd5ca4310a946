from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from sermtl.cli import main
from sermtl.corpus import load_manifest
from sermtl.features import read_feature_file
from sermtl.hlf import read_hlf_csv


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One synthetic corpus + a trained model shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main([
        "synth", "--out", str(data), "--seed", "9",
        "--corpora", "2", "--speakers", "3", "--utts", "8", "--duration", "0.8",
    ])
    assert rc == 0
    run = root / "train_run"
    rc = main([
        "train", "--manifest", str(data / "manifest.csv"), "--out", str(run),
        "--trunk", "lstm", "--layer-sizes", "8,8", "--subtasks", "all",
        "--max-epochs", "3", "--patience", "2", "--seed", "3",
    ])
    assert rc == 0
    hlf_csv = root / "hlf.csv"
    rc = main([
        "hlf", "--model", str(run / "model.ckpt"),
        "--manifest", str(data / "manifest.csv"), "--out", str(hlf_csv),
    ])
    assert rc == 0
    return root, data, run, hlf_csv


class TestSynth:
    def test_outputs_and_determinism(self, tmp_path):
        args = ["--seed", "5", "--corpora", "1", "--speakers", "2", "--utts", "4",
                "--duration", "0.5"]
        assert main(["synth", "--out", str(tmp_path / "a")] + args) == 0
        assert main(["synth", "--out", str(tmp_path / "b")] + args) == 0
        tree_a = _tree_bytes(tmp_path / "a")
        tree_b = _tree_bytes(tmp_path / "b")
        assert tree_a == tree_b
        manifest = load_manifest(tmp_path / "a" / "manifest.csv")
        assert len(manifest) == 8
        assert (tmp_path / "a" / "config.json").exists()


class TestFeatures:
    def test_extracts_and_indexes(self, cli_workspace, tmp_path):
        _, data, _, _ = cli_workspace
        out = tmp_path / "feats"
        rc = main(["features", "--manifest", str(data / "manifest.csv"), "--out", str(out)])
        assert rc == 0
        index = (out / "features_index.csv").read_text().splitlines()
        assert index[0] == "utterance_id,feature_path,n_frames"
        assert len(index) == 49  # header + 48 utterances
        uid, rel, n_frames = index[1].split(",")
        matrix = read_feature_file(out / rel)
        assert matrix.shape == (int(n_frames), 32)


class TestTrainAndHlf:
    def test_artifacts(self, cli_workspace):
        root, _, run, hlf_csv = cli_workspace
        assert (run / "model.ckpt").exists()
        assert (run / "history.csv").read_text().startswith("epoch,train_emotion")
        assert (run / "config.json").exists()
        ids, matrix, labels = read_hlf_csv(hlf_csv)
        assert len(ids) == 48
        assert matrix.shape == (48, 16)

    def test_training_is_reproducible(self, cli_workspace, tmp_path):
        _, data, run, _ = cli_workspace
        rerun = tmp_path / "train_again"
        rc = main([
            "train", "--manifest", str(data / "manifest.csv"), "--out", str(rerun),
            "--trunk", "lstm", "--layer-sizes", "8,8", "--subtasks", "all",
            "--max-epochs", "3", "--patience", "2", "--seed", "3",
        ])
        assert rc == 0
        assert (rerun / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()
        assert (rerun / "history.csv").read_text() == (run / "history.csv").read_text()


class TestElm:
    def test_fit_and_eval(self, cli_workspace, tmp_path, capsys):
        _, _, _, hlf_csv = cli_workspace
        out = tmp_path / "elm.ckpt"
        rc = main(["elm", "--hlf", str(hlf_csv), "--out", str(out),
                   "--eval", str(hlf_csv), "--n-hidden", "32", "--seed", "1"])
        assert rc == 0
        assert out.exists()
        captured = capsys.readouterr().out
        assert "eval UA over 48 utterances" in captured


class TestXval:
    def test_cross_run_and_config_replay(self, cli_workspace, tmp_path):
        _, data, _, _ = cli_workspace
        out1 = tmp_path / "xval1"
        base_args = [
            "xval", "--manifest", str(data / "manifest.csv"),
            "--protocol", "cross", "--trunk", "lstm", "--subtasks", "all",
            "--layer-sizes", "8,8", "--max-epochs", "2", "--patience", "1",
            "--seed", "4",
        ]
        rc = main(base_args + ["--out", str(out1)])
        assert rc == 0
        report = json.loads((out1 / "report.json").read_text())
        assert len(report["folds"]) == 2
        assert report["mean_ua"] is not None
        # replay from the emitted config file alone
        out2 = tmp_path / "xval2"
        rc = main(["xval", "--manifest", str(data / "manifest.csv"),
                   "--config", str(out1 / "config.json"), "--out", str(out2)])
        assert rc == 0
        assert (out2 / "report.json").read_bytes() == (out1 / "report.json").read_bytes()

    def test_within_with_corpus_filter(self, cli_workspace, tmp_path):
        _, data, _, _ = cli_workspace
        out = tmp_path / "within"
        rc = main([
            "xval", "--manifest", str(data / "manifest.csv"), "--out", str(out),
            "--protocol", "within", "--corpus", "c00", "--trunk", "lstm",
            "--subtasks", "none", "--layer-sizes", "8,8",
            "--max-epochs", "2", "--patience", "1", "--seed", "4",
        ])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["folds"]) == 3


class TestEmbedAndReport:
    def test_embed_csv_and_svg(self, cli_workspace, tmp_path):
        _, _, _, hlf_csv = cli_workspace
        out_csv = tmp_path / "embedding.csv"
        out_svg = tmp_path / "embedding.svg"
        rc = main(["embed", "--input", str(hlf_csv), "--out", str(out_csv),
                   "--seed", "3", "--perplexity", "8", "--iters", "150",
                   "--svg", str(out_svg)])
        assert rc == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "utterance_id,x,y,emotion,gender,naturalness,corpus_id"
        assert len(lines) == 49
        assert out_svg.read_text().count("<circle") == 48

    def test_embed_deterministic(self, cli_workspace, tmp_path):
        _, _, _, hlf_csv = cli_workspace
        outs = []
        for name in ("e1.csv", "e2.csv"):
            out = tmp_path / name
            rc = main(["embed", "--input", str(hlf_csv), "--out", str(out),
                       "--seed", "3", "--perplexity", "8", "--iters", "120"])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_report_rendering(self, cli_workspace, tmp_path, capsys):
        _, data, _, _ = cli_workspace
        out = tmp_path / "small_xval"
        rc = main(["xval", "--manifest", str(data / "manifest.csv"), "--out", str(out),
                   "--protocol", "cross", "--trunk", "dnn", "--subtasks", "none",
                   "--layer-sizes", "8", "--max-epochs", "2", "--patience", "1",
                   "--window-stride", "3", "--seed", "2"])
        assert rc == 0
        capsys.readouterr()
        assert main(["report", "--run", str(out)]) == 0
        rendered = capsys.readouterr().out
        assert "mean UA" in rendered
        assert main(["report", "--compare", str(out / "report.json"), str(out / "report.json")]) == 0
        compared = capsys.readouterr().out
        assert "all differences zero" in compared


class TestCliErrors:
    def test_unknown_command_exits_two(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_unknown_flag_exits_two(self, capsys):
        assert main(["synth", "--out", "x", "--bogus"]) == 2
        capsys.readouterr()

    def test_stage_error_exits_one(self, tmp_path, capsys):
        rc = main(["features", "--manifest", str(tmp_path / "missing.csv"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
