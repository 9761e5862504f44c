import json

import jsonschema
import numpy as np
import pytest

import racl.model
from racl.audio import ManifestRow, Provenance, read_manifest, write_manifest
from racl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, main
from racl.evaluation import report_schema
from racl.model import load_checkpoint

TINY = {"audio": {"target_len": 4096}, "spectrogram": {"griffin_lim_iters": 4},
        "features": {"layers": 3, "dim": 8}, "head": {"hidden": 8, "embed": 4},
        "train": {"epochs": 2, "batch_size": 8}, "optim": {"base_lr": 0.01}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    corpus, rec = root / "corpus", root / "rec"
    assert run("synth", "--n", 10, "--out", corpus) == EXIT_OK
    assert run("reconstruct", "--manifest", corpus / "train.tsv", corpus / "dev.tsv", corpus / "eval.tsv",
               corpus / "manifest.tsv", "--merge", "--out-dir", rec, "--config", cfg) == EXIT_OK
    return root, cfg, corpus, rec


def _train(pipeline, out, *extra):
    root, cfg, _, rec = pipeline
    return run("train", "--train", rec / "train_merged.tsv", "--dev", rec / "dev_merged.tsv",
               "--config", cfg, "--out", out, "--quiet", *extra)


@pytest.fixture(scope="module")
def trained(pipeline):
    out = pipeline[0] / "run"
    assert _train(pipeline, out) == EXIT_OK
    return out


def _eval(pipeline, ckpt, out, *extra):
    rec = pipeline[3]
    return run("eval", "--manifest", rec / "eval_merged.tsv", "--checkpoint", ckpt, "--out", out, *extra)


class TestPipeline:
    def test_synth_outputs(self, pipeline):
        corpus = pipeline[2]
        assert len(read_manifest(corpus / "manifest.tsv")) == 20
        assert (corpus / "pools" / "rir").is_dir()

    def test_merged_manifest(self, pipeline):
        rec = pipeline[3]
        rows = read_manifest(rec / "manifest_merged.tsv")
        assert len(rows) == 40
        assert {r.provenance.value for r in rows} == {"bonafide", "spoof", "rec_bonafide", "rec_spoof"}
        assert all(r.path.exists() for r in rows)
        text = (rec / "manifest.tsv").read_text()
        assert "# config_hash=" in text and "# signal_hash=" in text

    def test_train_outputs(self, trained):
        for name in ("final.ckpt", "train_log.tsv", "resolved_config.json", "figures/loss_curves.png"):
            assert (trained / name).exists(), name
        resolved = json.loads((trained / "resolved_config.json").read_text())
        assert load_checkpoint(trained / "final.ckpt").config_hash == resolved["config_hash"]
        assert len(list((trained / "checkpoints").glob("*.ckpt"))) == 2

    def test_eval_outputs(self, pipeline, trained, tmp_path, capsys):
        assert _eval(pipeline, trained / "final.ckpt", tmp_path) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        jsonschema.validate(report, report_schema())
        assert list(report["subsets"]) == ["all"]
        for name in ("score_histograms", "error_rates", "distance_matrix"):
            assert (tmp_path / "figures" / f"{name}.png").stat().st_size > 0
        assert (tmp_path / "scores.tsv").read_text().startswith("# config_hash=")
        assert "pooled" in capsys.readouterr().out

    def test_eval_is_reproducible_with_overwrite(self, pipeline, trained, tmp_path):
        assert _eval(pipeline, trained / "final.ckpt", tmp_path) == EXIT_OK
        first = (tmp_path / "report.json").read_bytes()
        assert _eval(pipeline, trained / "final.ckpt", tmp_path) == EXIT_RUNTIME  # refuses to clobber
        assert _eval(pipeline, trained / "final.ckpt", tmp_path, "--overwrite", "--workers", 3) == EXIT_OK
        assert (tmp_path / "report.json").read_bytes() == first

    def test_subset_column(self, pipeline, trained, tmp_path):
        assert _eval(pipeline, trained / "final.ckpt", tmp_path, "--subset-col") == EXIT_OK
        assert list(json.loads((tmp_path / "report.json").read_text())["subsets"]) == ["synth"]

    def test_training_is_reproducible(self, pipeline, trained, tmp_path):
        assert _train(pipeline, tmp_path, "--workers", 2) == EXIT_OK
        assert (tmp_path / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()

    def test_ablate(self, pipeline, tmp_path):
        assert _train(pipeline, tmp_path, "--ablate", "std,enh,reg", "--epochs", 1) == EXIT_OK
        losses = load_checkpoint(tmp_path / "final.ckpt").config["losses"]
        assert (losses["alpha"], losses["beta"], losses["gamma"]) == (0.0, 0.0, 0.0)
        assert _train(pipeline, tmp_path / "x", "--ablate", "cls") == EXIT_CONFIG


class TestRefusals:
    def test_eval_with_mismatched_config(self, pipeline, trained, tmp_path):
        other = tmp_path / "other.json"
        other.write_text(json.dumps({**TINY, "train": {"epochs": 3, "batch_size": 8}}))
        assert _eval(pipeline, trained / "final.ckpt", tmp_path / "o", "--config", other) == EXIT_CONFIG
        assert _eval(pipeline, trained / "final.ckpt", tmp_path / "m", "--config", pipeline[1]) == EXIT_OK

    def test_train_on_reconstructions_from_other_settings(self, pipeline, tmp_path):
        assert _train(pipeline, tmp_path, "--seed", 1) == EXIT_CONFIG

    def test_unknown_config_key(self, pipeline, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"epoch": 3}}))
        assert run("reconstruct", "--manifest", pipeline[2] / "dev.tsv", "--out-dir", tmp_path / "r",
                   "--config", bad) == EXIT_CONFIG

    def test_missing_input_rows_are_listed(self, pipeline, tmp_path, capsys):
        manifest = tmp_path / "m.tsv"
        rows = read_manifest(pipeline[2] / "dev.tsv")
        write_manifest(manifest, rows + [ManifestRow(tmp_path / "ghost.wav", Provenance.BONAFIDE, "synth")])
        code = run("reconstruct", "--manifest", manifest, "--out-dir", tmp_path / "r", "--config", pipeline[1])
        assert code == EXIT_RUNTIME
        assert "ghost.wav" in capsys.readouterr().err

    def test_bad_workers(self, tmp_path):
        assert run("synth", "--n", 1, "--out", tmp_path, "--workers", 0) == EXIT_CONFIG


class TestVerifyAndSchema:
    def test_verify_passes(self, capsys):
        assert run("verify") == EXIT_OK
        assert "all checks passed" in capsys.readouterr().out

    def test_verify_catches_a_gradient_bug(self, monkeypatch, capsys):
        real = racl.model.backward

        def buggy(*args, **kwargs):
            grads, gx = real(*args, **kwargs)
            grads["w3"] = 1.01 * grads["w3"]
            return grads, gx

        monkeypatch.setattr(racl.model, "backward", buggy)
        assert run("verify") == EXIT_VERIFY
        out = capsys.readouterr().out
        assert "FAIL  gradients_vs_finite_differences" in out and "verification FAILED" in out

    @pytest.mark.parametrize("which", ["config", "report"])
    def test_schema(self, which, capsys):
        assert run("schema", which) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["type"] == "object"
