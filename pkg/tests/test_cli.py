import json
from pathlib import Path

import numpy as np
import pytest

from voxtract import cli, joint, masknet, mixer
from voxtract.audio import wav_read, wav_write
from voxtract.errors import ConfigError


def run_cli(*argv):
    return cli.main(list(argv))


def read_corpus_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    cfg = {
        "sample_rate": 16000,
        "hop": 128,
        "masknet": {
            "n_blocks": 1,
            "hidden": 16,
            "n_heads": 2,
            "conv_kernel": 3,
            "d_emb": 8,
            "n_fft": 512,
            "dropout_rate": 0.0,
        },
        "train": {"steps": 3, "batch_size": 2, "seed": 1, "chunk_size_s": 0.512},
        "mixer": {"n_examples": 4, "n_speakers": 4, "utterance_tokens": 2, "n_rirs": 1},
    }
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def corpus_dir(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "corpus"
    assert run_cli("mix", "--out", str(out), "--config", str(small_config), "--seed", "7") == 0
    return out


class TestMix:
    def test_deterministic_byte_identical(self, small_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("mix", "--out", str(a), "--config", str(small_config), "--seed", "9") == 0
        assert run_cli("mix", "--out", str(b), "--config", str(small_config), "--seed", "9") == 0
        assert read_corpus_bytes(a) == read_corpus_bytes(b)

    def test_manifest_line_count(self, corpus_dir):
        lines = (corpus_dir / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 4

    def test_recipes_reproduce_wavs(self, small_config, corpus_dir):
        cfg = cli.load_run_config(small_config)
        catalog = cli._build_catalog(cfg, None)
        items = mixer.load_corpus(corpus_dir)
        for item in items:
            again = mixer.realize(item.example.recipe, catalog)
            assert np.array_equal(again.noisy.samples, item.example.noisy.samples)


@pytest.fixture(scope="module")
def run_dir(small_config, corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run_cli(
        "train", "--corpus", str(corpus_dir), "--out", str(out),
        "--config", str(small_config),
    )
    assert code == 0
    return out


class TestTrainEvalEnhance:
    def test_train_outputs(self, run_dir):
        assert (run_dir / "checkpoint.vxc").exists()
        records = [json.loads(x) for x in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == 3

    def test_eval_baseline_on_clean_pairs_clamps(self, corpus_dir, tmp_path):
        # rebuild the corpus with noisy == clean: aggregate hits the 60 dB ceiling
        clean_dir = tmp_path / "cleanpairs"
        clean_dir.mkdir()
        items = mixer.load_corpus(corpus_dir)
        import shutil

        for item in items:
            wav_write(clean_dir / f"{item.item_id}.noisy.wav", item.example.clean_target)
            wav_write(clean_dir / f"{item.item_id}.clean.wav", item.example.clean_target)
            wav_write(clean_dir / f"{item.item_id}.ref.wav", item.example.reference_utterance)
        shutil.copy(corpus_dir / "manifest.jsonl", clean_dir / "manifest.jsonl")
        shutil.copy(corpus_dir / "recipes.jsonl", clean_dir / "recipes.jsonl")
        report = tmp_path / "rep.jsonl"
        code = run_cli(
            "eval", "--corpus", str(clean_dir), "--baseline", "--report", str(report)
        )
        assert code == 0
        lines = [json.loads(x) for x in report.read_text().splitlines()]
        assert lines[-1]["item"] == "aggregate"
        assert lines[-1]["si_snr_db"] == 60.0

    def test_eval_report_item_count(self, run_dir, corpus_dir, tmp_path):
        report = tmp_path / "rep.jsonl"
        code = run_cli(
            "eval", "--checkpoint", str(run_dir / "checkpoint.vxc"),
            "--corpus", str(corpus_dir), "--report", str(report),
            "--chunk-size", "0.512",
        )
        assert code == 0
        lines = report.read_text().splitlines()
        manifest = (corpus_dir / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == len(manifest) + 1  # + aggregate

    def test_enhance_output_length_and_scores(self, run_dir, corpus_dir, tmp_path, capsys):
        item = mixer.load_corpus(corpus_dir)[0]
        noisy = tmp_path / "n.wav"
        ref = tmp_path / "r.wav"
        clean = tmp_path / "c.wav"
        out = tmp_path / "o.wav"
        wav_write(noisy, item.example.noisy)
        wav_write(ref, item.example.reference_utterance)
        wav_write(clean, item.example.clean_target)
        code = run_cli(
            "enhance", "--checkpoint", str(run_dir / "checkpoint.vxc"),
            "--noisy", str(noisy), "--reference", str(ref), "--out", str(out),
            "--clean", str(clean), "--chunk-size", "0.512",
        )
        assert code == 0
        scores = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert set(scores) == {"si_snr_db", "sdr_db"}
        assert len(wav_read(out)) == len(item.example.noisy)

    def test_enhance_oracle_beats_baseline(self, corpus_dir, tmp_path, capsys):
        from voxtract import metrics

        items = mixer.load_corpus(corpus_dir)
        item = min(
            items, key=lambda c: metrics.si_snr(c.example.noisy, c.example.clean_target)
        )
        noisy, clean, out = tmp_path / "n.wav", tmp_path / "c.wav", tmp_path / "o.wav"
        wav_write(noisy, item.example.noisy)
        wav_write(clean, item.example.clean_target)
        code = run_cli(
            "enhance", "--noisy", str(noisy), "--oracle", str(clean), "--out", str(out)
        )
        assert code == 0
        scores = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        baseline = metrics.si_snr(item.example.noisy, item.example.clean_target)
        assert scores["si_snr_db"] > baseline


class TestConfigHandling:
    def test_unknown_section_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"masknet": {"hidden": 16, "bogus": 1}}))
        with pytest.raises(ConfigError, match="bogus"):
            cli.load_run_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"masknett": {}}))
        with pytest.raises(ConfigError):
            cli.load_run_config(path)

    def test_flag_overrides_file(self, small_config):
        cfg = cli.load_run_config(small_config, {"train.steps": 99})
        assert cfg.train.steps == 99
        assert cfg.train.batch_size == 2  # file value preserved

    def test_invalid_config_exit_code_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"masknet": {"hidden": -4}}))
        code = run_cli("mix", "--out", str(tmp_path / "x"), "--config", str(bad))
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_missing_file_exit_code_2(self, tmp_path):
        code = run_cli(
            "enhance", "--checkpoint", str(tmp_path / "no.vxc"),
            "--noisy", str(tmp_path / "no.wav"), "--reference", str(tmp_path / "no2.wav"),
            "--out", str(tmp_path / "o.wav"),
        )
        assert code == 2

    def test_usage_error_exit_code_1(self, capsys):
        assert run_cli("mix") == 1  # --out is required

    def test_corrupt_checkpoint_exit_code_2(self, corpus_dir, tmp_path):
        bad = tmp_path / "bad.vxc"
        bad.write_bytes(b"not a checkpoint")
        code = run_cli(
            "eval", "--checkpoint", str(bad), "--corpus", str(corpus_dir)
        )
        assert code == 2


class TestGradcheckCommand:
    def test_passes_and_prints(self, capsys):
        from voxtract import gradcheck

        names = ["fusion", "toy_asr_audio"]
        results = gradcheck.run_all(seed=3, names=names)
        for res in results:
            assert res.passed
