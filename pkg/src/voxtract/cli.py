"""Command-line entry point.

Subcommands: mix, enhance, train, eval, gradcheck. Configuration comes
from an optional JSON file (sections: sample_rate, hop, masknet, train,
mixer) with command-line flags taking precedence over file values.
Unknown config keys are rejected.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import joint, masknet, metrics, mixer
from .audio import wav_read, wav_write
from .dsp import apply_mask, istft, stft
from .errors import ConfigError, FormatError, InvalidInputError, NumericError, VoxtractError
from .masknet import MaskNetConfig
from .joint import ModelBundle, ToyAsrConfig, TrainConfig


@dataclass(frozen=True)
class MixerSection:
    n_examples: int = 100
    n_speakers: int = 8
    utterance_tokens: int = 8
    n_rirs: int = 2

    def __post_init__(self):
        if self.n_examples < 1 or self.n_speakers < 2:
            raise ConfigError("mixer needs n_examples >= 1 and n_speakers >= 2")


@dataclass(frozen=True)
class RunConfig:
    sample_rate: int = 16000
    hop: int = 128
    masknet: MaskNetConfig = field(default_factory=MaskNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mixer: MixerSection = field(default_factory=MixerSection)

    def __post_init__(self):
        if self.sample_rate <= 0 or self.hop <= 0:
            raise ConfigError("sample_rate and hop must be positive")
        if self.hop > self.masknet.n_fft:
            raise ConfigError("hop must not exceed masknet.n_fft")


def _section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad config section {name!r}: {exc}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file plus overrides; flags beat file values, which beat defaults."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top-level config must be a JSON object")
    top_known = {"sample_rate", "hop", "masknet", "train", "mixer"}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    for key, value in (overrides or {}).items():
        section, _, leaf = key.partition(".")
        if leaf:
            raw.setdefault(section, dict(raw.get(section, {})))[leaf] = value
        else:
            raw[section] = value
    return RunConfig(
        sample_rate=int(raw.get("sample_rate", 16000)),
        hop=int(raw.get("hop", 128)),
        masknet=_section(MaskNetConfig, raw.get("masknet", {}), "masknet"),
        train=_section(TrainConfig, raw.get("train", {}), "train"),
        mixer=_section(MixerSection, raw.get("mixer", {}), "mixer"),
    )


def _build_catalog(cfg: RunConfig, catalog_path):
    if catalog_path is not None:
        return mixer.FileCatalog(catalog_path)
    specs = mixer.default_speaker_bank(cfg.mixer.n_speakers, cfg.sample_rate)
    return mixer.SyntheticCatalog(
        speakers=specs,
        sample_rate=cfg.sample_rate,
        utterance_tokens=cfg.mixer.utterance_tokens,
        n_rirs=cfg.mixer.n_rirs,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_mix(args) -> int:
    overrides = {}
    cfg = load_run_config(args.config, overrides)
    catalog = _build_catalog(cfg, args.catalog)
    n = args.n if args.n is not None else cfg.mixer.n_examples
    seed = args.seed if args.seed is not None else cfg.train.seed
    items = mixer.generate_corpus(catalog, n, seed)
    mixer.write_corpus(items, args.out)
    print(f"wrote {len(items)} examples to {args.out}")
    return 0


def cmd_enhance(args) -> int:
    noisy = wav_read(args.noisy)
    if args.oracle is not None:
        clean = wav_read(args.oracle)
        noisy_spec = stft(noisy, args.n_fft, args.hop)
        clean_spec = stft(clean, args.n_fft, args.hop)
        out = istft(
            apply_mask(noisy_spec, metrics.ideal_ratio_mask(clean_spec, noisy_spec)),
            noisy.sample_rate,
        )
        clean_for_score = clean
    else:
        if args.checkpoint is None:
            raise ConfigError("enhance needs --checkpoint unless --oracle is given")
        if args.reference is None:
            raise ConfigError("enhance needs --reference unless --oracle is given")
        models = ModelBundle.load(args.checkpoint)
        reference = wav_read(args.reference)
        out = joint.enhance_waveform(noisy, reference, models, args.chunk_size)
        clean_for_score = wav_read(args.clean) if args.clean else None
    wav_write(args.out, out)
    if clean_for_score is not None:
        scores = {
            "si_snr_db": metrics.si_snr(out, clean_for_score),
            "sdr_db": metrics.sdr(out, clean_for_score),
        }
        print(json.dumps(scores))
    return 0


def cmd_train(args) -> int:
    overrides = {}
    for flag, key in (
        ("seed", "train.seed"),
        ("steps", "train.steps"),
        ("loss_variant", "train.loss_variant"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.joint:
        overrides["train.joint"] = True
    cfg = load_run_config(args.config, overrides)
    corpus = mixer.load_corpus(args.corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    models, records = joint.train(
        corpus,
        cfg.train,
        net_cfg=cfg.masknet,
        log_path=out_dir / "metrics.jsonl",
        checkpoint_path=out_dir / "checkpoint.vxc",
    )
    last = records[-1]
    print(
        json.dumps(
            {
                "steps": len(records),
                "final_enh_loss": last["enh_loss"],
                "final_asr_loss": last["asr_loss"],
                "checkpoint": str(out_dir / "checkpoint.vxc"),
            }
        )
    )
    return 0


def cmd_eval(args) -> int:
    corpus = mixer.load_corpus(args.corpus)
    if args.baseline:
        rows = [
            (
                item.item_id,
                metrics.si_snr(item.example.noisy, item.example.clean_target),
                metrics.sdr(item.example.noisy, item.example.clean_target),
            )
            for item in corpus
        ]
        report = metrics.ScoreReport.from_items(rows)
    else:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint unless --baseline is given")
        models = ModelBundle.load(args.checkpoint)
        report, _ = joint.evaluate_enhancement(models, corpus, args.chunk_size)
    if args.report:
        report.write(args.report)
    print(json.dumps({"si_snr_db": report.si_snr_db, "sdr_db": report.sdr_db, "items": len(report.per_item)}))
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run_all(args.seed)
    failed = False
    for res in results:
        status = "pass" if res.passed else "FAIL"
        print(f"{res.name}: {status} (max rel err {res.max_rel_err:.3e}, {res.n_checked} entries)")
        failed |= not res.passed
    if failed:
        raise NumericError("gradient check failed")
    return 0


# ---------------------------------------------------------------------------
# parser plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxtract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="generate a synthetic mixture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--catalog", help="JSONL catalog manifest (file-backed sources)")
    p.add_argument("--synthetic", action="store_true", help="force the synthetic catalog (default)")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("enhance", help="extract the target speaker from a noisy file")
    p.add_argument("--checkpoint")
    p.add_argument("--noisy", required=True)
    p.add_argument("--reference")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", help="clean WAV; bypass the model and apply the ideal ratio mask")
    p.add_argument("--clean", help="clean WAV for scoring the output")
    p.add_argument("--chunk-size", type=float, default=5.0, dest="chunk_size")
    p.add_argument("--n-fft", type=int, default=512, dest="n_fft")
    p.add_argument("--hop", type=int, default=128)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", help="train the enhancer (optionally jointly with the recognizer)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--loss-variant", choices=["si_snr", "mse"], dest="loss_variant")
    p.add_argument("--joint", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or the unprocessed baseline) on a corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--report")
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--chunk-size", type=float, default=5.0, dest="chunk_size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    p.add_argument("--seed", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (InvalidInputError, FormatError, VoxtractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
