"""Command-line pipeline: synthesis, pretraining, fine-tuning, scoring.

Every subcommand writes a JSON snapshot of its effective configuration
and seed next to its outputs. Errors map to fixed exit codes: 2 bad
usage or configuration, 3 IO or file format, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import (ConfigError, DivergenceError, FormatError, PvadkitError,
               apc, data, metrics, pvad, speaker)
from .config import RunConfig, load_config, override_section, write_run_json
from .features import AudioBuffer, log_mel
from .pipeline import supervised_streams
from .util import substream
from . import wavio


def resolve_threads(flag_value) -> int:
    if flag_value is not None:
        n = flag_value
    else:
        try:
            n = int(os.environ.get("PVAD_THREADS", "1"))
        except ValueError as exc:
            raise ConfigError(f"bad PVAD_THREADS value: {exc}") from exc
    if n < 1:
        raise ConfigError(f"threads must be >= 1, got {n}")
    return n


def _load_run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg = override_section(cfg, "train", seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = override_section(cfg, "train", epochs=args.epochs)
        cfg = override_section(cfg, "apc", epochs=args.epochs)
    return dataclasses.replace(cfg, threads=resolve_threads(
        getattr(args, "threads", None)))


def _load_profiles(profile_dir) -> dict:
    profiles = {}
    pdir = Path(profile_dir)
    for path in sorted(pdir.glob("*.pvtc")):
        prof = speaker.load_profile(path)
        profiles[prof.speaker_id] = prof
    if not profiles:
        raise ConfigError(f"no enrollment profiles (*.pvtc) in {pdir}")
    return profiles


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    records = data.synth_corpus(args.speakers, args.utts_per_speaker, cfg.seed,
                                noise_floor_db=args.noise_floor_db)
    data.write_corpus_manifest(out / "manifest.jsonl", records,
                               audio_dir=out / "audio")
    bank = data.make_noise_bank(cfg.seed)
    data.save_noise_bank(bank, out / "noise")

    triples = [(log_mel(AudioBuffer(r.samples, r.sample_rate),
                        cfg.feature).frames,
                data.record_speech_frames(r, cfg.feature),
                r.speaker_id) for r in records]
    dvec, _ = speaker.train_speaker_embedder(
        triples, speaker.compact_config(), speaker.EmbedderTrainConfig(),
        cfg.seed)
    speaker.save_dvector(out / "dvector.pvtc", dvec)

    if args.train_mixes > 0:
        rng = substream(cfg.seed, "train-mix")
        mixes = [data.make_multispeaker(records, rng, utt_id=f"train{i:04d}",
                                        cfg=cfg.feature)
                 for i in range(args.train_mixes)]
        mix_dir = out / "train_mixes"
        for utt in mixes:
            wavio.write_wav(mix_dir / f"{utt.utt_id}.wav", utt.samples,
                            utt.sample_rate)
        data.write_multispeaker_manifest(mix_dir / "manifest.jsonl", mixes)

    write_run_json(out, cfg, {"command": "synth-data"})
    print(f"wrote {len(records)} utterances, noise bank, and embedder to {out}")
    return 0


def cmd_build_tests(args) -> int:
    cfg = _load_run_config(args)
    records = data.read_corpus_manifest(args.corpus)
    bank = data.load_noise_bank(args.noise_bank)
    rng = substream(cfg.seed, "test-mix-draw")
    mixes = [data.make_multispeaker(records, rng, utt_id=f"test{i:04d}",
                                    cfg=cfg.feature)
             for i in range(args.mixes)]
    out = Path(args.out)
    conditions = data.build_test_matrix(mixes, bank, cfg.seed, out_dir=out)
    write_run_json(out, cfg, {"command": "build-tests"})
    print(f"wrote {len(conditions)} conditions x {args.mixes} utterances to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    if args.denoising:
        cfg = override_section(cfg, "apc", denoising=True)
    records = data.read_corpus_manifest(args.corpus)
    bank = None
    if cfg.apc.denoising:
        if args.noise_bank is None:
            raise ConfigError("--denoising needs --noise-bank")
        bank = data.load_noise_bank(args.noise_bank)
    corpus = apc.build_pretrain_corpus(records, feature_cfg=cfg.feature,
                                       noise_bank=bank, seed=cfg.seed)
    model, losses = apc.pretrain(corpus, cfg.apc, cfg.seed,
                                 threads=cfg.threads)
    out = Path(args.out)
    apc.save_apc(out, model)
    apc.write_loss_curve(out.with_suffix(out.suffix + ".loss.csv"), losses)
    write_run_json(out, cfg, {"command": "pretrain"})
    print(f"pretrained {'dn-apc' if cfg.apc.denoising else 'apc'} encoder: "
          f"final l1 {losses[-1]:.4f} -> {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    utts = data.read_multispeaker_manifest(args.corpus)
    dvec = speaker.load_dvector(args.dvector)
    profiles = _load_profiles(args.profiles)
    missing = sorted({u.target_speaker_id for u in utts} - set(profiles))
    if missing:
        raise ConfigError(f"no enrollment profile for target(s) {missing}")

    bank = rir_pool = None
    mtr_cfg = None
    if args.mtr:
        if args.noise_bank is None:
            raise ConfigError("--mtr needs --noise-bank")
        bank = data.load_noise_bank(args.noise_bank)
        rir_pool = data.default_rir_pool(cfg.seed)
        mtr_cfg = cfg.mtr
    corpus = supervised_streams(utts, dvec, profiles, cfg.feature,
                                mtr_cfg=mtr_cfg, noise_bank=bank,
                                rir_pool=rir_pool, seed=cfg.seed)

    encoder = None
    if args.init is not None:
        encoder = apc.load_apc(args.init).encoder
    train_cfg = override_section(cfg, "train", seed=cfg.seed,
                                 mtr_enabled=args.mtr).train
    model, losses = pvad.train(corpus, train_cfg, init_encoder=encoder,
                               threads=cfg.threads)
    out = Path(args.out)
    pvad.save_pvad(out, model)
    apc.write_loss_curve(out.with_suffix(out.suffix + ".loss.csv"), losses)
    write_run_json(out, cfg, {"command": "finetune"})
    print(f"fine-tuned on {len(corpus)} utterances: "
          f"final nll {losses[-1]:.4f} -> {out}")
    return 0


def cmd_enroll(args) -> int:
    cfg = _load_run_config(args)
    dvec = speaker.load_dvector(args.dvector)
    buffers = []
    for wav in args.audio:
        samples, sr = wavio.read_wav(wav)
        buffers.append(AudioBuffer(samples, sr))
    profile = speaker.enroll(dvec, buffers, args.speaker, cfg.feature)
    speaker.save_profile(args.out, profile)
    write_run_json(Path(args.out), cfg, {"command": "enroll"})
    print(f"enrolled {args.speaker}: {profile.n_windows} windows, "
          f"{profile.total_enrolled_seconds:.1f}s -> {args.out}")
    return 0


def _condition_sort_key(name: str):
    if name == "clean":
        return ("", 0.0)
    noise, _, snr = name.rpartition("_snr")
    try:
        return (noise, float(snr))
    except ValueError as exc:
        raise FormatError(f"bad condition directory name {name!r}") from exc


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    model = pvad.load_pvad(args.model)
    dvec = speaker.load_dvector(args.dvector)
    profiles = _load_profiles(args.profiles)
    tests = Path(args.tests)
    cond_dirs = [d for d in tests.iterdir()
                 if d.is_dir() and (d / "manifest.jsonl").exists()]
    if not cond_dirs:
        raise FormatError(f"no condition directories under {tests}")
    cond_dirs.sort(key=lambda d: _condition_sort_key(d.name))

    rows = []
    for cond_dir in cond_dirs:
        utts = data.read_multispeaker_manifest(cond_dir / "manifest.jsonl")
        streams = supervised_streams(utts, dvec, profiles, cfg.feature)
        pooled = [np.asarray(pvad.forward(model, f, s)) for f, s, _ in streams]
        labels = [y for _, _, y in streams]
        ap_ns, ap_tss, ap_ntss = metrics.pooled_class_aps(pooled, labels)
        if cond_dir.name == "clean":
            noise_type, snr = "clean", None
        else:
            noise_type, _, snr_txt = cond_dir.name.rpartition("_snr")
            snr = float(snr_txt)
        rows.append(metrics.ConditionRow(noise_type=noise_type, snr_db=snr,
                                         ap_ns=ap_ns, ap_tss=ap_tss,
                                         ap_ntss=ap_ntss))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(metrics.rows_to_csv(rows))
    write_run_json(out, cfg, {"command": "evaluate"})
    print(f"evaluated {len(rows)} conditions -> {out}")
    return 0


# ---------------------------------------------------------------------------
# report


def _parse_report_inputs(entries) -> dict:
    """LABEL=PATH pairs; bare paths label themselves by file stem.
    Repeated labels group as seeds of one model."""
    groups: dict = {}
    for entry in entries:
        label, sep, path = entry.partition("=")
        if not sep:
            label, path = Path(entry).stem, entry
        groups.setdefault(label, []).append(path)
    return groups


def _load_report_groups(groups: dict) -> dict:
    loaded = {}
    reference = None
    for label, paths in groups.items():
        runs = []
        for path in paths:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise FormatError(f"cannot read report {path}: {exc}") from exc
            rows = metrics.csv_to_rows(text)
            conditions = [(r.noise_type, r.snr_db) for r in rows]
            if reference is None:
                reference = conditions
            elif conditions != reference:
                raise FormatError(
                    f"{path}: condition set differs from the first CSV")
            runs.append(rows)
        loaded[label] = runs
    return loaded


def _cell(values: list) -> str:
    if len(values) == 1:
        return f"{values[0] * 100:.1f}"
    mean, hw = metrics.ci95(values)
    return f"{mean * 100:.1f} +- {hw * 100:.1f}"


def _write_report_svg(path, loaded: dict, eval_cfg) -> None:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    snrs = sorted({r.snr_db for rows in next(iter(loaded.values()))
                   for r in rows if r.snr_db is not None})
    regimes = [("seen noise", tuple(eval_cfg.seen_noise_types)),
               ("unseen noise", tuple(t for t in data.TEST_NOISE_TYPES
                                      if t not in eval_cfg.seen_noise_types))]
    fig, axes = plt.subplots(1, len(regimes), figsize=(9, 3.6), sharey=True)
    for ax, (title, types) in zip(np.atleast_1d(axes), regimes):
        for label, runs in loaded.items():
            means, hws = [], []
            for snr in snrs:
                per_seed = [np.mean([r.map for r in rows
                                     if r.snr_db == snr
                                     and r.noise_type in types])
                            for rows in runs]
                means.append(np.mean(per_seed))
                hws.append(metrics.ci95(per_seed)[1]
                           if len(per_seed) > 1 else 0.0)
            means, hws = np.asarray(means), np.asarray(hws)
            ax.errorbar(snrs, means, yerr=hws if hws.any() else None,
                        marker="o", capsize=3, label=label)
        ax.set_title(title)
        ax.set_xlabel("SNR (dB)")
        ax.grid(True, alpha=0.3)
    np.atleast_1d(axes)[0].set_ylabel("mAP")
    np.atleast_1d(axes)[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_report(args) -> int:
    cfg = _load_run_config(args)
    groups = _parse_report_inputs(args.csvs)
    loaded = _load_report_groups(groups)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    conditions = [(r.noise_type, r.snr_db)
                  for r in next(iter(loaded.values()))[0]]
    labels = list(loaded)
    width = max(len(l) for l in labels)
    lines = ["condition        " + "  ".join(f"{l:>{max(width, 12)}}"
                                             for l in labels)]
    for noise_type, snr in conditions:
        name = noise_type if snr is None else f"{noise_type} {snr:g} dB"
        cells = []
        for label in labels:
            vals = [next(r.map for r in rows
                         if (r.noise_type, r.snr_db) == (noise_type, snr))
                    for rows in loaded[label]]
            cells.append(f"{_cell(vals):>{max(width, 12)}}")
        lines.append(f"{name:16s} " + "  ".join(cells))

    seen = tuple(cfg.eval.seen_noise_types)
    summaries = [
        ("clean", dict(noise_types=None, max_snr_db=None, clean=True)),
        ("seen avg", dict(noise_types=seen, max_snr_db=None, clean=False)),
        (f"seen <= {cfg.eval.low_snr_max_db:g} dB",
         dict(noise_types=seen, max_snr_db=cfg.eval.low_snr_max_db,
              clean=False)),
        ("unseen avg",
         dict(noise_types=tuple(t for t in data.TEST_NOISE_TYPES
                                if t not in seen),
              max_snr_db=None, clean=False)),
    ]
    lines.append("")
    for title, sel in summaries:
        cells = []
        for label in labels:
            vals = []
            for rows in loaded[label]:
                if sel["clean"]:
                    vals.append(next(r.map for r in rows if r.snr_db is None))
                else:
                    vals.append(metrics.mean_map(
                        rows, noise_types=sel["noise_types"],
                        max_snr_db=sel["max_snr_db"]))
            cells.append(f"{_cell(vals):>{max(width, 12)}}")
        lines.append(f"{title:16s} " + "  ".join(cells))

    (out / "tables.txt").write_text("\n".join(lines) + "\n")
    _write_report_svg(out / "map_vs_snr.svg", loaded, cfg.eval)
    write_run_json(out, cfg, {"command": "report"})
    print(f"wrote tables.txt and map_vs_snr.svg to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvadkit",
        description="Personal VAD training and evaluation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: $PVAD_THREADS or 1)")
        if seed:
            p.add_argument("--seed", type=int, help="global seed")

    p = sub.add_parser("synth-data",
                       help="synthesize a labeled corpus, noise bank, embedder")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utts-per-speaker", type=int, default=20)
    p.add_argument("--train-mixes", type=int, default=64,
                   help="multi-speaker training utterances (0 skips)")
    p.add_argument("--noise-floor-db", type=float, default=None,
                   help="SNR of a white recording floor under each "
                        "utterance (omit for digitally clean silences)")
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("build-tests",
                       help="build the clean + 24-condition test matrix")
    p.add_argument("--corpus", required=True, help="corpus manifest")
    p.add_argument("--noise-bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mixes", type=int, default=32)
    common(p)
    p.set_defaults(func=cmd_build_tests)

    p = sub.add_parser("pretrain", help="self-supervised encoder pretraining")
    p.add_argument("--corpus", required=True, help="corpus manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--denoising", action="store_true")
    p.add_argument("--noise-bank")
    p.add_argument("--epochs", type=int)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised three-class training")
    p.add_argument("--corpus", required=True, help="multi-speaker manifest")
    p.add_argument("--dvector", required=True)
    p.add_argument("--profiles", required=True,
                   help="directory of enrollment profiles")
    p.add_argument("--init", help="pretrained encoder checkpoint")
    p.add_argument("--mtr", action="store_true")
    p.add_argument("--noise-bank")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("enroll", help="build a target-speaker profile")
    p.add_argument("--dvector", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("audio", nargs="+", help="enrollment WAV files")
    common(p)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("evaluate", help="score a model over a test matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--dvector", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--tests", required=True, help="build-tests output dir")
    p.add_argument("--out", required=True, help="report CSV path")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tables and plots from evaluation CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("csvs", nargs="+",
                   help="evaluation CSVs, optionally LABEL=PATH")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"pvadkit: error: config: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"pvadkit: error: format: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"pvadkit: error: divergence: {exc}", file=sys.stderr)
        return 4
    except PvadkitError as exc:
        print(f"pvadkit: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"pvadkit: error: io: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
