"""End-to-end glue: stream caches, experiment variants, evaluation sweeps.

Everything downstream of raw audio works on (features, similarity,
labels) triples, so the expensive parts (feature extraction, embedder
forward passes over the test matrix) are computed once per workspace and
shared by every model variant. All draws flow through named substreams
of one seed: rebuilding a workspace or rerunning a variant with the same
seed gives byte-identical artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigError, apc, data, metrics, pvad, speaker
from .features import AudioBuffer, FeatureConfig, FeatureSequence, log_mel
from .util import substream

# Affine feature normalization for every model in the pipeline. Raw log
# mel values live around [-23, 6] on this corpus (mean ~ -9.9); unit-init
# LSTM gates saturate there, so features are mapped to roughly zero mean,
# unit-ish scale. Enrollment, similarity, pretraining and fine-tuning
# must all use the same config or the encoder sees mismatched inputs.
PIPELINE_FEATURES = FeatureConfig(norm_shift=-10.0, norm_scale=8.0)

VARIANTS = ("baseline", "apc", "baseline-mtr", "apc-mtr", "dnapc-mtr")

# test noise types that also appear in the default training pool
SEEN_NOISE_TYPES = tuple(t for t in data.TEST_NOISE_TYPES
                         if t in data.TRAIN_NOISE_TYPES)


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale replication sizes: 20 speakers, ~30 min of audio."""
    n_speakers: int = 20
    utts_per_speaker: int = 20
    n_enroll_utts: int = 2      # per speaker, held out for enrollment
    n_test_utts: int = 4        # per speaker, held out for test mixes
    n_train_mixes: int = 192
    n_test_mixes: int = 32
    crop_frames: int = 400      # truncated-BPTT crop for fine-tuning
    ft_epochs: int = 20
    ft_lr0: float = 3e-3        # desk-scale rate; see TrainConfig for the
                                # large-corpus default
    apc_epochs: int = 20
    noise_floor_db: float | None = 30.0  # recording floor under the synth
    seeds: tuple = (101, 102, 103, 104, 105)

    def __post_init__(self):
        if self.n_enroll_utts + self.n_test_utts >= self.utts_per_speaker:
            raise ConfigError("no utterances left for training after holdouts")
        if self.crop_frames < 1:
            raise ConfigError("crop_frames must be positive")


@dataclass
class Workspace:
    """Shared, variant-independent state for one experiment."""
    cfg: ExperimentConfig
    seed: int
    feature_cfg: FeatureConfig
    noise_bank: dict
    rir_pool: list
    dvec: speaker.DvectorModel
    profiles: dict
    train_records: list              # single-speaker UtteranceRecord pool
    train_mixes: list                # MultiSpeakerUtterance supervised pool
    clean_streams: list              # (frames, sims, labels) per train mix
    eval_streams: dict               # condition name -> (feats, sims, labels)
    eval_order: list                 # (name, noise_type, snr_db), clean first
    encoders: dict = field(default_factory=dict)  # lazy pretrained LstmStacks
    stream_cache: dict = field(default_factory=dict)  # (seed, mtr) -> corpus


def _split_records(records: list, cfg: ExperimentConfig) -> tuple:
    """Per speaker: first n_enroll for enrollment, next n_test for test
    mixes, the rest for training and pretraining."""
    by_speaker = {}
    for rec in records:
        by_speaker.setdefault(rec.speaker_id, []).append(rec)
    enroll, test, train = {}, [], []
    for spk in sorted(by_speaker):
        utts = sorted(by_speaker[spk], key=lambda r: r.utt_id)
        enroll[spk] = utts[:cfg.n_enroll_utts]
        test.extend(utts[cfg.n_enroll_utts:cfg.n_enroll_utts + cfg.n_test_utts])
        train.extend(utts[cfg.n_enroll_utts + cfg.n_test_utts:])
    return enroll, test, train


def _stream_triples(dvec, profiles, utts, feature_cfg) -> list:
    """(frames, sims, labels) per utterance, similarity batched by target."""
    feats = [log_mel(AudioBuffer(u.samples, u.sample_rate), feature_cfg,
                     source_id=u.utt_id) for u in utts]
    sims: list = [None] * len(utts)
    by_target: dict = {}
    for i, u in enumerate(utts):
        by_target.setdefault(u.target_speaker_id, []).append(i)
    for target, idx in sorted(by_target.items()):
        if target not in profiles:
            raise ConfigError(f"no enrollment profile for target {target!r}")
        scored = speaker.framewise_similarity_batch(
            dvec, [feats[i] for i in idx], profiles[target])
        for i, s in zip(idx, scored):
            sims[i] = s
    return [(feats[i].frames, sims[i], utts[i].labels.astype(np.int64))
            for i in range(len(utts))]


def supervised_streams(utts: list, dvec, profiles: dict, feature_cfg,
                       mtr_cfg=None, noise_bank=None, rir_pool=None,
                       seed: int = 0) -> list:
    """Fine-tuning / evaluation streams for multi-speaker utterances.

    With an MtrConfig each utterance is corrupted once (per-utterance
    substream of the seed) before feature extraction; labels never
    change.
    """
    if mtr_cfg is not None:
        utts = [data.mtr_augment(u, mtr_cfg, substream(seed, "mtr", i),
                                 noise_bank, rir_pool)
                for i, u in enumerate(utts)]
    return _stream_triples(dvec, profiles, utts, feature_cfg)


def build_workspace(cfg: ExperimentConfig = ExperimentConfig(),
                    seed: int = 0,
                    feature_cfg: FeatureConfig = PIPELINE_FEATURES) -> Workspace:
    records = data.synth_corpus(cfg.n_speakers, cfg.utts_per_speaker, seed,
                                noise_floor_db=cfg.noise_floor_db)
    noise_bank = data.make_noise_bank(seed)
    rir_pool = data.default_rir_pool(seed)
    enroll_sets, test_records, train_records = _split_records(records, cfg)

    embed_triples = [(log_mel(AudioBuffer(r.samples, r.sample_rate),
                              feature_cfg).frames,
                      data.record_speech_frames(r, feature_cfg),
                      r.speaker_id) for r in train_records]
    dvec, _ = speaker.train_speaker_embedder(
        embed_triples, speaker.compact_config(),
        speaker.EmbedderTrainConfig(), seed)

    profiles = {}
    for spk, utts in sorted(enroll_sets.items()):
        buffers = [AudioBuffer(r.samples, r.sample_rate) for r in utts]
        profiles[spk] = speaker.enroll(dvec, buffers, spk, feature_cfg)

    mix_rng = substream(seed, "train-mix")
    train_mixes = [data.make_multispeaker(train_records, mix_rng,
                                          utt_id=f"train{i:04d}",
                                          cfg=feature_cfg)
                   for i in range(cfg.n_train_mixes)]
    test_rng = substream(seed, "test-mix-draw")
    test_mixes = [data.make_multispeaker(test_records, test_rng,
                                         utt_id=f"test{i:04d}",
                                         cfg=feature_cfg)
                  for i in range(cfg.n_test_mixes)]

    clean_streams = _stream_triples(dvec, profiles, train_mixes, feature_cfg)

    conditions = data.build_test_matrix(test_mixes, noise_bank, seed)
    eval_streams, eval_order = {}, []
    for cond in conditions:
        eval_streams[cond.name] = _stream_triples(
            dvec, profiles, cond.utterances, feature_cfg)
        eval_order.append((cond.name, cond.noise_type, cond.snr_db))

    return Workspace(cfg=cfg, seed=seed, feature_cfg=feature_cfg,
                     noise_bank=noise_bank, rir_pool=rir_pool, dvec=dvec,
                     profiles=profiles, train_records=train_records,
                     train_mixes=train_mixes, clean_streams=clean_streams,
                     eval_streams=eval_streams, eval_order=eval_order)


def pretrained_encoder(ws: Workspace, denoising: bool):
    """Pretrain once per flavor with the workspace seed; later variants
    and fine-tuning seeds reuse the cached encoder."""
    key = "dnapc" if denoising else "apc"
    if key not in ws.encoders:
        cfg = apc.ApcConfig(epochs=ws.cfg.apc_epochs, denoising=denoising)
        corpus = apc.build_pretrain_corpus(
            ws.train_records, feature_cfg=ws.feature_cfg,
            noise_bank=ws.noise_bank if denoising else None,
            seed=ws.seed)
        model, _ = apc.pretrain(corpus, cfg, ws.seed)
        ws.encoders[key] = model.encoder
    return ws.encoders[key]


def _crop(triple: tuple, n_frames: int, rng) -> tuple:
    frames, sims, labels = triple
    t = frames.shape[0]
    if t <= n_frames:
        return triple
    start = int(rng.integers(0, t - n_frames + 1))
    stop = start + n_frames
    return frames[start:stop], sims[start:stop], labels[start:stop]


def finetune_streams(ws: Workspace, seed: int, mtr: bool) -> list:
    """Supervised corpus for one run: per-run MTR draw, then a per-run
    crop so long concatenations train as fixed-length segments.

    Cached per (seed, mtr): variants compared at one seed train on the
    same corpus draw, which pairs the comparison and saves rebuilds.
    """
    key = (seed, mtr)
    if key in ws.stream_cache:
        return ws.stream_cache[key]
    if mtr:
        triples = supervised_streams(ws.train_mixes, ws.dvec, ws.profiles,
                                     ws.feature_cfg, mtr_cfg=data.MtrConfig(),
                                     noise_bank=ws.noise_bank,
                                     rir_pool=ws.rir_pool, seed=seed)
    else:
        triples = ws.clean_streams
    crop_rng = substream(seed, "crop")
    corpus = [_crop(t, ws.cfg.crop_frames, crop_rng) for t in triples]
    ws.stream_cache[key] = corpus
    return corpus


def _batch_posteriors(model, streams: list) -> tuple:
    """Pooled (posteriors, labels) over one condition's utterances."""
    from . import nncore
    seqs = [np.asarray(f, dtype=np.float32) for f, _, _ in streams]
    lengths = [s.shape[0] for s in seqs]
    padded, _ = nncore.pad_sequences(seqs)
    sims = np.zeros(padded.shape[:2], dtype=np.float32)
    for i, (_, s, _) in enumerate(streams):
        sims[i, :lengths[i]] = s
    post = pvad.forward(model, padded, sims)
    pooled = np.concatenate([post[i, :n] for i, n in enumerate(lengths)])
    labels = np.concatenate([y for _, _, y in streams])
    return pooled, labels


def evaluate_streams(model, ws: Workspace) -> list:
    """One ConditionRow per eval condition, clean first."""
    rows = []
    for name, noise_type, snr_db in ws.eval_order:
        pooled, labels = _batch_posteriors(model, ws.eval_streams[name])
        ap_ns, ap_tss, ap_ntss = metrics.pooled_class_aps([pooled], [labels])
        rows.append(metrics.ConditionRow(
            noise_type=noise_type if noise_type is not None else "clean",
            snr_db=snr_db, ap_ns=ap_ns, ap_tss=ap_tss, ap_ntss=ap_ntss))
    return rows


def run_variant(ws: Workspace, variant: str, seed: int,
                out_dir=None, threads: int = 1) -> tuple:
    """Train one variant at one seed and evaluate it over the matrix.

    With out_dir the checkpoint, the evaluation CSV and the run config
    are written with deterministic bytes.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, pick from {VARIANTS}")
    mtr = variant.endswith("-mtr")
    encoder = None
    if variant.startswith("apc"):
        encoder = pretrained_encoder(ws, denoising=False)
    elif variant.startswith("dnapc"):
        encoder = pretrained_encoder(ws, denoising=True)

    corpus = finetune_streams(ws, seed, mtr)
    train_cfg = pvad.TrainConfig(epochs=ws.cfg.ft_epochs,
                                 lr0=ws.cfg.ft_lr0, seed=seed,
                                 mtr_enabled=mtr)
    model, losses = pvad.train(corpus, train_cfg, init_encoder=encoder,
                               threads=threads)
    rows = evaluate_streams(model, ws)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pvad.save_pvad(out / "pvad.pvtc", model)
        (out / "eval.csv").write_text(metrics.rows_to_csv(rows))
        run_info = {
            "variant": variant, "seed": seed,
            "workspace_seed": ws.seed,
            "train": {"epochs": train_cfg.epochs,
                      "batch_size": train_cfg.batch_size,
                      "lr0": train_cfg.lr0, "min_lr": train_cfg.min_lr,
                      "clip_norm": train_cfg.clip_norm,
                      "mtr_enabled": train_cfg.mtr_enabled},
            "final_loss": round(losses[-1], 6),
        }
        (out / "run.json").write_text(
            json.dumps(run_info, sort_keys=True, indent=1) + "\n")
    return model, rows


def summarize(rows: list) -> dict:
    """The three headline numbers for one run."""
    clean = next(r.map for r in rows if r.snr_db is None)
    return {
        "clean": clean,
        "noisy": metrics.mean_map(rows),
        "seen_low_snr": metrics.mean_map(rows, noise_types=SEEN_NOISE_TYPES,
                                         max_snr_db=5.0),
    }


def run_experiment(ws: Workspace, variants=VARIANTS, seeds=None,
                   threads: int = 1) -> dict:
    """All (variant, seed) runs; returns variant -> list of summaries."""
    seeds = ws.cfg.seeds if seeds is None else seeds
    results = {}
    for variant in variants:
        results[variant] = [summarize(run_variant(ws, variant, s,
                                                  threads=threads)[1])
                            for s in seeds]
    return results


def mean_summary(summaries: list) -> dict:
    return {k: float(np.mean([s[k] for s in summaries]))
            for k in summaries[0]}
