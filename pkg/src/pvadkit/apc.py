"""Autoregressive predictive-coding pretraining for the VAD encoder.

The encoder (2-layer LSTM, hidden 64) plus a width-1 convolutional
projection head is trained to predict the log-mel feature vector a
fixed number of frames ahead under an l1 loss. The denoising variant
feeds features of a noise-corrupted waveform while the prediction
targets stay clean; corruption reuses the MTR mixer with additive
noise always on and reverb off unless enabled. After pretraining the
head is dropped and the LSTM weights are copied, bit for bit, into a
personalized VAD model for fine-tuning.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ConfigError, DivergenceError, FormatError
from . import container, nncore
from .data import MtrConfig, augment_waveform
from .features import AudioBuffer, FeatureConfig, FeatureSequence, log_mel
from .util import substream


@dataclass(frozen=True)
class ApcConfig:
    horizon: int = 3
    epochs: int = 10
    batch_size: int = 32
    lr0: float = 0.01
    min_lr: float = 0.0
    clip_norm: float = 5.0    # 0 disables clipping
    denoising: bool = False
    n_mels: int = 40
    hidden_size: int = 64
    num_layers: int = 2

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr0 <= 0 or not 0.0 <= self.min_lr <= self.lr0:
            raise ConfigError(f"bad learning rates lr0={self.lr0}, min_lr={self.min_lr}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if min(self.n_mels, self.hidden_size, self.num_layers) < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass
class ApcModel:
    encoder: nncore.LstmStack
    head: nncore.Conv1d
    cfg: ApcConfig

    def named_params(self, prefix: str = "apc.") -> dict:
        out = self.encoder.named_params(prefix + "lstm.")
        out.update(self.head.named_params(prefix + "head."))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())


def init_apc(cfg: ApcConfig, seed: int) -> ApcModel:
    rng = substream(seed, "apc-init")
    encoder = nncore.init_lstm_stack(rng, cfg.n_mels, cfg.hidden_size,
                                     cfg.num_layers)
    head = nncore.init_conv1d(rng, cfg.n_mels, cfg.hidden_size, kernel=1)
    return ApcModel(encoder=encoder, head=head, cfg=cfg)


def apc_forward(model: ApcModel, inputs: np.ndarray):
    """Predicted future features for (B, T, D) or (T, D) inputs.

    Returns (predictions, cache); the cache feeds the backward pass.
    """
    h, _, lstm_cache = nncore.lstm_forward(model.encoder, inputs)
    pred, conv_cache = nncore.conv1d_forward(model.head, h)
    return pred, (lstm_cache, conv_cache)


# ---------------------------------------------------------------------------
# pairing and batching


@dataclass
class ApcBatch:
    inputs: np.ndarray   # (B, T, D), noisy when denoising
    targets: np.ndarray  # (B, T, D), always clean
    mask: np.ndarray     # (B, T) validity


def _frames(seq) -> np.ndarray:
    return seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq)


def make_apc_pairs(clean, noisy, horizon: int):
    """Align a sequence with its own future: inputs[t] pairs with
    clean[t + horizon]. Inputs come from ``noisy`` when given."""
    clean = _frames(clean)
    t = clean.shape[0]
    if t <= horizon:
        raise ConfigError(
            f"sequence of {t} frames too short for horizon {horizon}")
    source = clean
    if noisy is not None:
        source = _frames(noisy)
        if source.shape != clean.shape:
            raise ConfigError(
                f"noisy view shape {source.shape} != clean {clean.shape}")
    return source[:t - horizon], clean[horizon:]


def collate_pairs(pairs: list) -> ApcBatch:
    inputs, mask = nncore.pad_sequences([p[0] for p in pairs])
    targets, _ = nncore.pad_sequences([p[1] for p in pairs])
    return ApcBatch(inputs=inputs, targets=targets, mask=mask)


def _corpus_views(corpus, denoising: bool) -> list:
    views = []
    for entry in corpus:
        if isinstance(entry, tuple):
            clean, noisy = entry
        else:
            clean, noisy = entry, None
        views.append((clean, noisy if denoising else None))
    return views


def build_pretrain_corpus(records: list, feature_cfg: FeatureConfig = FeatureConfig(),
                          noise_bank: dict | None = None,
                          mtr_cfg: MtrConfig | None = None,
                          rir_pool: list | None = None, seed: int = 0) -> list:
    """Feature views of a waveform corpus.

    Without a noise bank the result is a list of clean feature
    sequences. With one, each entry is a (clean, noisy) pair whose
    noisy view is corrupted in the waveform domain before feature
    extraction, by default with additive noise on every utterance and
    no reverb.
    """
    if noise_bank is not None and mtr_cfg is None:
        mtr_cfg = MtrConfig(p_noise=1.0, p_rir=0.0)
    out = []
    for rec in records:
        audio = AudioBuffer(rec.samples, rec.sample_rate)
        clean = log_mel(audio, feature_cfg, source_id=rec.utt_id)
        if noise_bank is None:
            out.append(clean)
            continue
        rng = substream(seed, "dn-apc", rec.speaker_id, rec.utt_id)
        corrupted = augment_waveform(rec.samples, mtr_cfg, rng, noise_bank,
                                     rir_pool)
        noisy = log_mel(AudioBuffer(corrupted, rec.sample_rate), feature_cfg,
                        source_id=rec.utt_id + ":noisy")
        out.append((clean, noisy))
    return out


# ---------------------------------------------------------------------------
# training


def _batch_grads(model: ApcModel, x, y, mask):
    pred, (lstm_cache, conv_cache) = apc_forward(model, x)
    loss, dpred = nncore.l1_loss(pred, y, mask)
    grad_head, dh = nncore.conv1d_backward(model.head, conv_cache, dpred)
    grad_stack, _ = nncore.lstm_backward(model.encoder, lstm_cache, dh)
    grads = grad_stack.named_params("apc.lstm.")
    grads.update(grad_head.named_params("apc.head."))
    return loss, grads


def _sharded_batch_grads(model: ApcModel, batch: ApcBatch, threads: int):
    b = batch.inputs.shape[0]
    n_total = int(batch.mask.sum())
    if threads <= 1 or b <= 1:
        loss, grads = _batch_grads(model, batch.inputs, batch.targets,
                                   batch.mask)
        return loss, n_total, grads
    slices = nncore.shard_slices(b, threads)

    def work(sl):
        loss, grads = _batch_grads(model, batch.inputs[sl], batch.targets[sl],
                                   batch.mask[sl])
        return loss, int(batch.mask[sl].sum()), grads

    parts = nncore.run_sharded(work, slices, threads)
    # fixed-order weighted reduction keeps a given thread count deterministic
    total = {}
    loss_sum = 0.0
    for loss, n, grads in parts:
        loss_sum += loss * n
        w = n / n_total
        for name, g in grads.items():
            if name in total:
                total[name] += g * np.asarray(w, dtype=g.dtype)
            else:
                total[name] = g * np.asarray(w, dtype=g.dtype)
    return loss_sum / n_total, n_total, total


def pretrain(corpus, cfg: ApcConfig, seed: int, threads: int = 1):
    """Train an APC model from scratch on the corpus (feature sequences,
    or (clean, noisy) pairs for the denoising variant).

    Returns (model, per-epoch mean l1 losses).
    """
    views = _corpus_views(corpus, cfg.denoising)
    if not views:
        raise ConfigError("empty pretraining corpus")
    pairs = [make_apc_pairs(clean, noisy, cfg.horizon)
             for clean, noisy in views]

    model = init_apc(cfg, seed)
    params = model.named_params()
    adam = nncore.adam_init(params)
    batches = nncore.bucket_batches([p[0].shape[0] for p in pairs],
                                    cfg.batch_size)
    sched = nncore.LrSchedule(cfg.lr0, cfg.epochs * len(batches), cfg.min_lr)
    shuffle = substream(seed, "apc-shuffle")

    step = 0
    losses = []
    for epoch in range(cfg.epochs):
        abs_sum = 0.0
        count = 0
        for bi in shuffle.permutation(len(batches)):
            batch = collate_pairs([pairs[i] for i in batches[bi]])
            loss, n, grads = _sharded_batch_grads(model, batch, threads)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"apc pretraining diverged at epoch {epoch} "
                    f"batch {int(bi)}: loss={loss}")
            nncore.clip_global_norm(grads, cfg.clip_norm)
            nncore.adam_step(params, grads, adam, nncore.cosine_lr(sched, step))
            step += 1
            dim = batch.targets.shape[-1]
            abs_sum += loss * n * dim
            count += n * dim
        losses.append(abs_sum / count)
    return model, losses


def evaluate_l1(model: ApcModel, corpus) -> float:
    """Corpus-mean l1 of the model's predictions; no updates."""
    views = _corpus_views(corpus, model.cfg.denoising)
    if not views:
        raise ConfigError("empty corpus")
    pairs = [make_apc_pairs(clean, noisy, model.cfg.horizon)
             for clean, noisy in views]
    abs_sum = 0.0
    count = 0
    for idxs in nncore.bucket_batches([p[0].shape[0] for p in pairs],
                                      model.cfg.batch_size):
        batch = collate_pairs([pairs[i] for i in idxs])
        pred, _ = apc_forward(model, batch.inputs)
        loss, _ = nncore.l1_loss(pred, batch.targets, batch.mask)
        n = int(batch.mask.sum()) * batch.targets.shape[-1]
        abs_sum += loss * n
        count += n
    return abs_sum / count


def transfer_encoder(source: nncore.LstmStack, target: nncore.LstmStack) -> None:
    """Copy encoder weights bit for bit into the target stack."""
    if (source.input_size, source.hidden_size, len(source.layers)) != \
            (target.input_size, target.hidden_size, len(target.layers)):
        raise ConfigError(
            f"encoder mismatch: source {source.input_size}x{source.hidden_size}"
            f"x{len(source.layers)}, target {target.input_size}"
            f"x{target.hidden_size}x{len(target.layers)}")
    for src, dst in zip(source.layers, target.layers):
        dst.wx[...] = src.wx
        dst.wh[...] = src.wh
        dst.b[...] = src.b


# ---------------------------------------------------------------------------
# artifacts


def save_apc(path, model: ApcModel) -> None:
    attrs = {
        "kind": "apc",
        "horizon": model.cfg.horizon,
        "n_mels": model.cfg.n_mels,
        "hidden_size": model.cfg.hidden_size,
        "num_layers": model.cfg.num_layers,
        "denoising": model.cfg.denoising,
    }
    container.save_tensors(path, model.named_params(), attrs)


def load_apc(path) -> ApcModel:
    tensors, attrs = container.load_tensors(path)
    if attrs.get("kind") != "apc":
        raise FormatError(f"{path}: not an APC checkpoint")
    cfg = ApcConfig(
        horizon=int(attrs["horizon"]),
        n_mels=int(attrs["n_mels"]),
        hidden_size=int(attrs["hidden_size"]),
        num_layers=int(attrs["num_layers"]),
        denoising=bool(attrs["denoising"]),
    )
    model = init_apc(cfg, seed=0)
    for name, param in model.named_params().items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != param.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape "
                              f"{tensors[name].shape}, expected {param.shape}")
        param[...] = tensors[name]
    return model


def write_loss_curve(path, losses: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_l1"])
        for epoch, value in enumerate(losses):
            writer.writerow([epoch, f"{value:.6f}"])
