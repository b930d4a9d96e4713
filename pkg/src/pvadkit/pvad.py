"""Personalized voice activity detection.

A 2-layer LSTM encoder plus a linear head yields framewise 2-class
speech/non-speech probabilities. The target-speaker similarity score
s_t is rescaled by learnable scalars to s' = clamp(s*alpha + beta) and
splits the speech probability mass into target and non-target shares:

    z_ns stays, z_tss = s' * z_s, z_ntss = (1 - s') * z_s

Training minimizes the NLL of the combined three-class posterior at
the true label; alpha and beta receive gradients through s' wherever
the clamp is inactive. The speaker embedder is never touched here:
similarity streams are computed upstream and enter as plain inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ConfigError, DivergenceError, FormatError
from . import container, nncore
from .features import AudioBuffer, FeatureConfig, FeatureSequence, log_mel
from .metrics import N_CLASSES
from .speaker import framewise_similarity
from .util import substream

SPRIME_EPS = 1e-6

N_MELS = 40
HIDDEN_SIZE = 64
NUM_LAYERS = 2


@dataclass
class PvadModel:
    encoder: nncore.LstmStack
    vad_head: nncore.Linear   # hidden -> (z_ns, z_s) logits
    alpha: np.ndarray         # shape (1,)
    beta: np.ndarray          # shape (1,)

    def named_params(self, prefix: str = "pvad.") -> dict:
        out = self.encoder.named_params(prefix + "lstm.")
        out.update(self.vad_head.named_params(prefix + "head."))
        out[prefix + "alpha"] = self.alpha
        out[prefix + "beta"] = self.beta
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())


def init_pvad(seed: int, n_mels: int = N_MELS, hidden_size: int = HIDDEN_SIZE,
              num_layers: int = NUM_LAYERS) -> PvadModel:
    """Fresh model; alpha=1, beta=0 so scaling starts as the identity."""
    rng = substream(seed, "pvad-init")
    encoder = nncore.init_lstm_stack(rng, n_mels, hidden_size, num_layers)
    head = nncore.init_linear(rng, 2, hidden_size)
    return PvadModel(encoder=encoder, vad_head=head,
                     alpha=np.ones(1, dtype=np.float32),
                     beta=np.zeros(1, dtype=np.float32))


# ---------------------------------------------------------------------------
# the combination rule


def scale_similarity(s, alpha, beta):
    """s' = clamp(s*alpha + beta, eps, 1-eps)."""
    raw = np.asarray(s) * alpha + beta
    return np.clip(raw, SPRIME_EPS, 1.0 - SPRIME_EPS)


def combine(z_ns, z_s, s_prime) -> np.ndarray:
    """Three-class posterior (ns, tss, ntss) on the trailing axis."""
    parts = np.broadcast_arrays(np.asarray(z_ns),
                                s_prime * z_s,
                                (1.0 - s_prime) * z_s)
    return np.stack(parts, axis=-1)


def _vad_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: PvadModel, feats, sims):
    """Causal framewise posterior over {ns, tss, ntss}.

    feats is (T, D) or (B, T, D); sims matches without the feature axis.
    """
    x = feats.frames if isinstance(feats, FeatureSequence) else np.asarray(feats)
    sims = np.asarray(sims)
    if sims.shape != x.shape[:-1]:
        raise ConfigError(
            f"similarity shape {sims.shape} does not match frames {x.shape[:-1]}")
    h, _, _ = nncore.lstm_forward(model.encoder, x)
    logits, _ = nncore.linear_forward(model.vad_head, h)
    probs = _vad_probs(logits)
    s_prime = scale_similarity(sims, model.alpha[0], model.beta[0])
    return combine(probs[..., 0], probs[..., 1], s_prime)


# ---------------------------------------------------------------------------
# loss


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ConfigError(f"labels must lie in [0, {N_CLASSES}), got "
                          f"[{labels.min()}, {labels.max()}]")
    return labels


def pvad_loss(model: PvadModel, feats, sims, labels, mask=None):
    """Mean NLL of the combined posterior plus exact parameter gradients.

    Returns (loss, grads) with grads keyed like model.named_params().
    alpha/beta gradients are zero on frames where s*alpha + beta leaves
    the clamp interval.
    """
    x = feats.frames if isinstance(feats, FeatureSequence) else np.asarray(feats)
    squeezed = x.ndim == 2
    if squeezed:
        x = x[None]
    sims = np.asarray(sims).reshape(x.shape[:-1])
    labels = _check_labels(labels).reshape(x.shape[:-1])
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ConfigError("all frames are masked")

    h, _, lstm_cache = nncore.lstm_forward(model.encoder, x)
    logits, _ = nncore.linear_forward(model.vad_head, h)

    # log-softmax of the 2-class VAD output; class s feeds both tss and ntss
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    log_probs = shifted - lse[..., None]
    vad_class = (labels != 0).astype(np.int64)
    ll = np.take_along_axis(log_probs, vad_class[..., None], axis=-1)[..., 0]

    raw = sims * model.alpha[0] + model.beta[0]
    s_prime = np.clip(raw, SPRIME_EPS, 1.0 - SPRIME_EPS)
    interior = (raw > SPRIME_EPS) & (raw < 1.0 - SPRIME_EPS)
    tss = labels == 1
    ntss = labels == 2
    ll = ll + np.where(tss, np.log(s_prime), 0.0) \
            + np.where(ntss, np.log1p(-s_prime), 0.0)
    loss = -float(np.sum(ll * mask, dtype=np.float64)) / n

    probs = np.exp(log_probs)
    dlogits = probs.copy()
    np.put_along_axis(
        dlogits, vad_class[..., None],
        np.take_along_axis(dlogits, vad_class[..., None], axis=-1) - 1.0,
        axis=-1)
    dlogits *= mask[..., None] / n
    dlogits = dlogits.astype(logits.dtype)

    # dL/ds' is -1/s' on tss frames and 1/(1-s') on ntss frames
    dsp = (np.where(tss, -1.0 / s_prime, 0.0)
           + np.where(ntss, 1.0 / (1.0 - s_prime), 0.0))
    dsp = dsp * interior * mask / n
    dalpha = np.array([np.sum(dsp * sims, dtype=np.float64)],
                      dtype=model.alpha.dtype)
    dbeta = np.array([np.sum(dsp, dtype=np.float64)], dtype=model.beta.dtype)

    grad_head, dh = nncore.linear_backward(model.vad_head, h, dlogits)
    grad_stack, _ = nncore.lstm_backward(model.encoder, lstm_cache, dh)
    grads = grad_stack.named_params("pvad.lstm.")
    grads.update(grad_head.named_params("pvad.head."))
    grads["pvad.alpha"] = dalpha
    grads["pvad.beta"] = dbeta
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr0: float = 5e-5
    min_lr: float = 0.0
    clip_norm: float = 5.0    # 0 disables clipping
    seed: int = 0
    mtr_enabled: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr0 <= 0 or not 0.0 <= self.min_lr <= self.lr0:
            raise ConfigError(f"bad learning rates lr0={self.lr0}, min_lr={self.min_lr}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")


def _collate(examples: list):
    feats, mask = nncore.pad_sequences([e[0] for e in examples])
    t_max = feats.shape[1]
    sims = np.zeros((len(examples), t_max), dtype=np.float32)
    labels = np.zeros((len(examples), t_max), dtype=np.int64)
    for i, (_, s, y) in enumerate(examples):
        sims[i, :len(s)] = s
        labels[i, :len(y)] = y
    return feats, sims, labels, mask


def _validated_examples(corpus) -> list:
    if not corpus:
        raise ConfigError("empty training corpus")
    out = []
    for feats, sims, labels in corpus:
        x = feats.frames if isinstance(feats, FeatureSequence) else np.asarray(feats)
        sims = np.asarray(sims, dtype=np.float32)
        labels = _check_labels(labels).astype(np.int64)
        if not (len(x) == len(sims) == len(labels)):
            raise ConfigError(
                f"example lengths disagree: {len(x)} frames, "
                f"{len(sims)} scores, {len(labels)} labels")
        if len(x) == 0:
            raise ConfigError("empty example in training corpus")
        out.append((x, sims, labels))
    return out


def _sharded_loss_grads(model: PvadModel, feats, sims, labels, mask,
                        threads: int):
    n_total = int(mask.sum())
    b = feats.shape[0]
    if threads <= 1 or b <= 1:
        loss, grads = pvad_loss(model, feats, sims, labels, mask)
        return loss, grads
    slices = nncore.shard_slices(b, threads)

    def work(sl):
        return (pvad_loss(model, feats[sl], sims[sl], labels[sl], mask[sl]),
                int(mask[sl].sum()))

    parts = nncore.run_sharded(work, slices, threads)
    total = {}
    loss_sum = 0.0
    for (loss, grads), n in parts:
        loss_sum += loss * n
        w = n / n_total
        for name, g in grads.items():
            if name in total:
                total[name] += g * np.asarray(w, dtype=g.dtype)
            else:
                total[name] = g * np.asarray(w, dtype=g.dtype)
    return loss_sum / n_total, total


def train(corpus, cfg: TrainConfig, init_encoder: nncore.LstmStack | None = None,
          threads: int = 1):
    """Train a PVAD model on (features, similarity, labels) examples.

    With init_encoder the LSTM starts from pretrained weights while the
    head, alpha and beta still come from cfg.seed. Returns
    (model, per-epoch mean NLL).
    """
    examples = _validated_examples(corpus)
    model = init_pvad(cfg.seed, n_mels=examples[0][0].shape[1])
    if init_encoder is not None:
        from .apc import transfer_encoder
        transfer_encoder(init_encoder, model.encoder)

    params = model.named_params()
    adam = nncore.adam_init(params)
    batches = nncore.bucket_batches([len(e[0]) for e in examples],
                                    cfg.batch_size)
    sched = nncore.LrSchedule(cfg.lr0, cfg.epochs * len(batches), cfg.min_lr)
    shuffle = substream(cfg.seed, "pvad-shuffle")

    step = 0
    losses = []
    for epoch in range(cfg.epochs):
        nll_sum = 0.0
        count = 0
        for bi in shuffle.permutation(len(batches)):
            feats, sims, labels, mask = _collate(
                [examples[i] for i in batches[bi]])
            loss, grads = _sharded_loss_grads(model, feats, sims, labels,
                                              mask, threads)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"pvad training diverged at epoch {epoch} "
                    f"batch {int(bi)}: loss={loss}")
            nncore.clip_global_norm(grads, cfg.clip_norm)
            nncore.adam_step(params, grads, adam, nncore.cosine_lr(sched, step))
            step += 1
            n = int(mask.sum())
            nll_sum += loss * n
            count += n
        losses.append(nll_sum / count)
    return model, losses


# ---------------------------------------------------------------------------
# inference


def predict(model: PvadModel, audio: AudioBuffer, profile, dvector,
            feature_cfg: FeatureConfig = FeatureConfig()):
    """Posteriors and framewise argmax classes for one utterance."""
    feats = log_mel(audio, feature_cfg)
    if len(feats) == 0:
        raise ConfigError("audio shorter than one analysis frame")
    sims = framewise_similarity(dvector, feats, profile)
    posteriors = forward(model, feats, sims)
    return posteriors, np.argmax(posteriors, axis=-1)


# ---------------------------------------------------------------------------
# artifacts


def save_pvad(path, model: PvadModel) -> None:
    attrs = {
        "kind": "pvad",
        "n_mels": model.encoder.input_size,
        "hidden_size": model.encoder.hidden_size,
        "num_layers": len(model.encoder.layers),
    }
    container.save_tensors(path, model.named_params(), attrs)


def load_pvad(path) -> PvadModel:
    tensors, attrs = container.load_tensors(path)
    if attrs.get("kind") != "pvad":
        raise FormatError(f"{path}: not a PVAD checkpoint")
    model = init_pvad(seed=0, n_mels=int(attrs["n_mels"]),
                      hidden_size=int(attrs["hidden_size"]),
                      num_layers=int(attrs["num_layers"]))
    for name, param in model.named_params().items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != param.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape "
                              f"{tensors[name].shape}, expected {param.shape}")
        param[...] = tensors[name]
    return model
