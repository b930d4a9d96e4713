"""Frozen d-vector speaker embedder: windowed embedding extraction,
enrollment averaging, and cosine scoring.

The canonical configuration is a 3-layer LSTM, hidden 256, with a
linear projection to 256-dimensional embeddings (about 1.4M
parameters). Because no externally pretrained speaker model ships with
the toolkit, a compact substitute (2x64 LSTM, same 256-dim projection)
can be trained on the synthetic corpus by speaker classification; the
softmax head is dropped afterwards and only the cosine geometry of the
embeddings is used downstream.

Enrollment follows the 1.6 s window / 0.4 s shift / minimum 5 s
protocol: per-window embeddings are unit-normalized, averaged, and the
average is re-normalized. Runtime scoring is per-frame and causal: at
each frame the current projected LSTM state is normalized and compared
to the profile, which is what the personalized VAD consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ConfigError, DivergenceError, FormatError
from . import container, nncore
from .features import AudioBuffer, FeatureConfig, FeatureSequence, log_mel
from .util import substream

DVECTOR_DIM = 256
WINDOW_FRAMES = 160        # 1.6 s at a 10 ms frame shift
WINDOW_SHIFT_FRAMES = 40   # 0.4 s
MIN_ENROLL_SECONDS = 5.0


@dataclass(frozen=True)
class DvectorConfig:
    input_size: int = 40
    hidden_size: int = 256
    num_layers: int = 3
    embedding_dim: int = DVECTOR_DIM


def compact_config() -> DvectorConfig:
    """Desk-scale substitute: small enough to train and score on a CPU."""
    return DvectorConfig(hidden_size=64, num_layers=2)


@dataclass
class DvectorModel:
    stack: nncore.LstmStack
    proj: nncore.Linear
    cfg: DvectorConfig

    def named_params(self, prefix: str = "dvec.") -> dict:
        out = self.stack.named_params(prefix + "lstm.")
        out.update(self.proj.named_params(prefix + "proj."))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())


def init_dvector(cfg: DvectorConfig, seed: int) -> DvectorModel:
    rng = substream(seed, "dvector-init")
    stack = nncore.init_lstm_stack(rng, cfg.input_size, cfg.hidden_size,
                                   cfg.num_layers)
    proj = nncore.init_linear(rng, cfg.embedding_dim, cfg.hidden_size)
    return DvectorModel(stack=stack, proj=proj, cfg=cfg)


def save_dvector(path, model: DvectorModel, attrs: dict | None = None) -> None:
    meta = {
        "kind": "dvector",
        "input_size": model.cfg.input_size,
        "hidden_size": model.cfg.hidden_size,
        "num_layers": model.cfg.num_layers,
        "embedding_dim": model.cfg.embedding_dim,
    }
    if attrs:
        meta.update(attrs)
    container.save_tensors(path, model.named_params(), meta)


def load_dvector(path) -> DvectorModel:
    tensors, attrs = container.load_tensors(path)
    if attrs.get("kind") != "dvector":
        raise FormatError(f"{path}: not a d-vector checkpoint")
    cfg = DvectorConfig(
        input_size=int(attrs["input_size"]),
        hidden_size=int(attrs["hidden_size"]),
        num_layers=int(attrs["num_layers"]),
        embedding_dim=int(attrs["embedding_dim"]),
    )
    model = init_dvector(cfg, seed=0)
    for name, param in model.named_params().items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != param.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape "
                              f"{tensors[name].shape}, expected {param.shape}")
        param[...] = tensors[name]
    return model


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray  # (embedding_dim,) float32, unit norm

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise FormatError(f"embedding must be 1-D, got {self.vector.shape}")
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-5:
            raise FormatError(f"embedding norm {norm} is not 1")


@dataclass
class EnrollmentProfile:
    speaker_id: str
    embedding: SpeakerEmbedding
    n_windows: int
    total_enrolled_seconds: float


def _project_and_normalize(model: DvectorModel, h: np.ndarray) -> np.ndarray:
    """Rows of h -> projected embeddings on the unit sphere.

    Zero-norm rows are left as zero vectors (score 0 downstream);
    callers that require a valid embedding check for them.
    """
    y, _ = nncore.linear_forward(model.proj, h)
    norms = np.linalg.norm(y.astype(np.float64), axis=-1, keepdims=True)
    return np.divide(y, norms, out=np.zeros_like(y),
                     where=norms > 1e-12).astype(np.float32)


def _embed_windows(model: DvectorModel, windows: np.ndarray) -> np.ndarray:
    """(B, WINDOW_FRAMES, 40) feature windows -> (B, dim) unit vectors."""
    if windows.ndim != 3 or windows.shape[1] != WINDOW_FRAMES:
        raise ConfigError(
            f"expected (n, {WINDOW_FRAMES}, {model.cfg.input_size}) windows, "
            f"got {windows.shape}"
        )
    out, _, _ = nncore.lstm_forward(model.stack, windows.astype(np.float32))
    emb = _project_and_normalize(model, out[:, -1])
    if np.any(np.linalg.norm(emb, axis=1) < 0.5):
        raise DivergenceError("zero-norm speaker embedding")
    return emb


def embed_window(model: DvectorModel, window_features: np.ndarray) -> SpeakerEmbedding:
    """Embed one exact 1.6 s window: last LSTM frame, projected, normalized."""
    w = np.asarray(window_features)
    if w.ndim != 2 or w.shape[0] != WINDOW_FRAMES:
        raise ConfigError(f"expected ({WINDOW_FRAMES}, n_mels) window, got {w.shape}")
    return SpeakerEmbedding(_embed_windows(model, w[None])[0])


def window_starts(n_frames: int) -> list:
    """Start frames of full enrollment windows: 0, 40, 80, ..."""
    if n_frames < WINDOW_FRAMES:
        return []
    return list(range(0, n_frames - WINDOW_FRAMES + 1, WINDOW_SHIFT_FRAMES))


def enroll(model: DvectorModel, utterances: list, speaker_id: str,
           feature_cfg: FeatureConfig = FeatureConfig()) -> EnrollmentProfile:
    """Build a target-speaker profile from enrollment utterances.

    Windows never straddle utterance boundaries. Requires at least 5 s
    of audio in total.
    """
    if not utterances:
        raise ConfigError("enrollment needs at least one utterance")
    total_seconds = 0.0
    window_list = []
    for utt in utterances:
        if isinstance(utt, AudioBuffer):
            feats = log_mel(utt, feature_cfg)
            total_seconds += utt.duration_s
        elif isinstance(utt, FeatureSequence):
            feats = utt
            total_seconds += len(utt) * feature_cfg.frame_shift_ms / 1000.0
        else:
            raise ConfigError(f"cannot enroll from {type(utt).__name__}")
        for start in window_starts(len(feats)):
            window_list.append(feats.frames[start:start + WINDOW_FRAMES])
    if total_seconds < MIN_ENROLL_SECONDS:
        raise ConfigError(
            f"enrollment needs >= {MIN_ENROLL_SECONDS} s of audio, "
            f"got {total_seconds:.2f} s"
        )
    if not window_list:
        raise ConfigError("no full enrollment window fits any utterance")

    embeddings = _embed_windows(model, np.stack(window_list))
    mean = embeddings.mean(axis=0, dtype=np.float64)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise DivergenceError("enrollment embeddings cancel out")
    return EnrollmentProfile(
        speaker_id=speaker_id,
        embedding=SpeakerEmbedding((mean / norm).astype(np.float32)),
        n_windows=len(window_list),
        total_enrolled_seconds=total_seconds,
    )


def cosine_similarity(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    """Dot product of unit vectors, clipped to [-1, 1] against rounding."""
    s = float(np.dot(a.vector.astype(np.float64), b.vector.astype(np.float64)))
    return max(-1.0, min(1.0, s))


def framewise_similarity(model: DvectorModel, feats: FeatureSequence,
                         profile: EnrollmentProfile) -> np.ndarray:
    """Per-frame causal target-speaker similarity s_t in [-1, 1].

    Runs the embedder over the whole utterance; at each frame the
    current projected state is normalized and compared to the profile.
    """
    return framewise_similarity_batch(model, [feats], profile)[0]


def framewise_similarity_batch(model: DvectorModel, feats_list: list,
                               profile: EnrollmentProfile) -> list:
    """framewise_similarity for several utterances, batched and padded."""
    if not feats_list:
        return []
    seqs = [np.asarray(f.frames, dtype=np.float32) for f in feats_list]
    lengths = [s.shape[0] for s in seqs]
    if max(lengths) == 0:
        return [np.zeros(0, dtype=np.float32) for _ in seqs]
    padded, _ = nncore.pad_sequences(seqs)
    out, _, _ = nncore.lstm_forward(model.stack, padded)
    emb = _project_and_normalize(model, out)
    scores = emb @ profile.embedding.vector
    scores = np.clip(scores, -1.0, 1.0)
    return [scores[i, :n].astype(np.float32) for i, n in enumerate(lengths)]


def save_profile(path, profile: EnrollmentProfile) -> None:
    container.save_tensors(
        path,
        {"embedding": profile.embedding.vector},
        {
            "kind": "enrollment",
            "speaker_id": profile.speaker_id,
            "n_windows": profile.n_windows,
            "total_enrolled_seconds": profile.total_enrolled_seconds,
        },
    )


def load_profile(path) -> EnrollmentProfile:
    tensors, attrs = container.load_tensors(path)
    if attrs.get("kind") != "enrollment" or "embedding" not in tensors:
        raise FormatError(f"{path}: not an enrollment profile")
    return EnrollmentProfile(
        speaker_id=str(attrs["speaker_id"]),
        embedding=SpeakerEmbedding(tensors["embedding"]),
        n_windows=int(attrs["n_windows"]),
        total_enrolled_seconds=float(attrs["total_enrolled_seconds"]),
    )


# ---------------------------------------------------------------------------
# desk-scale substitute training


@dataclass(frozen=True)
class EmbedderTrainConfig:
    epochs: int = 4
    batch_size: int = 32
    lr0: float = 1e-3
    min_lr: float = 1e-5
    clip_norm: float = 5.0
    window_shift: int = 80   # denser than enrollment: more training windows
    min_voiced_fraction: float = 0.5


def train_speaker_embedder(utterances: list, cfg: DvectorConfig,
                           train_cfg: EmbedderTrainConfig, seed: int):
    """Train the substitute embedder by window-level speaker classification.

    utterances: (frames (T, n_mels), voiced (T,) bool, speaker_id)
    triples. Mostly-voiced windows are classified by speaker with a
    softmax head; the head is discarded and (LSTM, projection) returned
    together with the per-epoch loss history.
    """
    windows, labels = [], []
    speaker_ids = sorted({spk for _, _, spk in utterances})
    if len(speaker_ids) < 2:
        raise ConfigError("embedder training needs at least 2 speakers")
    index = {spk: i for i, spk in enumerate(speaker_ids)}
    for frames, voiced, spk in utterances:
        frames = np.asarray(frames, dtype=np.float32)
        voiced = np.asarray(voiced, dtype=bool)
        for start in range(0, frames.shape[0] - WINDOW_FRAMES + 1,
                           train_cfg.window_shift):
            stop = start + WINDOW_FRAMES
            if voiced[start:stop].mean() >= train_cfg.min_voiced_fraction:
                windows.append(frames[start:stop])
                labels.append(index[spk])
    if not windows:
        raise ConfigError("no mostly-voiced training windows found")

    x = np.stack(windows)
    y = np.asarray(labels)
    model = init_dvector(cfg, seed)
    head = nncore.init_linear(substream(seed, "dvector-head"),
                              len(speaker_ids), cfg.embedding_dim)
    params = model.named_params()
    params.update(head.named_params("head."))
    opt = nncore.adam_init(params)

    n_batches = (len(windows) + train_cfg.batch_size - 1) // train_cfg.batch_size
    sched = nncore.LrSchedule(train_cfg.lr0, train_cfg.epochs * n_batches,
                              train_cfg.min_lr)
    shuffle_rng = substream(seed, "dvector-shuffle")

    history = []
    step = 0
    for _ in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(windows))
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            out, _, cache = nncore.lstm_forward(model.stack, x[idx])
            h_last = out[:, -1]
            emb, emb_cache = nncore.linear_forward(model.proj, h_last)
            logits, head_cache = nncore.linear_forward(head, emb)
            loss, dlogits = nncore.softmax_xent(logits, y[idx])
            epoch_loss += loss * len(idx)

            head_grad, demb = nncore.linear_backward(head, head_cache, dlogits)
            proj_grad, dh_last = nncore.linear_backward(model.proj, emb_cache, demb)
            dh = np.zeros_like(out)
            dh[:, -1] = dh_last
            stack_grad, _ = nncore.lstm_backward(model.stack, cache, dh)

            grads = stack_grad.named_params("dvec.lstm.")
            grads.update(proj_grad.named_params("dvec.proj."))
            grads.update(head_grad.named_params("head."))
            nncore.clip_global_norm(grads, train_cfg.clip_norm)
            nncore.adam_step(params, grads, opt, nncore.cosine_lr(sched, step))
            step += 1
        history.append(epoch_loss / len(windows))
    return model, history
