"""Minimal numerical core: LSTM stack with exact BPTT, linear and 1-D
convolution layers, softmax cross-entropy and l1 losses, Adam, and
cosine-annealed learning rates.

Everything is plain numpy. Parameters are stored float32; loss and norm
reductions accumulate in float64. All ops run in the dtype of their
inputs, so gradient checking can run the identical code in float64.

LSTM gate layout: the fused matrices stack the four gates row-wise in
the order [input, forget, cell candidate, output], H rows each:

    a_t = wx @ x_t + wh @ h_{t-1} + b
    i, f, o = sigmoid(a_i, a_f, a_o);  g = tanh(a_g)
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ConfigError, DivergenceError


def sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe in both tails
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# ---------------------------------------------------------------------------
# parameter structures


@dataclass
class Linear:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def named_params(self, prefix: str = "") -> dict:
        return {prefix + "w": self.w, prefix + "b": self.b}


@dataclass
class Conv1d:
    w: np.ndarray  # (out_ch, in_ch, k), k odd
    b: np.ndarray  # (out_ch,)

    def named_params(self, prefix: str = "") -> dict:
        return {prefix + "w": self.w, prefix + "b": self.b}


@dataclass
class LstmLayer:
    wx: np.ndarray  # (4H, D)
    wh: np.ndarray  # (4H, H)
    b: np.ndarray   # (4H,)


@dataclass
class LstmStack:
    layers: list
    input_size: int
    hidden_size: int

    def named_params(self, prefix: str = "") -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}l{i}.wx"] = layer.wx
            out[f"{prefix}l{i}.wh"] = layer.wh
            out[f"{prefix}l{i}.b"] = layer.b
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())


def lstm_param_count(input_size: int, hidden_size: int, num_layers: int) -> int:
    """Analytic parameter count: 4*(H*(D+H)+H) per layer."""
    total = 0
    d = input_size
    for _ in range(num_layers):
        total += 4 * (hidden_size * (d + hidden_size) + hidden_size)
        d = hidden_size
    return total


def init_linear(rng: np.random.Generator, out_size: int, in_size: int,
                dtype=np.float32) -> Linear:
    limit = 1.0 / math.sqrt(in_size)
    w = rng.uniform(-limit, limit, size=(out_size, in_size)).astype(dtype)
    return Linear(w=w, b=np.zeros(out_size, dtype=dtype))


def init_conv1d(rng: np.random.Generator, out_ch: int, in_ch: int, kernel: int,
                dtype=np.float32) -> Conv1d:
    if kernel % 2 == 0:
        raise ConfigError(f"conv kernel width must be odd, got {kernel}")
    limit = 1.0 / math.sqrt(in_ch * kernel)
    w = rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel)).astype(dtype)
    return Conv1d(w=w, b=np.zeros(out_ch, dtype=dtype))


def init_lstm_stack(rng: np.random.Generator, input_size: int, hidden_size: int,
                    num_layers: int, dtype=np.float32,
                    forget_bias: float = 1.0) -> LstmStack:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias +1."""
    limit = 1.0 / math.sqrt(hidden_size)
    layers = []
    d = input_size
    for _ in range(num_layers):
        wx = rng.uniform(-limit, limit, size=(4 * hidden_size, d)).astype(dtype)
        wh = rng.uniform(-limit, limit, size=(4 * hidden_size, hidden_size)).astype(dtype)
        b = np.zeros(4 * hidden_size, dtype=dtype)
        b[hidden_size:2 * hidden_size] = forget_bias
        layers.append(LstmLayer(wx=wx, wh=wh, b=b))
        d = hidden_size
    return LstmStack(layers=layers, input_size=input_size, hidden_size=hidden_size)


# ---------------------------------------------------------------------------
# LSTM forward / backward


@dataclass
class _LstmLayerCache:
    x: np.ndarray        # (B, T, D) layer input
    gates: np.ndarray    # (B, T, 4H) post-activation [i, f, g, o]
    c: np.ndarray        # (B, T, H) cell states
    tanh_c: np.ndarray   # (B, T, H)
    h: np.ndarray        # (B, T, H) outputs
    h0: np.ndarray       # (B, H)
    c0: np.ndarray       # (B, H)


@dataclass
class LstmCache:
    layers: list
    squeezed: bool


def _layer_forward(layer: LstmLayer, x: np.ndarray, h0: np.ndarray, c0: np.ndarray):
    B, T, D = x.shape
    H = layer.wh.shape[1]
    dtype = x.dtype

    # input contribution for all timesteps in one matmul
    ax = (x.reshape(B * T, D) @ layer.wx.T).reshape(B, T, 4 * H) + layer.b
    wh_t = np.ascontiguousarray(layer.wh.T)

    gates = np.empty((B, T, 4 * H), dtype=dtype)
    c_all = np.empty((B, T, H), dtype=dtype)
    tanh_c_all = np.empty((B, T, H), dtype=dtype)
    h_all = np.empty((B, T, H), dtype=dtype)

    h, c = h0, c0
    for t in range(T):
        a = ax[:, t] + h @ wh_t
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = sigmoid(a[:, 3 * H:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, t, :H] = i
        gates[:, t, H:2 * H] = f
        gates[:, t, 2 * H:3 * H] = g
        gates[:, t, 3 * H:] = o
        c_all[:, t] = c
        tanh_c_all[:, t] = tc
        h_all[:, t] = h

    cache = _LstmLayerCache(x=x, gates=gates, c=c_all, tanh_c=tanh_c_all,
                            h=h_all, h0=h0, c0=c0)
    return h_all, (h, c), cache


def lstm_forward(stack: LstmStack, inputs: np.ndarray, initial_state=None):
    """Run the stack over a (B, T, D) batch or a single (T, D) sequence.

    Returns (outputs, final_states, cache) where outputs is the top
    layer's hidden sequence and final_states is a list of (h, c) per
    layer. The cache holds every intermediate needed by lstm_backward.
    """
    x = np.asarray(inputs)
    squeezed = x.ndim == 2
    if squeezed:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != stack.input_size:
        raise ConfigError(
            f"expected input feature size {stack.input_size}, got shape {x.shape}"
        )
    B, T, _ = x.shape
    H = stack.hidden_size
    if initial_state is None:
        initial_state = [(np.zeros((B, H), dtype=x.dtype),
                          np.zeros((B, H), dtype=x.dtype)) for _ in stack.layers]

    layer_caches = []
    final_states = []
    out = x
    for layer, (h0, c0) in zip(stack.layers, initial_state):
        if T == 0:
            layer_caches.append(None)
            final_states.append((h0, c0))
            out = np.zeros((B, 0, H), dtype=x.dtype)
            continue
        out, (h, c), cache = _layer_forward(layer, out, h0, c0)
        layer_caches.append(cache)
        final_states.append((h, c))

    cache = LstmCache(layers=layer_caches, squeezed=squeezed)
    if squeezed:
        return out[0], final_states, cache
    return out, final_states, cache


def _layer_backward(layer: LstmLayer, cache: _LstmLayerCache, dh_out: np.ndarray):
    B, T, H = cache.h.shape
    gates, c_all, tanh_c, x = cache.gates, cache.c, cache.tanh_c, cache.x
    dtype = dh_out.dtype

    da = np.empty((B, T, 4 * H), dtype=dtype)
    dh_next = np.zeros((B, H), dtype=dtype)
    dc_next = np.zeros((B, H), dtype=dtype)

    for t in range(T - 1, -1, -1):
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        g = gates[:, t, 2 * H:3 * H]
        o = gates[:, t, 3 * H:]
        tc = tanh_c[:, t]
        c_prev = c_all[:, t - 1] if t > 0 else cache.c0

        dh = dh_out[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da[:, t, :H] = dc * g * i * (1.0 - i)
        da[:, t, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        da[:, t, 3 * H:] = do * o * (1.0 - o)

        dh_next = da[:, t] @ layer.wh
        dc_next = dc * f

    h_prev = np.concatenate([cache.h0[:, None, :], cache.h[:, :-1]], axis=1)
    da_flat = da.reshape(B * T, 4 * H)
    grad = LstmLayer(
        wx=da_flat.T @ x.reshape(B * T, -1),
        wh=da_flat.T @ h_prev.reshape(B * T, H),
        b=da_flat.sum(axis=0),
    )
    dx = (da_flat @ layer.wx).reshape(B, T, -1)
    return grad, dx


def lstm_backward(stack: LstmStack, cache: LstmCache, grad_outputs: np.ndarray):
    """Exact gradients of lstm_forward.

    grad_outputs matches the forward outputs' shape. Returns (grads,
    grad_inputs) with grads structured like the stack itself.
    """
    dh = np.asarray(grad_outputs)
    if cache.squeezed:
        dh = dh[None]
    if dh.ndim != 3:
        raise ConfigError(f"grad_outputs must be 2-D or 3-D, got shape {dh.shape}")

    grads = []
    for layer, layer_cache in zip(reversed(stack.layers), reversed(cache.layers)):
        if layer_cache is None:  # empty sequence
            grads.append(LstmLayer(wx=np.zeros_like(layer.wx),
                                   wh=np.zeros_like(layer.wh),
                                   b=np.zeros_like(layer.b)))
            dh = np.zeros((dh.shape[0], 0, layer.wx.shape[1]), dtype=dh.dtype)
            continue
        if layer_cache.h.shape != dh.shape:
            raise ConfigError(
                f"grad_outputs shape {dh.shape} does not match cached forward "
                f"shape {layer_cache.h.shape}"
            )
        grad, dh = _layer_backward(layer, layer_cache, dh)
        grads.append(grad)
    grads.reverse()

    grad_stack = LstmStack(layers=grads, input_size=stack.input_size,
                           hidden_size=stack.hidden_size)
    dx = dh[0] if cache.squeezed else dh
    return grad_stack, dx


# ---------------------------------------------------------------------------
# linear / conv1d


def linear_forward(p: Linear, x: np.ndarray):
    """y = x @ w.T + b over the trailing axis."""
    if x.shape[-1] != p.w.shape[1]:
        raise ConfigError(f"linear expects {p.w.shape[1]} inputs, got {x.shape}")
    return x @ p.w.T + p.b, x


def linear_backward(p: Linear, cache_x: np.ndarray, dy: np.ndarray):
    flat_dy = dy.reshape(-1, p.w.shape[0])
    flat_x = cache_x.reshape(-1, p.w.shape[1])
    grad = Linear(w=flat_dy.T @ flat_x, b=flat_dy.sum(axis=0))
    dx = (flat_dy @ p.w).reshape(cache_x.shape)
    return grad, dx


def _conv_windows(p: Conv1d, x: np.ndarray) -> np.ndarray:
    # (B, T, Cin) -> (B, T, Cin*k) of same-padded sliding windows
    k = p.w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B,T,Cin,k)
    return win.reshape(x.shape[0], x.shape[1], -1)


def conv1d_forward(p: Conv1d, x: np.ndarray):
    """Same-length 1-D convolution over time; x is (B, T, Cin) or (T, Cin)."""
    squeezed = x.ndim == 2
    if squeezed:
        x = x[None]
    if x.shape[-1] != p.w.shape[1]:
        raise ConfigError(f"conv1d expects {p.w.shape[1]} channels, got {x.shape}")
    win = _conv_windows(p, x)
    w_flat = p.w.reshape(p.w.shape[0], -1)  # (Cout, Cin*k), matching (Cin,k) order
    y = win @ w_flat.T + p.b
    cache = (x, squeezed)
    return (y[0] if squeezed else y), cache


def conv1d_backward(p: Conv1d, cache, dy: np.ndarray):
    x, squeezed = cache
    if squeezed:
        dy = dy[None]
    B, T, _ = x.shape
    cout, cin, k = p.w.shape
    pad = k // 2

    win = _conv_windows(p, x).reshape(B * T, cin * k)
    dy_flat = dy.reshape(B * T, cout)
    grad = Conv1d(w=(dy_flat.T @ win).reshape(cout, cin, k), b=dy_flat.sum(axis=0))

    dwin = (dy_flat @ p.w.reshape(cout, -1)).reshape(B, T, cin, k)
    dxp = np.zeros((B, T + 2 * pad, cin), dtype=dy.dtype)
    for j in range(k):
        dxp[:, j:j + T] += dwin[:, :, :, j]
    dx = dxp[:, pad:pad + T]
    return grad, (dx[0] if squeezed else dx)


# ---------------------------------------------------------------------------
# losses


def _flatten_mask(mask, n: int):
    if mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(mask).reshape(-1).astype(bool)
    if m.shape[0] != n:
        raise ConfigError(f"mask length {m.shape[0]} does not match {n} frames")
    return m


def softmax_xent(logits: np.ndarray, targets: np.ndarray, mask=None):
    """Mean cross-entropy over unmasked frames.

    logits: (..., K); targets: integer class ids broadcastable to the
    leading shape. Returns (loss, grad_logits); gradients are zero on
    masked frames.
    """
    k = logits.shape[-1]
    flat = logits.reshape(-1, k)
    t = np.asarray(targets).reshape(-1)
    m = _flatten_mask(mask, flat.shape[0])
    n = int(m.sum())
    if n == 0:
        raise ConfigError("all frames are masked")

    shifted = flat - flat.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    p = exp / denom
    log_p = shifted - np.log(denom)

    rows = np.arange(flat.shape[0])
    loss = -float(np.sum(log_p[rows, t] * m, dtype=np.float64)) / n

    d = p.copy()
    d[rows, t] -= 1.0
    d *= (m / n)[:, None]
    return loss, d.reshape(logits.shape)


def l1_loss(pred: np.ndarray, target: np.ndarray, mask=None):
    """Mean absolute error over unmasked positions.

    mask covers frames (all leading axes); the mean is over unmasked
    scalar entries. The subgradient at 0 is 0.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    dim = pred.shape[-1]
    m = _flatten_mask(mask, int(np.prod(pred.shape[:-1])))
    n = int(m.sum()) * dim
    if n == 0:
        raise ConfigError("all frames are masked")
    m_full = m.reshape(pred.shape[:-1])[..., None]
    loss = float(np.sum(np.abs(d) * m_full, dtype=np.float64)) / n
    grad = np.sign(d) * (m_full / n)
    return loss, grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        step=0, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update with bias correction, in place on params."""
    for name in params:
        if name not in grads:
            raise ConfigError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most max_norm.

    Returns the pre-clip norm. No-op when max_norm is None or 0.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class LrSchedule:
    lr0: float
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not 0.0 <= self.min_lr <= self.lr0:
            raise ConfigError(f"need 0 <= min_lr <= lr0, got {self.min_lr}, {self.lr0}")


def cosine_lr(sched: LrSchedule, step: int) -> float:
    """Cosine annealing from lr0 at step 0 down to min_lr at total_steps."""
    if not 0 <= step <= sched.total_steps:
        raise ConfigError(f"step {step} outside [0, {sched.total_steps}]")
    span = sched.lr0 - sched.min_lr
    return sched.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * step / sched.total_steps))


# ---------------------------------------------------------------------------
# batching and deterministic sharded execution


def bucket_batches(lengths, batch_size: int) -> list:
    """Group sequence indices into batches of near-equal length.

    Indices are sorted by (length, index) and chunked; the caller
    shuffles the batch order per epoch.
    """
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def pad_sequences(seqs: list, dtype=np.float32):
    """Stack variable-length (T_i, D) arrays into (B, T_max, D) plus a
    (B, T_max) validity mask."""
    b = len(seqs)
    t_max = max(s.shape[0] for s in seqs)
    d = seqs[0].shape[1]
    out = np.zeros((b, t_max, d), dtype=dtype)
    mask = np.zeros((b, t_max), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = True
    return out, mask


def shard_slices(n: int, n_shards: int) -> list:
    """Split range(n) into at most n_shards contiguous, near-equal slices."""
    n_shards = max(1, min(n_shards, n))
    base, extra = divmod(n, n_shards)
    slices, start = [], 0
    for i in range(n_shards):
        size = base + (1 if i < extra else 0)
        slices.append(slice(start, start + size))
        start += size
    return slices


def run_sharded(fn, shards: list, threads: int = 1) -> list:
    """Evaluate fn over shards, preserving shard order in the result.

    With threads > 1 the shards run concurrently; reduction done by the
    caller over the ordered result stays deterministic.
    """
    if threads <= 1 or len(shards) <= 1:
        return [fn(s) for s in shards]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, shards))
