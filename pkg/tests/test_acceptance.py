"""Release gate: eight numbered end-to-end checks with pinned tolerances.

Each test prints a single verdict line so the log reads as a checklist.
The heavyweight checks (6, 7) share one module-scoped replication run;
everything else is self-contained and fast.
"""

import time

import numpy as np
import pytest

from pvadkit import apc, data, metrics, nncore, pipeline, pvad, speaker
from pvadkit.features import AudioBuffer, FeatureConfig, log_mel
from pvadkit.util import substream
from oracles import brute_force_ap, fd_grad, rel_err

F64 = np.float64


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"[acceptance] {num} {name:<22s} {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# 1. every analytic gradient matches finite differences


def _f64_pvad(seed: int, n_mels: int, hidden: int, layers: int) -> pvad.PvadModel:
    m = pvad.init_pvad(seed, n_mels=n_mels, hidden_size=hidden, num_layers=layers)
    enc = nncore.LstmStack(
        layers=[nncore.LstmLayer(l.wx.astype(F64), l.wh.astype(F64),
                                 l.b.astype(F64)) for l in m.encoder.layers],
        input_size=m.encoder.input_size,
        hidden_size=m.encoder.hidden_size)
    head = nncore.Linear(m.vad_head.w.astype(F64), m.vad_head.b.astype(F64))
    return pvad.PvadModel(encoder=enc, vad_head=head,
                          alpha=m.alpha.astype(F64), beta=m.beta.astype(F64))


def _check_params(loss, analytic: dict, params: dict, tol: float) -> float:
    worst = 0.0
    for name, param in params.items():
        err = rel_err(analytic[name], fd_grad(loss, param))
        assert err < tol, f"{name}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst


def _gradcheck_lstm(rng) -> float:
    d, h = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    layers = int(rng.integers(1, 3))
    stack = nncore.init_lstm_stack(rng, d, h, layers, dtype=F64)
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(2, 6)), d))
    w = rng.normal(size=x.shape[:2] + (h,))

    def loss():
        out, _, _ = nncore.lstm_forward(stack, x)
        return float(np.sum(out * w))

    _, _, cache = nncore.lstm_forward(stack, x)
    grads, dx = nncore.lstm_backward(stack, cache, w)
    worst = rel_err(dx, fd_grad(loss, x))
    return max(worst, _check_params(loss, grads.named_params(),
                                    stack.named_params(), 1e-5))


def _gradcheck_conv1d(rng) -> float:
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kernel = int(rng.choice([1, 3, 5]))
    p = nncore.init_conv1d(rng, cout, cin, kernel, dtype=F64)
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(3, 7)), cin))
    w = rng.normal(size=x.shape[:2] + (cout,))

    def loss():
        return float(np.sum(nncore.conv1d_forward(p, x)[0] * w))

    _, cache = nncore.conv1d_forward(p, x)
    grads, dx = nncore.conv1d_backward(p, cache, w)
    worst = rel_err(dx, fd_grad(loss, x))
    return max(worst, _check_params(loss, grads.named_params(),
                                    p.named_params(), 1e-5))


def _gradcheck_linear(rng) -> float:
    din, dout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    p = nncore.init_linear(rng, dout, din, dtype=F64)
    x = rng.normal(size=(int(rng.integers(1, 7)), din))
    w = rng.normal(size=(x.shape[0], dout))

    def loss():
        return float(np.sum(nncore.linear_forward(p, x)[0] * w))

    _, cache = nncore.linear_forward(p, x)
    grads, dx = nncore.linear_backward(p, cache, w)
    worst = rel_err(dx, fd_grad(loss, x))
    return max(worst, _check_params(loss, grads.named_params(),
                                    p.named_params(), 1e-5))


def _gradcheck_softmax_xent(rng) -> float:
    n, c = int(rng.integers(2, 8)), int(rng.integers(2, 5))
    logits = rng.normal(size=(n, c))
    targets = rng.integers(0, c, size=n)
    mask = rng.random(n) < 0.8
    mask[0] = True

    def loss():
        return nncore.softmax_xent(logits, targets, mask)[0]

    _, grad = nncore.softmax_xent(logits, targets, mask)
    return rel_err(grad, fd_grad(loss, logits))


def _gradcheck_l1(rng) -> float:
    shape = (int(rng.integers(1, 3)), int(rng.integers(2, 6)),
             int(rng.integers(1, 4)))
    pred = rng.normal(size=shape)
    target = rng.normal(size=shape)
    # keep every coordinate away from the |.| kink that breaks FD
    close = np.abs(pred - target) < 1e-3
    pred = np.where(close, target + np.sign(pred - target + 0.5) * 2e-3, pred)
    mask = rng.random(shape[:2]) < 0.8
    mask[0, 0] = True

    def loss():
        return nncore.l1_loss(pred, target, mask)[0]

    _, grad = nncore.l1_loss(pred, target, mask)
    return rel_err(grad, fd_grad(loss, pred))


def _gradcheck_pvad_loss(rng) -> float:
    d, h = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    model = _f64_pvad(int(rng.integers(1 << 30)), d, h, int(rng.integers(1, 3)))
    # alpha near 1, beta near 0, sims interior: s' stays inside the clamp
    model.alpha[:] = rng.uniform(0.8, 1.0)
    model.beta[:] = rng.uniform(-0.05, 0.05)
    b, t = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    feats = rng.normal(size=(b, t, d))
    sims = rng.uniform(0.1, 0.85, size=(b, t))
    labels = rng.integers(0, 3, size=(b, t))
    mask = rng.random((b, t)) < 0.8
    mask[:, 0] = True

    def loss():
        return pvad.pvad_loss(model, feats, sims, labels, mask)[0]

    _, grads = pvad.pvad_loss(model, feats, sims, labels, mask)
    return _check_params(loss, grads, model.named_params(), 1e-5)


def test_1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    checks = {
        "lstm": _gradcheck_lstm,
        "conv1d": _gradcheck_conv1d,
        "linear": _gradcheck_linear,
        "softmax_xent": _gradcheck_softmax_xent,
        "l1": _gradcheck_l1,
        "pvad_loss": _gradcheck_pvad_loss,
    }
    worst = 0.0
    for i, (name, check) in enumerate(checks.items()):
        rng = np.random.default_rng(9000 + i)
        for _ in range(100):
            err = check(rng)
            assert err < 1e-5, f"{name}: rel err {err:.3e}"
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = elapsed < 60.0
    _verdict(1, "gradients", ok,
             f"600 instances, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok, f"gradient checks took {elapsed:.1f}s, budget 60s"


# ---------------------------------------------------------------------------
# 2. average precision against brute-force threshold enumeration


def test_2_average_precision_oracle():
    rng = np.random.default_rng(42)
    for i in range(1000):
        n = int(rng.integers(1, 13))
        if i % 2:
            scores = rng.integers(0, 5, size=n) / 4.0   # coarse grid: ties
        else:
            scores = rng.random(n)
        positives = rng.random(n) < 0.4
        if not positives.any():
            positives[int(rng.integers(0, n))] = True
        got = metrics.average_precision(scores, positives)
        want = brute_force_ap(scores, positives)
        assert got == want, f"instance {i}: {got!r} != {want!r}"

    rows = [((82.5, 94.5, 94.8), 90.6), ((86.9, 94.9, 95.6), 92.5)]
    for aps, want in rows:
        assert round(metrics.map_score(*aps), 1) == want
    _verdict(2, "ap-oracle", True,
             "1000 instances exact, mAP rounding checks pass")


# ---------------------------------------------------------------------------
# 3. the similarity-combination algebra


def test_3_posterior_combination_algebra():
    rng = np.random.default_rng(3)
    n = 100_000
    z_s = rng.uniform(0.0, 1.0, size=n)
    z_ns = 1.0 - z_s
    s_prime = rng.uniform(0.0, 1.0, size=n)
    post = pvad.combine(z_ns, z_s, s_prime)
    gap = float(np.max(np.abs(post.sum(axis=-1) - 1.0)))
    assert gap <= 1e-9
    assert np.array_equal(post[:, 0], z_ns)
    assert np.array_equal(post[:, 1], s_prime * z_s)
    assert np.array_equal(post[:, 2], (1.0 - s_prime) * z_s)
    _verdict(3, "posterior-algebra", True,
             f"100000 draws, max |sum-1| = {gap:.1e}")


# ---------------------------------------------------------------------------
# 4. the noisy test matrix hits its SNRs and holds cafe out of training


def test_4_test_matrix_snr_exact():
    seed = 7
    records = data.synth_corpus(3, 3, seed)
    mix_rng = substream(seed, "test-mix-draw")
    clean = [data.make_multispeaker(records, mix_rng, f"mix{i:02d}")
             for i in range(2)]
    bank = data.make_noise_bank(seed)
    matrix = data.build_test_matrix(clean, bank, seed)

    noisy = [c for c in matrix if c.snr_db is not None]
    assert len(noisy) == 24
    assert len({(c.noise_type, c.snr_db) for c in noisy}) == 24

    worst = 0.0
    for cond in noisy:
        for i, utt in enumerate(clean):
            # replay the exact draw, then re-measure the produced audio
            rng = substream(seed, "test-mix", cond.noise_type, cond.snr_db, i)
            mixed, scaled = data.mix_at_snr(utt.samples, bank[cond.noise_type],
                                            cond.snr_db, rng)
            assert np.array_equal(mixed, cond.utterances[i].samples)
            sig = mixed.astype(F64) - scaled.astype(F64)
            nse = scaled.astype(F64)
            measured = 10.0 * np.log10(np.mean(sig * sig) / np.mean(nse * nse))
            worst = max(worst, abs(measured - cond.snr_db))
    assert worst <= 0.05, f"worst SNR error {worst:.4f} dB"

    assert "cafe" in data.TEST_NOISE_TYPES
    assert "cafe" not in data.TRAIN_NOISE_TYPES
    assert "cafe" not in data.MtrConfig().noise_types
    _verdict(4, "snr-matrix", True,
             f"24 conditions, worst |error| = {worst:.4f} dB, cafe held out")


# ---------------------------------------------------------------------------
# 5. pretraining actually learns predictable structure


def test_5_apc_learns_periodic_corpus():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    corpus = []
    for _ in range(4096):
        pattern = rng.uniform(-1.0, 1.0, size=(3, 40))
        corpus.append(pattern[np.arange(24) % 3].astype(np.float32))

    cfg = apc.ApcConfig()   # horizon 3, 10 epochs, batch 32, lr 0.01, cosine
    initial = apc.evaluate_l1(apc.init_apc(cfg, seed=5), corpus)
    model, _ = apc.pretrain(corpus, cfg, seed=5)
    final = apc.evaluate_l1(model, corpus)
    ratio = final / initial
    elapsed = time.perf_counter() - t0
    ok = ratio < 0.05 and elapsed < 120.0
    _verdict(5, "apc-learnability", ok,
             f"l1 {initial:.4f} -> {final:.4f} (ratio {ratio:.3f}), "
             f"{elapsed:.1f}s")
    assert ratio < 0.05, f"loss ratio {ratio:.3f}"
    assert elapsed < 120.0, f"took {elapsed:.1f}s, budget 120s"


# ---------------------------------------------------------------------------
# 6 + 7. the replication experiment and its determinism


@pytest.fixture(scope="module")
def replication():
    cfg = pipeline.ExperimentConfig()
    t0 = time.perf_counter()
    ws = pipeline.build_workspace(cfg, seed=0)
    results = pipeline.run_experiment(ws)
    return ws, results, time.perf_counter() - t0


def test_6_pretraining_and_mtr_help(replication):
    _, results, elapsed = replication
    means = {v: pipeline.mean_summary(s) for v, s in results.items()}

    a_clean = means["apc"]["clean"] - means["baseline"]["clean"]
    a_noisy = means["apc"]["noisy"] - means["baseline"]["noisy"]
    low = {v: means[v]["seen_low_snr"]
           for v in ("baseline-mtr", "apc-mtr", "dnapc-mtr")}
    b_first = low["dnapc-mtr"] - low["apc-mtr"]
    b_second = low["apc-mtr"] - low["baseline-mtr"]

    ok = (a_clean > 0 and a_noisy > 0
          and b_first >= -3e-3 and b_second >= -3e-3
          and elapsed < 1800.0)
    _verdict(6, "replication", ok,
             f"apc-baseline clean {a_clean:+.4f} noisy {a_noisy:+.4f}; "
             f"low-snr mtr {low['baseline-mtr']:.4f} <= {low['apc-mtr']:.4f} "
             f"<= {low['dnapc-mtr']:.4f}; {elapsed / 60:.1f} min")
    assert a_clean > 0, "pretraining should help on the clean test set"
    assert a_noisy > 0, "pretraining should help on the noisy test sets"
    assert b_first >= -3e-3, "denoising pretraining should not hurt under mtr"
    assert b_second >= -3e-3, "pretraining should not hurt under mtr"
    assert elapsed < 1800.0, f"experiment took {elapsed:.0f}s, budget 1800s"


def test_7_baseline_run_is_byte_identical(replication, tmp_path):
    ws, _, _ = replication
    seed = ws.cfg.seeds[0]
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        pipeline.run_variant(ws, "baseline", seed, out_dir=out)
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert set(blobs[0]) == {"eval.csv", "pvad.pvtc", "run.json"}
    same = {name: blobs[0][name] == blobs[1][name] for name in blobs[0]}
    _verdict(7, "determinism", all(same.values()),
             "checkpoint, eval csv and run config byte-identical" if
             all(same.values()) else f"mismatches: {same}")
    assert all(same.values()), f"non-deterministic artifacts: {same}"


# ---------------------------------------------------------------------------
# 8. enrollment window geometry and speaker separation


def test_8_enrollment_geometry_and_margin():
    n_frames = data.frame_count(int(5.0 * 16000), FeatureConfig(), 16000)
    starts = speaker.window_starts(n_frames)
    assert len(starts) == 9
    assert [s * 0.01 for s in starts] == pytest.approx(
        [0.0, 0.4, 0.8, 1.2, 1.6, 2.0, 2.4, 2.8, 3.2])

    margins = []
    for seed in range(5):
        records = data.synth_corpus(4, 5, seed)
        by_spk = {}
        for rec in records:
            by_spk.setdefault(rec.speaker_id, []).append(rec)
        enroll_sets = {s: utts[:3] for s, utts in by_spk.items()}
        heldout = {s: utts[3:] for s, utts in by_spk.items()}

        cfg = FeatureConfig()
        triples = [(log_mel(AudioBuffer(r.samples, r.sample_rate), cfg).frames,
                    data.record_speech_frames(r, cfg), r.speaker_id)
                   for utts in enroll_sets.values() for r in utts]
        dvec, _ = speaker.train_speaker_embedder(
            triples, speaker.compact_config(),
            speaker.EmbedderTrainConfig(), seed)

        profiles = {}
        for spk, utts in sorted(enroll_sets.items()):
            buffers = [AudioBuffer(r.samples, r.sample_rate) for r in utts]
            profiles[spk] = speaker.enroll(dvec, buffers, spk, cfg)
            norm = float(np.linalg.norm(profiles[spk].embedding.vector))
            assert abs(norm - 1.0) < 1e-5

        self_sims, cross_sims = [], []
        for spk, utts in sorted(heldout.items()):
            for rec in utts:
                feats = log_mel(AudioBuffer(rec.samples, rec.sample_rate), cfg)
                for start in speaker.window_starts(feats.frames.shape[0]):
                    window = feats.frames[start:start + speaker.WINDOW_FRAMES]
                    emb = speaker.embed_window(dvec, window)
                    for other, prof in profiles.items():
                        sim = speaker.cosine_similarity(emb, prof.embedding)
                        (self_sims if other == spk else cross_sims).append(sim)
        margin = float(np.mean(self_sims)) - float(np.mean(cross_sims))
        margins.append(margin)
        assert margin > 0.0, f"seed {seed}: margin {margin:.4f}"
    _verdict(8, "enrollment", True,
             "9 windows at 0.4s steps, unit-norm profiles, margins "
             + " ".join(f"{m:+.3f}" for m in margins))
