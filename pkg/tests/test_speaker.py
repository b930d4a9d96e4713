import numpy as np
import pytest

from pvadkit import ConfigError, DivergenceError, FormatError, nncore, speaker
from pvadkit.features import AudioBuffer, FeatureSequence
from pvadkit.util import substream, tensor_checksum

TINY = speaker.DvectorConfig(input_size=8, hidden_size=12, num_layers=1,
                             embedding_dim=16)


def tiny_model(seed=0):
    return speaker.init_dvector(TINY, seed)


def feats(frames):
    return FeatureSequence(np.asarray(frames, dtype=np.float32))


class TestWindowGeometry:
    def test_five_seconds_gives_nine_windows(self):
        # 5.0 s = 80000 samples = 498 frames; starts 0, 40, ..., 320
        starts = speaker.window_starts(498)
        assert starts == list(range(0, 321, 40))
        assert len(starts) == 9

    def test_short_feature_runs(self):
        assert speaker.window_starts(159) == []
        assert speaker.window_starts(160) == [0]
        assert speaker.window_starts(199) == [0]
        assert speaker.window_starts(200) == [0, 40]


class TestEmbedWindow:
    def test_unit_norm_and_deterministic(self):
        model = tiny_model()
        rng = np.random.default_rng(1)
        window = rng.normal(size=(160, 8)).astype(np.float32)
        a = speaker.embed_window(model, window)
        b = speaker.embed_window(model, window)
        assert np.linalg.norm(a.vector) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_wrong_length_rejected(self):
        with pytest.raises(ConfigError):
            speaker.embed_window(tiny_model(), np.zeros((120, 8), dtype=np.float32))

    def test_zero_params_rejected(self):
        model = tiny_model()
        for p in model.named_params().values():
            p[...] = 0.0
        with pytest.raises(DivergenceError):
            speaker.embed_window(model, np.zeros((160, 8), dtype=np.float32))

    def test_embedding_norm_validated(self):
        with pytest.raises(FormatError):
            speaker.SpeakerEmbedding(np.array([0.5, 0.5], dtype=np.float32))


class TestEnroll:
    def enroll_noise(self, model, seconds, seed=2, split=None):
        rng = np.random.default_rng(seed)
        n = int(seconds * 16000)
        samples = rng.uniform(-0.3, 0.3, n)
        if split is None:
            utts = [AudioBuffer(samples)]
        else:
            utts = [AudioBuffer(chunk) for chunk in np.array_split(samples, split)]
        return speaker.enroll(model, utts, speaker_id="spk")

    def test_exact_five_seconds(self):
        model = speaker.init_dvector(
            speaker.DvectorConfig(input_size=40, hidden_size=12, num_layers=1,
                                  embedding_dim=16), 0)
        profile = self.enroll_noise(model, 5.0)
        assert profile.n_windows == 9
        assert profile.total_enrolled_seconds == pytest.approx(5.0)
        assert np.linalg.norm(profile.embedding.vector) == pytest.approx(1.0, abs=1e-6)
        assert profile.speaker_id == "spk"

    def test_windows_never_straddle_utterances(self):
        model = speaker.init_dvector(
            speaker.DvectorConfig(input_size=40, hidden_size=12, num_layers=1,
                                  embedding_dim=16), 0)
        # two 2.5 s halves: 248 frames each -> 3 windows per half
        profile = self.enroll_noise(model, 5.0, split=2)
        assert profile.n_windows == 6

    def test_too_short_rejected(self):
        model = speaker.init_dvector(
            speaker.DvectorConfig(input_size=40, hidden_size=12, num_layers=1,
                                  embedding_dim=16), 0)
        with pytest.raises(ConfigError):
            self.enroll_noise(model, 1.6)

    def test_duplicated_utterance_keeps_profile(self):
        model = tiny_model()
        rng = np.random.default_rng(3)
        frames = rng.normal(size=(500, 8)).astype(np.float32)
        one = speaker.enroll(model, [feats(frames)], speaker_id="s")
        two = speaker.enroll(model, [feats(frames), feats(frames)], speaker_id="s")
        np.testing.assert_allclose(two.embedding.vector, one.embedding.vector,
                                   atol=1e-6)
        assert two.n_windows == 2 * one.n_windows

    def test_feature_sequences_accepted(self):
        model = tiny_model()
        frames = np.random.default_rng(4).normal(size=(520, 8)).astype(np.float32)
        profile = speaker.enroll(model, [feats(frames)], speaker_id="s")
        assert profile.total_enrolled_seconds == pytest.approx(5.2)


class TestCosine:
    def test_identity_orthogonal_opposite(self):
        e1 = np.zeros(16, dtype=np.float32)
        e1[0] = 1.0
        e2 = np.zeros(16, dtype=np.float32)
        e2[1] = 1.0
        a = speaker.SpeakerEmbedding(e1)
        b = speaker.SpeakerEmbedding(e2)
        neg = speaker.SpeakerEmbedding(-e1)
        assert speaker.cosine_similarity(a, a) == 1.0
        assert speaker.cosine_similarity(a, b) == 0.0
        assert speaker.cosine_similarity(a, neg) == -1.0

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        v1 = rng.normal(size=16)
        v2 = rng.normal(size=16)
        a = speaker.SpeakerEmbedding((v1 / np.linalg.norm(v1)).astype(np.float32))
        b = speaker.SpeakerEmbedding((v2 / np.linalg.norm(v2)).astype(np.float32))
        assert speaker.cosine_similarity(a, b) == speaker.cosine_similarity(b, a)


class TestFramewiseSimilarity:
    def test_range_and_length(self):
        model = tiny_model()
        rng = np.random.default_rng(6)
        f = feats(rng.normal(size=(300, 8)))
        profile = speaker.enroll(model, [feats(rng.normal(size=(500, 8)))],
                                 speaker_id="s")
        s = speaker.framewise_similarity(model, f, profile)
        assert s.shape == (300,)
        assert s.dtype == np.float32
        assert np.all(s >= -1.0) and np.all(s <= 1.0)

    def test_causal(self):
        model = tiny_model()
        rng = np.random.default_rng(7)
        frames = rng.normal(size=(200, 8)).astype(np.float32)
        profile = speaker.enroll(model, [feats(rng.normal(size=(500, 8)))],
                                 speaker_id="s")
        s_full = speaker.framewise_similarity(model, feats(frames), profile)
        perturbed = frames.copy()
        perturbed[150:] += 5.0
        s_pert = speaker.framewise_similarity(model, feats(perturbed), profile)
        np.testing.assert_array_equal(s_full[:150], s_pert[:150])
        assert not np.array_equal(s_full[150:], s_pert[150:])

    def test_own_direction_scores_one(self):
        model = tiny_model()
        rng = np.random.default_rng(8)
        window = rng.normal(size=(160, 8)).astype(np.float32)
        emb = speaker.embed_window(model, window)
        profile = speaker.EnrollmentProfile("s", emb, 1, 5.0)
        s = speaker.framewise_similarity(model, feats(window), profile)
        assert s[-1] == pytest.approx(1.0, abs=1e-6)

    def test_batch_matches_single(self):
        model = tiny_model()
        rng = np.random.default_rng(9)
        fs = [feats(rng.normal(size=(t, 8))) for t in (120, 250, 80)]
        profile = speaker.enroll(model, [feats(rng.normal(size=(500, 8)))],
                                 speaker_id="s")
        batch = speaker.framewise_similarity_batch(model, fs, profile)
        for f, s in zip(fs, batch):
            np.testing.assert_allclose(
                s, speaker.framewise_similarity(model, f, profile), atol=2e-6)

    def test_scoring_leaves_params_untouched(self):
        model = tiny_model()
        before = tensor_checksum(sorted(model.named_params().items()))
        rng = np.random.default_rng(10)
        profile = speaker.enroll(model, [feats(rng.normal(size=(500, 8)))],
                                 speaker_id="s")
        speaker.framewise_similarity(model, feats(rng.normal(size=(100, 8))),
                                     profile)
        assert tensor_checksum(sorted(model.named_params().items())) == before


class TestSerialization:
    def test_model_round_trip(self, tmp_path):
        model = tiny_model(3)
        path = tmp_path / "dvec.pvtc"
        speaker.save_dvector(path, model, {"seed": 3})
        back = speaker.load_dvector(path)
        assert back.cfg == model.cfg
        for name, param in model.named_params().items():
            np.testing.assert_array_equal(back.named_params()[name], param)

    def test_profile_round_trip(self, tmp_path):
        vec = np.zeros(16, dtype=np.float32)
        vec[3] = 1.0
        profile = speaker.EnrollmentProfile("alice", speaker.SpeakerEmbedding(vec),
                                            9, 5.0)
        path = tmp_path / "alice.pvtc"
        speaker.save_profile(path, profile)
        back = speaker.load_profile(path)
        assert back.speaker_id == "alice"
        assert back.n_windows == 9
        np.testing.assert_array_equal(back.embedding.vector, vec)

    def test_wrong_kind_rejected(self, tmp_path):
        from pvadkit import container
        path = tmp_path / "x.pvtc"
        container.save_tensors(path, {"w": np.zeros(3, dtype=np.float32)},
                               {"kind": "other"})
        with pytest.raises(FormatError):
            speaker.load_dvector(path)


class TestParamCount:
    def test_canonical_is_about_1_4m(self):
        cfg = speaker.DvectorConfig()
        model = speaker.init_dvector(cfg, 0)
        expected = nncore.lstm_param_count(40, 256, 3) + 256 * 256 + 256
        assert model.param_count() == expected
        assert 1_300_000 <= expected <= 1_500_000


class TestSubstituteTraining:
    def make_corpus(self, rng, n_speakers=3, utts_per_speaker=4, t=360):
        # speakers are fixed random feature templates plus small noise
        corpus = []
        for s in range(n_speakers):
            template = substream(11, "spk-template", s).normal(size=8) * 2.0
            for _ in range(utts_per_speaker):
                frames = template + rng.normal(scale=0.3, size=(t, 8))
                corpus.append((frames.astype(np.float32),
                               np.ones(t, dtype=bool), f"spk{s}"))
        return corpus

    def test_training_learns_speaker_geometry(self):
        rng = np.random.default_rng(12)
        corpus = self.make_corpus(rng)
        cfg = speaker.EmbedderTrainConfig(epochs=3, window_shift=40)
        model, history = speaker.train_speaker_embedder(corpus, TINY, cfg, seed=13)
        assert history[-1] < history[0]

        holdout = self.make_corpus(np.random.default_rng(99))
        embs = {}
        for frames, _, spk in holdout[::4]:
            embs[spk] = speaker.embed_window(model, frames[:160])
        same = speaker.cosine_similarity(
            embs["spk0"],
            speaker.embed_window(model, holdout[1][0][:160]))
        cross = speaker.cosine_similarity(embs["spk0"], embs["spk1"])
        assert same > cross

    def test_single_speaker_rejected(self):
        rng = np.random.default_rng(14)
        corpus = [(rng.normal(size=(200, 8)).astype(np.float32),
                   np.ones(200, dtype=bool), "only")]
        with pytest.raises(ConfigError):
            speaker.train_speaker_embedder(
                corpus, TINY, speaker.EmbedderTrainConfig(), seed=0)

    def test_training_is_seeded(self):
        rng = np.random.default_rng(15)
        corpus = self.make_corpus(rng, n_speakers=2, utts_per_speaker=2)
        cfg = speaker.EmbedderTrainConfig(epochs=1)
        m1, h1 = speaker.train_speaker_embedder(corpus, TINY, cfg, seed=5)
        m2, h2 = speaker.train_speaker_embedder(corpus, TINY, cfg, seed=5)
        assert h1 == h2
        for a, b in zip(m1.named_params().values(), m2.named_params().values()):
            np.testing.assert_array_equal(a, b)
