import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from kda.datahub import SynthConfig, generate_synthetic
from kda.evaluation import (
    PredictionRecord,
    evaluate,
    export_embeddings,
    harmonic_mean,
    load_embeddings,
    mean_class_accuracy,
    predict,
)
from kda.gradcore import DomainError
from kda.model import ModelConfig, init_model


class TestPredict:
    def test_exact_match(self):
        reps = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]])
        (p,) = predict(reps[2:3], reps, [0, 1, 2])
        assert p.predicted_class == 2 and p.distances[2] == 0.0

    def test_tie_lowest_id(self):
        reps = np.array([[1.0], [-1.0]])
        (p,) = predict(np.array([[0.0]]), reps, [7, 3])
        assert p.predicted_class == 3

    def test_one_dimensional(self):
        (p,) = predict(np.array([[0.4]]), np.array([[0.0], [1.0]]), [0, 1])
        assert p.predicted_class == 0
        np.testing.assert_allclose(p.distances, [0.4, 0.6])

    def test_empty_candidates(self):
        with pytest.raises(DomainError):
            predict(np.zeros((1, 2)), np.zeros((0, 2)), [])

    @given(arrays(np.float64, (5, 3), elements=st.floats(-4, 4)),
           arrays(np.float64, (4, 3), elements=st.floats(-4, 4)),
           st.floats(0.01, 100))
    def test_rescaling_invariant(self, z, reps, c):
        # scaling all coordinates by c scales every distance by c
        a = [p.predicted_class for p in predict(z, reps, [0, 1, 2, 3])]
        b = [p.predicted_class for p in predict(z * c, reps * c, [0, 1, 2, 3])]
        d = predict(z, reps, [0, 1, 2, 3])
        # skip near-ties where rounding can flip the argmin
        gaps = [np.sort(p.distances)[1] - np.sort(p.distances)[0] for p in d]
        for i in range(5):
            if gaps[i] > 1e-9:
                assert a[i] == b[i]


def _preds(pairs):
    return [PredictionRecord(str(i), t, p, np.zeros(0)) for i, (t, p) in enumerate(pairs)]


class TestMeanClassAccuracy:
    def test_all_correct(self):
        assert mean_class_accuracy(_preds([(0, 0), (1, 1)]), [0, 1]) == 1.0

    def test_unweighted(self):
        preds = _preds([(0, 0)] * 10 + [(1, 0)])
        assert mean_class_accuracy(preds, [0, 1]) == 0.5
        assert mean_class_accuracy(preds, [0, 1]) != pytest.approx(10 / 11)

    def test_all_wrong(self):
        assert mean_class_accuracy(_preds([(0, 1), (1, 0)]), [0, 1]) == 0.0

    def test_class_without_samples(self):
        with pytest.raises(DomainError, match="class 2"):
            mean_class_accuracy(_preds([(0, 0)]), [0, 2])


class TestHarmonicMean:
    def test_known_row(self):
        assert harmonic_mean(83.98, 27.21) == pytest.approx(41.10, abs=0.01)

    def test_equal(self):
        assert harmonic_mean(0.37, 0.37) == pytest.approx(0.37, abs=1e-15)

    def test_zero(self):
        assert harmonic_mean(0.9, 0.0) == 0.0 and harmonic_mean(0.0, 0.0) == 0.0

    def test_negative(self):
        with pytest.raises(DomainError):
            harmonic_mean(-0.1, 0.5)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_bounds(self, s, u):
        hm = harmonic_mean(s, u)
        assert min(s, u) - 1e-15 <= hm <= max(s, u) + 1e-15


class TestEvaluate:
    def _perfect(self):
        """Noise-free data and a model whose common space reproduces the class representatives.

        Audio features are one-hot-coded per class; e_av maps the fused code
        to the class's text embedding directly (relu-safe by construction).
        """
        ds = generate_synthetic(SynthConfig(samples_per_class=4, modality_noise=0.0, cluster_spread=0.0,
                                            audio_dim=8, visual_dim=8, text_dim=8, seed=2))
        for r in ds.records:
            r.audio = np.eye(8)[r.class_id]
        cfg = ModelConfig(audio_dim=8, visual_dim=8, text_dim=8, hidden_dim=8, common_dim=8,
                          unimodal_mode="audio-only")
        m = init_model(cfg, 0)
        eye = np.eye(8)
        for prefix in ("a_enc", "a_proj", "e_t"):
            m[f"{prefix}.w1"].data[...] = eye
            m[f"{prefix}.w2"].data[...] = eye
        # e_t is identity on non-negative inputs only, so shift text by a constant
        for k in ds.knowledge:
            k.embeddings = k.embeddings - k.embeddings.min() + 1.0
        text = np.stack([k.embeddings[0] for k in ds.knowledge])
        m["e_av.w1"].data[...] = eye
        m["e_av.w2"].data[...] = text
        return m, ds

    def test_perfect_model(self):
        m, ds = self._perfect()
        r = evaluate(m, ds)
        assert (r.S, r.U, r.HM, r.ZSL) == (1.0, 1.0, 1.0, 1.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_zsl_at_least_u(self, seed, small_ds):
        r = evaluate(init_model(ModelConfig(audio_dim=8, visual_dim=7, text_dim=6, hidden_dim=8, common_dim=4), seed),
                     small_ds)
        assert r.ZSL >= r.U

    def test_random_model_near_chance(self):
        ds = generate_synthetic(SynthConfig(seen_count=3, unseen_count=3, samples_per_class=20, audio_dim=8,
                                            visual_dim=8, text_dim=8, seed=4))
        cfg = ModelConfig(audio_dim=8, visual_dim=8, text_dim=8, hidden_dim=16, common_dim=8)
        # Monte-Carlo over random initialisations: mean GZSL accuracy over 6 classes sits near 1/6
        accs = []
        for seed in range(30):
            r = evaluate(init_model(cfg, seed), ds)
            accs.append((r.S * 3 + r.U * 3) / 6)
        assert 0.05 < np.mean(accs) < 0.35

    def test_deterministic(self, small_ds):
        m = init_model(ModelConfig(audio_dim=8, visual_dim=7, text_dim=6, hidden_dim=8, common_dim=4), 0)
        assert evaluate(m, small_ds) == evaluate(m, small_ds)

    def test_modes(self, small_ds):
        m = init_model(ModelConfig(audio_dim=8, visual_dim=7, text_dim=6, hidden_dim=8, common_dim=4), 0)
        full = evaluate(m, small_ds)
        assert evaluate(m, small_ds, "zsl").ZSL == full.ZSL and np.isnan(evaluate(m, small_ds, "zsl").S)
        assert evaluate(m, small_ds, "gzsl").HM == full.HM


class TestExport:
    def test_round_trip(self, tmp_path, small_ds):
        from kda.evaluation import class_representatives, embed_samples

        m = init_model(ModelConfig(audio_dim=8, visual_dim=7, text_dim=6, hidden_dim=8, common_dim=4), 0)
        n = export_embeddings(m, small_ds, tmp_path / "emb.jsonl")
        assert n == len(small_ds.records) + len(small_ds.knowledge)
        samples, know = load_embeddings(tmp_path / "emb.jsonl")
        ref = embed_samples(m, small_ds, [r.id for r in small_ds.records])
        assert all(np.array_equal(s["embedding"], row) for s, row in zip(samples, ref))
        reps = class_representatives(m, small_ds, sorted(k.class_id for k in small_ds.knowledge))
        assert all(k["knowledge"] is True for k in know)
        assert all(np.array_equal(k["embedding"], row) for k, row in zip(know, reps))

    def test_io_error_names_path(self, small_ds, tmp_path):
        m = init_model(ModelConfig(audio_dim=8, visual_dim=7, text_dim=6, hidden_dim=8, common_dim=4), 0)
        with pytest.raises(OSError, match="missing"):
            export_embeddings(m, small_ds, tmp_path / "missing" / "x.jsonl")
