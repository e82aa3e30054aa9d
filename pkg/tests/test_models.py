import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isvkit.dataio import load_checkpoint, save_checkpoint
from isvkit.errors import (
    CompositionError, ConfigError, DimensionError, LabelError, RangeError, UndefinedScoreError,
)
from isvkit.evaluation import evaluate_system, inbatch_pairs
from isvkit.models import (
    E2EISV, BackendConfig, BackendNet, E2ENet, EncoderConfig, ModularBackend, MultiTaskFrontend,
    MultiTaskNet, PADClassifier, cosine_score, estimator_from_checkpoint, make_backend_input,
    sample_training_trials, shape_sv_score,
)
from isvkit.synth import SynthWorldConfig, synth_embedding_world, synth_feature_world


@pytest.fixture(scope="module")
def tiny_features():
    w = synth_feature_world(SynthWorldConfig(n_train_speakers=4, n_eval_speakers=2, n_bonafide=4,
                                             n_replay=4, n_frames=8, seed=1))
    return w


def mtl_net(seed=0, n_frames=8, mfm=True):
    return MultiTaskNet(EncoderConfig((4, 4), mfm, 2, 16, n_frames), 5, np.random.default_rng(seed))


class TestEncoder:
    def test_batch_of_one(self):
        net = mtl_net()
        assert net.embed(np.zeros((1, 8, 64))).shape == (1, 16)

    def test_identical_utterances_identical_embeddings(self):
        x = np.random.default_rng(0).standard_normal((8, 64))
        emb = mtl_net().embed(np.stack([x, x]))
        assert emb[0].tobytes() == emb[1].tobytes()

    def test_wrong_feature_width(self):
        with pytest.raises(DimensionError, match="64"):
            mtl_net().embed(np.zeros((2, 8, 40)))

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            EncoderConfig(embedding_dim=0)
        with pytest.raises(ValueError):
            EncoderConfig(channels=(3, 4), mfm=True)
        EncoderConfig(channels=(3, 5), mfm=False)

    def test_relu_variant(self):
        assert mtl_net(mfm=False).embed(np.ones((2, 8, 64))).shape == (2, 16)

    def test_same_seed_bitwise(self, tiny_features):
        w = tiny_features
        a = MultiTaskFrontend(n_steps=5, seed=3, embedding_dim=8).fit(w.train.X, w.train.speakers,
                                                                      w.train.bonafide)
        b = MultiTaskFrontend(n_steps=5, seed=3, embedding_dim=8).fit(w.train.X, w.train.speakers,
                                                                      w.train.bonafide)
        assert a.transform(w.eval.X).tobytes() == b.transform(w.eval.X).tobytes()

    def test_intra_speaker_cosine_beats_inter(self):
        gaps = []
        for seed in range(5):
            w = synth_feature_world(SynthWorldConfig(seed=seed), dtype=np.float32)
            m = MultiTaskFrontend(seed=seed, pad_weight=0.0, n_steps=300)
            m.fit(w.train.X, w.train.speakers, w.train.bonafide)
            E = m.transform(w.eval.X)
            E /= np.linalg.norm(E, axis=1, keepdims=True)
            C = E @ E.T
            same = w.eval.speakers[:, None] == w.eval.speakers[None]
            off = ~np.eye(len(E), dtype=bool)
            gaps.append(C[same & off].mean() - C[~same].mean())
        assert np.median(gaps) > 0


class TestMultiTaskHeads:
    def test_ranges(self):
        rng = np.random.default_rng(0)
        logits, pad, _ = mtl_net().forward(rng.standard_normal((6, 8, 64)) * 5)
        assert np.all((pad > 0) & (pad < 1))
        from isvkit.numcore import softmax
        np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-9)

    def test_unknown_speaker_when_continuing(self, tiny_features):
        w = tiny_features
        m = MultiTaskFrontend(n_steps=1, warm_start=True, embedding_dim=8)
        m.fit(w.train.X, w.train.speakers, w.train.bonafide)
        with pytest.raises(LabelError, match="spk9"):
            m.fit(w.train.X[:2], ["spk9", "spk9"], [True, True])

    def test_predict_returns_speaker_ids(self, tiny_features):
        w = tiny_features
        m = MultiTaskFrontend(n_steps=2, embedding_dim=8).fit(w.train.X, w.train.speakers,
                                                              w.train.bonafide)
        assert set(m.predict(w.train.X)) <= set(w.train.speakers)
        np.testing.assert_allclose(m.predict_proba(w.train.X).sum(axis=1), 1.0, atol=1e-9)

    def test_pad_head_at_chance_without_coloration(self):
        eers = []
        for seed in range(5):
            w = synth_feature_world(SynthWorldConfig(seed=seed, channel_shift=0.0), dtype=np.float32)
            m = MultiTaskFrontend(seed=seed, sid_weight=0.0, n_steps=300)
            m.fit(w.train.X, w.train.speakers, w.train.bonafide)
            scores = dict(zip(w.eval.ids, m.predict_pad_proba(w.eval.X)))
            eers.append(evaluate_system(lambda a, b: np.array(b), w.eval_trials(), scores)[0].pad_eer)
        assert abs(np.median(eers) - 50.0) <= 5.0

    def test_sid_fits_noiseless_templates(self):
        w = synth_feature_world(SynthWorldConfig(n_train_speakers=6, n_eval_speakers=2,
                                                 n_bonafide=4, n_replay=0, noise=1e-3,
                                                 n_states=1, seed=0))
        m = MultiTaskFrontend(pad_weight=0.0, n_steps=200, precision="float64")
        m.fit(w.train.X, w.train.speakers, w.train.bonafide)
        assert np.mean(m.predict(w.train.X) == w.train.speakers) == 1.0


class TestE2E:
    def test_no_pairs_is_composition_error(self):
        net = E2ENet(EncoderConfig((2, 2), True, 2, 4, 4), 2, np.random.default_rng(0))
        with pytest.raises(CompositionError):
            net.loss_and_backward(np.zeros((2, 4, 64)), [0, 1], [1.0, 0.0],
                                  np.array([], int), np.array([], int), np.array([], int))

    def test_two_utterance_batches(self):
        ei, ti, codes = inbatch_pairs([0, 0], [True, True])
        assert codes.tolist() == [0, 0]
        ei, ti, codes = inbatch_pairs([0, 1], [True, True])
        assert codes.tolist() == [1, 1]

    def test_scores_are_probabilities(self, tiny_features):
        w = tiny_features
        m = E2EISV(n_steps=3, embedding_dim=8, speakers_per_batch=3, utts_per_speaker=4)
        m.fit(w.train.X, w.train.speakers, w.train.bonafide)
        s = m.score(w.eval.X[:3], w.eval.X[3:6])
        assert s.shape == (3,) and np.all((s > 0) & (s < 1))
        assert len(m.loss_log_) == 3

    def test_log_totals_are_unit_weight_sums(self, tiny_features):
        w = tiny_features
        m = E2EISV(n_steps=4, embedding_dim=8).fit(w.train.X, w.train.speakers, w.train.bonafide)
        for line in m.loss_log_:
            f = {k: float(v) for k, v in (kv.split("=") for kv in line.split())}
            assert abs(f["total"] - (f["sid"] + f["pad"] + f["isv"])) <= 1e-9


class TestScoreShaping:
    @pytest.mark.parametrize("x", [-3.0, 0.0, -1e300])
    def test_nonpositive_gives_half(self, x):
        assert shape_sv_score(x) == 0.5

    def test_two(self):
        assert shape_sv_score(2.0) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)
        assert shape_sv_score(2.0) == pytest.approx(0.8807970779, abs=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_range(self, x):
        v = float(shape_sv_score(x))
        assert 0.5 <= v < 1.0
        if x <= 0:
            assert v == 0.5


def backend(dim=6, seed=0, **kw):
    return BackendNet(dim, BackendConfig(**kw), np.random.default_rng(seed))


class TestBackendNet:
    def test_sv_output_in_open_interval(self):
        rng = np.random.default_rng(0)
        raw, p = backend().sv_branch(rng.standard_normal((20, 6)), rng.standard_normal((20, 6)))
        assert np.all((p > 0) & (p < 1))

    def test_zero_embeddings(self):
        out = backend().forward(np.zeros((1, 6)), np.zeros((1, 6)), 1.0)
        assert np.all(out["fused"][:, 0] >= 0.5)
        assert 0 < out["sv_prob"][0] < 1

    def test_both_orders_valid(self):
        rng = np.random.default_rng(1)
        e, t = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
        net = backend()
        for a, b in ((e, t), (t, e)):
            out = net.forward(a, b, 0.5)
            assert np.all((out["score"] > 0) & (out["score"] < 1))

    def test_dimension_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"6.*5"):
            backend().forward(np.zeros((1, 6)), np.zeros((1, 5)), 1.0)

    def test_pad_product_feature(self):
        rng = np.random.default_rng(2)
        e, t = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        net = backend()
        zero = net.forward(e, t, 0.0)["fused"]
        assert np.all(zero[:, 2] == 0)
        one = net.forward(e, t, 1.0)["fused"]
        np.testing.assert_array_equal(one[:, 2], one[:, 0])

    @pytest.mark.parametrize("pad", [-0.1, 1.5, np.nan])
    def test_pad_range(self, pad):
        with pytest.raises(RangeError):
            backend().forward(np.zeros((1, 6)), np.ones((1, 6)), pad)

    def test_outputs(self):
        rng = np.random.default_rng(3)
        out = backend().forward(rng.standard_normal((9, 6)), rng.standard_normal((9, 6)),
                                rng.uniform(0, 1, 9))
        np.testing.assert_allclose(out["probs"].sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(out["score"], out["probs"][:, 0])
        assert np.all((out["shaped"] >= 0.5) & (out["shaped"] < 1))

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            BackendConfig(n_layers=0)
        with pytest.raises(ValueError):
            BackendConfig(alpha=-1)


class TestCosine:
    def test_identical(self):
        assert cosine_score([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_score([1.0, 0.0], [0.0, 5.0]) == 0.0

    def test_formula_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.standard_normal(7), rng.standard_normal(7)
            ref = float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))
            assert abs(cosine_score(a, b) - ref) < 1e-12

    def test_rows(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        np.testing.assert_allclose(cosine_score(a, b), [cosine_score(x, y) for x, y in zip(a, b)])

    def test_zero_vector(self):
        with pytest.raises(UndefinedScoreError):
            cosine_score([0.0, 0.0], [1.0, 0.0])


@pytest.fixture(scope="module")
def trial_data():
    w = synth_embedding_world(SynthWorldConfig(n_train_speakers=8, n_eval_speakers=2, dim=8,
                                               n_bonafide=4, n_replay=4, seed=2))
    ei, ti, types = sample_training_trials(w.train.speakers, w.train.bonafide, 50, seed=0)
    pad = np.random.default_rng(0).uniform(0, 1, len(ei))
    X = make_backend_input(w.train.X[ei], w.train.X[ti], pad)
    return w, ei, ti, types, X


class TestModularBackend:
    def test_sampled_trials_follow_definitions(self, trial_data):
        w, ei, ti, types, _ = trial_data
        assert np.bincount(types).tolist() == [50, 50, 50]
        assert np.all(w.train.bonafide[ei])
        same = w.train.speakers[ei] == w.train.speakers[ti]
        assert np.all(same[types == 0] & w.train.bonafide[ti][types == 0])
        assert np.all(~same[types == 1])
        assert np.all(same[types == 2] & ~w.train.bonafide[ti][types == 2])
        assert np.all(ei != ti)

    def test_pad_labels_used_in_training(self, trial_data):
        *_, types, X = trial_data
        m = ModularBackend(n_layers=1, n_nodes=8, n_steps=5, batch_size=12, log_batches=True)
        m.fit(X, types)
        for batch_types, pad_in in m.batch_log_:
            np.testing.assert_array_equal(pad_in, (batch_types != 2).astype(float))

    def test_pad_predictions_used_when_disabled(self, trial_data):
        *_, types, X = trial_data
        m = ModularBackend(n_layers=1, n_nodes=8, n_steps=3, batch_size=12, log_batches=True,
                           use_pad_labels=False)
        m.fit(X, types)
        pads = set(X[:, -1].tolist())
        for _, pad_in in m.batch_log_:
            assert set(pad_in.tolist()) <= pads

    def test_batch_mix(self, trial_data):
        *_, types, X = trial_data
        m = ModularBackend(n_layers=1, n_nodes=8, n_steps=1, batch_size=20, log_batches=True,
                           type_mix=(2, 1, 1))
        m.fit(X, types)
        assert np.bincount(m.batch_log_[0][0]).tolist() == [10, 5, 5]
        with pytest.raises(ConfigError):
            ModularBackend(type_mix=(1, 1), n_steps=1).fit(X, types)
        with pytest.raises(LabelError):
            ModularBackend(n_steps=1).fit(X[types == 1], types[types == 1])

    def test_log_totals_follow_alpha(self, trial_data):
        *_, types, X = trial_data
        m = ModularBackend(n_layers=1, n_nodes=8, n_steps=4).fit(X, types)
        for line in m.loss_log_:
            f = {k: float(v) for k, v in (kv.split("=") for kv in line.split())}
            assert abs(f["total"] - (20 * f["sv"] + f["isv"])) <= 1e-9

    def test_alpha_zero_warns(self, trial_data):
        *_, types, X = trial_data
        with pytest.warns(RuntimeWarning, match="overfit"):
            ModularBackend(alpha=0.0, n_layers=1, n_nodes=4, n_steps=1).fit(X, types)

    def test_scores_and_labels(self, trial_data):
        *_, types, X = trial_data
        m = ModularBackend(n_layers=1, n_nodes=8, n_steps=2).fit(X, types)
        s = m.decision_function(X)
        assert np.all((s > 0) & (s < 1))
        assert set(m.predict(X)) <= {"accept", "reject"}
        with pytest.raises(DimensionError):
            m.decision_function(X[:, 1:])


def _train_two_ways(make, fit, tmp_path):
    whole = fit(make(n_steps=6))
    part = fit(make(n_steps=3))
    save_checkpoint(part.to_checkpoint(), tmp_path / "m.ckpt")
    resumed = estimator_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    resumed.set_params(warm_start=True)
    fit(resumed)
    return whole, resumed


def _assert_same(a, b):
    ca, cb = a.to_checkpoint(), b.to_checkpoint()
    assert ca.step == cb.step == 6
    for k in ca.tensors:
        assert ca.tensors[k].tobytes() == cb.tensors[k].tobytes(), k
    for k in ca.optimizer_tensors:
        assert ca.optimizer_tensors[k].tobytes() == cb.optimizer_tensors[k].tobytes(), k
    assert a.loss_log_[3:] == b.loss_log_


class TestResume:
    def test_backend(self, trial_data, tmp_path):
        *_, types, X = trial_data
        whole, resumed = _train_two_ways(
            lambda **kw: ModularBackend(n_layers=2, n_nodes=8, seed=4, **kw),
            lambda m: m.fit(X, types), tmp_path)
        _assert_same(whole, resumed)
        np.testing.assert_array_equal(whole.decision_function(X), resumed.decision_function(X))

    def test_frontend(self, tiny_features, tmp_path):
        w = tiny_features
        whole, resumed = _train_two_ways(
            lambda **kw: MultiTaskFrontend(embedding_dim=8, seed=1, precision="float64", **kw),
            lambda m: m.fit(w.train.X, w.train.speakers, w.train.bonafide), tmp_path)
        _assert_same(whole, resumed)

    def test_e2e(self, tiny_features, tmp_path):
        w = tiny_features
        whole, resumed = _train_two_ways(
            lambda **kw: E2EISV(embedding_dim=8, isv_hidden=(8,), seed=2, **kw),
            lambda m: m.fit(w.train.X, w.train.speakers, w.train.bonafide), tmp_path)
        _assert_same(whole, resumed)

    def test_pad_classifier(self, trial_data, tmp_path):
        w = trial_data[0]
        whole, resumed = _train_two_ways(
            lambda **kw: PADClassifier(hidden=(4,), seed=5, **kw),
            lambda m: m.fit(w.train.X, w.train.bonafide), tmp_path)
        _assert_same(whole, resumed)

    def test_unknown_estimator(self, trial_data):
        *_, types, X = trial_data
        ck = ModularBackend(n_layers=1, n_nodes=4, n_steps=1).fit(X, types).to_checkpoint()
        ck.architecture["estimator"] = "Mystery"
        with pytest.raises(ConfigError):
            estimator_from_checkpoint(ck)


def test_divergence_is_reported(trial_data):
    from isvkit.errors import TrainingDivergenceError
    *_, types, X = trial_data
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(TrainingDivergenceError):
            ModularBackend(n_layers=1, n_nodes=4, n_steps=50, lr=1e200).fit(X * 1e150, types)
