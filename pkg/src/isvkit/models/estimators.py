"""scikit-learn style estimators around the network graphs.

All estimators train with AMSGrad and draw each minibatch from a generator
seeded by ``(seed, step)``, so ``fit`` with ``n_steps=2k`` equals ``fit``
with ``n_steps=k`` followed by a warm-started ``fit`` for ``k`` more steps,
including after a checkpoint round-trip.
"""

import logging
import warnings

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..dataio import ModelCheckpoint
from ..errors import ConfigError, DimensionError, LabelError, TrainingDivergenceError
from ..evaluation import TRIAL_TYPES, as_bonafide, inbatch_pairs
from ..losses import LossReport, bce, bce_logit_grad
from ..numcore import AMSGrad, softmax
from .networks import (
    ACCEPT, REJECT, BackendConfig, BackendNet, E2ENet, EncoderConfig, MultiTaskNet, mlp,
    named_params, zero_grad,
)

log = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _dtype(precision):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ConfigError(f"precision must be float32 or float64, got {precision!r}") from None


def _check_features(X):
    X = np.asarray(X)
    if X.ndim != 3:
        raise DimensionError(f"expected (n_utterances, frames, bands) features, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or Inf")
    return X


def _batched(fn, X, size=256):
    return np.concatenate([fn(X[i:i + size]) for i in range(0, len(X), size)]) if len(X) else fn(X)


class _NetEstimator(BaseEstimator):
    """Shared training loop, logging and checkpoint plumbing."""

    def _modules(self):
        return self.net_.modules()

    def _init_training(self):
        self.optimizer_ = AMSGrad(named_params(self._modules()), lr=self.lr,
                                  weight_decay=self.weight_decay)
        self.step_ = 0
        self.loss_log_ = []

    def _run(self, n_steps, step_fn):
        for _ in range(n_steps):
            rng = np.random.default_rng([self.seed, self.step_])
            zero_grad(self._modules())
            report = step_fn(rng)
            if not np.isfinite(report.total):
                raise TrainingDivergenceError(f"non-finite loss at step {self.step_}")
            self.optimizer_.step()
            line = report.log_line(self.step_)
            self.loss_log_.append(line)
            log.debug(line)
            self.step_ += 1

    def _should_reset(self):
        return not (self.warm_start and hasattr(self, "net_"))

    def _state(self):
        return {}

    def to_checkpoint(self):
        check_is_fitted(self, "net_")
        tensors = {n: layer.params[k] for n, layer, k in named_params(self._modules())}
        arch = {"estimator": type(self).__name__, "params": _jsonable(self.get_params()),
                "state": self._state()}
        return ModelCheckpoint(arch, tensors, self.optimizer_.state.hyperparams(),
                               self.optimizer_.state_arrays(), int(self.seed), int(self.step_),
                               {"loss_log_tail": self.loss_log_[-1:]})

    @classmethod
    def _from_checkpoint(cls, ckpt):
        params = dict(ckpt.architecture["params"])
        for k, v in params.items():
            if isinstance(v, list):
                params[k] = tuple(v)
        est = cls(**params)
        est._restore(ckpt.architecture["state"])
        for n, layer, k in named_params(est._modules()):
            if n not in ckpt.tensors:
                raise ConfigError(f"checkpoint lacks parameter {n}")
            src = ckpt.tensors[n]
            if src.shape != layer.params[k].shape:
                raise DimensionError(f"parameter {n}: checkpoint shape {src.shape} "
                                     f"!= model shape {layer.params[k].shape}")
            layer.params[k] = src.copy()
        est._init_training()
        est.optimizer_.load_state(ckpt.optimizer, ckpt.optimizer_tensors)
        est.step_ = ckpt.step
        est.loss_log_ = []
        return est


def _jsonable(params):
    out = {}
    for k, v in params.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


class MultiTaskFrontend(_NetEstimator, TransformerMixin):
    """MFM-CNN encoder with SID and PAD heads.

    ``sid_weight``/``pad_weight`` select the objective: (1, 0) trains a
    speaker identifier, (0, 1) a PAD system, (1, 1) the multi-task model.
    ``transform`` returns speaker embeddings from the last hidden layer.
    """

    def __init__(self, channels=(8, 16, 16), embedding_dim=64, mfm=True, sid_weight=1.0,
                 pad_weight=1.0, n_steps=600, batch_size=32, lr=1e-3, weight_decay=1e-4,
                 seed=0, precision="float32", warm_start=False):
        self.channels = channels
        self.embedding_dim = embedding_dim
        self.mfm = mfm
        self.sid_weight = sid_weight
        self.pad_weight = pad_weight
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.precision = precision
        self.warm_start = warm_start

    def _encoder_config(self, n_frames):
        return EncoderConfig(tuple(self.channels), self.mfm, 2, self.embedding_dim, n_frames)

    def _build(self, n_frames, classes):
        self.classes_ = np.asarray(classes)
        self.n_frames_ = int(n_frames)
        rng = np.random.default_rng(self.seed)
        self.net_ = MultiTaskNet(self._encoder_config(n_frames), len(classes), rng,
                                 _dtype(self.precision))

    def _state(self):
        return {"classes": [str(c) for c in self.classes_], "n_frames": self.n_frames_}

    def _restore(self, state):
        self._build(state["n_frames"], state["classes"])

    def _encode_labels(self, y):
        codes = np.searchsorted(self.classes_, y)
        codes = np.clip(codes, 0, len(self.classes_) - 1)
        unknown = self.classes_[codes] != np.asarray(y)
        if unknown.any():
            raise LabelError(f"unknown speaker ids {sorted(set(np.asarray(y)[unknown].tolist()))[:5]}")
        return codes

    def fit(self, X, y, bonafide):
        """Train on features ``X`` with speaker ids ``y`` and spoof labels ``bonafide``."""
        X = _check_features(X)
        bona = as_bonafide(bonafide).astype(np.float64)
        y = np.asarray(y)
        if len(X) != len(y) or len(y) != len(bona):
            raise DimensionError("X, y and bonafide differ in length")
        if self._should_reset():
            self._build(X.shape[1], np.unique(y))
            self._init_training()
        codes = self._encode_labels(y)
        X = X.astype(self.net_.dtype, copy=False)
        weights = (float(self.sid_weight), float(self.pad_weight))

        def step(rng):
            idx = rng.choice(len(X), size=min(self.batch_size, len(X)), replace=False)
            return self.net_.loss_and_backward(X[idx], codes[idx], bona[idx], weights)

        self._run(self.n_steps, step)
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = _check_features(X)
        return _batched(lambda b: self.net_.embed(b), X).astype(np.float64)

    def predict_proba(self, X):
        """Speaker posterior over ``classes_``."""
        check_is_fitted(self, "net_")
        return _batched(lambda b: softmax(self.net_.forward(b)[0].astype(np.float64)),
                        _check_features(X))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def predict_pad_proba(self, X):
        """Probability that each utterance is bona fide."""
        check_is_fitted(self, "net_")
        return _batched(lambda b: self.net_.forward(b)[1].astype(np.float64), _check_features(X))


class E2EISV(MultiTaskFrontend):
    """Monolithic model: SID + PAD + ISV losses over trials composed inside each batch.

    Batches hold ``speakers_per_batch`` speakers with ``utts_per_speaker``
    utterances each (half bona fide, half replayed when available). With
    ``balance_trials`` every trial type is capped at the least frequent
    type's count.
    """

    def __init__(self, channels=(8, 16, 16), embedding_dim=64, mfm=True, isv_hidden=(256, 256),
                 isv_product=False, speakers_per_batch=8, utts_per_speaker=4,
                 balance_trials=True, loss_weights=(1.0, 1.0, 1.0), n_steps=1000, lr=1e-3,
                 weight_decay=1e-4, seed=0, precision="float32", warm_start=False):
        self.channels = channels
        self.embedding_dim = embedding_dim
        self.mfm = mfm
        self.isv_hidden = isv_hidden
        self.isv_product = isv_product
        self.speakers_per_batch = speakers_per_batch
        self.utts_per_speaker = utts_per_speaker
        self.balance_trials = balance_trials
        self.loss_weights = loss_weights
        self.n_steps = n_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.precision = precision
        self.warm_start = warm_start

    def _build(self, n_frames, classes):
        self.classes_ = np.asarray(classes)
        self.n_frames_ = int(n_frames)
        rng = np.random.default_rng(self.seed)
        self.net_ = E2ENet(self._encoder_config(n_frames), len(classes), rng,
                           tuple(self.isv_hidden), self.isv_product, _dtype(self.precision))

    def _sample_batch(self, rng, codes, bona):
        spk = rng.choice(len(self.classes_), size=min(self.speakers_per_batch, len(self.classes_)),
                         replace=False)
        idx = []
        half = self.utts_per_speaker // 2
        for s in spk:
            b = np.flatnonzero((codes == s) & bona)
            r = np.flatnonzero((codes == s) & ~bona)
            nb = min(len(b), self.utts_per_speaker - min(half, len(r)))
            idx += list(rng.choice(b, size=nb, replace=False))
            idx += list(rng.choice(r, size=min(len(r), self.utts_per_speaker - nb), replace=False))
        return np.asarray(idx)

    def _balance(self, rng, ei, ti, types):
        counts = [np.sum(types == c) for c in range(3)]
        present = [c for c in counts if c]
        cap = min(present)
        keep = []
        for c in range(3):
            members = np.flatnonzero(types == c)
            if len(members) > cap:
                members = np.sort(rng.choice(members, size=cap, replace=False))
            keep.append(members)
        keep = np.concatenate(keep)
        return ei[keep], ti[keep], types[keep]

    def fit(self, X, y, bonafide):
        X = _check_features(X)
        bona = as_bonafide(bonafide)
        y = np.asarray(y)
        if len(X) != len(y) or len(y) != len(bona):
            raise DimensionError("X, y and bonafide differ in length")
        if self._should_reset():
            self._build(X.shape[1], np.unique(y))
            self._init_training()
        codes = self._encode_labels(y)
        X = X.astype(self.net_.dtype, copy=False)
        weights = tuple(float(w) for w in self.loss_weights)

        def step(rng):
            idx = self._sample_batch(rng, codes, bona)
            ei, ti, types = inbatch_pairs(codes[idx], bona[idx])
            if self.balance_trials:
                ei, ti, types = self._balance(rng, ei, ti, types)
            return self.net_.loss_and_backward(X[idx], codes[idx], bona[idx].astype(np.float64),
                                               ei, ti, types, weights)

        self._run(self.n_steps, step)
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return _batched(lambda b: self.net_.mtl.embed(b), _check_features(X)).astype(np.float64)

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return _batched(lambda b: softmax(self.net_.mtl.forward(b)[0].astype(np.float64)),
                        _check_features(X))

    def predict_pad_proba(self, X):
        check_is_fitted(self, "net_")
        return _batched(lambda b: self.net_.mtl.forward(b)[1].astype(np.float64),
                        _check_features(X))

    def score_embeddings(self, enroll_emb, test_emb):
        """Acceptance probability for pairs of embeddings from :meth:`transform`."""
        check_is_fitted(self, "net_")
        dt = self.net_.dtype
        e = np.asarray(enroll_emb, dtype=dt)
        t = np.asarray(test_emb, dtype=dt)
        return self.net_.score(e, t).astype(np.float64)

    def score(self, X_enroll, X_test):
        """Acceptance probability for pairs of feature matrices."""
        return self.score_embeddings(self.transform(X_enroll), self.transform(X_test))


class PADClassifier(_NetEstimator, ClassifierMixin):
    """Bona fide vs replay classifier on fixed-length vectors (e.g. embeddings).

    ``classes_`` is ``[0, 1]`` with 1 meaning bona fide.
    """

    def __init__(self, hidden=(), n_steps=1000, batch_size=64, lr=1e-3, weight_decay=1e-4,
                 seed=0, precision="float64", warm_start=False):
        self.hidden = hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.precision = precision
        self.warm_start = warm_start

    def _build(self, dim):
        self.n_features_in_ = int(dim)
        self.classes_ = np.array([0, 1])
        rng = np.random.default_rng(self.seed)
        self.net_ = mlp(dim, tuple(self.hidden), 1, rng, _dtype(self.precision))

    def _modules(self):
        return {"pad": self.net_}

    def _state(self):
        return {"dim": self.n_features_in_}

    def _restore(self, state):
        self._build(state["dim"])

    def fit(self, X, y):
        X = check_array(X, dtype=_dtype(self.precision))
        y = as_bonafide(y).astype(np.float64)
        if len(y) != len(X):
            raise DimensionError("X and y differ in length")
        if self._should_reset():
            self._build(X.shape[1])
            self._init_training()

        def step(rng):
            idx = rng.choice(len(X), size=min(self.batch_size, len(X)), replace=False)
            p = expit(self.net_.forward(X[idx])[:, 0])
            loss = bce(p, y[idx])
            g = bce_logit_grad(p, y[idx])
            self.net_.backward(g[:, None].astype(X.dtype))
            return LossReport({"pad": loss}, loss, len(idx))

        self._run(self.n_steps, step)
        return self

    def decision_function(self, X):
        """Probability of bona fide."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=_dtype(self.precision))
        return expit(self.net_.forward(X)[:, 0].astype(np.float64))

    def predict_proba(self, X):
        p = self.decision_function(X)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X):
        return (self.decision_function(X) >= 0.5).astype(int)


def _type_codes(y):
    y = np.asarray(y)
    if y.dtype.kind in "USO":
        lookup = {t: i for i, t in enumerate(TRIAL_TYPES)}
        try:
            return np.array([lookup[v] for v in y.tolist()], dtype=int)
        except KeyError as exc:
            raise LabelError(f"unknown trial type {exc.args[0]!r}") from None
    y = y.astype(int)
    if y.size and (y.min() < 0 or y.max() > 2):
        raise LabelError("trial type codes must be 0 (target), 1 (zero_effort) or 2 (replay)")
    return y


def make_backend_input(enroll, test, pad):
    """Rows ``[enroll | test | pad]`` as consumed by :class:`ModularBackend`."""
    enroll = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    if enroll.shape != test.shape:
        raise DimensionError(f"enroll shape {enroll.shape} != test shape {test.shape}")
    pad = np.broadcast_to(np.asarray(pad, dtype=np.float64), (len(enroll),))
    return np.hstack([enroll, test, pad[:, None]])


def sample_training_trials(speakers, bonafide, n_per_type, seed=0):
    """Random (enroll, test, type) index triples, ``n_per_type`` of each trial type.

    Enrollments are bona fide; pairs are drawn with replacement.
    """
    speakers = np.asarray(speakers)
    bona = as_bonafide(bonafide)
    rng = np.random.default_rng(seed)
    by_spk = {s: np.flatnonzero(speakers == s) for s in np.unique(speakers)}
    enrolls = np.flatnonzero(bona)
    out = {0: [], 1: [], 2: []}
    need = {0: n_per_type, 1: n_per_type, 2: n_per_type}
    if not (~bona).any():
        need[2] = 0
    guard = 0
    while any(len(out[c]) < need[c] for c in out):
        guard += 1
        if guard > 1000:
            raise ConfigError("cannot sample the requested trial types from this data")
        e = rng.choice(enrolls, size=4 * n_per_type)
        t = rng.integers(0, len(speakers), size=4 * n_per_type)
        same = speakers[e] == speakers[t]
        ok = (e != t) & (bona[t] | same)
        codes = np.where(same, np.where(bona[t], 0, 2), 1)
        for c in out:
            sel = ok & (codes == c)
            room = need[c] - len(out[c])
            if room > 0:
                out[c] += list(zip(e[sel][:room], t[sel][:room]))
        # same-speaker pairs are rare when drawn uniformly; draw them directly too
        for c in (0, 2):
            room = need[c] - len(out[c])
            if room <= 0:
                continue
            ee = rng.choice(enrolls, size=room)
            cand = []
            for x in ee:
                pool = by_spk[speakers[x]]
                pool = pool[(pool != x) & (bona[pool] == (c == 0))]
                if len(pool):
                    cand.append((x, rng.choice(pool)))
            out[c] += cand[:room]
    ei = np.array([p[0] for c in out for p in out[c]], dtype=int)
    ti = np.array([p[1] for c in out for p in out[c]], dtype=int)
    types = np.concatenate([np.full(len(out[c]), c) for c in out])
    return ei, ti, types


class ModularBackend(_NetEstimator, ClassifierMixin):
    """Back-end fusing a speaker-embedding pair with a PAD score.

    ``X`` rows are ``[enroll (d) | test (d) | pad (1)]`` (see
    :func:`make_backend_input`) and ``y`` holds trial types. The SV branch is
    trained with label 1 for same-speaker pairs (target and replay) and 0
    for zero-effort pairs; the final 2-node output accepts only targets.
    With ``use_pad_labels`` the PAD column is replaced during training by
    the ground truth (1 unless the trial is a replay).

    Each minibatch holds ``batch_size`` trials split across target,
    zero-effort and replay in the proportions of ``type_mix``.
    """

    def __init__(self, n_layers=4, n_nodes=256, alpha=20.0, use_pad_labels=True, n_steps=1250,
                 batch_size=96, type_mix=(2, 1, 1), lr=1e-3, weight_decay=1e-4, seed=0,
                 precision="float64", warm_start=False, log_batches=False):
        self.n_layers = n_layers
        self.n_nodes = n_nodes
        self.alpha = alpha
        self.use_pad_labels = use_pad_labels
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.type_mix = type_mix
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.precision = precision
        self.warm_start = warm_start
        self.log_batches = log_batches

    def _config(self):
        return BackendConfig(self.n_layers, self.n_nodes, float(self.alpha), bool(self.use_pad_labels))

    def _build(self, dim):
        self.dim_ = int(dim)
        self.classes_ = np.array(["accept", "reject"])
        rng = np.random.default_rng(self.seed)
        self.net_ = BackendNet(dim, self._config(), rng, _dtype(self.precision))

    def _state(self):
        return {"dim": self.dim_}

    def _restore(self, state):
        self._build(state["dim"])

    def _split(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] % 2 != 1:
            raise DimensionError(f"expected [enroll | test | pad] rows, got width {X.shape[1]}")
        d = (X.shape[1] - 1) // 2
        if hasattr(self, "dim_") and d != self.dim_:
            raise DimensionError(f"embedding dim {d} != fitted dim {self.dim_}")
        return X[:, :d], X[:, d:2 * d], X[:, 2 * d]

    def fit(self, X, y):
        enroll, test, pad = self._split(X)
        types = _type_codes(y)
        if len(types) != len(enroll):
            raise DimensionError("X and y differ in length")
        if self.alpha == 0:
            msg = "alpha=0 trains the back-end on the ISV loss alone, which tends to overfit"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            log.warning(msg)
        if self._should_reset():
            self._build(enroll.shape[1])
            self._init_training()
            self.batch_log_ = []
        sv_labels = (types != 1).astype(np.float64)
        isv_labels = np.where(types == 0, ACCEPT, REJECT)
        pad_label = (types != 2).astype(np.float64)
        pad_in = pad_label if self.use_pad_labels else pad
        counts = self._batch_counts(types)

        def step(rng):
            idx = np.concatenate([rng.choice(np.flatnonzero(types == c), size=k, replace=True)
                                  for c, k in counts])
            if self.log_batches:
                self.batch_log_.append((types[idx].copy(), pad_in[idx].copy()))
            return self.net_.loss_and_backward(enroll[idx], test[idx], pad_in[idx],
                                               sv_labels[idx], isv_labels[idx], float(self.alpha))

        self._run(self.n_steps, step)
        return self

    def _batch_counts(self, types):
        mix = np.asarray(self.type_mix, dtype=np.float64)
        if mix.shape != (3,) or np.any(mix < 0) or not np.all(np.isfinite(mix)):
            raise ConfigError(f"type_mix needs 3 non-negative weights, got {self.type_mix!r}")
        present = [c for c in range(3) if mix[c] > 0 and np.any(types == c)]
        if not any(c == 0 for c in present) or len(present) < 2:
            raise LabelError("training needs target trials and at least one non-target type")
        w = mix[present] / mix[present].sum()
        return [(c, max(1, int(round(self.batch_size * wc)))) for c, wc in zip(present, w)]

    def forward(self, X):
        """Full :class:`BackendNet` output dict for trial rows."""
        check_is_fitted(self, "net_")
        enroll, test, pad = self._split(X)
        return self.net_.forward(enroll, test, pad)

    def predict_proba(self, X):
        return self.forward(X)["probs"].astype(np.float64)

    def decision_function(self, X):
        """Acceptance probability (the final score)."""
        return self.predict_proba(X)[:, ACCEPT]

    def predict(self, X):
        return self.classes_[(self.decision_function(X) < 0.5).astype(int)]


ESTIMATORS = {c.__name__: c for c in (MultiTaskFrontend, E2EISV, PADClassifier, ModularBackend)}


def estimator_from_checkpoint(ckpt):
    name = ckpt.architecture.get("estimator")
    if name not in ESTIMATORS:
        raise ConfigError(f"checkpoint holds unknown estimator {name!r}")
    return ESTIMATORS[name]._from_checkpoint(ckpt)
