"""Network graphs with explicit backward passes.

These classes hold parameters and know how to compute a loss and its
gradients for one batch. Training loops, sampling and persistence live in
:mod:`isvkit.models.estimators`.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from ..errors import DimensionError, RangeError
from ..features import N_BANDS
from ..losses import LossReport, bce, bce_logit_grad, cce, cce_grad, e2e_loss, modular_loss
from ..numcore import MFM, Conv2d, Dense, Flatten, MaxPool2d, ReLU, Sequential, softmax

ACCEPT, REJECT = 0, 1


@dataclass
class EncoderConfig:
    """Miniature MFM-CNN: conv(3x3) -> MFM -> maxpool(2) per block, then a dense MFM embedding."""

    channels: tuple = (8, 16, 16)
    mfm: bool = True
    pool: int = 2
    embedding_dim: int = 64
    n_frames: int = 16
    n_bands: int = N_BANDS

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be > 0")
        if self.mfm and any(c % 2 for c in self.channels):
            raise ValueError("channel counts must be even when MFM is enabled")


@dataclass
class BackendConfig:
    n_layers: int = 4
    n_nodes: int = 256
    alpha: float = 20.0
    use_pad_labels: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


def _act(mfm):
    return MFM() if mfm else ReLU()


def build_encoder(cfg, rng, dtype=np.float64):
    layers, in_ch = [], 1
    H, W = cfg.n_frames, cfg.n_bands
    for ch in cfg.channels:
        layers += [Conv2d(in_ch, ch, 3, 1, 1, rng=rng, dtype=dtype), _act(cfg.mfm)]
        in_ch = ch // 2 if cfg.mfm else ch
        if cfg.pool > 1 and H >= cfg.pool and W >= cfg.pool:
            layers.append(MaxPool2d(cfg.pool))
            H, W = H // cfg.pool, W // cfg.pool
    width = cfg.embedding_dim * (2 if cfg.mfm else 1)
    layers += [Flatten(), Dense(in_ch * H * W, width, rng=rng, dtype=dtype), _act(cfg.mfm)]
    return Sequential(layers)


def mlp(n_in, hidden, n_out, rng, dtype=np.float64):
    """ReLU hidden layers (He init) and a linear output (Xavier init)."""
    layers = []
    for h in hidden:
        layers += [Dense(n_in, h, rng=rng, dtype=dtype), ReLU()]
        n_in = h
    layers.append(Dense(n_in, n_out, rng=rng, init="xavier", dtype=dtype))
    return Sequential(layers)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def shape_sv_score(x):
    """``sigmoid(relu(x))``: 0.5 for every x <= 0, increasing towards 1 above.

    Capped at the largest double below 1, where the sigmoid would otherwise
    round to exactly 1 (x above about 37).
    """
    return np.minimum(expit(np.maximum(np.asarray(x, dtype=np.float64), 0.0)), _BELOW_ONE)


class MultiTaskNet:
    """Shared encoder with a softmax SID head and a sigmoid PAD head.

    The PAD head outputs the probability that an utterance is bona fide.
    """

    def __init__(self, cfg, n_speakers, rng, dtype=np.float64):
        self.cfg = cfg
        self.n_speakers = int(n_speakers)
        self.encoder = build_encoder(cfg, rng, dtype)
        self.sid_head = Sequential([Dense(cfg.embedding_dim, n_speakers, rng=rng, init="xavier", dtype=dtype)])
        self.pad_head = Sequential([Dense(cfg.embedding_dim, 1, rng=rng, init="xavier", dtype=dtype)])
        self.dtype = dtype

    def modules(self):
        return {"encoder": self.encoder, "sid_head": self.sid_head, "pad_head": self.pad_head}

    def _input(self, X):
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim != 3 or X.shape[1:] != (self.cfg.n_frames, self.cfg.n_bands):
            raise DimensionError(
                f"features of shape {X.shape[1:]} do not match encoder input "
                f"({self.cfg.n_frames}, {self.cfg.n_bands})")
        return X[:, None]

    def embed(self, X):
        return self.encoder.forward(self._input(X))

    def forward(self, X):
        emb = self.embed(X)
        sid_logits = self.sid_head.forward(emb)
        pad_prob = expit(self.pad_head.forward(emb)[:, 0])
        self._pad_prob = pad_prob
        return sid_logits, pad_prob, emb

    def backward(self, d_sid_logits=None, d_pad_logit=None, d_emb=None):
        n = self._pad_prob.shape[0]
        total = np.zeros((n, self.cfg.embedding_dim), dtype=self.dtype) if d_emb is None else d_emb
        if d_sid_logits is not None:
            total = total + self.sid_head.backward(d_sid_logits.astype(self.dtype, copy=False))
        if d_pad_logit is not None:
            d_pre = d_pad_logit[:, None].astype(self.dtype, copy=False)
            total = total + self.pad_head.backward(d_pre)
        self.encoder.backward(total.astype(self.dtype, copy=False))

    def loss_and_backward(self, X, sid_labels, bonafide, weights=(1.0, 1.0)):
        """Weighted SID + PAD objective for one batch; fills gradients."""
        sid_logits, pad_prob, _ = self.forward(X)
        w_sid, w_pad = weights
        y_pad = np.asarray(bonafide, dtype=np.float64)
        comps = {"sid": cce(sid_logits, sid_labels), "pad": bce(pad_prob, y_pad)}
        total = w_sid * comps["sid"] + w_pad * comps["pad"]
        self.backward(w_sid * cce_grad(sid_logits, sid_labels) if w_sid else None,
                      w_pad * bce_logit_grad(pad_prob, y_pad) if w_pad else None)
        return LossReport(comps, total, len(sid_labels), {"sid": w_sid, "pad": w_pad})


def pair_features(enroll, test, product):
    return np.concatenate([enroll, test, enroll * test] if product else [enroll, test], axis=1)


class E2ENet:
    """MTL network plus fully connected ISV layers scoring in-batch trials."""

    def __init__(self, cfg, n_speakers, rng, isv_hidden=(256, 256), isv_product=False,
                 dtype=np.float64):
        self.mtl = MultiTaskNet(cfg, n_speakers, rng, dtype)
        self.isv_product = bool(isv_product)
        n_in = cfg.embedding_dim * (3 if isv_product else 2)
        self.isv = mlp(n_in, isv_hidden, 2, rng, dtype)
        self.dtype = dtype

    def modules(self):
        return {**self.mtl.modules(), "isv": self.isv}

    def isv_logits(self, enroll_emb, test_emb):
        return self.isv.forward(pair_features(enroll_emb, test_emb, self.isv_product))

    def score(self, enroll_emb, test_emb):
        """Acceptance probability for embedding pairs."""
        return softmax(self.isv_logits(enroll_emb, test_emb))[:, ACCEPT]

    def loss_and_backward(self, X, sid_labels, bonafide, enroll_idx, test_idx, trial_codes,
                          weights=(1.0, 1.0, 1.0)):
        """Joint SID + PAD + ISV objective over in-batch trials; fills gradients."""
        sid_logits, pad_prob, emb = self.mtl.forward(X)
        d = emb.shape[1]
        logits = self.isv_logits(emb[enroll_idx], emb[test_idx])
        isv_labels = np.where(np.asarray(trial_codes) == 0, ACCEPT, REJECT)
        y_pad = np.asarray(bonafide, dtype=np.float64)
        report = e2e_loss(sid_logits, sid_labels, pad_prob, y_pad, logits, isv_labels, weights)
        w_sid, w_pad, w_isv = weights
        d_pair = self.isv.backward((w_isv * cce_grad(logits, isv_labels)).astype(self.dtype))
        d_emb = np.zeros_like(emb)
        d_enroll, d_test = d_pair[:, :d], d_pair[:, d:2 * d]
        if self.isv_product:
            d_enroll = d_enroll + d_pair[:, 2 * d:] * emb[test_idx]
            d_test = d_test + d_pair[:, 2 * d:] * emb[enroll_idx]
        np.add.at(d_emb, enroll_idx, d_enroll)
        np.add.at(d_emb, test_idx, d_test)
        self.mtl.backward(w_sid * cce_grad(sid_logits, sid_labels),
                          w_pad * bce_logit_grad(pad_prob, y_pad), d_emb)
        return report


class BackendNet:
    """Modular ISV back-end.

    ``[enroll, test, enroll*test]`` -> hidden ReLU layers -> one raw SV
    scalar. The shaped score ``sigmoid(relu(raw))``, the PAD input and their
    product feed a 2-node softmax whose first node means "accept".
    """

    def __init__(self, dim, cfg, rng, dtype=np.float64):
        self.dim, self.cfg, self.dtype = int(dim), cfg, dtype
        self.sv = mlp(3 * dim, [cfg.n_nodes] * cfg.n_layers, 1, rng, dtype)
        self.final = Sequential([Dense(3, 2, rng=rng, init="xavier", dtype=dtype)])

    def modules(self):
        return {"sv": self.sv, "final": self.final}

    def _check(self, enroll, test, pad):
        enroll = np.asarray(enroll, dtype=self.dtype)
        test = np.asarray(test, dtype=self.dtype)
        if enroll.ndim == 1:
            enroll, test = enroll[None], test[None]
        if enroll.shape[1] != test.shape[1]:
            raise DimensionError(
                f"enroll dim {enroll.shape[1]} != test dim {test.shape[1]}")
        if enroll.shape[1] != self.dim:
            raise DimensionError(f"embedding dim {enroll.shape[1]} != back-end dim {self.dim}")
        pad = np.broadcast_to(np.asarray(pad, dtype=self.dtype), (enroll.shape[0],))
        if np.any((pad < 0) | (pad > 1)) or not np.all(np.isfinite(pad)):
            raise RangeError("PAD input must lie in [0, 1]")
        return enroll, test, pad

    def sv_branch(self, enroll, test):
        """Raw SV scalar and its sigmoid probability."""
        raw = self.sv.forward(pair_features(enroll, test, True))[:, 0]
        return raw, expit(raw)

    def forward(self, enroll, test, pad):
        enroll, test, pad = self._check(enroll, test, pad)
        raw, sv_prob = self.sv_branch(enroll, test)
        shaped = shape_sv_score(raw)
        fused = np.stack([shaped, pad, shaped * pad], axis=1).astype(self.dtype)
        logits = self.final.forward(fused)
        probs = softmax(logits)
        self._cache = (raw, sv_prob, shaped, pad)
        return {"raw": raw, "sv_prob": sv_prob, "shaped": shaped, "fused": fused,
                "logits": logits, "probs": probs, "score": probs[:, ACCEPT]}

    def loss_and_backward(self, enroll, test, pad, sv_labels, isv_labels, alpha=None):
        """``alpha * BCE(sv) + CCE(isv)`` for one batch; fills gradients."""
        alpha = self.cfg.alpha if alpha is None else alpha
        out = self.forward(enroll, test, pad)
        raw, sv_prob, shaped, pad = self._cache
        report = modular_loss(sv_prob, sv_labels, out["logits"], isv_labels, alpha)
        d_fused = self.final.backward(cce_grad(out["logits"], isv_labels).astype(self.dtype))
        d_shaped = d_fused[:, 0] + d_fused[:, 2] * pad
        d_raw = d_shaped * shaped * (1 - shaped) * (raw > 0)
        if alpha:
            d_raw = d_raw + alpha * bce_logit_grad(sv_prob, sv_labels)
        self.sv.backward(d_raw[:, None].astype(self.dtype, copy=False))
        return report


def named_params(modules):
    """``(name, layer, key)`` triples across a dict of Sequential modules."""
    out = []
    for mname, mod in modules.items():
        out += [(f"{mname}.{n}", layer, key) for n, layer, key in mod.named_params()]
    return out


def zero_grad(modules):
    for mod in modules.values():
        mod.zero_grad()


def config_dict(cfg):
    d = asdict(cfg)
    if "channels" in d:
        d["channels"] = list(d["channels"])
    return d
