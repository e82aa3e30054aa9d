"""Cross-entropy losses and the two composite training objectives.

Each loss has a companion ``*_grad`` returning the gradient of the mean
loss with respect to its first argument.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CompositionError, DimensionError, LabelError

PROB_CLAMP = 1e-7


def _check_binary(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise DimensionError(f"prediction shape {p.shape} != label shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("binary labels must be 0 or 1")
    return p, y.astype(np.float64)


def bce(p, y):
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    p, y = _check_binary(p, y)
    if p.size == 0:
        raise CompositionError("empty batch")
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc)))


def bce_grad(p, y):
    p, y = _check_binary(p, y)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (p >= PROB_CLAMP) & (p <= 1 - PROB_CLAMP)
    return inside * (-(y / pc) + (1 - y) / (1 - pc)) / p.size


def bce_logit_grad(p, y):
    """Gradient of :func:`bce` w.r.t. the logit behind ``p = sigmoid(logit)``.

    Uses the fused form ``(p - y) / n``, which keeps a saturated sigmoid
    trainable where the clamped chain rule would return zero.
    """
    p, y = _check_binary(p, y)
    return (p - y) / p.size


def _check_classes(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"class label out of range [0, {logits.shape[1]})")
    return logits, labels.astype(np.intp)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cce(logits, labels):
    """Mean categorical cross-entropy of softmax(logits)."""
    logits, labels = _check_classes(logits, labels)
    if labels.size == 0:
        raise CompositionError("empty batch")
    lsm = _log_softmax(logits)
    return float(-lsm[np.arange(len(labels)), labels].mean())


def cce_grad(logits, labels):
    logits, labels = _check_classes(logits, labels)
    g = np.exp(_log_softmax(logits))
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


@dataclass
class LossReport:
    components: dict
    total: float
    batch_size: int
    weights: dict = field(default_factory=dict)

    def log_line(self, step=None):
        """``key=value`` line with full float precision."""
        parts = [] if step is None else [f"step={step}"]
        parts += [f"{k}={v!r}" for k, v in self.components.items()]
        parts += [f"total={self.total!r}", f"batch={self.batch_size}"]
        return " ".join(parts)


def e2e_loss(sid_logits, sid_labels, pad_probs, pad_labels, isv_logits, isv_labels,
             weights=(1.0, 1.0, 1.0)):
    """Joint objective ``sid + pad + isv`` (unit weights unless overridden)."""
    if len(isv_labels) == 0:
        raise CompositionError("no trials in batch")
    comps = {
        "sid": cce(sid_logits, sid_labels),
        "pad": bce(pad_probs, pad_labels),
        "isv": cce(isv_logits, isv_labels),
    }
    w = dict(zip(("sid", "pad", "isv"), map(float, weights)))
    total = sum(w[k] * comps[k] for k in comps)
    return LossReport(comps, total, len(sid_labels), w)


def modular_loss(sv_probs, sv_labels, isv_logits, isv_labels, alpha=20.0):
    """Back-end objective ``alpha * sv_bce + isv_cce``."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    comps = {"sv": bce(sv_probs, sv_labels), "isv": cce(isv_logits, isv_labels)}
    total = alpha * comps["sv"] + comps["isv"]
    return LossReport(comps, total, len(isv_labels), {"sv": float(alpha), "isv": 1.0})
