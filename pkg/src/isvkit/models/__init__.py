"""Encoders, the monolithic E2E model and the modular back-end."""

import numpy as np

from ..errors import UndefinedScoreError
from .estimators import (
    E2EISV, ModularBackend, MultiTaskFrontend, PADClassifier, estimator_from_checkpoint,
    make_backend_input, sample_training_trials,
)
from .networks import (
    BackendConfig, BackendNet, E2ENet, EncoderConfig, MultiTaskNet, shape_sv_score,
)


def cosine_score(enroll, test):
    """Cosine similarity of embedding pairs (rows) or of two vectors."""
    e = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    t = np.atleast_2d(np.asarray(test, dtype=np.float64))
    ne, nt = np.linalg.norm(e, axis=1), np.linalg.norm(t, axis=1)
    if np.any(ne == 0) or np.any(nt == 0):
        raise UndefinedScoreError("cosine score is undefined for a zero vector")
    s = np.clip((e * t).sum(axis=1) / (ne * nt), -1.0, 1.0)
    return float(s[0]) if np.ndim(enroll) == 1 and np.ndim(test) == 1 else s


__all__ = [
    "BackendConfig", "BackendNet", "E2EISV", "E2ENet", "EncoderConfig", "ModularBackend",
    "MultiTaskFrontend", "MultiTaskNet", "PADClassifier", "cosine_score",
    "estimator_from_checkpoint", "make_backend_input", "sample_training_trials",
    "shape_sv_score",
]
