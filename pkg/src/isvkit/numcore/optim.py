"""AMSGrad with coupled L2 weight decay."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDivergenceError


@dataclass
class AmsgradState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    v_hat: list = field(default_factory=list)

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def hyperparams(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay, "t": self.t}


def amsgrad_step(params, grads, state, names=None):
    """Apply one in-place AMSGrad update to ``params``.

    The decayed gradient ``g + weight_decay * theta`` feeds both moments;
    the step uses the running maximum of the second moment and no bias
    correction.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        state.v_hat = [np.zeros_like(p) for p in params]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise TrainingDivergenceError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v, vh in zip(params, grads, state.m, state.v, state.v_hat):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        np.maximum(vh, v, out=vh)
        p -= state.lr * m / (np.sqrt(vh) + state.eps)


class AMSGrad:
    """Optimizer bound to the parameters of one or more layer stacks.

    ``named`` is a list of ``(name, layer, key)`` triples as yielded by
    ``Sequential.named_params``.
    """

    def __init__(self, named, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.named = list(named)
        self.state = AmsgradState(lr, beta1, beta2, eps, weight_decay)

    @property
    def names(self):
        return [n for n, _, _ in self.named]

    def zero_grad(self):
        for _, layer, key in self.named:
            layer.grads[key] = np.zeros_like(layer.params[key])

    def step(self):
        params = [layer.params[key] for _, layer, key in self.named]
        grads = [layer.grads[key] for _, layer, key in self.named]
        amsgrad_step(params, grads, self.state, self.names)

    def state_arrays(self):
        """Flat name -> array mapping for checkpoints."""
        out = {}
        if self.state.m:
            for name, m, v, vh in zip(self.names, self.state.m, self.state.v, self.state.v_hat):
                out[f"m/{name}"] = m
                out[f"v/{name}"] = v
                out[f"v_hat/{name}"] = vh
        return out

    def load_state(self, hyper, arrays):
        s = self.state
        s.lr, s.beta1, s.beta2 = hyper["lr"], hyper["beta1"], hyper["beta2"]
        s.eps, s.weight_decay, s.t = hyper["eps"], hyper["weight_decay"], hyper["t"]
        if f"m/{self.names[0]}" in arrays:
            s.m = [arrays[f"m/{n}"].copy() for n in self.names]
            s.v = [arrays[f"v/{n}"].copy() for n in self.names]
            s.v_hat = [arrays[f"v_hat/{n}"].copy() for n in self.names]
        else:
            s.m, s.v, s.v_hat = [], [], []
