import numpy as np

_U = np.finfo(np.float64).eps


def _central(fn, flat, i, eps):
    orig = flat[i]
    flat[i] = orig + eps
    up = fn()[0]
    flat[i] = orig - eps
    down = fn()[0]
    flat[i] = orig
    # what rounding in the two loss evaluations alone can contribute
    noise = 64 * _U * (abs(up) + abs(down)) / (2 * eps)
    return (up - down) / (2 * eps), noise


def _rel(ana, num, noise):
    return max(0.0, abs(ana - num) - noise) / max(abs(ana), abs(num), 1e-8)


def finite_diff_check(fn, params, eps=1e-5, n_samples=None, seed=0, retry_above=1e-6):
    """Compare analytic gradients against central differences.

    Parameters
    ----------
    fn : callable
        ``fn()`` evaluates the model at the current values of ``params``
        and returns ``(loss, grads)`` with ``grads`` aligned to ``params``.
    params : list of ndarray
        Arrays perturbed in place (restored afterwards). Use float64.
    eps : float
        Central-difference step.
    n_samples : int, optional
        Coordinates checked per array; all of them when None.
    retry_above : float
        Coordinates whose error exceeds this are measured again with steps
        ``eps / 10``, ``eps / 100`` and ``eps * 10`` and the smallest error
        is kept. A ReLU, MFM or max-pool switch inside ``[x - eps, x + eps]``
        spoils the larger steps, rounding in large intermediate terms
        spoils the smaller ones, and a wrong gradient fails at all of them.

    Returns
    -------
    float
        Max over checked coordinates of
        ``max(0, |analytic - numeric| - noise) / max(|analytic|, |numeric|, 1e-8)``,
        where ``noise`` bounds the rounding error of the difference quotient.
    """
    rng = np.random.default_rng(seed)
    _, grads = fn()
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        if flat.base is None and p.size:
            raise ValueError("parameters must be contiguous so they can be perturbed in place")
        idx = np.arange(p.size)
        if n_samples is not None and n_samples < p.size:
            idx = rng.choice(p.size, size=n_samples, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            ana = gflat[i]
            err = _rel(ana, *_central(fn, flat, i, eps))
            for step in (eps / 10, eps / 100, eps * 10):
                if err <= retry_above:
                    break
                err = min(err, _rel(ana, *_central(fn, flat, i, step)))
            worst = max(worst, err)
    return worst
