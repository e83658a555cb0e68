"""Independent reference computations used across the test suite."""

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def random_simplex(rng, batch, classes, spiky=False):
    """Rows on the probability simplex; ``spiky`` pushes some entries near zero."""
    a = rng.gamma(0.2 if spiky else 1.0, size=(batch, classes)) + 1e-300
    return a / a.sum(axis=1, keepdims=True)


def prefix_accuracy_bruteforce(entropies, correct, ids):
    """O(m^2) prefix accuracies after sorting by (entropy, id) with plain Python."""
    rows = sorted(zip(entropies.tolist(), ids.tolist(), correct.tolist()))
    out = []
    for i in range(1, len(rows) + 1):
        out.append(sum(1 for r in rows[:i] if r[2]) / i)
    return out


def parameter_gradient_error(params, build_loss, h=1e-5):
    """Max relative error between backprop and central differences over ``params``.

    ``build_loss`` rebuilds the scalar loss tensor from the current parameter values.
    """
    from lowbudget import autodiff as ad

    for p in params:
        p.zero_grad()
    ad.backward(build_loss())
    analytic = [np.array(p.grad) for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        fd = central_diff(lambda: build_loss().item(), p.data, h=h)
        worst = max(worst, max_rel_error(g, fd))
    return worst


def relu_margin(model, batches):
    """Smallest |input| seen by any ReLU over ``(x, domain)`` training-mode forwards.

    Central differences are meaningless when a step of size h crosses the kink.
    """
    from lowbudget.autodiff import Tensor, no_grad
    from lowbudget.network import ReLU

    margin = np.inf
    with no_grad():
        for x, domain in batches:
            h = Tensor(x)
            for layer in model.layers:
                if isinstance(layer, ReLU):
                    margin = min(margin, float(np.abs(h.data).min()))
                h = layer.forward(h, domain, True)
    return margin
