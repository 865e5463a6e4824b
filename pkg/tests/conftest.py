import numpy as np
import pytest


def finite_difference_grads(net, scalar_fn, step=1e-5):
    """Central finite differences of scalar_fn() wrt every network parameter."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat_p, flat_g = p.ravel(), g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            up = scalar_fn()
            flat_p[i] = orig - step
            down = scalar_fn()
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, f in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


@pytest.fixture
def gradcheck():
    def check(net, scalar_fn, analytic, tol=1e-4, step=1e-5):
        numeric = finite_difference_grads(net, scalar_fn, step)
        err = max_rel_err(analytic, numeric)
        assert err < tol, f"gradient mismatch: max rel err {err:.3e}"
        return err
    return check
