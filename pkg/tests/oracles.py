"""Independent reference computations used by the tests."""

import numpy as np

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7
NEAR_ZERO = 1e-8


def naive_forward(model, x):
    """Straight-line loops over every weight, no matrix products."""
    a = [float(v) for v in x]
    for layer in model.layers:
        out = []
        for i in range(layer.W.shape[0]):
            z = float(layer.b[i])
            for j in range(layer.W.shape[1]):
                z += float(layer.W[i, j]) * a[j]
            out.append(max(z, 0.0) if layer.activation == "relu" else z)
        a = out
    return np.array(a)


def central_differences(loss, params, step=FD_STEP):
    """Numerical gradient of ``loss(params)`` for every entry of every array."""
    params = [np.array(p, dtype=np.float64) for p in params]
    numeric = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss(params)
            p[idx] = orig - step
            down = loss(params)
            p[idx] = orig
            g[idx] = (up - down) / (2 * step)
        numeric.append(g)
    return numeric


def fd_mismatches(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL):
    """Entries violating: relative ``rtol``, or absolute ``atol`` where |grad| < 1e-8."""
    bad = []
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        a = np.asarray(a, dtype=np.float64)
        err = np.abs(a - n)
        small = np.abs(a) < NEAR_ZERO
        ok = np.where(small, err <= atol, err <= rtol * np.abs(a))
        for idx in zip(*np.nonzero(~ok)):
            bad.append((k, idx, float(a[idx]), float(n[idx])))
    return bad


def central_diff_check(loss, params, analytic, **kw):
    numeric = central_differences(loss, params)
    bad = fd_mismatches(analytic, numeric, **kw)
    assert not bad, f"{len(bad)} gradient entries disagree, first: {bad[:3]}"
