"""Shared oracles for the test suite.

The finite-difference gradient oracle here is intentionally independent of
the autodiff engine: it only calls an op's forward value through a scalar
wrapper and differences it numerically.
"""

import numpy as np

from robustlab import tensor as T

FD_H = 1e-4
FD_TOL = 1e-4
KINK_MARGIN = 1e-2


def finite_diff_grad(f, x, h=FD_H):
    """Central-difference gradient of scalar f at x (64-bit)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def grads_close(autodiff, numeric, tol=FD_TOL):
    return np.allclose(autodiff, numeric, rtol=tol, atol=tol)


def _away_from_pool_kinks(rng, shape, kernel, margin=KINK_MARGIN):
    """Sample values whose per-window top-2 gap exceeds the kink margin."""
    while True:
        x = rng.uniform(-2.0, 2.0, size=shape)
        b, c, h, w = shape
        win = x.reshape(b, c, h // kernel, kernel, w // kernel, kernel)
        flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, -1, kernel * kernel)
        top2 = np.sort(flat, axis=-1)[..., -2:]
        if np.all(top2[..., 1] - top2[..., 0] > margin):
            return x


def sample_op_case(op, rng):
    """Random (inputs, params, loss_weights) for one primitive, away from kinks.

    Returns (input_arrays, param_dict) where the op is called as
    forward_op(op, *inputs, **params).
    """
    if op in ("add", "sub", "mul"):
        shape = tuple(rng.integers(1, 5, size=2))
        return [rng.uniform(-2, 2, shape), rng.uniform(-2, 2, shape)], {}
    if op == "matmul":
        m, k, n = rng.integers(1, 5, size=3)
        return [rng.uniform(-2, 2, (m, k)), rng.uniform(-2, 2, (k, n))], {}
    if op == "conv2d":
        b, cin, cout = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h = int(rng.integers(5, 8))
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        return [rng.uniform(-2, 2, (b, cin, h, h)),
                rng.uniform(-1, 1, (cout, cin, k, k)),
                rng.uniform(-1, 1, (cout,))], {"stride": 1, "padding": pad}
    if op == "maxpool2d":
        shape = (2, 2, 4, 4)
        return [_away_from_pool_kinks(rng, shape, 2)], {"kernel": 2}
    if op == "relu":
        x = rng.uniform(-2, 2, (3, 4))
        x[np.abs(x) < KINK_MARGIN] += 2 * KINK_MARGIN
        return [x], {}
    if op == "clamp":
        x = rng.uniform(-2, 2, (3, 4))
        for edge in (-1.0, 1.0):
            near = np.abs(x - edge) < KINK_MARGIN
            x[near] += 3 * KINK_MARGIN
        return [x], {"lo": -1.0, "hi": 1.0}
    if op == "concat":
        n = int(rng.integers(2, 4))
        cols = int(rng.integers(1, 4))
        return [rng.uniform(-2, 2, (int(rng.integers(1, 4)), cols)) for _ in range(n)], \
            {"axis": 0}
    if op in ("mean", "sum"):
        shape = tuple(rng.integers(1, 5, size=2))
        return [rng.uniform(-2, 2, shape)], {}
    if op in ("softmax", "log_softmax"):
        return [rng.uniform(-2, 2, (3, 5))], {"axis": -1}
    if op == "l2_norm":
        x = rng.uniform(-2, 2, 12)
        if np.linalg.norm(x) < KINK_MARGIN:
            x += 1.0
        return [x], {}
    raise ValueError(op)


def gradcheck_op(op, trials, seed=0):
    """Max |autodiff - finite-diff| violation ratio for one primitive.

    A random fixed projection makes the op output scalar; gradients are
    checked against central differences on every input slot.
    """
    rng = np.random.default_rng(seed)
    worst_ok = True
    for _ in range(trials):
        inputs, params = sample_op_case(op, rng)
        out_probe = T.forward_op(op, *[T.Tensor(a) for a in inputs], **params)
        w = rng.uniform(-1, 1, out_probe.shape)

        for slot in range(len(inputs)):
            def f(x, slot=slot):
                arrs = [x if i == slot else a for i, a in enumerate(inputs)]
                out = T.forward_op(op, *[T.Tensor(a) for a in arrs], **params)
                return float((out.data * w).sum())

            ts = [T.Tensor(a, requires_grad=(i == slot)) for i, a in enumerate(inputs)]
            out = T.forward_op(op, *ts, **params)
            loss = T.tsum(T.mul(out, T.Tensor(w)))
            loss.backward()
            num = finite_diff_grad(f, inputs[slot])
            if not grads_close(ts[slot].grad, num):
                worst_ok = False
    return worst_ok


def composite_gradcheck(trials, seed=0):
    """Gradient of a >=6-op recorded chain vs finite differences of the composite."""
    rng = np.random.default_rng(seed)
    all_ok = True
    for _ in range(trials):
        x0 = rng.uniform(-2, 2, (2, 1, 6, 6))
        k = rng.uniform(-1, 1, (3, 1, 3, 3))
        wmat = rng.uniform(-1, 1, (12, 5))

        def chain(t):
            y = T.conv2d(t, T.Tensor(k), stride=1, padding=0)       # 1
            y = T.relu(T.add(y, 0.05))                              # 2,3 (shift off the kink)
            y = T.maxpool2d(y, 2)                                   # 4
            y = T.reshape(y, (2, 12))                               # 5
            y = T.matmul(y, T.Tensor(wmat))                         # 6
            y = T.log_softmax(y, axis=-1)                           # 7
            return T.tmean(y)                                       # 8

        t = T.Tensor(x0, requires_grad=True)
        chain(t).backward()
        num = finite_diff_grad(lambda x: float(chain(T.Tensor(x)).data), x0)
        if not grads_close(t.grad, num):
            all_ok = False
    return all_ok
