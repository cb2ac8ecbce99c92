"""Finite-difference oracles for the differentiation engine.

Central differences with a fixed step are the independent reference for both
first-order gradients (per primitive) and the second-order pattern used by
the gradient-norm penalty.  The CLI `gradcheck` subcommand and the test
suite both run these checks.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4


def numeric_grad(f, arrays, step=FD_STEP):
    """Central finite differences of scalar f(*arrays) w.r.t. every entry."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for i in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[k].reshape(-1)[i] += step
            hi = f(*bumped)
            bumped[k].reshape(-1)[i] -= 2 * step
            lo = f(*bumped)
            flat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, 1) over all entries of all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def analytic_grad(f_tensors, arrays):
    """Tape gradient of scalar f_tensors(*tensors) at the given arrays."""
    with T.Tape():
        xs = [T.Tensor(a, requires_grad=True) for a in arrays]
        loss = f_tensors(*xs)
        grads = T.backward(loss, xs)
    return [grads[x].data for x in xs]


def check_scalar_fn(f_tensors, arrays, step=FD_STEP):
    """Compare tape gradients against central differences; returns max rel err."""

    def f_np(*arrs):
        with T.Tape():
            xs = [T.Tensor(a) for a in arrs]
            return f_tensors(*xs).item()

    ana = analytic_grad(f_tensors, arrays)
    num = numeric_grad(f_np, arrays, step)
    return max_rel_error(ana, num)


def _rand_shape(rng):
    ndim = int(rng.integers(1, 3))
    return tuple(int(rng.integers(1, 6)) for _ in range(ndim))


def _weighted_sum(out, w):
    return T.reduce_sum(T.mul(out, T.Tensor(w)))


# sampling domains keep inputs away from kinks and singularities so the
# finite-difference reference itself stays accurate
def _sample(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _unary_cases(rng, op):
    shape = _rand_shape(rng)
    x = _sample(rng, shape)
    if op == "log1p":
        x = _sample(rng, shape, -0.9, 2.0)
    elif op == "sqrt":
        x = _sample(rng, shape, 0.1, 2.0)
    elif op == "abs":
        x = np.where(np.abs(x) < 0.05, x + 0.2, x)
    return x


def check_elementwise(op, rng, cases=100):
    worst = 0.0
    fn = T.ELEMENTWISE[op]
    binary = op in ("add", "sub", "mul", "div")
    for _ in range(cases):
        if binary:
            shape = _rand_shape(rng)
            a = _sample(rng, shape)
            b = _sample(rng, shape)
            if op == "div":
                b = np.where(np.abs(b) < 0.3, b + 0.6, b)
            w = _sample(rng, shape)
            err = check_scalar_fn(lambda ta, tb: _weighted_sum(fn(ta, tb), w), [a, b])
        else:
            a = _unary_cases(rng, op)
            w = _sample(rng, a.shape)
            err = check_scalar_fn(lambda ta: _weighted_sum(fn(ta), w), [a])
        worst = max(worst, err)
    return worst


def check_matmul(rng, cases=100):
    worst = 0.0
    for _ in range(cases):
        m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
        a = _sample(rng, (m, k))
        b = _sample(rng, (k, n))
        w = _sample(rng, (m, n))
        err = check_scalar_fn(
            lambda ta, tb: _weighted_sum(T.matmul(ta, tb), w), [a, b]
        )
        worst = max(worst, err)
    return worst


def check_movement(rng, cases=100):
    """narrow / concat / reshape / broadcast / transpose, composed."""
    worst = 0.0
    for _ in range(cases):
        rows = int(rng.integers(2, 5))
        cols = int(rng.integers(2, 5))
        a = _sample(rng, (rows, cols))
        b = _sample(rng, (rows, cols))
        w = _sample(rng, (rows, 2 * cols))
        w2 = _sample(rng, (cols, rows))

        def f(ta, tb):
            joined = T.concat([ta, tb], 1)
            left = T.narrow(joined, 1, 0, cols)
            flipped = T.transpose(left)
            spread = T.broadcast_to(T.reshape(tb, (1, rows * cols)), (2, rows * cols))
            return T.add(
                _weighted_sum(T.concat([ta, tb], 1), w),
                T.add(_weighted_sum(flipped, w2), T.reduce_sum(spread)),
            )

        worst = max(worst, check_scalar_fn(f, [a, b]))
    return worst


def check_reduce(rng, cases=100):
    worst = 0.0
    for _ in range(cases):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        a = _sample(rng, shape)
        axis = int(rng.integers(0, 2))
        keep = bool(rng.integers(0, 2))

        def f(ta):
            s = T.reduce_sum(ta, (axis,), keepdims=keep)
            m = T.reduce_mean(ta, (axis,), keepdims=keep)
            return T.add(T.reduce_sum(T.square(s)), T.reduce_sum(T.square(m)))

        worst = max(worst, check_scalar_fn(f, [a]))
    return worst


def _grad_norm_scalar(f_tensors, xs, create_graph):
    """sum of squared first-order gradients, the penalty-style composite."""
    loss = f_tensors(*xs)
    grads = T.backward(loss, xs, create_graph=create_graph)
    total = None
    for x in xs:
        part = T.reduce_sum(T.square(grads[x]))
        total = part if total is None else T.add(total, part)
    return total


def check_second_order(f_tensors, arrays, step=FD_STEP):
    """FD of the first-order gradient vs the double-backward gradient."""

    def h_np(*arrs):
        with T.Tape():
            xs = [T.Tensor(a, requires_grad=True) for a in arrs]
            return _grad_norm_scalar(f_tensors, xs, create_graph=False).item()

    with T.Tape():
        xs = [T.Tensor(a, requires_grad=True) for a in arrays]
        h = _grad_norm_scalar(f_tensors, xs, create_graph=True)
        grads = T.backward(h, xs)
        ana = [grads[x].data for x in xs]
    num = numeric_grad(h_np, arrays, step)
    return max_rel_error(ana, num)


def check_second_order_suite(rng, cases=100):
    """Penalty-pattern double backward across the ops GRU losses touch."""
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(2, 5))
        x = _sample(rng, (1, n))
        w = _sample(rng, (n, n))
        v = _sample(rng, (n, 1))
        pick = int(rng.integers(0, 4))

        if pick == 0:

            def f(tx, tw, tv):
                return T.reduce_sum(T.matmul(T.tanh(T.matmul(tx, tw)), tv))

        elif pick == 1:

            def f(tx, tw, tv):
                h = T.sigmoid(T.matmul(tx, tw))
                return T.reduce_mean(T.mul(h, T.matmul(T.transpose(tv), tw)))

        elif pick == 2:

            def f(tx, tw, tv):
                h = T.matmul(tx, tw)
                left = T.narrow(h, 1, 0, max(1, n // 2))
                return T.reduce_sum(T.square(T.tanh(left)))

        else:

            def f(tx, tw, tv):
                h = T.sqrt(T.add(T.reduce_sum(T.square(T.matmul(tx, tw)), (1,)), 0.5))
                return T.reduce_sum(T.square(T.sub(h, 1.0)))

        worst = max(worst, check_second_order(f, [x, w, v]))
    return worst


def run_all(seed=0, cases=100):
    """Full gradient-check sweep; returns {check name: max rel error}."""
    rng = np.random.default_rng(seed)
    results = {}
    for op in ("add", "sub", "mul", "div", "neg", "abs", "square", "sqrt",
               "exp", "expm1", "log1p", "tanh", "sigmoid"):
        results[op] = check_elementwise(op, rng, cases)
    results["matmul"] = check_matmul(rng, cases)
    results["movement"] = check_movement(rng, max(10, cases // 2))
    results["reduce"] = check_reduce(rng, cases)
    results["second_order"] = check_second_order_suite(rng, max(10, cases // 4))
    return results


def run_all_timed(seed=0, cases=100):
    start = time.perf_counter()
    results = run_all(seed, cases)
    return results, time.perf_counter() - start


def passed(results):
    for name, err in results.items():
        tol = SECOND_ORDER_TOL if name == "second_order" else FIRST_ORDER_TOL
        if err >= tol:
            return False
    return True
