"""Central finite-difference verification of the tensor-core adjoints."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

F64_TOL = 1e-4
F32_TOL = 1e-2


@dataclass
class GradReport:
    op: str
    max_rel_error: float
    tolerance: float
    checked: int
    excluded: int = 0
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-3):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn, inputs, epsilon=1e-6, tolerance=F64_TOL, exclude=None, seed=0, name="op"):
    """Compare analytic gradients of ``fn(*inputs)`` with central differences.

    ``fn`` returns a Tensor; it is reduced to a scalar by a fixed random
    projection.  ``exclude`` optionally maps the input arrays to a list of
    boolean masks marking non-differentiable points, which are skipped and
    counted instead of compared.
    """
    inputs = [T.Tensor(np.array(x.data if isinstance(x, T.Tensor) else x), requires_grad=True)
              for x in inputs]
    with T.no_grad():
        probe = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(probe.shape).astype(probe.dtype)

    def scalar(arrays):
        with T.no_grad():
            out = fn(*[T.Tensor(a, dtype=a.dtype) for a in arrays])
        return float((out.data.astype(np.float64) * proj).sum())

    with T.Tape():
        out = fn(*inputs)
        loss = T.tensor_sum(T.mul(out, T.Tensor(proj, dtype=out.dtype)))
    T.backward(loss)

    masks = exclude([x.data for x in inputs]) if exclude else [None] * len(inputs)
    worst, checked, skipped = 0.0, 0, 0
    arrays = [x.data.copy() for x in inputs]
    for k, x in enumerate(inputs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = np.zeros(x.data.size)
        flat = arrays[k].reshape(-1)
        skip = masks[k].reshape(-1) if masks[k] is not None else np.zeros(flat.size, dtype=bool)
        for i in range(flat.size):
            if skip[i]:
                skipped += 1
                continue
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = scalar(arrays)
            flat[i] = orig - epsilon
            fm = scalar(arrays)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * epsilon)
            checked += 1
        err = relative_error(analytic.reshape(-1).astype(np.float64), numeric)
        err[skip] = 0.0
        if err.size:
            worst = max(worst, float(err.max()))
    return GradReport(name, worst, tolerance, checked, skipped)


# ---------------------------------------------------------------------------
# operator suite


def _rng(seed):
    return np.random.default_rng(seed)


def _bn_fn(training):
    def fn(x, g, b):
        stats = T.RunningStats(x.shape[1], dtype=x.dtype)
        stats.mean[:] = 0.1
        stats.var[:] = 1.3
        return T.batch_norm(x, g, b, stats, training=training)
    return fn


def _ce_fn(targets):
    def fn(logits):
        loss, _ = T.softmax_cross_entropy(logits, targets, ignore_index=255)
        return loss
    return fn


def _near_zero(eps):
    return lambda arrays: [np.abs(arrays[0]) <= 2 * eps]


def operator_suite(dtype=np.float64, seed=0):
    """Named (fn, inputs, exclude) cases covering every differentiable op."""
    r = _rng(seed)

    def a(*shape):
        return r.standard_normal(shape).astype(dtype)

    targets = r.integers(0, 4, size=(2, 3, 3))
    targets[0, 0, 0] = 255
    relu_in = a(3, 4)
    relu_in[0, 0] = 0.0
    eps = 1e-6 if dtype == np.float64 else 1e-2
    return {
        "add": (T.add, [a(2, 3), a(2, 3)], None),
        "mul": (T.mul, [a(2, 3), a(2, 3)], None),
        "scale": (lambda x: T.scale(x, 0.7), [a(5)], None),
        "sum": (T.tensor_sum, [a(2, 2)], None),
        "relu": (T.relu, [relu_in], _near_zero(eps)),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), [a(2, 2, 5, 5), a(3, 2, 3, 3), a(3)], None),
        "conv2d_strided": (lambda x, w: T.conv2d(x, w, stride=2, padding=1), [a(1, 2, 6, 6), a(2, 2, 3, 3)], None),
        "conv2d_1x1": (lambda x, w, b: T.conv2d(x, w, b), [a(2, 3, 4, 4), a(2, 3, 1, 1), a(2)], None),
        "batch_norm_train": (_bn_fn(True), [a(2, 3, 3, 3), a(3), a(3)], None),
        "batch_norm_eval": (_bn_fn(False), [a(2, 3, 3, 3), a(3), a(3)], None),
        "avg_pool_2x2": (T.avg_pool_2x2, [a(2, 2, 4, 6)], None),
        "avg_pool_2x2_odd": (lambda x: T.avg_pool_2x2(x, pad_to_even=True), [a(1, 2, 5, 3)], None),
        "bilinear_upsample": (lambda x: T.bilinear_upsample(x, 7, 8), [a(1, 2, 3, 4)], None),
        "concat": (lambda x, y: T.concat([x, y], axis=1), [a(1, 2, 3, 3), a(1, 3, 3, 3)], None),
        "slice": (lambda x: T.slice_axis(x, 0, 1, 3), [a(4, 2, 2, 2)], None),
        "softmax_cross_entropy": (_ce_fn(targets), [a(2, 4, 3, 3)], None),
    }


def run_suite(ops=None, double=True, seed=0, suite=None):
    """Run grad_check over the operator suite; returns a list of reports."""
    dtype = np.float64 if double else np.float32
    eps, tol = (1e-6, F64_TOL) if double else (1e-2, F32_TOL)
    reports = []
    if suite is None:
        suite = operator_suite(dtype, seed)
    names = list(suite) if not ops else list(ops)
    for name in names:
        if name not in suite:
            raise KeyError(f"unknown operator {name!r}; choose from {', '.join(suite)}")
        fn, inputs, exclude = suite[name]
        reports.append(grad_check(fn, inputs, epsilon=eps, tolerance=tol, exclude=exclude, seed=seed, name=name))
    return reports
