"""Central finite-difference verification of analytic gradients."""
import numpy as np

from .autodiff import Tensor, backward


def numerical_gradient(fn, arrays, index, epsilon):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        plus = float(fn(*base))
        flat[i] = orig - epsilon
        minus = float(fn(*base))
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * epsilon)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Largest per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(op_closure, inputs, epsilon=1e-5):
    """Compare backward() against central differences, in float64.

    ``op_closure(*tensors)`` must return a scalar Tensor. Returns the maximum
    relative error over every coordinate of every input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), name=f"input{i}", dtype=np.float64) for i, a in enumerate(arrays)]
    grads = backward(op_closure(*tensors), {t.name: t for t in tensors})

    def scalar(*xs):
        return op_closure(*[Tensor(x, dtype=np.float64) for x in xs]).data

    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = numerical_gradient(scalar, arrays, i, epsilon)
        worst = max(worst, relative_error(grads[t.name], numeric))
    return worst


TOLERANCE = 1e-4
BN_TOLERANCE = 1e-3


def _cases(seed):
    """(label, closure, inputs, tolerance) for every differentiable primitive."""
    from . import ops
    from .autodiff import RngStream

    r = np.random.default_rng(seed)
    B, L = 2, 20
    cases = []

    x = r.normal(size=(3, 4))
    w = r.normal(size=(4, 5))
    proj = r.normal(size=(3, 5))
    cases.append(("dense", lambda x, w, b: ops.weighted_sum(ops.dense(x, w, b), proj),
                  [x, w, r.normal(size=5)], TOLERANCE))

    for width in (1, 3, 7, 9):
        xs = r.normal(size=(B, L, 3))
        proj_c = r.normal(size=(B, L, 4))
        cases.append((f"conv1d[w={width}]",
                      lambda x, f, b, p=proj_c: ops.weighted_sum(ops.conv1d(x, f, b), p),
                      [xs, r.normal(size=(width, 3, 4)) * 0.5, r.normal(size=4)], TOLERANCE))

    xs = r.normal(size=(B, L, 3))
    proj_m = r.normal(size=(B, L, 6))
    cases.append(("multiscale[3,5,7]",
                  lambda x, f3, b3, f5, b5, f7, b7: ops.weighted_sum(
                      ops.multiscale(x, [(f3, b3), (f5, b5), (f7, b7)]), proj_m),
                  [xs, r.normal(size=(3, 3, 2)), r.normal(size=2), r.normal(size=(5, 3, 2)),
                   r.normal(size=2), r.normal(size=(7, 3, 2)), r.normal(size=2)], TOLERANCE))

    mask = (r.random((B, L)) > 0.25).astype(np.float64)
    mask[:, :2] = 1.0
    proj_b = r.normal(size=(B, L, 3))
    stats = ops.BatchNormStats(3, dtype=np.float64)
    cases.append(("batchnorm[train]",
                  lambda x, g, b: ops.weighted_sum(ops.batchnorm(x, g, b, stats, "train", mask=mask), proj_b),
                  [r.normal(size=(B, L, 3)) * 2 + 1, r.normal(size=3), r.normal(size=3)], BN_TOLERANCE))

    drop_mask = ops.dropout_mask((B, L, 3), 0.4, RngStream(seed))
    cases.append(("dropout[fixed mask]",
                  lambda x: ops.weighted_sum(ops.dropout(x, 0.4, "train", mask=drop_mask), proj_b),
                  [r.normal(size=(B, L, 3))], TOLERANCE))

    # keep inputs off the kink: a perturbation must not cross zero
    xr = r.normal(size=(B, L, 3))
    xr = np.where(np.abs(xr) < 0.05, 0.5, xr)
    cases.append(("relu", lambda x: ops.weighted_sum(ops.relu(x), proj_b), [xr], TOLERANCE))

    cases.append(("window_gather[11]",
                  lambda x, p=r.normal(size=(B, L, 33)): ops.weighted_sum(ops.window_gather(x, 11), p),
                  [r.normal(size=(B, L, 3))], TOLERANCE))

    labels = r.integers(0, 8, (B, L))
    cases.append(("softmax_xent_masked",
                  lambda z: ops.softmax_xent_masked(z, labels, mask)[0],
                  [r.normal(size=(B, L, 8)) * 2], TOLERANCE))
    return cases


def run_suite(seeds=(0, 1, 2, 3, 4), epsilon=1e-5):
    """Grad-check every primitive for each seed; returns rows ``(op, seed, error, tol, ok)``."""
    rows = []
    for seed in seeds:
        for label, fn, inputs, tol in _cases(seed):
            err = grad_check(fn, inputs, epsilon)
            rows.append((label, seed, err, tol, err < tol))
    return rows
