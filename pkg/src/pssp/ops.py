"""Forward/backward primitives for 1-D convolutional sequence labelling.

Activations are laid out ``(batch, length, depth)``. Every op accumulates in
float64 and returns its result in the dtype of its first input.
"""
import numpy as np

from .autodiff import RngStream, Tensor, as_tensor, make_result
from .errors import ConfigError, ContractError, DimensionError


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def dense(x, weight, bias):
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} != ({weight.shape[1]},)")
    xd = _f64(x.data)
    wd = _f64(weight.data)
    out = xd @ wd + _f64(bias.data)

    def backward_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return make_result(out, "dense", (x, weight, bias), backward_fn, x.dtype)


def _check_width(width):
    if width < 1 or width % 2 == 0:
        raise ConfigError(f"unsupported filter width {width}: widths must be odd")


def unfold_array(x, width):
    """(B, L, D) -> (B, L, width, D) windows centred on each position, zero padded."""
    _check_width(width)
    half = (width - 1) // 2
    B, L, D = x.shape
    padded = np.zeros((B, L + 2 * half, D), dtype=x.dtype)
    padded[:, half:half + L] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)
    # sliding_window_view puts the window axis last: (B, L, D, width)
    return windows.transpose(0, 1, 3, 2)


def fold_array(g, width, length):
    """Adjoint of :func:`unfold_array`: scatter-add window gradients back to positions."""
    half = (width - 1) // 2
    B, L, K, D = g.shape
    padded = np.zeros((B, length + 2 * half, D), dtype=g.dtype)
    for k in range(width):
        padded[:, k:k + L] += g[:, :, k, :]
    return padded[:, half:half + length]


def window_gather(x, width):
    """Concatenate the ``width`` feature vectors centred on each residue.

    Output depth is ``width * D``; positions beyond either end read zeros.
    """
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"window_gather expects (B, L, D), got {x.shape}")
    B, L, D = x.shape
    out = unfold_array(_f64(x.data), width).reshape(B, L, width * D)

    def backward_fn(g):
        return (fold_array(g.reshape(B, L, width, D), width, L),)

    return make_result(out, "window_gather", (x,), backward_fn, x.dtype)


def conv1d(x, filters, bias):
    """SAME-padded temporal convolution.

    ``filters`` has shape ``(K, Din, Dout)`` and
    ``y[b, t, o] = bias[o] + sum_{k, i} x_pad[b, t + k, i] * filters[k, i, o]``.
    """
    x, filters, bias = as_tensor(x), as_tensor(filters), as_tensor(bias)
    if filters.data.ndim != 3:
        raise DimensionError(f"conv1d filters must be (K, Din, Dout), got {filters.shape}")
    K, Din, Dout = filters.shape
    _check_width(K)
    if x.data.ndim != 3 or x.shape[2] != Din:
        raise DimensionError(f"conv1d: input {x.shape} does not match filter depth {Din}")
    if bias.shape != (Dout,):
        raise DimensionError(f"conv1d: bias {bias.shape} != ({Dout},)")
    B, L, _ = x.shape
    cols = unfold_array(_f64(x.data), K).reshape(B * L, K * Din)
    w2 = _f64(filters.data).reshape(K * Din, Dout)
    out = (cols @ w2).reshape(B, L, Dout) + _f64(bias.data)

    def backward_fn(g):
        g2 = g.reshape(B * L, Dout)
        gw = (cols.T @ g2).reshape(K, Din, Dout)
        gx = None
        if x.requires_grad:
            # input gradient is a SAME correlation of g with the width-flipped filters
            flipped = _f64(filters.data)[::-1].transpose(0, 2, 1).reshape(K * Dout, Din)
            gx = (unfold_array(g, K).reshape(B * L, K * Dout) @ flipped).reshape(B, L, Din)
        return gx, gw, g2.sum(axis=0)

    return make_result(out, "conv1d", (x, filters, bias), backward_fn, x.dtype)


def depth_concat(xs):
    """Stack features along depth in argument order."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("depth_concat needs at least one tensor")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(f"depth_concat: leading dims {x.shape[:-1]} != {lead}")
    sizes = [x.shape[-1] for x in xs]
    out = np.concatenate([_f64(x.data) for x in xs], axis=-1)
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, "depth_concat", tuple(xs), backward_fn, xs[0].dtype)


def multiscale(x, banks):
    """Parallel convolutions of different widths, depth-concatenated.

    ``banks`` is a sequence of ``(filters, bias)`` pairs; the width of each
    bank is read from its filter shape.
    """
    outs = [conv1d(x, filters, bias) for filters, bias in banks]
    if len(outs) == 1:
        return outs[0]
    return depth_concat(outs)


def relu(x):
    x = as_tensor(x)
    xd = _f64(x.data)
    positive = xd > 0

    def backward_fn(g):
        # subgradient at exactly zero is 0
        return (g * positive,)

    return make_result(np.where(positive, xd, 0.0), "relu", (x,), backward_fn, x.dtype)


class BatchNormStats:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, depth, dtype=np.float32):
        self.mean = np.zeros(depth, dtype=dtype)
        self.var = np.ones(depth, dtype=dtype)


BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def batchnorm(x, gamma, beta, running, mode="train", mask=None, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalisation over every batch and sequence position.

    In train mode the statistics come from positions where ``mask`` is 1
    (all positions when ``mask`` is None) and ``running`` is updated in place;
    in infer mode ``running`` supplies them. Output is ``gamma * xhat + beta``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"batchnorm: gamma/beta must be ({D},)")
    xd = _f64(x.data)
    gd = _f64(gamma.data)
    lead = xd.shape[:-1]

    if mode == "infer":
        inv_std = 1.0 / np.sqrt(_f64(running.var) + eps)
        xhat = (xd - _f64(running.mean)) * inv_std
        out = xhat * gd + _f64(beta.data)

        def backward_fn(g):
            axes = tuple(range(g.ndim - 1))
            return g * gd * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_result(out, "batchnorm", (x, gamma, beta), backward_fn, x.dtype)

    if mode != "train":
        raise ContractError(f"unknown mode {mode!r}")
    if mask is None:
        m = np.ones(lead, dtype=np.float64)
    else:
        m = _f64(mask).reshape(lead)
    m = m[..., None]
    count = m.sum()
    if count < 2:
        raise ContractError(f"batchnorm needs at least 2 positions for statistics, got {int(count)}")
    axes = tuple(range(xd.ndim - 1))
    mean = (xd * m).sum(axis=axes) / count
    centered = xd - mean
    var = (centered ** 2 * m).sum(axis=axes) / count
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gd + _f64(beta.data)

    running.mean[...] = momentum * running.mean + (1.0 - momentum) * mean
    running.var[...] = momentum * running.var + (1.0 - momentum) * var

    def backward_fn(g):
        gxhat = g * gd
        # mean and variance see only masked positions, but every output depends on them
        d_mean = -inv_std * gxhat.sum(axis=axes)
        d_var = -0.5 * inv_std ** 3 * (gxhat * centered).sum(axis=axes)
        gx = gxhat * inv_std + m * (d_mean / count + d_var * 2.0 * centered / count)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    result = make_result(out, "batchnorm", (x, gamma, beta), backward_fn, x.dtype)
    result.saved.update(mean=mean, var=var)
    return result


def dropout_mask(shape, rate, rng):
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1 / (1 - rate)``."""
    keep = rng.uniform(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate, mode="train", rng=None, mask=None):
    """Inverted dropout. Identity in infer mode or when ``rate`` is 0.

    A precomputed ``mask`` (as returned by :func:`dropout_mask`) overrides
    ``rng``; the mask used is kept in ``result.saved['mask']``.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return make_result(_f64(x.data), "dropout", (x,), lambda g: (g,), x.dtype)
    if mask is None:
        if rng is None:
            raise ContractError("train-mode dropout needs an RngStream or a mask")
        mask = dropout_mask(x.shape, rate, rng)
    mask = _f64(mask)

    result = make_result(_f64(x.data) * mask, "dropout", (x,), lambda g: (g * mask,), x.dtype)
    result.saved["mask"] = mask
    return result


def log_softmax_array(logits):
    z = _f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent_masked(logits, labels, mask):
    """Mean cross-entropy over positions where ``mask`` is 1.

    Returns ``(loss, probs)`` where ``loss`` is a scalar Tensor and ``probs``
    a float64 array of per-position class probabilities.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    m = _f64(mask)
    if labels.shape != logits.shape[:-1] or m.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} / mask {m.shape} do not match logits {logits.shape}")
    total = m.sum()
    if total <= 0:
        raise ContractError("loss over an all-zero mask is undefined")
    n_classes = logits.shape[-1]
    valid = m > 0
    if np.any((labels[valid] < 0) | (labels[valid] >= n_classes)):
        raise ContractError(f"labels must lie in [0, {n_classes}) at valid positions")
    safe = np.where(valid, labels, 0).astype(np.int64)
    logp = log_softmax_array(logits.data)
    probs = np.exp(logp)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / total

    def backward_fn(g):
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (g * (probs - onehot) * (m / total)[..., None],)

    return make_result(np.asarray(loss), "softmax_xent", (logits,), backward_fn, logits.dtype), probs


def weighted_sum(x, weights=None):
    """``sum(x * weights)`` as a scalar; plain sum when ``weights`` is None."""
    x = as_tensor(x)
    w = np.ones(x.shape) if weights is None else _f64(weights)
    if w.shape != x.shape:
        raise DimensionError(f"weights {w.shape} != input {x.shape}")
    out = np.asarray((_f64(x.data) * w).sum())
    return make_result(out, "weighted_sum", (x,), lambda g: (g * w,), x.dtype)


__all__ = [
    "BatchNormStats", "RngStream", "Tensor", "batchnorm", "conv1d", "dense", "depth_concat",
    "dropout", "dropout_mask", "fold_array", "log_softmax_array", "multiscale", "relu",
    "softmax_xent_masked", "unfold_array", "weighted_sum", "window_gather",
]
