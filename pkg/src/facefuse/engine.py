"""Numerical core: layer forward/backward passes, loss, SGD and gradient checks.

Tensors are plain ``numpy.ndarray`` values. Every layer op accepts a single
example (``[C, H, W]`` for images, ``[in]`` for vectors) or a batch with a
leading ``N`` axis; parameter gradients of a batch are summed over it.
All functions are pure: nothing is cached between calls.
"""

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError, LabelError


@dataclass
class LayerParams:
    kind: str  # "conv" or "fc"
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kind == "conv":
            if self.weights.ndim != 4:
                raise DimensionError(
                    f"conv weights must be [K, C, kh, kw], got shape {self.weights.shape}")
        elif self.kind == "fc":
            if self.weights.ndim != 2:
                raise DimensionError(
                    f"fc weights must be [out, in], got shape {self.weights.shape}")
        else:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias length {self.bias.shape} does not match {self.weights.shape[0]} outputs")

    def copy(self):
        return LayerParams(self.kind, self.weights.copy(), self.bias.copy())


@dataclass
class GradientBundle:
    weights: np.ndarray
    bias: np.ndarray
    input: np.ndarray


@dataclass
class PoolIndices:
    """Argmax positions from a max-pool forward pass.

    ``flat`` holds, for every output cell, the flat index into the ``H*W``
    plane of the input channel it came from.
    """
    flat: np.ndarray
    input_shape: Tuple[int, ...]


def _as_batch(x, ndim):
    x = np.asarray(x)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionError(f"expected a {ndim}-D tensor or a batch of them, got shape {x.shape}")


def conv_output_extent(size, kernel, stride, padding, axis="H"):
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigurationError(
            f"kernel {kernel} does not fit {axis}={size} with padding {padding}")
    if span % stride:
        raise ConfigurationError(
            f"output extent along {axis} is not an integer: ({size} + 2*{padding} - {kernel})/{stride} + 1")
    return span // stride + 1


def _check_conv(x, params, stride, padding):
    if params.kind != "conv":
        raise ConfigurationError("conv2d needs conv parameters")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride {stride} / padding {padding}")
    _, c, h, w = x.shape
    k, pc, kh, kw = params.weights.shape
    if c != pc:
        raise DimensionError(f"channel axis: input has {c} channels, weights expect {pc}")
    return (conv_output_extent(h, kh, stride, padding, "H"),
            conv_output_extent(w, kw, stride, padding, "W"))


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold a batch ``[N, C, H, W]`` into columns ``[N, C*kh*kw, Ho*Wo]``."""
    n, c, h, w = x.shape
    ho = conv_output_extent(h, kh, stride, padding, "H")
    wo = conv_output_extent(w, kw, stride, padding, "W")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, input_shape, kh, kw, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = input_shape
    ho = conv_output_extent(h, kh, stride, padding, "H")
    wo = conv_output_extent(w, kw, stride, padding, "W")
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def conv2d_forward(x, params: LayerParams, stride=1, padding=0, cols=None):
    """Cross-correlate ``x`` with ``params.weights`` and add the bias.

    ``cols`` may carry a precomputed :func:`im2col` of ``x`` (batched form).
    """
    xb, single = _as_batch(x, 3)
    ho, wo = _check_conv(xb, params, stride, padding)
    k, c, kh, kw = params.weights.shape
    if cols is None:
        cols = im2col(xb, kh, kw, stride, padding)
    out = np.matmul(params.weights.reshape(k, -1), cols)
    out = out.reshape(xb.shape[0], k, ho, wo) + params.bias[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(x, params: LayerParams, upstream, stride=1, padding=0, cols=None,
                    need_input_grad=True) -> GradientBundle:
    xb, single = _as_batch(x, 3)
    ho, wo = _check_conv(xb, params, stride, padding)
    gb, _ = _as_batch(upstream, 3)
    k, c, kh, kw = params.weights.shape
    expected = (xb.shape[0], k, ho, wo)
    if gb.shape != expected:
        raise DimensionError(f"upstream gradient shape {gb.shape} != forward output shape {expected}")
    if cols is None:
        cols = im2col(xb, kh, kw, stride, padding)
    g2 = gb.reshape(xb.shape[0], k, ho * wo)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(params.weights.shape)
    db = gb.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        dcols = np.matmul(params.weights.reshape(k, -1).T, g2)
        dx = col2im(dcols, xb.shape, kh, kw, stride, padding)
        if single:
            dx = dx[0]
    return GradientBundle(dw, db, dx)


def maxpool_forward(x, window=2, stride=2):
    """Max over each ``window x window`` cell; ties go to the lowest flat index.

    Trailing rows/columns that do not fill a whole window are dropped.
    """
    xb, single = _as_batch(x, 3)
    if window < 1 or stride < 1:
        raise ConfigurationError(f"invalid pooling window {window} / stride {stride}")
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ConfigurationError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    base = (np.arange(ho)[:, None] * stride) * w + np.arange(wo)[None, :] * stride
    out = None
    flat = None
    # offsets are scanned in row-major order and only a strictly larger value
    # replaces the running max, so ties keep the lowest flat index
    for i in range(window):
        for j in range(window):
            v = xb[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            if out is None:
                out = v.copy()
                flat = np.broadcast_to(base, v.shape).copy()
            else:
                better = v > out
                np.copyto(out, v, where=better)
                np.copyto(flat, base + (i * w + j), where=better)
    if single:
        return out[0], PoolIndices(flat[0], (c, h, w))
    return out, PoolIndices(flat, (n, c, h, w))


def maxpool_backward(indices: PoolIndices, upstream):
    upstream = np.asarray(upstream)
    if upstream.shape != indices.flat.shape:
        raise DimensionError(
            f"upstream gradient shape {upstream.shape} does not match pooled shape {indices.flat.shape}")
    shape = indices.input_shape
    plane = shape[-2] * shape[-1]
    lead = int(np.prod(shape[:-2]))
    offsets = (np.arange(lead) * plane).reshape(shape[:-2] + (1, 1))
    grad = np.bincount((indices.flat + offsets).ravel(), weights=upstream.ravel(),
                       minlength=lead * plane)
    return grad.reshape(shape).astype(upstream.dtype, copy=False)


def fc_forward(x, params: LayerParams):
    if params.kind != "fc":
        raise ConfigurationError("fc_forward needs fc parameters")
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None] if single else x.reshape(x.shape[0], -1)
    if xb.shape[1] != params.weights.shape[1]:
        raise DimensionError(
            f"fc input length {xb.shape[1]} != weight input dim {params.weights.shape[1]}")
    out = xb @ params.weights.T + params.bias
    return out[0] if single else out


def fc_backward(x, params: LayerParams, upstream) -> GradientBundle:
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    single = x.ndim == 1
    xb = x[None] if single else x.reshape(x.shape[0], -1)
    gb = upstream[None] if upstream.ndim == 1 else upstream
    out_dim, in_dim = params.weights.shape
    if xb.shape[1] != in_dim:
        raise DimensionError(f"fc input length {xb.shape[1]} != weight input dim {in_dim}")
    if gb.shape != (xb.shape[0], out_dim):
        raise DimensionError(f"upstream gradient shape {gb.shape} != ({xb.shape[0]}, {out_dim})")
    dw = gb.T @ xb
    db = gb.sum(axis=0)
    dx = gb @ params.weights
    dx = dx[0] if single else dx.reshape(x.shape)
    return GradientBundle(dw, db, dx)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise DimensionError(f"relu upstream shape {upstream.shape} != input shape {x.shape}")
    return upstream * (x > 0)


def softmax_cross_entropy(logits, label):
    """Softmax cross-entropy against integer labels.

    With 1-D ``logits`` and a scalar label this returns ``(loss, probs,
    grad)`` for that example. With ``[N, n]`` logits and ``N`` labels the
    loss is the batch mean and ``grad`` is the gradient of that mean.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
    n_cls = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise LabelError(f"label out of range [0, {n_cls})")
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    rows = np.arange(z.shape[0])
    losses = np.log(denom[:, 0]) - shifted[rows, labels]
    grad = probs.copy()
    grad[rows, labels] -= 1
    if single:
        return float(losses[0]), probs[0], grad[0]
    grad /= z.shape[0]
    return float(losses.mean()), probs, grad


def sgd_step(params: Sequence[LayerParams], grads: Sequence, lr: float) -> List[LayerParams]:
    """Return new parameters ``p - lr * g``.

    ``grads`` may hold ``GradientBundle`` objects or ``(dw, db)`` pairs.
    ``lr == 0`` is allowed and leaves parameters unchanged.
    """
    if not np.isfinite(lr) or lr < 0:
        raise ConfigurationError(f"learning rate must be finite and >= 0, got {lr}")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameter layers but {len(grads)} gradients")
    updated = []
    for p, g in zip(params, grads):
        dw, db = (g.weights, g.bias) if isinstance(g, GradientBundle) else g
        if dw.shape != p.weights.shape or db.shape != p.bias.shape:
            raise DimensionError(
                f"gradient shapes {dw.shape}/{db.shape} != parameter shapes "
                f"{p.weights.shape}/{p.bias.shape}")
        dt = p.weights.dtype
        updated.append(LayerParams(p.kind,
                                   (p.weights - dt.type(lr) * dw).astype(dt, copy=False),
                                   (p.bias - dt.type(lr) * db).astype(dt, copy=False)))
    return updated


def relative_error(analytic, numeric):
    """``|a - n| / (|a| + |n|)`` in the 2-norm; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, eps=1e-5):
    """Central differences of ``f`` w.r.t. every entry of ``array`` (mutated in place, restored)."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * eps)
    return grad


def grad_check(fragment, x, eps=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``fragment`` is anything with a ``params`` list of ``LayerParams`` and a
    ``loss_and_grads(x)`` method returning ``(loss, [GradientBundle...],
    input_grad)``; a ``Network`` plus label binding qualifies. The input
    gradient is checked as well when ``x`` is floating point.
    """
    x = np.array(x, dtype=np.float64)
    _, grads, dx = fragment.loss_and_grads(x)
    worst = 0.0

    def loss():
        return fragment.loss_and_grads(x)[0]

    for p, g in zip(fragment.params, grads):
        for arr, ana in ((p.weights, g.weights), (p.bias, g.bias)):
            if arr.dtype != np.float64:
                raise ConfigurationError("grad_check requires 64-bit parameters")
            worst = max(worst, relative_error(ana, numeric_gradient(loss, arr, eps)))
    if dx is not None and x.size:
        worst = max(worst, relative_error(dx, numeric_gradient(loss, x, eps)))
    return worst


class _Fragment:
    """One layer op followed by a fixed random linear read-out, as a scalar loss."""

    def __init__(self, forward, backward, params, readout):
        self.params = params
        self._forward = forward
        self._backward = backward
        self._readout = readout

    def loss_and_grads(self, x):
        out = self._forward(x)
        loss = float(np.sum(out * self._readout))
        grads, dx = self._backward(x, self._readout)
        return loss, grads, dx


def _conv_case(rng):
    c, k, kh = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    ho, wo = rng.integers(1, 4, size=2)
    h = int((ho - 1) * stride + kh - 2 * pad)
    w = int((wo - 1) * stride + kh - 2 * pad)
    if h < 1 or w < 1:
        h, w, pad = int((ho - 1) * stride + kh), int((wo - 1) * stride + kh), 0
    p = LayerParams("conv", rng.normal(size=(k, c, kh, kh)), rng.normal(size=k))
    n = int(rng.integers(1, 3))
    x = rng.normal(size=(n, c, h, w))
    out_shape = conv2d_forward(x, p, stride, pad).shape
    return _Fragment(lambda x: conv2d_forward(x, p, stride, pad),
                     lambda x, g: ([conv2d_backward(x, p, g, stride, pad)],
                                   conv2d_backward(x, p, g, stride, pad).input),
                     [p], rng.normal(size=out_shape)), x


def _fc_case(rng):
    n_in, n_out, n = (int(v) for v in rng.integers(1, 8, size=3))
    p = LayerParams("fc", rng.normal(size=(n_out, n_in)), rng.normal(size=n_out))
    x = rng.normal(size=(n, n_in))
    return _Fragment(lambda x: fc_forward(x, p),
                     lambda x, g: ([fc_backward(x, p, g)], fc_backward(x, p, g).input),
                     [p], rng.normal(size=(n, n_out))), x


def _relu_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep clear of the kink
    return _Fragment(relu, lambda x, g: ([], relu_backward(x, g)), [], rng.normal(size=shape)), x


def _pool_case(rng):
    window, stride = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(window, window + 5, size=2))
    # distinct values spaced far wider than eps, so no perturbation flips an argmax
    x = (rng.permutation(c * h * w) * 0.01 + rng.uniform(0, 1e-3)).reshape(c, h, w)
    out_shape = maxpool_forward(x, window, stride)[0].shape
    return _Fragment(lambda x: maxpool_forward(x, window, stride)[0],
                     lambda x, g: ([], maxpool_backward(maxpool_forward(x, window, stride)[1], g)),
                     [], rng.normal(size=out_shape)), x


class _SoftmaxFragment:
    params: list = []

    def __init__(self, label):
        self.label = label

    def loss_and_grads(self, x):
        loss, _, grad = softmax_cross_entropy(x, self.label)
        return loss, [], grad


def _softmax_case(rng):
    n = int(rng.integers(2, 10))
    return _SoftmaxFragment(int(rng.integers(0, n))), rng.normal(scale=3.0, size=n)


LAYER_CASES = {
    "conv": _conv_case,
    "fc": _fc_case,
    "relu": _relu_case,
    "maxpool": _pool_case,
    "softmax_xent": _softmax_case,
}


def layer_gradchecks(cases=50, seed=0, eps=1e-5, kinds=None):
    """Worst relative gradient error per layer kind over ``cases`` random 64-bit cases."""
    worst = {}
    for kind in kinds or LAYER_CASES:
        rng = np.random.default_rng([seed, list(LAYER_CASES).index(kind)])
        worst[kind] = max(grad_check(*LAYER_CASES[kind](rng), eps=eps) for _ in range(cases))
    return worst
