"""Minimal dense-tensor engine with reverse-mode differentiation.

Implements exactly the layer set the deblurring network needs: same-padded
2-D convolution, 2x2 max pooling, nearest-neighbor up-convolution, ReLU /
sigmoid, channel concatenation, inverted dropout, MSE loss, He
initialization, and Adam. Tensors are dense numpy arrays laid out
(batch, height, width, channel). Gradients are recorded on an explicit
``GradTape`` and replayed in exact reverse execution order.

All operations are pure functions of their inputs (and an explicit seed
where randomness is involved): calling one never mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericError(RuntimeError):
    """Raised when a non-finite value reaches an operation that rejects it."""


# Cap on the number of elements a materialized im2col slab may hold; larger
# convolutions are processed in row chunks to bound peak memory.
_COL_BUDGET = 1 << 24


class Tensor4:
    """Dense 4-D array indexed (batch, height, width, channel)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires 4 dimensions, got shape {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor4(shape={self.shape}, dtype={self.data.dtype})"


class GradTape:
    """Ordered record of executed operations, replayed backwards once.

    Each forward op called with ``tape=...`` appends an entry holding its
    inputs, its output, and an adjoint callback. ``backward()`` seeds the
    recorded loss with gradient 1.0 and visits entries in exact reverse
    execution order, accumulating gradients per tensor. A tape is single
    use: after ``backward()`` it refuses further recording or replay.
    """

    def __init__(self):
        self._entries: list[tuple[list[int], int, object]] = []
        self._objects: dict[int, object] = {}
        self._loss_key: int | None = None
        self._grads: dict[int, np.ndarray] | None = None

    def _key(self, obj) -> int:
        k = id(obj)
        self._objects[k] = obj  # keep alive so ids stay unique
        return k

    def record(self, inputs, output, backward) -> None:
        """Append one op: ``backward(grad_out)`` must return per-input grads."""
        if self._grads is not None:
            raise RuntimeError("tape already consumed by backward(); re-record the forward pass")
        self._entries.append(([self._key(t) for t in inputs], self._key(output), backward))

    def record_loss(self, inputs, backward) -> None:
        """Append the scalar loss op that seeds the backward pass."""
        if self._loss_key is not None:
            raise RuntimeError("tape already holds a loss; one backward pass per tape")
        sentinel = object()
        self._loss_key = id(sentinel)
        self._objects[self._loss_key] = sentinel
        self._entries.append(([self._key(t) for t in inputs], self._loss_key, backward))

    def backward(self) -> None:
        """Replay adjoints in reverse execution order, consuming the tape."""
        if self._grads is not None:
            raise RuntimeError("tape already consumed by backward(); re-record the forward pass")
        if self._loss_key is None:
            raise RuntimeError("no loss recorded on this tape")
        acc: dict[int, np.ndarray] = {self._loss_key: np.array(1.0)}
        for input_keys, out_key, bwd in reversed(self._entries):
            grad_out = acc.pop(out_key, None)
            if grad_out is None:
                continue  # branch did not contribute to the loss
            for k, g in zip(input_keys, bwd(grad_out)):
                if g is None:
                    continue
                if k in acc:
                    acc[k] = acc[k] + g
                else:
                    acc[k] = g
        self._grads = acc

    def grad(self, obj) -> np.ndarray | None:
        """Gradient accumulated for a leaf tensor/array, or None."""
        if self._grads is None:
            raise RuntimeError("backward() has not run on this tape")
        return self._grads.get(id(obj))


def _same_pads(k: int) -> tuple[int, int]:
    # Size-preserving zero padding at stride 1: odd kernels pad symmetrically,
    # even kernels put the extra row/column after (bottom/right).
    return (k - 1) // 2, k // 2


def _corr2d(x: np.ndarray, w: np.ndarray, pads, stride: int = 1) -> np.ndarray:
    """Cross-correlate (b,h,w,cin) with (kh,kw,cin,cout) under explicit pads."""
    kh, kw, cin, cout = w.shape
    (pt, pb), (pl, pr) = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    wmat = w.reshape(kh * kw * cin, cout)
    b = x.shape[0]
    oh = (xp.shape[1] - kh) // stride + 1
    ow = (xp.shape[2] - kw) // stride + 1
    out = np.empty((b, oh, ow, cout), dtype=np.result_type(x.dtype, w.dtype))
    rows_per_chunk = max(1, _COL_BUDGET // max(1, ow * kh * kw * cin))
    for bi in range(b):
        for r0 in range(0, oh, rows_per_chunk):
            r1 = min(r0 + rows_per_chunk, oh)
            sl = xp[bi, r0 * stride : (r1 - 1) * stride + kh]
            win = sliding_window_view(sl, (kh, kw), axis=(0, 1))[::stride, ::stride]
            cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2))
            out[bi, r0:r1] = cols.reshape(r1 - r0, ow, kh * kw * cin) @ wmat
    return out


def _conv_weight_grad(x: np.ndarray, grad_y: np.ndarray, kshape, pads, stride: int) -> np.ndarray:
    kh, kw, cin, cout = kshape
    (pt, pb), (pl, pr) = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    dw = np.zeros((kh * kw * cin, cout), dtype=grad_y.dtype)
    oh, ow = grad_y.shape[1], grad_y.shape[2]
    rows_per_chunk = max(1, _COL_BUDGET // max(1, ow * kh * kw * cin))
    for bi in range(x.shape[0]):
        for r0 in range(0, oh, rows_per_chunk):
            r1 = min(r0 + rows_per_chunk, oh)
            sl = xp[bi, r0 * stride : (r1 - 1) * stride + kh]
            win = sliding_window_view(sl, (kh, kw), axis=(0, 1))[::stride, ::stride]
            cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2))
            cols = cols.reshape((r1 - r0) * ow, kh * kw * cin)
            dw += cols.T @ grad_y[bi, r0:r1].reshape((r1 - r0) * ow, cout)
    return dw.reshape(kh, kw, cin, cout)


def _conv_input_grad(grad_y: np.ndarray, w: np.ndarray, x_shape, pads, stride: int) -> np.ndarray:
    kh, kw, cin, cout = w.shape
    (pt, pb), (pl, pr) = pads
    if stride == 1:
        # Full correlation with the spatially flipped, io-swapped kernel.
        w_t = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        back_pads = ((kh - 1 - pt, kh - 1 - pb), (kw - 1 - pl, kw - 1 - pr))
        return _corr2d(grad_y, w_t, back_pads)
    # Generic strided path: scatter grad columns back into the padded input.
    b, oh, ow, _ = grad_y.shape
    grad_cols = grad_y.reshape(-1, cout) @ w.reshape(kh * kw * cin, cout).T
    grad_cols = grad_cols.reshape(b, oh, ow, kh, kw, cin)
    gxp = np.zeros((b, x_shape[1] + pt + pb, x_shape[2] + pl + pr, cin), dtype=grad_y.dtype)
    for dy in range(kh):
        for dx in range(kw):
            gxp[:, dy : dy + oh * stride : stride, dx : dx + ow * stride : stride] += grad_cols[:, :, :, dy, dx]
    return gxp[:, pt : pt + x_shape[1], pl : pl + x_shape[2]]


def conv2d(x: Tensor4, kernel: np.ndarray, bias: np.ndarray, stride: int = 1,
           tape: GradTape | None = None) -> Tensor4:
    """Size-preserving ("same") zero-padded 2-D convolution.

    ``kernel`` is (kh, kw, cin, cout), ``bias`` is (cout,). At stride 1 the
    output spatial dims equal the input's; odd kernels pad symmetrically and
    even kernels pad the extra row/column on the bottom/right.
    """
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D (kh,kw,cin,cout), got shape {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(
            f"input channels {x.shape} do not match kernel {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    kh, kw = kernel.shape[:2]
    pads = (_same_pads(kh), _same_pads(kw))
    y = _corr2d(x.data, kernel, pads, stride) + bias
    out = Tensor4(y)
    if tape is not None:
        x_data, x_shape = x.data, x.shape

        def backward(grad_out):
            gy = np.asarray(grad_out)
            gx = _conv_input_grad(gy, kernel, x_shape, pads, stride)
            gw = _conv_weight_grad(x_data, gy, kernel.shape, pads, stride)
            gb = gy.sum(axis=(0, 1, 2))
            return gx, gw, gb

        tape.record([x, kernel, bias], out, backward)
    return out


def maxpool2x2(x: Tensor4, tape: GradTape | None = None) -> Tensor4:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    element of the window in row-major scan order."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 requires even spatial dims, got {x.shape}")
    win = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(b, h // 2, w // 2, 4, c)
    idx = win.argmax(axis=3)  # argmax returns the first max: row-major tie-break
    y = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    out = Tensor4(y)
    if tape is not None:

        def backward(grad_out):
            g4 = np.zeros((b, h // 2, w // 2, 4, c), dtype=grad_out.dtype)
            np.put_along_axis(g4, idx[:, :, :, None, :], grad_out[:, :, :, None, :], axis=3)
            gx = g4.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
            return (gx.reshape(b, h, w, c),)

        tape.record([x], out, backward)
    return out


def upsample2x(x: Tensor4, tape: GradTape | None = None) -> Tensor4:
    """Nearest-neighbor 2x spatial upsampling."""
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    out = Tensor4(y)
    if tape is not None:
        b, h, w, c = x.shape

        def backward(grad_out):
            return (grad_out.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

        tape.record([x], out, backward)
    return out


def upconv2x(x: Tensor4, kernel: np.ndarray, bias: np.ndarray,
             tape: GradTape | None = None) -> Tensor4:
    """Nearest-neighbor 2x upsampling followed by a same-padded 2x2 convolution.

    Used in place of transposed convolution to avoid checkerboard artifacts;
    output spatial dims are exactly twice the input's.
    """
    kernel = np.asarray(kernel)
    if kernel.shape[:2] != (2, 2):
        raise ShapeError(f"upconv2x kernel must be 2x2, got shape {kernel.shape}")
    return conv2d(upsample2x(x, tape=tape), kernel, bias, tape=tape)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def activation(x: Tensor4, kind: str, tape: GradTape | None = None) -> Tensor4:
    """Elementwise activation, ``kind`` in {"relu", "sigmoid"}."""
    if kind == "relu":
        y = np.maximum(x.data, 0)
        out = Tensor4(y)
        if tape is not None:
            mask = x.data > 0

            def backward(grad_out):
                return (grad_out * mask,)

            tape.record([x], out, backward)
        return out
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        out = Tensor4(y)
        if tape is not None:

            def backward(grad_out):
                return (grad_out * y * (1.0 - y),)

            tape.record([x], out, backward)
        return out
    raise ValueError(f"unknown activation kind {kind!r}")


def concat_channels(a: Tensor4, b: Tensor4, tape: GradTape | None = None) -> Tensor4:
    """Concatenate along channels; ``a``'s channels precede ``b``'s."""
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(
            f"concat_channels requires equal batch/spatial dims, got {a.shape} vs {b.shape}")
    y = np.concatenate([a.data, b.data], axis=3)
    out = Tensor4(y)
    if tape is not None:
        ca = a.shape[3]

        def backward(grad_out):
            return grad_out[:, :, :, :ca], grad_out[:, :, :, ca:]

        tape.record([a, b], out, backward)
    return out


def dropout(x: Tensor4, rate: float, seed: int, training: bool,
            tape: GradTape | None = None) -> Tensor4:
    """Inverted dropout: zero each element with probability ``rate`` and scale
    survivors by 1/(1-rate) in training mode; identity in inference mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        out = Tensor4(x.data.copy())
        if tape is not None:
            tape.record([x], out, lambda grad_out: (grad_out,))
        return out
    rng = np.random.default_rng(seed)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = (rng.random(x.shape) >= rate) * scale
    out = Tensor4(x.data * mask)
    if tape is not None:

        def backward(grad_out):
            return (grad_out * mask,)

        tape.record([x], out, backward)
    return out


def mse_loss(pred: Tensor4, target: Tensor4, tape: GradTape | None = None) -> float:
    """Mean squared error over all tensor elements.

    The gradient with respect to ``pred`` is 2(pred - target)/N where N is
    the total element count.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    loss = float(np.mean(diff * diff))
    if tape is not None:
        n = diff.size

        def backward(grad_out):
            g = (2.0 / n) * grad_out * diff
            return g, -g

        tape.record_loss([pred, target], backward)
    return loss


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, np.ndarray], beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state.

    Parameters with no gradient entry are carried through untouched, moments
    included.
    """
    new_m, new_v, new_p = {}, {}, {}
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_m[name] = state.m[name]
            new_v[name] = state.v[name]
            new_p[name] = p
            continue
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
        new_p[name] = (p - step).astype(p.dtype, copy=False)
    return new_p, AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=eps)


def he_init(shape, seed: int, dtype=np.float32) -> np.ndarray:
    """He-normal weights (variance 2/fan_in); 1-D shapes are zero biases."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return np.zeros(shape, dtype=dtype)
    fan_in = int(np.prod(shape[:-1]))
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
