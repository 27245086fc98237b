"""Small float64 layer engine with hand-written backward passes.

Activations are batched ``(N, H, W, C)`` arrays (channels innermost) or
``(N, D)`` matrices.  Layers never own weights: they read views into a flat
parameter vector, so the vector itself is what gets averaged, shipped and
checkpointed.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import _kernels

__all__ = [
    "ConfigurationError",
    "LayerSpec",
    "ParamVector",
    "conv2d_forward",
    "conv2d_backward",
    "upconv2d_forward",
    "upconv2d_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "upsample2x2_forward",
    "upsample2x2_backward",
    "dense_forward",
    "dense_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "softmax",
    "softmax_crossentropy",
    "mse_loss",
    "sgd_step",
    "gradient_check",
]


class ConfigurationError(ValueError):
    """Raised when shapes or layer definitions are inconsistent."""


LAYER_KINDS = ("conv", "maxpool", "upsample", "dense", "relu", "sigmoid", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a fixed network.

    ``conv`` uses ``kernel``, ``c_in`` and ``c_out`` (same padding, stride 1);
    ``dense`` uses ``c_in``/``c_out`` as input/output widths.  Other kinds
    carry no parameters.
    """

    kind: str
    kernel: int = 0
    c_in: int = 0
    c_out: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ConfigurationError(f"{self.label}: same-padding conv needs an odd kernel, got {self.kernel}")
        if self.kind in ("conv", "dense") and (self.c_in < 1 or self.c_out < 1):
            raise ConfigurationError(f"{self.label}: channel counts must be positive")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.kernel, self.kernel, self.c_in, self.c_out)
        if self.kind == "dense":
            return (self.c_in, self.c_out)
        return ()

    @property
    def param_count(self) -> int:
        if self.kind == "conv":
            return self.kernel * self.kernel * self.c_in * self.c_out + self.c_out
        if self.kind == "dense":
            return self.c_in * self.c_out + self.c_out
        return 0

    @property
    def fans(self) -> tuple[int, int]:
        """(fan_in, fan_out) as used by Glorot initialisation."""
        if self.kind == "conv":
            k2 = self.kernel * self.kernel
            return k2 * self.c_in, k2 * self.c_out
        return self.c_in, self.c_out


class ParamVector:
    """Flat float64 parameters plus a table of named contiguous segments."""

    def __init__(self, values, segments: dict[str, slice]):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.segments = dict(segments)
        end = max((s.stop for s in self.segments.values()), default=0)
        if end != self.values.size:
            raise ConfigurationError(
                f"segment table covers {end} values but vector has {self.values.size}"
            )

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.segments[name]]

    def gather(self) -> np.ndarray:
        """Copy of the flat values."""
        return self.values.copy()

    def scatter(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.values.shape:
            raise ConfigurationError(f"expected {self.values.size} values, got {flat.size}")
        self.values[...] = flat

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Rows are output pixels; columns are ordered (ky, kx, channel)."""
    return _kernels.im2col(np.ascontiguousarray(x), k)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    """Adjoint of ``_im2col``."""
    n, h, w, c = shape
    return _kernels.col2im(np.ascontiguousarray(cols), n, h, w, c, k)


def _check_conv(x: np.ndarray, w: np.ndarray, name: str) -> None:
    if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ConfigurationError(f"{name}: kernel must be (k, k, c_in, c_out) with odd k, got {w.shape}")
    if x.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ConfigurationError(
            f"{name}: input has {x.shape[-1]} channels but kernel expects {w.shape[2]}"
        )


def _flip_kernel(w: np.ndarray) -> np.ndarray:
    """Kernel of the adjoint same-padding convolution."""
    return np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))


def _conv_forward(x, w, b):
    """Returns ``(output, cols)``; ``cols`` is the im2col matrix when the
    gather path ran (reused by the backward pass) and None otherwise."""
    k, c_in, c_out = w.shape[0], w.shape[2], w.shape[3]
    n, h, wd, _ = x.shape
    if c_out < c_in:
        # few output channels: multiply first, then sum the k*k shifted partial maps
        part = x.reshape(-1, c_in) @ w.transpose(2, 0, 1, 3).reshape(c_in, -1)
        out = _kernels.tap_sum(part, n, h, wd, k, c_out)
        out += b
        return out, None
    cols = _im2col(x, k)
    out = cols @ w.reshape(-1, c_out)
    out += b
    return out.reshape(n, h, wd, c_out), cols


def conv2d_forward(x, w, b, *, name: str = "conv") -> np.ndarray:
    """Same-padding, stride-1 convolution (cross-correlation).

    ``x`` is ``(N, H, W, C_in)`` or a single ``(H, W, C_in)`` image; ``w`` is
    ``(k, k, C_in, C_out)``.
    """
    x, single = _as_batch(x, 4)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(x, w, name)
    out = _conv_forward(x, w, b)[0]
    return out[0] if single else out


def conv2d_backward(grad, x, w, *, need_input_grad: bool = True, name: str = "conv", cols=None):
    """Gradients of ``conv2d_forward``.

    Returns ``(input_grad, weight_grad, bias_grad)``; ``input_grad`` is None
    when ``need_input_grad`` is false.
    """
    x, single = _as_batch(x, 4)
    grad, _ = _as_batch(grad, 4)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(x, w, name)
    k, c_in, c_out = w.shape[0], w.shape[2], w.shape[3]
    if grad.shape != x.shape[:3] + (c_out,):
        raise ConfigurationError(f"{name}: upstream gradient shape {grad.shape} does not match output")
    db = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    if c_out < c_in:
        # im2col of the (thin) upstream gradient serves both products
        gcols = _im2col(grad, k)
        dw_flip = x.reshape(-1, c_in).T @ gcols  # (c_in, k*k*c_out) in flipped tap order
        dw = dw_flip.reshape(c_in, k, k, c_out)[:, ::-1, ::-1].transpose(1, 2, 0, 3)
        dx = None
        if need_input_grad:
            dx = (gcols @ _flip_kernel(w).reshape(-1, c_in)).reshape(x.shape)
    else:
        if cols is None:
            cols = _im2col(x, k)
        g2 = grad.reshape(-1, c_out)
        dw = (cols.T @ g2).reshape(w.shape)
        dx = None
        if need_input_grad:
            dx = _col2im(g2 @ w.reshape(-1, c_out).T, x.shape, k)
    dw = np.ascontiguousarray(dw)
    if single and dx is not None:
        dx = dx[0]
    return dx, dw, db


@functools.lru_cache(maxsize=None)
def _fold_matrix(k: int) -> np.ndarray:
    """F[(u, v, a, b), (dy, dx)] = 1 when tap (dy, dx) of a k x k kernel over a
    2x-upsampled grid lands on source offset (u, v) for output phase (a, b)."""
    p = k // 2
    m = (p + 1) // 2
    r = 2 * m + 1
    taps = np.zeros((2, k, r))
    for a in range(2):
        for d in range(k):
            taps[a, d, (a + d - p) // 2 + m] = 1.0
    fold = np.einsum("ayu,bxv->uvabyx", taps, taps)
    return fold.reshape(r * r * 4, k * k)


def _effective_kernel(w: np.ndarray) -> np.ndarray:
    k, _, c_in, c_out = w.shape
    fold = _fold_matrix(k)
    r = int(round((fold.shape[0] // 4) ** 0.5))
    weff = (fold @ w.reshape(k * k, c_in * c_out)).reshape(r, r, 2, 2, c_in, c_out)
    return weff.transpose(0, 1, 4, 2, 3, 5).reshape(r * r * c_in, 4 * c_out)


def _upconv_forward(x, w, b):
    n, h, wd, c_in = x.shape
    c_out = w.shape[3]
    weff = _effective_kernel(w)
    r = int(round((weff.shape[0] // c_in) ** 0.5))
    cols = _im2col(x, r)
    out = _kernels.phases_to_image(cols @ weff, n, h, wd, c_out, np.ascontiguousarray(b))
    return out, (cols, weff)


def upconv2d_forward(x, w, b, *, name: str = "upconv") -> np.ndarray:
    """``conv2d_forward(upsample2x2_forward(x), w, b)`` computed on the small grid.

    Each of the four output phases is a 3x3 convolution of ``x`` with a
    folded kernel, so the upsampled tensor is never built.
    """
    x, single = _as_batch(x, 4)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(x, w, name)
    out = _upconv_forward(x, w, b)[0]
    return out[0] if single else out


def upconv2d_backward(grad, x, w, *, need_input_grad: bool = True, name: str = "upconv", aux=None):
    x, single = _as_batch(x, 4)
    grad, _ = _as_batch(grad, 4)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(x, w, name)
    n, h, wd, c_in = x.shape
    k, c_out = w.shape[0], w.shape[3]
    if grad.shape != (n, 2 * h, 2 * wd, c_out):
        raise ConfigurationError(f"{name}: upstream gradient shape {grad.shape} does not match output")
    fold = _fold_matrix(k)
    r = int(round((fold.shape[0] // 4) ** 0.5))
    cols, weff = aux if aux is not None else (_im2col(x, r), _effective_kernel(w))
    g = _kernels.image_to_phases(np.ascontiguousarray(grad))
    dweff = (cols.T @ g).reshape(r, r, c_in, 2, 2, c_out).transpose(0, 1, 3, 4, 2, 5)
    dw = (fold.T @ dweff.reshape(r * r * 4, c_in * c_out)).reshape(w.shape)
    db = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    dx = None
    if need_input_grad:
        dx = _col2im(g @ weff.T, x.shape, r)
        if single:
            dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2x2_forward(x, *, name: str = "maxpool"):
    """Returns ``(output, argmax)``; ``argmax`` indexes the 2x2 block in
    row-major order, ties going to the first maximum."""
    x, single = _as_batch(x, 4)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"{name}: max-pool needs even spatial dims, got {h}x{w}")
    out, idx = _kernels.maxpool_forward(np.ascontiguousarray(x))
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2x2_backward(grad, argmax):
    grad, single = _as_batch(grad, 4)
    argmax = argmax[None] if single else argmax
    out = _kernels.maxpool_backward(np.ascontiguousarray(grad), np.ascontiguousarray(argmax))
    return out[0] if single else out


def upsample2x2_forward(x):
    """Nearest-neighbour: every cell becomes a 2x2 block."""
    x = np.asarray(x, dtype=np.float64)
    return x.repeat(2, axis=-3).repeat(2, axis=-2)


def upsample2x2_backward(grad):
    grad = np.asarray(grad, dtype=np.float64)
    *lead, h, w, c = grad.shape
    return grad.reshape(*lead, h // 2, 2, w // 2, 2, c).sum(axis=(-4, -2))


# ---------------------------------------------------------------------------
# dense and activations


def dense_forward(x, w, b, *, name: str = "dense"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ConfigurationError(f"{name}: input width {x.shape[-1]} != {w.shape[0]}")
    return x @ w + b


def dense_backward(grad, x, w, *, need_input_grad: bool = True):
    """Returns ``(input_grad, weight_grad, bias_grad)``."""
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad)
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    dx = None
    if need_input_grad:
        dx = (g2 @ w.T).reshape(np.shape(x))
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, out):
    return np.where(out > 0.0, grad, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(grad, out):
    return grad * out * (1.0 - out)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_crossentropy(logits, labels):
    """Cross-entropy of softmax(logits) against integer labels.

    With 1-D logits and an int label returns ``(loss, grad)`` for one sample.
    With ``(N, C)`` logits returns the *summed* loss and per-row gradients
    ``softmax - onehot``; callers divide by N.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z2.shape[0]:
        raise ConfigurationError("one label per row of logits required")
    if np.any(y < 0) or np.any(y >= z2.shape[1]):
        raise ConfigurationError(f"labels must lie in [0, {z2.shape[1]})")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    loss = float(np.sum(lse - shifted[rows, y]))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, y] -= 1.0
    return (loss, grad[0]) if single else (loss, grad)


def mse_loss(reconstruction, target):
    """Summed squared error and its gradient w.r.t. ``reconstruction``."""
    xh = np.asarray(reconstruction, dtype=np.float64)
    x = np.asarray(target, dtype=np.float64)
    if xh.shape != x.shape:
        raise ConfigurationError(f"shape mismatch {xh.shape} vs {x.shape}")
    diff = xh - x
    return float(np.sum(diff * diff)), 2.0 * diff


def sgd_step(params, grads, eta: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ConfigurationError(f"parameter/gradient length mismatch: {params.size} vs {grads.size}")
    return params - eta * grads


def gradient_check(loss_and_grad, params, *, n_coords: int = 200, step: float = 1e-5,
                   seed: int = 0, coords=None, kink_tol: float = 1e-4, pattern=None,
                   full_output: bool = False):
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params) -> (loss, grad)``.  Coordinates where the one-sided
    differences disagree (a ReLU or max-pool kink inside the stencil) are
    skipped.  ``coords`` is the ordered candidate pool (default: a seeded
    permutation of all coordinates); the first ``n_coords`` usable ones count.
    ``pattern(params)``, when given, returns a token of the piecewise-smooth
    region (e.g. ReLU masks); coordinates whose stencil leaves the region are
    skipped as well.  With ``full_output`` returns ``(max_error, checked, skipped)``.
    """
    params = np.array(params, dtype=np.float64)
    loss, grad = loss_and_grad(params)
    if not np.isfinite(loss):
        raise FloatingPointError(f"loss is not finite at the supplied parameters: {loss}")
    base = pattern(params) if pattern else None
    rng = np.random.default_rng(seed)
    pool = rng.permutation(params.size) if coords is None else np.asarray(coords)
    want = min(n_coords, len(pool))
    worst = 0.0
    done = skipped = 0
    for i in pool:
        if done >= want:
            break
        orig = params[i]
        params[i] = orig + step
        lp = loss_and_grad(params)[0]
        sp = pattern(params) if pattern else None
        params[i] = orig - step
        lm = loss_and_grad(params)[0]
        sm = pattern(params) if pattern else None
        params[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"loss became non-finite while perturbing coordinate {i}")
        fwd = (lp - loss) / step
        bwd = (loss - lm) / step
        if (pattern and not sp == sm == base) or abs(fwd - bwd) > kink_tol * (abs(fwd) + abs(bwd)) + 1e-9:
            skipped += 1
            continue
        num = (lp - lm) / (2 * step)
        ana = grad[i]
        err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
        worst = max(worst, err)
        done += 1
    if full_output:
        return worst, done, skipped
    return worst
