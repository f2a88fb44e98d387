"""Layer primitives with hand-written forward and backward passes.

Everything operates on plain numpy arrays laid out channels-first:
``(C, H, W)`` for a single image or ``(B, C, H, W)`` for a batch. All
operations are pure functions; whatever the backward pass needs is either
passed back in (inputs, weights) or returned by the forward pass (argmax
maps). Arrays keep their dtype, so the same code runs in float32 for
training and float64 for gradient verification.

Convolution here means cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError

WEIGHTED_KINDS = ("conv", "deconv")
LAYER_KINDS = ("conv", "deconv", "maxpool", "relu")


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``maxpool`` uses ``kernel_h``/``kernel_w`` as the pooling window and
    carries no channel counts; ``relu`` ignores every field.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigError(
                f"kernel extents must be >= 1, got {self.kernel_h}x{self.kernel_w}"
            )

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        if self.kind == "deconv":
            return (self.in_channels, self.out_channels, self.kernel_h, self.kernel_w)
        raise ConfigError(f"{self.kind} layers carry no weights")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Promote (C,H,W) to (1,C,H,W); report whether a squeeze is owed."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected rank-3 or rank-4 input, got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (B,C,H,W) into (B, C*kh*kw, out_h*out_w) patch columns."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than (padded) input {h}x{w}"
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow, _, _ = win.shape
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(
            f"kernel {kernel} larger than padded input extent {size + 2 * padding}"
        )
    out, rem = divmod(span, stride)
    if rem:
        raise ConfigError(
            f"non-integral output size: ({size} + 2*{padding} - {kernel}) "
            f"not divisible by stride {stride}"
        )
    return out + 1


def conv2d_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlate ``weights`` (C_out,C_in,kh,kw) over a zero-padded input."""
    x, squeeze = _batched(x)
    cout, cin, kh, kw = weights.shape
    b, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weights expect {cin}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(weights.reshape(cout, -1), cols)
    out += np.asarray(bias).reshape(cout, 1)
    out = out.reshape(b, cout, oh, ow)
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray,
    weights: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact adjoints of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    x, squeeze = _batched(x)
    grad_out, _ = _batched(grad_out)
    cout, cin, kh, kw = weights.shape
    b, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if grad_out.shape != (b, cout, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward "
            f"output {(b, cout, oh, ow)}"
        )

    cols = _im2col(x, kh, kw, stride, padding)
    go = grad_out.reshape(b, cout, oh * ow)

    grad_bias = go.sum(axis=(0, 2))
    grad_w = np.einsum("bol,bkl->ok", go, cols).reshape(weights.shape)

    grad_cols = np.matmul(weights.reshape(cout, -1).T, go)
    grad_x = _col2im(grad_cols, (b, cin, h, w), kh, kw, stride, padding, oh, ow)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_bias


def _col2im(cols, x_shape, kh, kw, stride, padding, oh, ow):
    """Scatter-add patch columns back onto the input grid."""
    b, c, h, w = x_shape
    buf = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    g6 = cols.reshape(b, c, kh, kw, oh, ow)
    for ki in range(kh):
        rs = slice(ki, ki + stride * (oh - 1) + 1, stride)
        for kj in range(kw):
            cs = slice(kj, kj + stride * (ow - 1) + 1, stride)
            buf[:, :, rs, cs] += g6[:, :, ki, kj]
    if padding:
        buf = buf[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(buf)


def deconv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - 1) * stride + kernel


def deconv2d_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
) -> np.ndarray:
    """Backwards strided convolution: scatter-accumulate transpose of conv.

    ``weights`` are laid out (C_in, C_out, kh, kw). Output spatial extent is
    ``(in - 1) * stride + kernel``.
    """
    x, squeeze = _batched(x)
    cin, cout, kh, kw = weights.shape
    b, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weights expect {cin}")
    oh = deconv_output_size(h, kh, stride)
    ow = deconv_output_size(w, kw, stride)

    # One GEMM against every kernel tap, then strided scatter-adds.
    xm = x.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    prod = xm @ weights.reshape(cin, cout * kh * kw)
    prod = prod.reshape(b, h, w, cout, kh, kw).transpose(0, 3, 4, 5, 1, 2)

    out = np.zeros((b, cout, oh, ow), dtype=prod.dtype)
    for ki in range(kh):
        rs = slice(ki, ki + stride * (h - 1) + 1, stride)
        for kj in range(kw):
            cs = slice(kj, kj + stride * (w - 1) + 1, stride)
            out[:, :, rs, cs] += prod[:, :, ki, kj]
    out += np.asarray(bias).reshape(1, cout, 1, 1)
    return out[0] if squeeze else out


def deconv2d_backward(
    x: np.ndarray,
    weights: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact adjoints of :func:`deconv2d_forward`."""
    x, squeeze = _batched(x)
    grad_out, _ = _batched(grad_out)
    cin, cout, kh, kw = weights.shape
    b, c, h, w = x.shape
    oh = deconv_output_size(h, kh, stride)
    ow = deconv_output_size(w, kw, stride)
    if grad_out.shape != (b, cout, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward "
            f"output {(b, cout, oh, ow)}"
        )

    # Gather the strided views that each input position scattered into.
    gath = np.empty((b, cout, kh, kw, h, w), dtype=grad_out.dtype)
    for ki in range(kh):
        rs = slice(ki, ki + stride * (h - 1) + 1, stride)
        for kj in range(kw):
            cs = slice(kj, kj + stride * (w - 1) + 1, stride)
            gath[:, :, ki, kj] = grad_out[:, :, rs, cs]

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    gm = gath.reshape(b, cout * kh * kw, h * w)
    grad_x = np.matmul(weights.reshape(cin, -1), gm).reshape(b, cin, h, w)

    xm = x.reshape(b, cin, h * w)
    grad_w = np.matmul(xm, gm.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(cin, cout, kh, kw)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_bias


def maxpool_forward(
    x: np.ndarray, window: int, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed max with an argmax map for the backward pass.

    The argmax map holds, per output position, the flat index (row * W + col)
    of the winning input pixel within its (b, c) plane. Ties go to the first
    element in row-major scan order.
    """
    if window < 1:
        raise ConfigError(f"pool window must be >= 1, got {window}")
    x, squeeze = _batched(x)
    b, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow, _, _ = win.shape
    flat = win.reshape(b, c, oh, ow, window * window)
    amax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]

    rows = amax // window + (np.arange(oh) * stride)[None, None, :, None]
    cols = amax % window + (np.arange(ow) * stride)[None, None, None, :]
    idx = rows * w + cols
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool_backward(
    argmax_map: np.ndarray, grad_out: np.ndarray, input_shape: tuple[int, ...]
) -> np.ndarray:
    """Route upstream gradient to argmax positions; overlaps accumulate."""
    squeeze = len(input_shape) == 3
    if squeeze:
        input_shape = (1,) + tuple(input_shape)
        argmax_map, grad_out = argmax_map[None], grad_out[None]
    if argmax_map.shape != grad_out.shape:
        raise ShapeError(
            f"argmax map shape {argmax_map.shape} != grad_out shape {grad_out.shape}"
        )
    b, c, h, w = input_shape
    buf = np.zeros((b * c, h * w), dtype=grad_out.dtype)
    idx = argmax_map.reshape(b * c, -1)
    go = grad_out.reshape(b * c, -1)
    np.add.at(buf, (np.arange(b * c)[:, None], idx), go)
    buf = buf.reshape(b, c, h, w)
    return buf[0] if squeeze else buf


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # Subgradient 0 at exactly 0.
    return grad_out * (x > 0)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Per-pixel softmax over the channel axis plus summed cross-entropy.

    ``logits`` is (C,H,W) or (B,C,H,W); ``labels`` holds integer class ids
    of matching spatial shape. Returns ``(loss, prob_map, grad_logits)``
    where loss is summed over every pixel (and batch element) and
    ``grad_logits = p - onehot(label)``.
    """
    logits, squeeze = _batched(logits)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    b, nc, h, w = logits.shape
    if nc < 2:
        raise ConfigError(f"need at least 2 classes, got {nc}")
    if labels.shape != (b, h, w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits spatial "
            f"shape {(b, h, w)}"
        )
    labels = labels.astype(np.int64, copy=False)
    if labels.size:
        lo, hi = labels.min(), labels.max()
        if lo < 0 or hi >= nc:
            bad = np.argwhere((labels < 0) | (labels >= nc))[0]
            raise DataError(
                f"label {labels[tuple(bad)]} out of range [0, {nc - 1}] at "
                f"pixel (batch={bad[0]}, row={bad[1]}, col={bad[2]})"
            )

    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)

    idx = labels[:, None, :, :]
    loss = -float(np.take_along_axis(logp, idx, axis=1).sum(dtype=np.float64))
    grad = probs.copy()
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    if squeeze:
        return loss, probs[0], grad[0]
    return loss, probs, grad


def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    """Corner-aligned source coordinates for each destination index."""
    if n_dst == 1 or n_src == 1:
        return np.zeros(n_dst)
    return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))


def bilinear_resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize over the last two axes.

    Resizing to the source shape returns a bitwise-equal copy.
    """
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"target extents must be >= 1, got {target_h}x{target_w}")
    h, w = image.shape[-2], image.shape[-1]
    if (target_h, target_w) == (h, w):
        return image.copy()
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    img = image.astype(dtype, copy=False)

    r = _axis_coords(h, target_h)
    c = _axis_coords(w, target_w)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(c).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0).astype(dtype)
    fc = (c - c0).astype(dtype)

    top = np.take(img, r0, axis=-2)
    bot = np.take(img, r1, axis=-2)
    frs = fr.reshape((-1, 1))
    rows = top * (1 - frs) + bot * frs
    left = np.take(rows, c0, axis=-1)
    right = np.take(rows, c1, axis=-1)
    return left * (1 - fc) + right * fc


def nearest_resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned nearest-neighbour resize (for label masks)."""
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"target extents must be >= 1, got {target_h}x{target_w}")
    h, w = image.shape[-2], image.shape[-1]
    if (target_h, target_w) == (h, w):
        return image.copy()
    r = np.floor(_axis_coords(h, target_h) + 0.5).astype(np.int64)
    c = np.floor(_axis_coords(w, target_w) + 0.5).astype(np.int64)
    return np.take(np.take(image, np.minimum(r, h - 1), axis=-2),
                   np.minimum(c, w - 1), axis=-1)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


FD_STEP = 1e-4
REL_ERR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """Outcome of one analytical-vs-numerical gradient comparison."""

    layer: str
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    params_checked: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def _numeric_grad(f, arr: np.ndarray, indices=None, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. entries of ``arr``.

    Mutates ``arr`` in place element by element, restoring each entry. With
    ``indices`` only those flat positions are probed (others return 0).
    """
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grad = np.zeros(flat.size)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad.reshape(arr.shape)


def grad_check(
    spec: LayerSpec,
    rng_seed: int = 0,
    tolerance: float = 1e-3,
    spatial: int = 6,
    max_params_per_tensor: int | None = None,
) -> GradCheckReport:
    """Check a layer's analytical gradients against central finite differences.

    Runs in float64. The scalar objective is the sum of the forward output
    weighted by a fixed random projection, so a single backward pass yields
    every analytical derivative at once. ``max_params_per_tensor`` limits how
    many entries of each tensor are probed numerically (a seeded subsample);
    by default every entry is probed.
    """
    rng = np.random.default_rng(rng_seed)
    kind = spec.kind
    cin = max(spec.in_channels, 1)

    if kind == "relu":
        # Keep inputs away from the kink at 0 where the derivative jumps.
        x = rng.uniform(0.1, 1.0, size=(cin, spatial, spatial))
        x *= rng.choice([-1.0, 1.0], size=x.shape)
        proj = rng.standard_normal(x.shape)
        analytic = {"input": relu_backward(x, proj)}
        tensors = {"input": x}
        forward = lambda: float((relu(x) * proj).sum())
    elif kind == "maxpool":
        x = rng.standard_normal((cin, spatial, spatial))
        out, amax = maxpool_forward(x, spec.kernel_h, spec.stride)
        proj = rng.standard_normal(out.shape)
        analytic = {"input": maxpool_backward(amax, proj, x.shape)}
        tensors = {"input": x}

        def forward():
            o, _ = maxpool_forward(x, spec.kernel_h, spec.stride)
            return float((o * proj).sum())
    elif kind in ("conv", "deconv"):
        x = rng.standard_normal((cin, spatial, spatial))
        w = rng.standard_normal(spec.weight_shape()) * 0.5
        bias = rng.standard_normal(spec.out_channels) * 0.1
        if kind == "conv":
            fwd = lambda: conv2d_forward(x, w, bias, spec.stride, spec.padding)
        else:
            fwd = lambda: deconv2d_forward(x, w, bias, spec.stride)
        proj = rng.standard_normal(fwd().shape)
        if kind == "conv":
            gx, gw, gb = conv2d_backward(x, w, proj, spec.stride, spec.padding)
        else:
            gx, gw, gb = deconv2d_backward(x, w, proj, spec.stride)
        analytic = {"input": gx, "weights": gw, "bias": gb}
        tensors = {"input": x, "weights": w, "bias": bias}
        forward = lambda: float((fwd() * proj).sum())
    else:
        raise ConfigError(f"no gradient check for layer kind {kind!r}")

    report = GradCheckReport(layer=_describe(spec), tolerance=tolerance)
    for name, arr in tensors.items():
        if max_params_per_tensor is not None and arr.size > max_params_per_tensor:
            indices = rng.choice(arr.size, size=max_params_per_tensor, replace=False)
            indices = np.sort(indices)
        else:
            indices = np.arange(arr.size)
        numeric = _numeric_grad(forward, arr, indices=indices)
        a = analytic[name].reshape(-1)[indices]
        n = numeric.reshape(-1)[indices]
        report.per_param[name] = _rel_err(a, n)
        report.params_checked += len(indices)
    return report


def _describe(spec: LayerSpec) -> str:
    if spec.kind == "relu":
        return "relu"
    if spec.kind == "maxpool":
        return f"maxpool{spec.kernel_h} s{spec.stride}"
    return (
        f"{spec.kind} {spec.kernel_h}x{spec.kernel_w} "
        f"({spec.in_channels}->{spec.out_channels}) s{spec.stride} p{spec.padding}"
    )
