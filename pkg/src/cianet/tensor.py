"""Minimal NCHW tensor core with recorded ops and reverse-mode gradients.

Tensors are 4-D (batch, channels, height, width) numpy buffers. Every op
records its inputs and a vector-Jacobian closure on the output node; a
backward sweep walks the recorded graph once in reverse topological order
and accumulates gradients additively across fan-out.

Two precisions are supported: float32 for training and float64 for
gradient verification. Ops never mix precisions; the output dtype always
equals the input dtype.

All forward computations are plain numpy with fixed reduction order, so
identical inputs give bitwise-identical outputs run to run.
"""

import struct
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ParseError, ShapeError

_AXIS_NAMES = ("batch", "channels", "height", "width")

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A 4-D array participating in a recorded computation.

    Leaf tensors with ``requires_grad=True`` receive a ``.grad`` buffer
    after a backward sweep. Interior nodes keep references to their
    parents and the per-parent vjp closures that define the backward op.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError("rank", f"expected 4-D (N,C,H,W), got {arr.ndim}-D")
        if min(arr.shape) < 1:
            raise ShapeError("rank", f"all dims must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Reverse sweep from this tensor; see module-level ``backward``."""
        if seed is None:
            if self.data.shape != (1, 1, 1, 1):
                raise ContractError(
                    f"backward() without seed requires a scalar 1x1x1x1 loss, got {self.data.shape}"
                )
            seed = np.ones((1, 1, 1, 1), dtype=self.data.dtype)
        backward_from([self], [seed])


def _result(data, parents_and_vjps, op):
    """Wrap an op result, recording parents only when grads are live."""
    if _grad_enabled:
        live = [(p, vjp) for p, vjp in parents_and_vjps if p.requires_grad or p._parents]
        if live:
            return Tensor(data, requires_grad=True, _parents=live, _op=op)
    return Tensor(data, requires_grad=False, _op=op)


def backward_from(outputs, seeds):
    """Accumulate d(sum of seeded outputs)/d(leaf) into ``.grad`` buffers.

    ``seeds`` holds one gradient array per output (the loss gradient with
    respect to that output). Returns a dict mapping id(tensor) -> gradient
    for every tensor that received one. Each graph node is visited exactly
    once; contributions across fan-out add.
    """
    grads = {}
    for out, seed in zip(outputs, seeds):
        seed = np.asarray(seed, dtype=out.data.dtype)
        if seed.shape != out.data.shape:
            raise ContractError(
                f"seed shape {seed.shape} does not match output shape {out.data.shape}"
            )
        if id(out) in grads:
            grads[id(out)] = grads[id(out)] + seed
        else:
            grads[id(out)] = seed.copy()

    # Iterative post-order DFS: children before parents in `order`.
    order, visited, keep = [], set(), {}
    stack = [(o, False) for o in outputs]
    while stack:
        node, expanded = stack.pop()
        if id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        keep[id(node)] = node
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        if node.requires_grad and not node._parents:
            node.grad = grads[id(node)] if node.grad is None else node.grad + grads[id(node)]

    return grads


def backward(scalar_loss: Tensor):
    """Spec-shaped entry point: reverse sweep from a 1x1x1x1 loss."""
    scalar_loss.backward()


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkk kernel.

    Kernel sizes 1, 3 and 7 are supported; the output spatial size
    (H + 2*padding - k)/stride + 1 must be integral.
    """
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if i != c:
        raise ShapeError("channels", f"input has C={c} but kernel expects I={i}")
    if kh not in (1, 3, 7) or kw not in (1, 3, 7):
        raise ShapeError("kernel", f"kernel must be 1, 3 or 7, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError("kernel", f"bad stride/padding ({stride}, {padding})")
    for axis, size, k in (("height", h, kh), ("width", w, kw)):
        if (size + 2 * padding - k) % stride != 0:
            raise ShapeError(axis, f"({size} + 2*{padding} - {k}) not divisible by stride {stride}")
        if (size + 2 * padding - k) // stride + 1 < 1:
            raise ShapeError(axis, f"kernel {k} larger than padded input {size + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = x.data
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        if bias.data.size != o:
            raise ShapeError("channels", f"bias has {bias.data.size} entries, kernel has O={o}")
        out += bias.data.reshape(1, o)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp_x(gy):
        gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        dcols = (gym @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(
            (n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype
        )
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += (
                    dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
                )
        if padding > 0:
            return dxp[:, :, padding : padding + h, padding : padding + w]
        return dxp

    def vjp_w(gy):
        gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        return (gym.T @ cols).reshape(o, c, kh, kw)

    parents = [(x, vjp_x), (weight, vjp_w)]
    if bias is not None:
        parents.append((bias, lambda gy: gy.sum(axis=(0, 2, 3)).reshape(bias.data.shape)))
    return _result(out, parents, "conv2d")


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 != 0:
        raise ShapeError("height", f"avg_pool2d needs even height, got {h}")
    if w % 2 != 0:
        raise ShapeError("width", f"avg_pool2d needs even width, got {w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(gy):
        g = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3)
        return g * np.asarray(0.25, dtype=x.data.dtype)

    return _result(out, [(x, vjp)], "avg_pool2d")


_upsample_cache = {}


def _upsample_weights(size, dtype):
    """Per-axis 2x interpolation: output i samples source (i+0.5)/2 - 0.5."""
    key = (size, np.dtype(dtype).name)
    if key not in _upsample_cache:
        src = (np.arange(2 * size, dtype=np.float64) + 0.5) / 2.0 - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        i0 = np.clip(lo, 0, size - 1)
        i1 = np.clip(lo + 1, 0, size - 1)
        mat = np.zeros((2 * size, size), dtype=np.float64)
        rows = np.arange(2 * size)
        np.add.at(mat, (rows, i0), 1.0 - frac)
        np.add.at(mat, (rows, i1), frac)
        _upsample_cache[key] = (i0, i1, frac.astype(dtype), mat.astype(dtype))
    return _upsample_cache[key]


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double H and W with half-pixel-center bilinear interpolation.

    Sampling coordinates outside the source are clamped to the border, so
    constant inputs are reproduced exactly (the interpolation is written
    in lerp form: a + w*(b - a)).
    """
    n, c, h, w = x.shape
    i0h, i1h, fh, mat_h = _upsample_weights(h, x.data.dtype)
    i0w, i1w, fw, mat_w = _upsample_weights(w, x.data.dtype)

    a = x.data[:, :, i0h, :]
    up_h = a + fh.reshape(1, 1, -1, 1) * (x.data[:, :, i1h, :] - a)
    a = up_h[:, :, :, i0w]
    out = a + fw.reshape(1, 1, 1, -1) * (up_h[:, :, :, i1w] - a)

    def vjp(gy):
        # Transpose of the (separable) interpolation matrices.
        g = np.einsum("ij,nchj->nchi", mat_w.T, gy, optimize=True)
        return np.einsum("ij,ncjw->nciw", mat_h.T, g, optimize=True)

    return _result(out, [(x, vjp)], "bilinear_upsample2x")


def batch_norm(x, scale, shift, running_mean, running_var, mode, momentum=0.9, epsilon=1e-5):
    """Per-channel normalization.

    ``mode`` is "train" (batch statistics, running buffers updated in
    place with the given momentum) or "eval" (running statistics).
    ``running_mean``/``running_var`` are plain numpy C-vectors.
    """
    n, c, h, w = x.shape
    if scale.data.size != c or shift.data.size != c:
        raise ShapeError("channels", f"scale/shift must have {c} entries")
    if epsilon <= 0:
        raise ContractError("batch_norm epsilon must be > 0")
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown batch_norm mode {mode!r}")
    gamma = scale.data.reshape(1, c, 1, 1)
    beta = shift.data.reshape(1, c, 1, 1)

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(running_var.dtype)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gamma * xhat + beta
        m = n * h * w

        def vjp_x(gy):
            gxh = gy * gamma
            t1 = gxh.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            t2 = (gxh * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            return inv_std.reshape(1, c, 1, 1) * (gxh - t1 - xhat * t2)

    else:
        inv_std = 1.0 / np.sqrt(running_var + epsilon)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gamma * xhat + beta

        def vjp_x(gy):
            return gy * gamma * inv_std.reshape(1, c, 1, 1)

    xhat = xhat.astype(x.data.dtype)

    def vjp_scale(gy):
        return (gy * xhat).sum(axis=(0, 2, 3)).reshape(scale.data.shape)

    def vjp_shift(gy):
        return gy.sum(axis=(0, 2, 3)).reshape(shift.data.shape)

    return _result(
        out.astype(x.data.dtype),
        [(x, vjp_x), (scale, vjp_scale), (shift, vjp_shift)],
        f"batch_norm_{mode}",
    )


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(gy):
        return gy * (x.data > 0)

    return _result(out, [(x, vjp)], "relu")


_SIGMOID_EPS = {np.dtype(np.float32): 1e-6, np.dtype(np.float64): 1e-12}


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function with outputs clamped strictly inside (0, 1).

    The clamp (1e-6 in f32, 1e-12 in f64) keeps extreme logits from
    rounding to exactly 0 or 1, which would zero the local gradient and
    permanently freeze saturated-wrong pixels.
    """
    # Splitting on sign keeps exp() arguments non-positive: no overflow.
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    eps = _SIGMOID_EPS[x.data.dtype]
    np.clip(out, eps, 1.0 - eps, out=out)

    def vjp(gy):
        return gy * out * (1.0 - out)

    return _result(out, [(x, vjp)], "sigmoid")


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def concat_channels(inputs) -> Tensor:
    """Concatenate along C. All inputs must share N, H and W."""
    inputs = list(inputs)
    if not inputs:
        raise ContractError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        for axis, a, b in (("batch", n, t.shape[0]), ("height", h, t.shape[2]), ("width", w, t.shape[3])):
            if a != b:
                raise ShapeError(axis, f"mismatch {a} vs {b} in concat_channels")
    out = np.concatenate([t.data for t in inputs], axis=1)

    parents = []
    start = 0
    for t in inputs:
        c = t.shape[1]

        def vjp(gy, lo=start, hi=start + c):
            return gy[:, lo:hi]

        parents.append((t, vjp))
        start += c
    return _result(out, parents, "concat_channels")


def split_channels(x: Tensor, sizes):
    """Inverse of concat_channels; returns a list of channel-range views."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError("channels", f"split sizes {sizes} do not sum to C={x.shape[1]}")
    outs = []
    start = 0
    for c in sizes:
        lo, hi = start, start + c

        def vjp(gy, lo=lo, hi=hi):
            g = np.zeros_like(x.data)
            g[:, lo:hi] = gy
            return g

        outs.append(_result(x.data[:, lo:hi].copy(), [(x, vjp)], "split_channels"))
        start += c
    return outs


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if a.shape != b.shape:
        for axis, x, y in zip(_AXIS_NAMES, a.shape, b.shape):
            if x != y:
                raise ShapeError(axis, f"mismatch {x} vs {y} in elementwise {kind}")
    if kind == "add":
        out = a.data + b.data
        parents = [(a, lambda gy: gy), (b, lambda gy: gy)]
    elif kind == "sub":
        out = a.data - b.data
        parents = [(a, lambda gy: gy), (b, lambda gy: -gy)]
    elif kind == "mul":
        out = a.data * b.data
        parents = [(a, lambda gy: gy * b.data), (b, lambda gy: gy * a.data)]
    else:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return _result(out, parents, f"elementwise_{kind}")


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def pad2d(x: Tensor, top, bottom, left, right) -> Tensor:
    """Zero-pad H and W, possibly asymmetrically (backward crops)."""
    if min(top, bottom, left, right) < 0:
        raise ContractError("pad2d amounts must be >= 0")
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    n, c, h, w = x.shape

    def vjp(gy):
        return gy[:, :, top : top + h, left : left + w]

    return _result(out, [(x, vjp)], "pad2d")


def tensor_sum(x: Tensor) -> Tensor:
    """Sum every element into a 1x1x1x1 scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def vjp(gy):
        return np.broadcast_to(gy.reshape(()), x.data.shape).astype(x.data.dtype)

    return _result(out, [(x, vjp)], "tensor_sum")


# ---------------------------------------------------------------------------
# NMAP serialization: "NMAP" | u32le N,C,H,W | f32le row-major payload
# ---------------------------------------------------------------------------

NMAP_MAGIC = b"NMAP"


def nmap_bytes(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    if a.ndim != 4:
        raise ShapeError("rank", f"NMAP stores 4-D maps, got {a.ndim}-D")
    header = NMAP_MAGIC + struct.pack("<4I", *a.shape)
    return header + a.astype("<f4").tobytes()


def nmap_from_bytes(buf, path="<bytes>") -> np.ndarray:
    if len(buf) < 20:
        raise ParseError(path, 0, "truncated NMAP header")
    if buf[:4] != NMAP_MAGIC:
        raise ParseError(path, 0, f"bad magic {buf[:4]!r}")
    n, c, h, w = struct.unpack("<4I", buf[4:20])
    expect = 20 + 4 * n * c * h * w
    if len(buf) != expect:
        raise ParseError(path, 20, f"payload length {len(buf) - 20}, expected {expect - 20}")
    data = np.frombuffer(buf[20:], dtype="<f4").reshape(n, c, h, w)
    return data.astype(np.float32)


def write_nmap(path, arr):
    with open(path, "wb") as f:
        f.write(nmap_bytes(arr))


def read_nmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    return nmap_from_bytes(buf, path=path)
