"""Dense tensor primitives: convolution, pooling and symmetric eigensolver.

Tensors are plain ``numpy.ndarray`` objects in row-major layout. Storage is
float32 by default; every routine accumulates in float64 and casts the
result back to the floating dtype of its primary input, so float64 inputs
stay float64 end to end (used by the gradient checks).

Spatial routines accept a single sample ``[C, H, W]`` or a batch
``[N, C, H, W]``.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConvergenceError, DomainError, NonFiniteError, ShapeError

PaddingMode = Literal["same", "valid"]

DEFAULT_DTYPE = np.float32


def as_tensor(x, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


def storage_dtype(x: np.ndarray):
    """Floating dtype results derived from ``x`` are stored in."""
    return x.dtype if x.dtype in (np.float32, np.float64) else DEFAULT_DTYPE


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _batched(x: np.ndarray, name: str):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _pad_amount(k: int, padding: PaddingMode) -> int:
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if padding == "same":
        return (k - 1) // 2
    if padding == "valid":
        return 0
    raise ShapeError(f"unknown padding mode {padding!r}")


class _Geometry:
    """Stride-1 correlation on a channel-major, row-flattened padded image.

    Each sample's zero-padded image is flattened to ``Lf = Hp * Wp + k - 1``
    entries and samples are laid end to end, giving one ``[C, N * Lf]``
    matrix (plus ``k * Wp`` trailing zeros). Kernel offset (i, j) is then a
    single contiguous shift by ``i * Wp + j``: output position ``h * Wp + w``
    of each sample reads only its own sample's entries. Positions with
    ``w >= Wo`` or ``h >= Ho`` are wrap-around garbage and are cropped.
    """

    def __init__(self, shape, k, padding):
        self.n, self.c, self.h, self.w = shape
        self.k = k
        self.p = p = _pad_amount(k, padding)
        self.hp, self.wp = self.h + 2 * p, self.w + 2 * p
        self.ho, self.wo = self.hp - k + 1, self.wp - k + 1
        if self.ho < 1 or self.wo < 1:
            raise ShapeError(f"kernel {k} does not fit input {self.h}x{self.w} "
                             f"with padding {padding!r}")
        self.lf = self.hp * self.wp + k - 1
        self.m = self.n * self.lf
        self.tail = k * self.wp
        self.offsets = [(i, j, i * self.wp + j) for i in range(k) for j in range(k)]

    def _grid(self, flat):
        """View of a [C', M] matrix as [C', N, Hp, Wp]."""
        c = flat.shape[0]
        per = flat[:, :self.m].reshape(c, self.n, self.lf)[:, :, :self.hp * self.wp]
        return per.reshape(c, self.n, self.hp, self.wp)

    def flatten(self, x):
        """[N, C, H, W] -> zero-padded [C, M + tail] in float64."""
        p = self.p
        xf = np.zeros((self.c, self.m + self.tail), dtype=np.float64)
        self._grid(xf)[:, :, p:p + self.h, p:p + self.w] = x.transpose(1, 0, 2, 3)
        return xf

    def unflatten(self, xf):
        p = self.p
        return self._grid(xf)[:, :, p:p + self.h, p:p + self.w].transpose(1, 0, 2, 3)

    def crop(self, out):
        """[C', M] -> [N, C', Ho, Wo]."""
        return self._grid(out)[:, :, :self.ho, :self.wo].transpose(1, 0, 2, 3)

    def widen(self, g):
        """[N, C', Ho, Wo] -> [C', M] with zeros at the garbage positions."""
        out = np.zeros((g.shape[1], self.m), dtype=np.float64)
        self._grid(out)[:, :, :self.ho, :self.wo] = g.transpose(1, 0, 2, 3)
        return out

    def cols(self, xf):
        """Patch matrix [C, k, k, M]."""
        out = np.empty((self.c, self.k, self.k, self.m), dtype=np.float64)
        for i, j, off in self.offsets:
            out[:, i, j] = xf[:, off:off + self.m]
        return out


def _dilate(g, stride, geo):
    """Scatter a strided-output gradient back onto the stride-1 output grid."""
    if stride == 1:
        return g
    full = np.zeros(g.shape[:2] + (geo.ho, geo.wo), dtype=g.dtype)
    full[:, :, ::stride, ::stride] = g
    return full


def _check_stride(stride):
    if stride < 1:
        raise ShapeError("stride must be >= 1")


def conv2d(input, kernels, stride: int = 1, padding: PaddingMode = "same") -> np.ndarray:
    """Cross-correlate ``input`` with ``kernels`` of shape [C_out, C_in, k, k].

    Output size per axis is ``floor((H + 2p - k) / stride) + 1``.
    """
    x, squeeze = _batched(input, "input")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be [C_out,C_in,k,k], got {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {c_in}")
    _check_stride(stride)
    geo = _Geometry(x.shape, k, padding)
    cols = geo.cols(geo.flatten(x)).reshape(c_in * k * k, geo.m)
    out = geo.crop(kernels.reshape(c_out, -1).astype(np.float64) @ cols)
    out = out[:, :, ::stride, ::stride]
    out = check_finite(out.astype(storage_dtype(x)), "conv2d output")
    return out[0] if squeeze else out


def conv2d_backward(grad_output, input, kernels, stride: int = 1,
                    padding: PaddingMode = "same"):
    """Return ``(grad_input, grad_kernels)`` for :func:`conv2d`."""
    x, squeeze = _batched(input, "input")
    g, _ = _batched(np.asarray(grad_output, np.float64), "grad_output")
    c_out, c_in, k, _ = kernels.shape
    geo = _Geometry(x.shape, k, padding)
    gmat = geo.widen(_dilate(g, stride, geo))
    cols = geo.cols(geo.flatten(x)).reshape(c_in * k * k, geo.m)
    grad_k = (gmat @ cols.T).reshape(kernels.shape)

    wmat = kernels.reshape(c_out, -1).astype(np.float64)
    dcols = (wmat.T @ gmat).reshape(c_in, k, k, geo.m)
    dxf = np.zeros((c_in, geo.m + geo.tail), dtype=np.float64)
    for i, j, off in geo.offsets:
        dxf[:, off:off + geo.m] += dcols[:, i, j]
    dx = geo.unflatten(dxf).astype(storage_dtype(x))
    return (dx[0] if squeeze else dx), grad_k.astype(kernels.dtype)


def depthwise_conv2d(input, kernels, stride: int = 1,
                     padding: PaddingMode = "same") -> np.ndarray:
    """Per-channel correlation; ``kernels`` is [C, k, k], one kernel per channel."""
    x, squeeze = _batched(input, "input")
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ShapeError(f"kernels must be [C,k,k], got {kernels.shape}")
    c, k, _ = kernels.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, got {c} depthwise kernels")
    _check_stride(stride)
    geo = _Geometry(x.shape, k, padding)
    kd = kernels.astype(np.float64)
    if k == 1:
        out = x * kd[:, 0, 0][:, None, None]
    else:
        xf = geo.flatten(x)
        acc = np.zeros((c, geo.m), dtype=np.float64)
        tmp = np.empty_like(acc)
        for i, j, off in geo.offsets:
            acc += np.multiply(xf[:, off:off + geo.m], kd[:, i, j][:, None], out=tmp)
        out = geo.crop(acc)
    out = out[:, :, ::stride, ::stride]
    out = check_finite(out.astype(storage_dtype(x)), "depthwise_conv2d output")
    return out[0] if squeeze else out


def depthwise_conv2d_backward(grad_output, input, kernels, stride: int = 1,
                              padding: PaddingMode = "same"):
    x, squeeze = _batched(input, "input")
    g, _ = _batched(np.asarray(grad_output, np.float64), "grad_output")
    c, k, _ = kernels.shape
    geo = _Geometry(x.shape, k, padding)
    g = _dilate(g, stride, geo)
    kd = kernels.astype(np.float64)
    if k == 1:
        grad_k = np.einsum("nchw,nchw->c", g, x.astype(np.float64))[:, None, None]
        dx = g * kd[:, 0, 0][:, None, None]
    else:
        gf = geo.widen(g)
        xf = geo.flatten(x)
        grad_k = np.empty((c, k, k), dtype=np.float64)
        dxf = np.zeros_like(xf)
        for i, j, off in geo.offsets:
            grad_k[:, i, j] = np.einsum("cm,cm->c", gf, xf[:, off:off + geo.m])
            dxf[:, off:off + geo.m] += gf * kd[:, i, j][:, None]
        dx = geo.unflatten(dxf)
    dx = dx.astype(storage_dtype(x))
    return (dx[0] if squeeze else dx), grad_k.astype(kernels.dtype)


def max_pool2d(input, k: int):
    """Non-overlapping k x k max pooling.

    Returns ``(output, argmax)`` where ``argmax`` holds, for every output
    element, the row-major index (0 .. k*k-1) of the winning element inside
    its window. Trailing rows/columns that do not fill a window are dropped.
    Ties resolve to the first maximum in row-major order.
    """
    if k < 1:
        raise ShapeError("pooling size must be >= 1")
    x, squeeze = _batched(input, "input")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError(f"pooling size {k} larger than input {h}x{w}")
    # spatial axes outermost so each window member is a long contiguous block
    xt = np.ascontiguousarray(x[:, :, :ho * k, :wo * k].transpose(2, 3, 0, 1))
    best = xt[0::k, 0::k].copy()
    idx = np.zeros(best.shape, dtype=np.int64)
    for pos in range(1, k * k):
        i, j = divmod(pos, k)
        cand = xt[i::k, j::k]
        better = cand > best
        np.copyto(best, cand, where=better)
        idx[better] = pos
    out = best.transpose(2, 3, 0, 1)
    idx = idx.transpose(2, 3, 0, 1)
    if squeeze:
        return out[0], idx[0]
    return out, idx


def max_pool2d_backward(grad_output, argmax, input_shape, k: int) -> np.ndarray:
    g, squeeze = _batched(np.asarray(grad_output), "grad_output")
    idx = argmax[None] if squeeze else argmax
    n, c, ho, wo = g.shape
    h, w = input_shape[-2:]
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    for pos in range(k * k):
        i, j = divmod(pos, k)
        dx[:, :, i:ho * k:k, j:wo * k:k] = np.where(idx == pos, g, 0)
    return dx[0] if squeeze else dx


@dataclass
class SymEigResult:
    eigenvalues: np.ndarray   # descending
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]
    sweeps: int


def _off_diagonal_norm(a):
    # measured directly: sum(a*a) - sum(diag**2) cancels catastrophically
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def sym_eig(a, tol: float = 1e-12, max_sweeps: int = 60) -> SymEigResult:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Raises ``DomainError`` if ``a`` is not symmetric to 1e-5 (relative to
    its largest entry) and ``ConvergenceError`` if the off-diagonal mass is
    still above ``tol`` after ``max_sweeps`` full sweeps.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got {a.shape}")
    check_finite(a, "sym_eig input")
    n = a.shape[0]
    scale = max(1.0, float(np.max(np.abs(a))) if n else 1.0)
    if n and np.max(np.abs(a - a.T)) > 1e-5 * scale:
        raise DomainError("sym_eig input is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = float(np.linalg.norm(a)) or 1.0

    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        off = _off_diagonal_norm(a)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        off = _off_diagonal_norm(a)
        if off > tol * norm:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    vecs = v[:, order]
    vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
    return SymEigResult(vals[order], vecs, sweep)
