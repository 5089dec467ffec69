"""Dense numerical substrate: video matrices, SVD, per-frame convolution, norms.

All arrays are float64. Functions that take a video accept an array of shape
``(..., n, m)`` whose last two axes hold ``m`` vectorized frames of ``n = h*w``
pixels (row-major within a frame); any leading axes are treated as a batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import NumericalError, ParameterError, ShapeError

EPS = np.finfo(np.float64).eps
JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class VideoMatrix:
    """``n x m`` matrix of vectorized ``h x w`` frames."""

    data: np.ndarray
    h: int
    w: int

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"video matrix must be 2-D, got shape {data.shape}")
        if self.h <= 0 or self.w <= 0 or data.shape[0] != self.h * self.w:
            raise ShapeError(f"{data.shape[0]} rows do not match frame geometry {self.h}x{self.w}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("video matrix contains non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_frames(cls, frames):
        frames = np.asarray(frames, dtype=np.float64)
        m, h, w = frames.shape
        return cls(frames.reshape(m, h * w).T, h, w)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def m(self):
        return self.data.shape[1]

    @property
    def frame_shape(self):
        return (self.h, self.w)

    def frames(self):
        """Return the frames as an ``(m, h, w)`` array."""
        return self.data.T.reshape(self.m, self.h, self.w)

    def like(self, data):
        return VideoMatrix(data, self.h, self.w)


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``X = U diag(sigma) V^T`` (possibly batched over leading axes)."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self):
        return (self.U * self.sigma[..., None, :]) @ np.swapaxes(self.V, -1, -2)


@lru_cache(maxsize=None)
def _round_robin(p):
    """Tournament schedule: p-1 (or p) rounds of disjoint column pairs."""
    idx = list(range(p)) + ([-1] if p % 2 else [])
    k = len(idx)
    rounds = []
    for _ in range(k - 1):
        pairs = [(idx[i], idx[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            first, second = zip(*pairs)
            rounds.append((np.array(first), np.array(second)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return tuple(rounds)


def _jacobi(A, V, tol):
    """One-sided Jacobi (Hestenes) on the columns of ``A``; rotations are
    accumulated into ``V``. Both arrays are ``(B, p, p)`` and modified in place."""
    p = A.shape[-1]
    rounds = _round_robin(p)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for I, J in rounds:
            ai = A[:, :, I]
            aj = A[:, :, J]
            alpha = np.einsum("bij,bij->bj", ai, ai)
            beta = np.einsum("bij,bij->bj", aj, aj)
            gamma = np.einsum("bij,bij->bj", ai, aj)
            denom = np.sqrt(alpha * beta)
            ok = denom > 0.0
            rel = np.zeros_like(gamma)
            np.divide(np.abs(gamma), denom, out=rel, where=ok)
            if rel.size:
                off = max(off, float(rel.max()))
            rotate = rel > tol
            if not rotate.any():
                continue
            safe_gamma = np.where(rotate, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = np.where(rotate, c * t, 0.0)
            c = np.where(rotate, c, 1.0)
            c = c[:, None, :]
            s = s[:, None, :]
            A[:, :, I] = c * ai - s * aj
            A[:, :, J] = s * ai + c * aj
            vi = V[:, :, I]
            vj = V[:, :, J]
            V[:, :, I] = c * vi - s * vj
            V[:, :, J] = s * vi + c * vj
        if off <= tol:
            return
    raise NumericalError(f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps (off={off:.3e})")


def _complete_basis(U, good):
    """Replace columns of U where ``good`` is False by an orthonormal completion."""
    U = U.copy()
    for b in np.nonzero(~good.all(axis=-1))[0]:
        keep = np.nonzero(good[b])[0]
        missing = np.nonzero(~good[b])[0]
        basis = np.concatenate([U[b][:, keep], np.eye(U.shape[-2])], axis=1)
        Q, _ = np.linalg.qr(basis, mode="reduced")
        U[b][:, missing] = Q[:, len(keep) : len(keep) + len(missing)]
    return U


def _svd_jacobi(Xb):
    B, _, p = Xb.shape
    scale = np.abs(Xb).max(axis=(-2, -1)) if Xb.size else np.zeros(B)
    scale = np.where(scale > 0, scale, 1.0)
    Q, R = np.linalg.qr(Xb / scale[:, None, None], mode="reduced")
    A = np.ascontiguousarray(R)
    V = np.broadcast_to(np.eye(p), (B, p, p)).copy()
    _jacobi(A, V, tol=max(p, 2) * EPS)

    sigma = np.sqrt(np.einsum("bij,bij->bj", A, A))
    good = sigma > 1e-140
    Ur = np.divide(A, sigma[:, None, :], out=np.zeros_like(A), where=good[:, None, :])
    if not good.all():
        Ur = _complete_basis(Ur, good)
    U = Q @ Ur
    sigma = sigma * scale[:, None]
    order = np.argsort(-sigma, axis=-1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=-1)
    U = np.take_along_axis(U, order[:, None, :], axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    return U, sigma, V


def _svd_lapack(Xb):
    try:
        U, sigma, Vt = np.linalg.svd(Xb, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"LAPACK SVD did not converge: {exc}") from exc
    return U, sigma, np.swapaxes(Vt, -1, -2)


def svd(X, method="lapack"):
    """Thin SVD of a (possibly batched) real matrix.

    ``method="lapack"`` delegates to ``numpy.linalg.svd``; ``method="jacobi"``
    QR-reduces the matrix to its ``p x p`` triangular factor,
    ``p = min(n, m)``, and diagonalizes that with one-sided Jacobi. Either way
    singular values come back sorted non-increasing and each column of ``U``
    is signed so that its largest-magnitude entry is positive.

    Raises
    ------
    NumericalError
        If the input is not finite or the decomposition fails to converge.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise ShapeError(f"svd needs a matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericalError("svd input contains non-finite entries")
    lead = X.shape[:-2]
    n, m = X.shape[-2:]
    p = min(n, m)
    wide = n < m
    Xb = X.reshape((-1, n, m))
    if wide:
        Xb = np.swapaxes(Xb, -1, -2)
    if method == "jacobi":
        U, sigma, V = _svd_jacobi(Xb)
    elif method == "lapack":
        U, sigma, V = _svd_lapack(Xb)
    else:
        raise ParameterError(f"unknown svd method {method!r}")
    if wide:
        U, V = V, U

    pivot = np.argmax(np.abs(U), axis=-2)
    signs = np.sign(np.take_along_axis(U, pivot[:, None, :], axis=-2))
    signs[signs == 0] = 1.0
    U = U * signs
    V = V * signs
    return SvdFactors(
        U.reshape(lead + U.shape[-2:]),
        sigma.reshape(lead + (p,)),
        V.reshape(lead + V.shape[-2:]),
    )


def check_kernel(kernel, frame_shape=None):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kernel.shape}")
    if frame_shape is not None and kernel.shape[0] > min(frame_shape):
        raise ShapeError(f"kernel size {kernel.shape[0]} exceeds frame {frame_shape[0]}x{frame_shape[1]}")
    return kernel


def delta_kernel(k, scale=1.0):
    kernel = np.zeros((k, k))
    kernel[k // 2, k // 2] = scale
    return kernel


def _padded_frames(x, frame_shape, r):
    h, w = frame_shape
    n, m = x.shape[-2:]
    if n != h * w:
        raise ShapeError(f"{n} rows do not match frame geometry {h}x{w}")
    frames = x.reshape(x.shape[:-2] + (h, w, m))
    pad = np.zeros(x.shape[:-2] + (h + 2 * r, w + 2 * r, m))
    pad[..., r : r + h, r : r + w, :] = frames
    return pad


def conv2d_same(video, kernel, frame_shape=None):
    """Per-frame 2-D cross-correlation with zero "same" padding.

    ``video`` is either a :class:`VideoMatrix` (returned type matches) or an
    array ``(..., n, m)`` together with ``frame_shape=(h, w)``.
    """
    if isinstance(video, VideoMatrix):
        return video.like(conv2d_same(video.data, kernel, video.frame_shape))
    x = np.asarray(video, dtype=np.float64)
    kernel = check_kernel(kernel, frame_shape)
    h, w = frame_shape
    n, m = x.shape[-2:]
    if n != h * w:
        raise ShapeError(f"{n} rows do not match frame geometry {h}x{w}")
    frames = x.reshape(x.shape[:-2] + (h, w, m))
    weights = kernel.reshape((1,) * (x.ndim - 2) + kernel.shape + (1,))
    return ndimage.correlate(frames, weights, mode="constant", cval=0.0).reshape(x.shape)


def conv2d_adjoint(y, kernel, frame_shape):
    """Adjoint of :func:`conv2d_same` w.r.t. its input (flipped-kernel correlation)."""
    kernel = check_kernel(kernel, frame_shape)
    return conv2d_same(y, kernel[::-1, ::-1], frame_shape)


def conv2d_kernel_grad(x, dy, k, frame_shape):
    """Gradient of ``<conv2d_same(x, K), dy>`` w.r.t. ``K``, summed over batch axes."""
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if x.shape != dy.shape:
        raise ShapeError(f"input {x.shape} and cotangent {dy.shape} differ")
    h, w = frame_shape
    pad = _padded_frames(x, frame_shape, k // 2)
    pad = pad.reshape((-1,) + pad.shape[-3:])
    dyf = dy.reshape((-1, h, w, dy.shape[-1]))
    windows = sliding_window_view(pad, (h, w), axis=(1, 2))  # (batch, k, k, m, h, w)
    return np.einsum("zabtij,zijt->ab", windows, dyf)


def frobenius_norm(X):
    X = np.asarray(X, dtype=np.float64)
    return float(np.sqrt(np.sum(X * X)))


def matmul(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim < 1 or B.ndim < 1 or A.shape[-1] != B.shape[-2 if B.ndim > 1 else 0]:
        raise ShapeError(f"cannot multiply {A.shape} by {B.shape}")
    return A @ B


def elementwise_mul(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"elementwise product needs identical shapes, got {A.shape} and {B.shape}")
    return A * B
