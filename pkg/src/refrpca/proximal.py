"""Thresholding / proximal operators.

The reweighted l1-l1 operator solves, per entry,

    argmin_u  a2*|q*u| + a3*|q*(u - s_p)| + (u - x)**2 / 2

in closed form. Its five-piece formula depends on the sign of the reference
``s_p``; the branch taken for every entry is reported by
:func:`reweighted_l1l1_branches` so that backward passes can reuse it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor_core import VideoMatrix, svd

# Branch ids of the reweighted l1-l1 prox, named by their output formula.
UPPER = 0  # x - A - B
REF = 1  # s_p (plateau at the reference)
MID_POS = 2  # x - A + B  (0 < u < s_p)
ZERO = 3  # 0 (plateau at the origin)
LOWER = 4  # x + A + B
MID_NEG = 5  # x + A - B  (s_p < u < 0)

BRANCH_NAMES = ("upper", "ref", "mid_pos", "zero", "lower", "mid_neg")


@dataclass(frozen=True)
class ProxParams:
    """Arguments of the scalar reweighted prox: ``a2 = lambda2/c``, ``a3 = lambda3/c``."""

    a2: float
    a3: float
    q: float
    s_p: float

    def __post_init__(self):
        vals = np.asarray([self.a2, self.a3, self.q, self.s_p], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ParameterError(f"prox parameters must be finite: {self}")
        if self.a2 < 0 or self.a3 < 0:
            raise ParameterError(f"prox thresholds must be nonnegative: a2={self.a2}, a3={self.a3}")

    @property
    def A(self):
        return self.a2 * abs(self.q)

    @property
    def B(self):
        return self.a3 * abs(self.q)


def _unwrap(x):
    if isinstance(x, VideoMatrix):
        return x.data, x
    return np.asarray(x, dtype=np.float64), None


def _rewrap(out, template, scalar):
    if template is not None:
        return template.like(out)
    if scalar:
        return float(out)
    return out


def soft_threshold(x, tau):
    """``sign(x) * max(|x| - tau, 0)``, elementwise."""
    if tau < 0:
        raise ParameterError(f"threshold must be nonnegative, got {tau}")
    arr, template = _unwrap(x)
    out = np.sign(arr) * np.maximum(np.abs(arr) - tau, 0.0)
    return _rewrap(out, template, np.ndim(x) == 0 and template is None)


def mixed_l12_threshold(S, tau):
    """Group soft threshold of each row: ``s_i * max(1 - tau/||s_i||, 0)``."""
    if tau < 0:
        raise ParameterError(f"threshold must be nonnegative, got {tau}")
    arr, template = _unwrap(S)
    norms = np.sqrt(np.sum(arr * arr, axis=-1, keepdims=True))
    factor = np.zeros_like(norms)
    np.divide(tau, norms, out=factor, where=norms > 0)
    factor = np.where(norms > 0, np.maximum(1.0 - factor, 0.0), 0.0)
    return _rewrap(arr * factor, template, False)


def svt_factors(X, tau):
    """Singular value thresholding; also returns the SVD and shrunk spectrum."""
    if tau < 0:
        raise ParameterError(f"threshold must be nonnegative, got {tau}")
    f = svd(X)
    shrunk = np.maximum(f.sigma - tau, 0.0)
    out = (f.U * shrunk[..., None, :]) @ np.swapaxes(f.V, -1, -2)
    return out, f, shrunk


def svt(X, tau):
    """``U diag(max(sigma - tau, 0)) V^T`` for ``X = U diag(sigma) V^T``."""
    arr, template = _unwrap(X)
    out, _, _ = svt_factors(arr, tau)
    return _rewrap(out, template, False)


def reweighted_l1l1_prox(x, p):
    """Scalar closed-form reweighted l1-l1 prox, piece by piece."""
    x = float(x)
    s = p.s_p
    A = p.A
    B = p.B
    if s >= 0:
        if s + A + B < x:
            return x - A - B
        if s + A - B <= x <= s + A + B:
            return s
        if A - B < x < s + A - B:
            return x - A + B
        if -A - B <= x <= A - B:
            return 0.0
        if x < -A - B:
            return x + A + B
    else:
        if A + B < x:
            return x - A - B
        if -A + B <= x <= A + B:
            return 0.0
        if s - A + B < x < -A + B:
            return x + A - B
        if s - A - B <= x <= s - A + B:
            return s
        if x < s - A - B:
            return x + A + B
    return float("nan")


def reweighted_l1l1_branches(x, A, B, s_p):
    """Vectorized reweighted prox with effective thresholds ``A = a2|q|``, ``B = a3|q|``.

    All arguments broadcast against each other. Returns ``(u, branch)`` where
    ``branch`` holds one of the module-level branch ids per entry.
    """
    x = np.asarray(x, dtype=np.float64)
    A, B, s = np.broadcast_arrays(np.asarray(A, float), np.asarray(B, float), np.asarray(s_p, float))
    x, A, B, s = np.broadcast_arrays(x, A, B, s)
    pos = s >= 0

    up_p = s + A + B
    ref_lo_p = s + A - B
    zero_hi_p = A - B
    low_p = -A - B

    up_n = A + B
    zero_lo_n = -A + B
    ref_hi_n = s - A + B
    low_n = s - A - B

    branch_pos = np.select(
        [up_p < x, (ref_lo_p <= x) & (x <= up_p), (zero_hi_p < x) & (x < ref_lo_p), (low_p <= x) & (x <= zero_hi_p)],
        [UPPER, REF, MID_POS, ZERO],
        LOWER,
    )
    branch_neg = np.select(
        [up_n < x, (zero_lo_n <= x) & (x <= up_n), (ref_hi_n < x) & (x < zero_lo_n), (low_n <= x) & (x <= ref_hi_n)],
        [UPPER, ZERO, MID_NEG, REF],
        LOWER,
    )
    branch = np.where(pos, branch_pos, branch_neg).astype(np.int8)
    out = np.select(
        [branch == UPPER, branch == REF, branch == MID_POS, branch == ZERO, branch == LOWER],
        [x - A - B, s, x - A + B, 0.0, x + A + B],
        x + A - B,
    )
    return out, branch


def reweighted_l1l1_prox_matrix(X, a2, a3, q, S_P):
    """Entrywise reweighted prox; entry ``(i, j)`` uses weight ``q[i]``."""
    arr, template = _unwrap(X)
    ref, _ = _unwrap(S_P)
    q = np.asarray(q, dtype=np.float64)
    if arr.shape != ref.shape:
        raise ShapeError(f"input {arr.shape} and reference {ref.shape} differ")
    if q.shape != arr.shape[-2:-1]:
        raise ShapeError(f"weight vector has shape {q.shape}, expected ({arr.shape[-2]},)")
    if a2 < 0 or a3 < 0:
        raise ParameterError(f"prox thresholds must be nonnegative: a2={a2}, a3={a3}")
    absq = np.abs(q)[:, None]
    out, _ = reweighted_l1l1_branches(arr, a2 * absq, a3 * absq, ref)
    return _rewrap(out, template, False)


def reweighted_objective(u, x, p):
    u = np.asarray(u, dtype=np.float64)
    return p.A * np.abs(u) + p.B * np.abs(u - p.s_p) + 0.5 * (u - x) ** 2


def prox_brute_oracle(x, p, grid_halfwidth=None, refinement_levels=60, grid_points=41):
    """Minimize the scalar reweighted objective without the closed form.

    A multilevel grid search over ``[-grid_halfwidth, grid_halfwidth]``
    (valid because the objective is convex) is compared against the kink
    candidates ``{0, s_p, x +- A +- B}``; the best objective value wins.
    """
    x = float(x)
    A, B, s = p.A, p.B, p.s_p
    if grid_halfwidth is None:
        grid_halfwidth = abs(x) + abs(s) + A + B + 1.0
    lo, hi = -grid_halfwidth, grid_halfwidth
    best = 0.0
    for _ in range(refinement_levels):
        pts = np.linspace(lo, hi, grid_points)
        i = int(np.argmin(reweighted_objective(pts, x, p)))
        best = pts[i]
        lo, hi = pts[max(i - 1, 0)], pts[min(i + 1, grid_points - 1)]
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(best)):
            break
    candidates = np.array([0.0, s, x - A - B, x - A + B, x + A - B, x + A + B, best])
    return float(candidates[int(np.argmin(reweighted_objective(candidates, x, p)))])


def prox_optimality_gap(u, x, p):
    """Distance of ``x - u`` from ``A * d|u| + B * d|u - s_p|`` (0 iff optimal)."""

    def interval(v, weight):
        if v > 0:
            return weight, weight
        if v < 0:
            return -weight, -weight
        return -weight, weight

    lo1, hi1 = interval(u, p.A)
    lo2, hi2 = interval(u - p.s_p, p.B)
    r = x - u
    lo, hi = lo1 + lo2, hi1 + hi2
    return max(lo - r, r - hi, 0.0)
