"""Classical proximal-gradient RPCA iterations.

``ref_rpca_solve`` runs the reference-based reweighted algorithm: a gradient
step on the data term for both components, SVT on the low-rank part, and the
reweighted l1-l1 prox (against a reference built from the previous sparse
iterate) on the sparse part. ``corona_ista_solve`` is the same loop with a
plain (scalar or row-group) soft threshold.

Measurement operators default to the identity (``H1 = H2 = None``), which
avoids forming ``n x n`` identities for video-sized problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError
from .proximal import mixed_l12_threshold, reweighted_l1l1_prox_matrix, soft_threshold, svt
from .tensor_core import VideoMatrix, svd


@dataclass(frozen=True)
class SolverConfig:
    lambda1: float
    lambda2: float
    lambda3: float = 0.0
    c: float = 2.0
    H1: np.ndarray | None = None
    H2: np.ndarray | None = None
    q: np.ndarray | None = None
    P: np.ndarray | None = None
    max_iters: int = 100
    consistent_step: bool = False
    threshold: str = "scalar"  # S-update of the CORONA iteration: "scalar" or "mixed"

    def __post_init__(self):
        if not (self.c > 0 and np.isfinite(self.c)):
            raise ParameterError(f"step constant c must be positive, got {self.c}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        for name in ("lambda1", "lambda2", "lambda3"):
            value = getattr(self, name)
            if not (value >= 0 and np.isfinite(value)):
                raise ParameterError(f"{name} must be finite and nonnegative, got {value}")
        if self.threshold not in ("scalar", "mixed"):
            raise ParameterError(f"unknown threshold kind {self.threshold!r}")
        for name in ("H1", "H2", "q", "P"):
            value = getattr(self, name)
            if value is not None and not np.all(np.isfinite(value)):
                raise ParameterError(f"{name} has non-finite entries")

    @classmethod
    def defaults(cls, n, m, **overrides):
        """PCP weighting: ``lambda1 = 1``, ``lambda2 = 1/sqrt(max(n, m))``,
        ``lambda3 = lambda2/2``, ``c = 2`` (= ||[I I]||^2), unit weights, identity P."""
        lam = 1.0 / np.sqrt(max(n, m))
        base = dict(lambda1=1.0, lambda2=lam, lambda3=lam / 2, c=2.0)
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class DecompositionState:
    L: np.ndarray
    S: np.ndarray
    trace: list = field(default_factory=list)


def _apply(H, X):
    return X if H is None else H @ X


def _apply_t(H, X):
    return X if H is None else H.T @ X


def _as_array(X):
    return X.data if isinstance(X, VideoMatrix) else np.asarray(X, dtype=np.float64)


def build_reference(S, P=None):
    """``[s_1, P s_1, ..., P s_{m-1}]``: each frame referenced by its projected predecessor."""
    S = _as_array(S)
    if P is not None and P.shape != (S.shape[-2], S.shape[-2]):
        raise ShapeError(f"projection {P.shape} does not match {S.shape[-2]} rows")
    ref = np.empty_like(S)
    ref[..., :, :1] = S[..., :, :1]
    ref[..., :, 1:] = S[..., :, :-1] if P is None else P @ S[..., :, :-1]
    return ref


def _check(M, L, S):
    if L.shape != M.shape or S.shape != M.shape:
        raise ShapeError(f"shapes differ: M {M.shape}, L {L.shape}, S {S.shape}")


def gradient_step_L(L, S, M, config):
    L, S, M = _as_array(L), _as_array(S), _as_array(M)
    _check(M, L, S)
    H1, H2, c = config.H1, config.H2, config.c
    if config.consistent_step:
        return L - _apply_t(H1, _apply(H1, L) + _apply(H2, S) - M) / c
    return L - _apply_t(H1, _apply(H1, L)) / c - _apply_t(H1, _apply(H2, S)) + _apply_t(H1, M)


def gradient_step_S(L, S, M, config):
    L, S, M = _as_array(L), _as_array(S), _as_array(M)
    _check(M, L, S)
    H1, H2, c = config.H1, config.H2, config.c
    if config.consistent_step:
        return S - _apply_t(H2, _apply(H1, L) + _apply(H2, S) - M) / c
    return S - _apply_t(H2, _apply(H2, S)) / c - _apply_t(H2, _apply(H1, L)) + _apply_t(H2, M)


def _weights(config, n):
    if config.q is None:
        return np.ones(n)
    q = np.asarray(config.q, dtype=np.float64)
    if q.shape != (n,):
        raise ShapeError(f"weight vector has shape {q.shape}, expected ({n},)")
    return q


def ref_rpca_step(L, S, M, config, S_P=None):
    """One iteration of the reference-based algorithm from ``(L, S)``.

    ``S_P`` defaults to the reference built from ``S``; passing it explicitly
    freezes the reference (used by descent checks).
    """
    c = config.c
    Lt = gradient_step_L(L, S, M, config)
    St = gradient_step_S(L, S, M, config)
    L_new = svt(Lt, config.lambda1 / c)
    if S_P is None:
        S_P = build_reference(S, config.P)
    q = _weights(config, Lt.shape[-2])
    S_new = reweighted_l1l1_prox_matrix(St, config.lambda2 / c, config.lambda3 / c, q, S_P)
    return L_new, S_new


def corona_step(L, S, M, config):
    c = config.c
    Lt = gradient_step_L(L, S, M, config)
    St = gradient_step_S(L, S, M, config)
    L_new = svt(Lt, config.lambda1 / c)
    if config.threshold == "mixed":
        S_new = mixed_l12_threshold(St, config.lambda2 / c)
    else:
        S_new = soft_threshold(St, config.lambda2 / c)
    return L_new, S_new


def _run(step, M, config, on_iter):
    M = _as_array(M)
    if not np.all(np.isfinite(M)):
        raise ParameterError("input matrix has non-finite entries")
    L = np.zeros_like(M)
    S = np.zeros_like(M)
    state = DecompositionState(L, S)
    for k in range(1, config.max_iters + 1):
        try:
            L, S = step(L, S, M, config)
        except NumericalError as exc:
            raise NumericalError(str(exc), iteration=k) from exc
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(S))):
            raise NumericalError("iterate became non-finite", iteration=k)
        if on_iter is not None:
            on_iter(k, L, S)
    state.L, state.S = L, S
    return state


def ref_rpca_solve(M, config, on_iter=None):
    """Run ``config.max_iters`` iterations from ``L = S = 0``.

    ``on_iter(k, L, S)`` is called after every iteration.
    """
    return _run(ref_rpca_step, M, config, on_iter)


def corona_ista_solve(M, config, on_iter=None):
    return _run(corona_step, M, config, on_iter)


def nuclear_norm(X):
    return float(np.sum(svd(X).sigma))


def refrpca_objective(M, L, S, config, S_P=None):
    """``1/2||M - H1 L - H2 S||_F^2 + l1||L||_* + l2||Q.S||_1 + l3||Q.(S - S_P)||_1``."""
    M, L, S = _as_array(M), _as_array(L), _as_array(S)
    _check(M, L, S)
    if S_P is None:
        S_P = build_reference(S, config.P)
    Q = _weights(config, M.shape[-2])[:, None]
    R = M - _apply(config.H1, L) - _apply(config.H2, S)
    value = 0.5 * float(np.sum(R * R))
    if config.lambda1:
        value += config.lambda1 * nuclear_norm(L)
    value += config.lambda2 * float(np.sum(np.abs(Q * S)))
    value += config.lambda3 * float(np.sum(np.abs(Q * (S - S_P))))
    return value


def residual_norm(M, L, S, config):
    M, L, S = _as_array(M), _as_array(L), _as_array(S)
    R = M - _apply(config.H1, L) - _apply(config.H2, S)
    return float(np.sqrt(np.sum(R * R)))
