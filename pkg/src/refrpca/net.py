"""Unrolled RPCA networks with a hand-written reverse pass.

Each layer computes

    L' = SVT_{lambda1}(W1*M + W3*S + W5*L)
    S' = prox(W2*M + W4*S + W6*L)

where ``*`` is per-frame 2-D convolution. The ``refrpca`` variant uses the
reweighted l1-l1 prox with thresholds ``lambda2, lambda3``, per-pixel
weights ``q`` and a reference ``[s_1, P s_1, ..., P s_{m-1}]`` built from
the layer's incoming ``S``; the ``corona`` variant uses a plain soft
threshold at ``lambda2`` (or, optionally, the row-group threshold).

Everything works on batches: ``M`` has shape ``(B, n, m)`` (a bare
``(n, m)`` matrix is promoted). The forward pass records a :class:`Tape`
that :func:`network_backward` replays.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import urpc
from .errors import FormatError, ParameterError, ShapeError
from .proximal import LOWER, MID_NEG, MID_POS, REF, UPPER, reweighted_l1l1_branches
from .solvers import build_reference
from .tensor_core import conv2d_adjoint, conv2d_kernel_grad, conv2d_same, delta_kernel, svd

VARIANTS = ("refrpca", "corona")
KERNEL_NAMES = ("W1", "W2", "W3", "W4", "W5", "W6")
SVD_EPS = 1e-12


@dataclass
class LayerParams:
    kernels: np.ndarray  # (6, k, k), W1..W6 in order
    lambda1: np.ndarray  # 0-d arrays so optimizers can update in place
    lambda2: np.ndarray
    lambda3: np.ndarray | None = None
    q: np.ndarray | None = None
    P: np.ndarray | None = None

    def tensors(self):
        out = OrderedDict((name, self.kernels[i]) for i, name in enumerate(KERNEL_NAMES))
        out["lambda1"] = self.lambda1
        out["lambda2"] = self.lambda2
        for name in ("lambda3", "q", "P"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


@dataclass
class NetworkParams:
    layers: list
    variant: str
    h: int
    w: int
    m: int
    k: int
    detach_reference: bool = False
    corona_threshold: str = "scalar"

    @property
    def depth(self):
        return len(self.layers)

    @property
    def frame_shape(self):
        return (self.h, self.w)

    def named_tensors(self):
        """Ordered ``"layer{i}.{name}" -> array`` views of every learnable tensor."""
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, value in layer.tensors().items():
                out[f"layer{i}.{name}"] = value
        return out

    def copy(self):
        return copy.deepcopy(self)


def init_params(d, geometry, variant="refrpca", seed=0, k=5, step_c=1.0, noise_std=1e-3):
    """Layer-1-as-ISTA initialization.

    ``W1 = W2 = delta``; ``W3 = W6 = -delta`` and ``W4 = W5 = (1 - 1/step_c) delta``
    reproduce the gradient step with identity operators and step constant
    ``step_c``; ``W3..W6`` get Gaussian noise of std ``noise_std``.
    ``lambda1 = lambda2 = 0.1``, ``lambda3 = 0.05``, ``q = 1``, ``P = I``.
    The noise stream does not depend on ``variant``.
    """
    if d < 1:
        raise ParameterError(f"depth must be >= 1, got {d}")
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}")
    h, w, m = geometry
    if k > min(h, w):
        raise ShapeError(f"kernel size {k} exceeds frame {h}x{w}")
    n = h * w
    rng = np.random.default_rng(seed)
    keep = 1.0 - 1.0 / step_c
    scales = (1.0, 1.0, -1.0, keep, keep, -1.0)
    layers = []
    for _ in range(d):
        kernels = np.stack([delta_kernel(k, s) for s in scales])
        kernels[2:] += noise_std * rng.standard_normal((4, k, k))
        layer = LayerParams(kernels, np.array(0.1), np.array(0.1))
        if variant == "refrpca":
            layer.lambda3 = np.array(0.05)
            layer.q = np.ones(n)
            layer.P = np.eye(n)
        layers.append(layer)
    return NetworkParams(layers, variant, h, w, m, k)


@dataclass
class LayerRecord:
    L_in: np.ndarray
    S_in: np.ndarray
    first: bool
    factors: object
    shrunk: np.ndarray
    a_S: np.ndarray
    S_P: np.ndarray | None = None
    branch: np.ndarray | None = None
    prox_out: np.ndarray | None = None


@dataclass
class Tape:
    M: np.ndarray
    records: list = field(default_factory=list)
    batched: bool = True


def _clamped(value):
    return max(float(value), 0.0)


def _conv_sum(inputs, kernels, frame_shape):
    out = None
    for x, kern in inputs:
        if x is None:
            continue
        y = conv2d_same(x, kern, frame_shape)
        out = y if out is None else out + y
    return out


def _svt(a_L, lam1):
    factors = svd(a_L)
    shrunk = np.maximum(factors.sigma - lam1, 0.0)
    L_out = (factors.U * shrunk[..., None, :]) @ np.swapaxes(factors.V, -1, -2)
    return L_out, factors, shrunk


def layer_forward(M, L_in, S_in, layer, params, first=False):
    """One unrolled iteration. ``first=True`` asserts ``L_in = S_in = 0``."""
    fs = params.frame_shape
    W = layer.kernels
    if first:
        a_L = conv2d_same(M, W[0], fs)
        a_S = conv2d_same(M, W[1], fs)
    else:
        a_L = _conv_sum([(M, W[0]), (S_in, W[2]), (L_in, W[4])], W, fs)
        a_S = _conv_sum([(M, W[1]), (S_in, W[3]), (L_in, W[5])], W, fs)
    L_out, factors, shrunk = _svt(a_L, _clamped(layer.lambda1))
    rec = LayerRecord(L_in, S_in, first, factors, shrunk, a_S)

    lam2 = _clamped(layer.lambda2)
    if params.variant == "refrpca":
        S_P = build_reference(S_in, layer.P)
        absq = np.abs(layer.q)[:, None]
        S_out, branch = reweighted_l1l1_branches(a_S, lam2 * absq, _clamped(layer.lambda3) * absq, S_P)
        rec.S_P = S_P
        rec.branch = branch
    elif params.corona_threshold == "mixed":
        norms = np.sqrt(np.sum(a_S * a_S, axis=-1, keepdims=True))
        factor = np.where(norms > lam2, 1.0 - lam2 / np.where(norms > 0, norms, 1.0), 0.0)
        S_out = a_S * factor
    else:
        S_out = np.sign(a_S) * np.maximum(np.abs(a_S) - lam2, 0.0)
    rec.prox_out = S_out
    return L_out, S_out, rec


def network_forward(M, params):
    """Run all layers from ``L = S = 0``; returns ``(L_hat, S_hat, tape)``."""
    M = np.asarray(M, dtype=np.float64)
    batched = M.ndim == 3
    if not batched:
        M = M[None]
    if M.shape[-2:] != (params.h * params.w, params.m):
        raise ShapeError(f"input {M.shape[-2:]} does not match network geometry {params.h}x{params.w}x{params.m}")
    L = np.zeros_like(M)
    S = np.zeros_like(M)
    tape = Tape(M, batched=batched)
    for i, layer in enumerate(params.layers):
        L, S, rec = layer_forward(M, L, S, layer, params, first=(i == 0))
        tape.records.append(rec)
    if not batched:
        return L[0], S[0], tape
    return L, S, tape


def svd_backward(factors, dU, dSigma, dV, eps=SVD_EPS):
    """Reverse-mode SVD: cotangent of ``X`` from cotangents of ``(U, sigma, V)``.

    ``F_ij = 1/(sigma_j^2 - sigma_i^2)`` with denominators smaller than
    ``eps`` in magnitude replaced by ``sign * eps``; ``1/sigma`` is taken as
    0 for ``sigma <= eps``. Works on batched factors.
    """
    U, s, V = factors.U, factors.sigma, factors.V
    Ut = np.swapaxes(U, -1, -2)
    Vt = np.swapaxes(V, -1, -2)
    J = Ut @ dU
    K = Vt @ dV
    denom = s[..., None, :] ** 2 - s[..., :, None] ** 2
    small = np.abs(denom) < eps
    denom = np.where(small, np.where(denom < 0, -eps, eps), denom)
    F = 1.0 / denom
    p = s.shape[-1]
    F[..., np.arange(p), np.arange(p)] = 0.0
    inner = (F * (J - np.swapaxes(J, -1, -2))) * s[..., None, :]
    inner = inner + s[..., :, None] * (F * (K - np.swapaxes(K, -1, -2)))
    inner[..., np.arange(p), np.arange(p)] += dSigma
    dX = U @ inner @ Vt
    s_inv = np.divide(1.0, s, out=np.zeros_like(s), where=s > eps)
    dX = dX + ((dU - U @ J) * s_inv[..., None, :]) @ Vt
    dX = dX + (U * s_inv[..., None, :]) @ np.swapaxes(dV - V @ K, -1, -2)
    return dX


def svt_backward(factors, shrunk, dY, eps=SVD_EPS):
    """Cotangents of the SVT input and of its threshold."""
    U, V = factors.U, factors.V
    G = np.swapaxes(U, -1, -2) @ dY @ V
    diag = np.diagonal(G, axis1=-2, axis2=-1)
    active = shrunk > 0
    dsigma = np.where(active, diag, 0.0)
    dlam = -float(np.sum(dsigma))
    dU = (dY @ V) * shrunk[..., None, :]
    dV = (np.swapaxes(dY, -1, -2) @ U) * shrunk[..., None, :]
    return svd_backward(factors, dU, dsigma, dV, eps), dlam


_DA = np.zeros(6)
_DB = np.zeros(6)
_DA[[UPPER, MID_POS]] = -1.0
_DA[[LOWER, MID_NEG]] = 1.0
_DB[[UPPER, MID_NEG]] = -1.0
_DB[[LOWER, MID_POS]] = 1.0
_PASS = np.zeros(6)
_PASS[[UPPER, MID_POS, LOWER, MID_NEG]] = 1.0


def _prox_backward(rec, layer, g, grads, prefix):
    """Reweighted prox backward: returns cotangents of the pre-activation and of S_P."""
    branch = rec.branch
    dX = g * _PASS[branch]
    dSP = np.where(branch == REF, g, 0.0)
    lam2, lam3 = float(layer.lambda2), float(layer.lambda3)
    absq = np.abs(layer.q)
    gA = (g * _DA[branch]).sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,))
    gB = (g * _DB[branch]).sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,))
    grads[prefix + "lambda2"] += float(gA @ absq) if lam2 >= 0 else 0.0
    grads[prefix + "lambda3"] += float(gB @ absq) if lam3 >= 0 else 0.0
    grads[prefix + "q"] += (gA * _clamped(lam2) + gB * _clamped(lam3)) * np.sign(layer.q)
    return dX, dSP


def _corona_backward(rec, layer, g, grads, prefix, mode):
    x = rec.a_S
    lam2 = float(layer.lambda2)
    tau = _clamped(lam2)
    if mode == "mixed":
        norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        active = norms > tau
        safe = np.where(active, norms, 1.0)
        xg = np.sum(x * g, axis=-1, keepdims=True)
        dX = np.where(active, g * (1.0 - tau / safe) + tau * x * xg / safe**3, 0.0)
        dtau = -float(np.sum(np.where(active, xg / safe, 0.0)))
    else:
        active = np.abs(x) > tau
        dX = np.where(active, g, 0.0)
        dtau = -float(np.sum(np.where(active, g * np.sign(x), 0.0)))
    grads[prefix + "lambda2"] += dtau if lam2 >= 0 else 0.0
    return dX


def zero_grads(params):
    return OrderedDict((name, np.zeros_like(value)) for name, value in params.named_tensors().items())


def network_backward(tape, params, dL, dS, grads=None):
    """Reverse pass; returns ``(grads, dM)``.

    ``grads`` maps every name of ``params.named_tensors()`` to its gradient;
    pass an existing dict to accumulate into it.
    """
    if len(tape.records) != params.depth:
        raise ShapeError(f"tape has {len(tape.records)} layers, network has {params.depth}")
    dL = np.asarray(dL, dtype=np.float64)
    dS = np.asarray(dS, dtype=np.float64)
    if not tape.batched:
        dL, dS = dL[None], dS[None]
    if dL.shape != tape.M.shape or dS.shape != tape.M.shape:
        raise ShapeError(f"cotangents {dL.shape}/{dS.shape} do not match tape input {tape.M.shape}")
    if grads is None:
        grads = zero_grads(params)
    fs, k = params.frame_shape, params.k
    M = tape.M
    dM = np.zeros_like(M)
    for i in range(params.depth - 1, -1, -1):
        rec = tape.records[i]
        layer = params.layers[i]
        W = layer.kernels
        prefix = f"layer{i}."

        da_L, dlam1 = svt_backward(rec.factors, rec.shrunk, dL)
        if float(layer.lambda1) >= 0:
            grads[prefix + "lambda1"] += dlam1

        dSP = None
        if params.variant == "refrpca":
            da_S, dSP = _prox_backward(rec, layer, dS, grads, prefix)
        else:
            da_S = _corona_backward(rec, layer, dS, grads, prefix, params.corona_threshold)

        grads[prefix + "W1"] += conv2d_kernel_grad(M, da_L, k, fs)
        grads[prefix + "W2"] += conv2d_kernel_grad(M, da_S, k, fs)
        dM += conv2d_adjoint(da_L, W[0], fs) + conv2d_adjoint(da_S, W[1], fs)

        if dSP is not None and not rec.first:
            S_prev = rec.S_in[..., :, :-1]
            n = S_prev.shape[-2]
            grads[prefix + "P"] += np.moveaxis(dSP[..., :, 1:], -2, 0).reshape(n, -1) @ np.moveaxis(
                S_prev, -2, 0
            ).reshape(n, -1).T

        if rec.first:
            dL = np.zeros_like(M)
            dS = np.zeros_like(M)
            continue

        grads[prefix + "W3"] += conv2d_kernel_grad(rec.S_in, da_L, k, fs)
        grads[prefix + "W4"] += conv2d_kernel_grad(rec.S_in, da_S, k, fs)
        grads[prefix + "W5"] += conv2d_kernel_grad(rec.L_in, da_L, k, fs)
        grads[prefix + "W6"] += conv2d_kernel_grad(rec.L_in, da_S, k, fs)
        dS_in = conv2d_adjoint(da_L, W[2], fs) + conv2d_adjoint(da_S, W[3], fs)
        dL_in = conv2d_adjoint(da_L, W[4], fs) + conv2d_adjoint(da_S, W[5], fs)
        if dSP is not None and not params.detach_reference:
            dS_in[..., :, :1] += dSP[..., :, :1]
            dS_in[..., :, :-1] += layer.P.T @ dSP[..., :, 1:]
        dL, dS = dL_in, dS_in

    if not tape.batched:
        dM = dM[0]
    return grads, dM


def kink_margin(tape, params):
    """Smallest distance of any recorded quantity to a non-differentiable point:
    singular values vs ``lambda1`` and prox inputs vs their breakpoints."""
    margin = np.inf
    for rec, layer in zip(tape.records, params.layers):
        margin = min(margin, float(np.min(np.abs(rec.factors.sigma - _clamped(layer.lambda1)))))
        x = rec.a_S
        lam2 = _clamped(layer.lambda2)
        if params.variant == "refrpca":
            absq = np.abs(layer.q)[:, None]
            A = lam2 * absq
            B = _clamped(layer.lambda3) * absq
            s = rec.S_P
            pos = s >= 0
            pts = [
                np.where(pos, s + A + B, A + B),
                np.where(pos, s + A - B, -A + B),
                np.where(pos, A - B, s - A + B),
                np.where(pos, -A - B, s - A - B),
            ]
            margin = min(margin, min(float(np.min(np.abs(x - b))) for b in pts))
        elif params.corona_threshold == "mixed":
            norms = np.sqrt(np.sum(x * x, axis=-1))
            margin = min(margin, float(np.min(np.abs(norms - lam2))))
        else:
            margin = min(margin, float(np.min(np.abs(np.abs(x) - lam2))))
    return margin


def save_params(path, params):
    header = {
        "format": "refrpca-network",
        "variant": params.variant,
        "depth": params.depth,
        "geometry": {"h": params.h, "w": params.w, "m": params.m},
        "k": params.k,
        "detach_reference": params.detach_reference,
        "corona_threshold": params.corona_threshold,
    }
    urpc.save_container(path, header, params.named_tensors())


def load_params(path):
    header, tensors = urpc.load_container(path)
    if header.get("format") != "refrpca-network":
        raise FormatError(f"{path} is not a network checkpoint")
    geo = header["geometry"]
    params = init_params(header["depth"], (geo["h"], geo["w"], geo["m"]), header["variant"], k=header["k"])
    params.detach_reference = header.get("detach_reference", False)
    params.corona_threshold = header.get("corona_threshold", "scalar")
    expected = params.named_tensors()
    if list(expected) != list(tensors):
        raise FormatError(f"checkpoint tensor list does not match a {header['variant']} network of depth {header['depth']}")
    for name, target in expected.items():
        if target.shape != tensors[name].shape:
            raise FormatError(f"{name}: checkpoint shape {tensors[name].shape}, expected {target.shape}")
        target[...] = tensors[name]
    return params
