"""Loss, Adam, the epoch loop and the depth-sweep driver."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError
from .net import init_params, network_backward, network_forward, zero_grads

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "mse_L", "mse_S", "mse_avg", "seconds")
SWEEP_HEADER = ("variant", "depth", "mse_L", "mse_S", "mse_avg")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 200
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    depth: int = 2
    variant: str = "refrpca"
    kernel_size: int = 5
    clip_norm: float | None = None  # global-norm clipping, e.g. 10.0
    deterministic: bool = True  # zero the wall-clock column so CSVs are reproducible
    detach_reference: bool = False
    corona_threshold: str = "scalar"
    eval_batch_size: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.depth < 1:
            raise ParameterError(f"invalid training hyperparameters: {self}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ParameterError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.variant not in ("refrpca", "corona"):
            raise ParameterError(f"unknown variant {self.variant!r}")
        if self.corona_threshold not in ("scalar", "mixed"):
            raise ParameterError(f"unknown threshold kind {self.corona_threshold!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class MetricsRow:
    epoch: int
    split: str
    mse_L: float
    mse_S: float
    mse_avg: float
    seconds: float


@dataclass
class SweepRow:
    variant: str
    depth: int
    mse_L: float
    mse_S: float
    mse_avg: float
    metrics: list = field(default_factory=list, repr=False)


def compound_mse_loss(L_hat, S_hat, L, S):
    """``(1/2N) sum ||L_i - L_hat_i||^2 + (1/2N) sum ||S_i - S_hat_i||^2`` over a batch
    of ``N`` samples stacked along axis 0, with cotangents w.r.t. the predictions."""
    L_hat, S_hat, L, S = (np.asarray(a, dtype=np.float64) for a in (L_hat, S_hat, L, S))
    if L_hat.ndim != 3 or L_hat.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (N, n, m) batch, got {L_hat.shape}")
    if not (L_hat.shape == S_hat.shape == L.shape == S.shape):
        raise ShapeError("prediction and target shapes differ")
    N = L_hat.shape[0]
    rL = L_hat - L
    rS = S_hat - S
    loss = (float(np.sum(rL * rL)) + float(np.sum(rS * rS))) / (2 * N)
    return loss, rL / N, rS / N


def adam_step(params, grads, state, config):
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    step_size = config.learning_rate / (1.0 - b1**t)
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + config.adam_eps)
    return params, state


def _per_sample_mse(pred, target):
    r = pred - target
    return np.mean(r * r, axis=(-2, -1))


def predict(params, M, batch_size=100):
    M = np.asarray(M, dtype=np.float64)
    Ls, Ss = [], []
    for start in range(0, M.shape[0], batch_size):
        L, S, _ = network_forward(M[start : start + batch_size], params)
        Ls.append(L)
        Ss.append(S)
    return np.concatenate(Ls), np.concatenate(Ss)


def evaluate(params, dataset, batch_size=100):
    """Per-element MSE of each component, averaged over samples: ``(mse_L, mse_S, mse_avg)``."""
    if len(dataset) == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    L_hat, S_hat = predict(params, dataset.M, batch_size)
    mse_L = float(np.mean(_per_sample_mse(L_hat, dataset.L)))
    mse_S = float(np.mean(_per_sample_mse(S_hat, dataset.S)))
    return mse_L, mse_S, (mse_L + mse_S) / 2


def _global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def train(train_set, val_set, config, on_epoch=None):
    """Train a fresh network; returns ``(best_val_params, metrics_rows)``.

    Batches are reshuffled every epoch from ``(seed, epoch)``. The returned
    parameters are those with the lowest validation ``mse_avg`` seen after
    any epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ShapeError("training and validation splits must be non-empty")
    if config.batch_size > len(train_set):
        raise ParameterError(f"batch size {config.batch_size} exceeds training set size {len(train_set)}")
    params = init_params(
        config.depth, train_set.geometry, config.variant, seed=config.seed, k=config.kernel_size
    )
    params.detach_reference = config.detach_reference
    params.corona_threshold = config.corona_threshold
    metrics = []
    if config.epochs == 0:
        return params, metrics

    tensors = params.named_tensors()
    state = AdamState.zeros(tensors)
    best, best_score = params.copy(), np.inf
    N = len(train_set)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(N)
        sum_L = sum_S = 0.0
        for b, start in enumerate(range(0, N, config.batch_size)):
            idx = np.sort(order[start : start + config.batch_size])
            M, L, S = train_set.M[idx], train_set.L[idx], train_set.S[idx]
            L_hat, S_hat, tape = network_forward(M, params)
            loss, dL, dS = compound_mse_loss(L_hat, S_hat, L, S)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(v)) for k, v in tensors.items()}
                raise NumericalError(f"loss became {loss} at epoch {epoch}, batch {b}; parameter norms {norms}")
            sum_L += float(np.sum(_per_sample_mse(L_hat, L)))
            sum_S += float(np.sum(_per_sample_mse(S_hat, S)))
            grads, _ = network_backward(tape, params, dL, dS, zero_grads(params))
            if config.clip_norm is not None:
                total = _global_norm(grads)
                if total > config.clip_norm:
                    for g in grads.values():
                        g *= config.clip_norm / total
            adam_step(tensors, grads, state, config)
        elapsed = time.perf_counter() - t0
        seconds = 0.0 if config.deterministic else elapsed
        mse_L, mse_S = sum_L / N, sum_S / N
        metrics.append(MetricsRow(epoch, "train", mse_L, mse_S, (mse_L + mse_S) / 2, seconds))
        val = evaluate(params, val_set, config.eval_batch_size)
        metrics.append(MetricsRow(epoch, "val", *val, seconds))
        log.info("epoch %d: train mse_avg %.6g, val mse_avg %.6g (%.1fs)", epoch, metrics[-2].mse_avg, val[2], elapsed)
        if val[2] < best_score:
            best_score = val[2]
            best = params.copy()
        if on_epoch is not None:
            on_epoch(epoch, metrics[-2:])
    return best, metrics


def cell_seed(seed, depth):
    """Per-(depth) seed shared by all variants, independent of sweep order."""
    return int(np.random.SeedSequence([seed, depth]).generate_state(1)[0])


def depth_sweep(train_set, val_set, depths, variants, config):
    """Train every ``(variant, depth)`` cell independently; failed cells report NaN."""
    if not depths:
        raise ParameterError("depth list is empty")
    rows = []
    for variant in variants:
        for d in depths:
            cfg = TrainConfig(**{**config.__dict__, "variant": variant, "depth": d, "seed": cell_seed(config.seed, d)})
            try:
                params, metrics = train(train_set, val_set, cfg)
                scores = evaluate(params, val_set, cfg.eval_batch_size)
            except NumericalError as exc:
                log.warning("sweep cell %s/d=%d failed: %s", variant, d, exc)
                rows.append(SweepRow(variant, d, float("nan"), float("nan"), float("nan")))
                continue
            rows.append(SweepRow(variant, d, *scores, metrics=metrics))
    return rows


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in rows:
        writer.writerow([r.epoch, r.split, _fmt(r.mse_L), _fmt(r.mse_S), _fmt(r.mse_avg), _fmt(r.seconds)])
    return buf.getvalue()


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([r.variant, r.depth, _fmt(r.mse_L), _fmt(r.mse_S), _fmt(r.mse_avg)])
    return buf.getvalue()
