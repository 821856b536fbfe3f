"""Empirical checks of the convergence analysis for the patch CNN.

Covers the infinite- and finite-width neural tangent kernels, the
geometric-decay envelope on training loss, the initial-loss bound, and
per-filter weight drift. The delayed-gradient training loop used by these
checks lives here as :func:`theory_run`.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .masking import random_mask, theta
from .nn import CnnModel, Dataset, cnn_gradient, cnn_predict, init_cnn, mse_loss


@dataclass(frozen=True)
class NTKMatrix:
    H: np.ndarray
    lambda0: float

    @classmethod
    def from_matrix(cls, H) -> "NTKMatrix":
        H = np.asarray(H, dtype=np.float64)
        sym = 0.5 * (H + H.T)
        return cls(H, float(np.linalg.eigvalsh(sym)[0]))


def indicator_expectation(x, x2) -> float:
    """``E_w[1{<x,w> >= 0} 1{<x2,w> >= 0}]`` for standard Gaussian ``w``.

    Equals ``(pi - angle(x, x2)) / (2 pi)`` for nonzero vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    nx, nx2 = np.linalg.norm(x), np.linalg.norm(x2)
    if nx == 0.0 and nx2 == 0.0:
        return 1.0
    if nx == 0.0 or nx2 == 0.0:
        return 0.5
    return float((math.pi - _angle(x / nx, x2 / nx2)) / (2 * math.pi))


def _angle(u, v) -> float:
    # well conditioned at 0 and pi, unlike acos of the cosine
    return 2.0 * math.atan2(np.linalg.norm(u - v), np.linalg.norm(u + v))


def _arccos_expectation(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1)
    gram = V @ V.T
    safe = np.where(norms > 0, norms, 1.0)
    U = V / safe[:, None]
    diff = np.linalg.norm(U[:, None, :] - U[None, :, :], axis=2)
    summ = np.linalg.norm(U[:, None, :] + U[None, :, :], axis=2)
    angle = 2.0 * np.arctan2(diff, summ)
    return gram * (math.pi - angle) / (2 * math.pi)


def ntk_infty(data, q: int | None = None) -> NTKMatrix:
    """Infinite-width kernel of the patch CNN, evaluated in closed form.

    ``data`` is a :class:`Dataset` of images (then ``q`` is required) or an
    array of patched inputs ``(n, q*d_hat, p)``. Zero patches contribute 0.
    """
    if isinstance(data, Dataset):
        if q is None:
            raise ConfigError("patch width q is required for image datasets")
        xhat = data.patched(q)
    else:
        xhat = np.asarray(data, dtype=np.float64)
    n, _, p = xhat.shape
    H = np.zeros((n, n))
    for j in range(p):
        H += _arccos_expectation(xhat[:, :, j])
    H /= p ** 2
    H = 0.5 * (H + H.T)
    return NTKMatrix.from_matrix(H)


def finite_ntk(model: CnnModel, data) -> NTKMatrix:
    """Finite-width kernel at the model's current filters.

    Activity uses ``1{<x, w> >= 0}``, so zero filters count as active.
    """
    xhat = data.patched(model.q) if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    act = (np.einsum("rd,ndp->nrp", model.W, xhat) >= 0.0).astype(np.float64)
    G = np.einsum("rp,nrp,ndp->nrd", model.a, act, xhat)
    H = np.einsum("nrd,krd->nk", G, G)
    return NTKMatrix.from_matrix(0.5 * (H + H.T))


@dataclass(frozen=True)
class EnvelopeReport:
    rate: float
    initial: float
    floor: float
    slack: float
    compliant: bool
    violations: tuple
    max_excess: float

    def summary(self) -> str:
        status = "compliant" if self.compliant else f"{len(self.violations)} violations"
        return (f"envelope rate={self.rate:.6g} initial={self.initial:.6g} "
                f"floor={self.floor:.6g} slack={self.slack:.6g}: {status}")


def envelope(t, initial: float, rate: float):
    return (1.0 - rate) ** np.asarray(t, dtype=np.float64) * initial


def envelope_check(losses, theta_value: float, lr: float, lambda0: float,
                   slack_fraction: float = 0.1, tail_fraction: float = 0.1) -> EnvelopeReport:
    """Check ``loss_t <= (1 - theta*lr*lambda0/4)^t * loss_0 + floor + slack``.

    ``floor`` is the median of the last ``tail_fraction`` of the trace and
    ``slack`` is ``slack_fraction * loss_0``.
    """
    if lambda0 <= 0:
        raise ContractError("lambda0 must be positive; data violate the distinctness assumption")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractError("empty loss trace")
    rate = theta_value * lr * lambda0 / 4.0
    initial = float(losses[0])
    tail = max(1, int(math.ceil(tail_fraction * len(losses))))
    floor = float(np.median(losses[-tail:]))
    slack = slack_fraction * initial
    bound = envelope(np.arange(len(losses)), initial, rate) + floor + slack
    excess = losses - bound
    bad = tuple(int(i) for i in np.flatnonzero(excess > 0))
    return EnvelopeReport(rate, initial, floor, slack, not bad, bad, float(excess.max()))


@dataclass(frozen=True)
class InitialMseReport:
    mean: float
    sem: float
    bound: float
    allowance: float
    passed: bool
    samples: int


def initial_mse_check(data: Dataset, q: int, width: int, kappa: float = 1.0,
                      scale: float = 1.0, inits: int = 200, seed=None) -> InitialMseReport:
    """Average ``||y - u_0||^2`` over fresh initializations against ``(1/p + C^2) n``."""
    if inits < 2:
        raise ConfigError("need at least two initializations")
    n, d_hat, p = data.inputs.shape
    xhat = data.patched(q)
    losses = np.empty(inits)
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(inits)):
        model = init_cnn(width, d_hat, p, q, kappa, scale, np.random.default_rng(child))
        losses[k] = mse_loss(cnn_predict(model, xhat), data.labels)
    mean = float(losses.mean())
    sem = float(losses.std(ddof=1) / math.sqrt(inits))
    bound = (1.0 / p + data.bound ** 2) * n
    allowance = bound * (1.0 + 3.0 * sem / mean) if mean > 0 else bound
    return InitialMseReport(mean, sem, bound, allowance, mean <= allowance, inits)


def filter_drift(W, W0) -> np.ndarray:
    return np.linalg.norm(np.asarray(W) - np.asarray(W0), axis=1)


@dataclass(frozen=True)
class DriftReport:
    max_drift: np.ndarray
    radius: float | None
    exceeded: bool
    first_exceed: int | None


def drift_monitor(drifts, radius: float | None = None) -> DriftReport:
    """Per-step maximum over filters of ``||w_r,t - w_r,0||``, flagged against ``radius``."""
    drifts = np.atleast_2d(np.asarray(drifts, dtype=np.float64))
    peak = drifts.max(axis=1)
    first = None
    if radius is not None:
        over = np.flatnonzero(peak > radius)
        first = int(over[0]) if len(over) else None
    return DriftReport(peak, radius, first is not None, first)


def bounded_staleness(step: int, max_staleness: int) -> int:
    """Delay at ``step`` under ``E + 1`` equally fast clients started together."""
    return min(step, max_staleness)


@dataclass
class TheoryTrace:
    losses: np.ndarray
    staleness: np.ndarray
    drifts: np.ndarray
    model: CnnModel
    lr: float
    theta: float


def theory_run(data: Dataset, q: int, width: int, keep_rate: float, subnetworks: int,
               max_staleness: int, lr: float, merges: int, kappa: float = 1.0, seed=None,
               mask_mode: str = "bernoulli") -> TheoryTrace:
    """Train the patch CNN with averaged masked gradients evaluated on stale weights.

    At step ``t`` each of ``subnetworks`` masks yields a surrogate gradient
    at ``W_{t - delay}``; a filter's gradients are averaged over the masks
    that kept it and applied to ``W_t``. The recorded loss is the squared
    error of the full network scaled by ``keep_rate``.
    """
    if merges < 0 or max_staleness < 0 or subnetworks < 1:
        raise ConfigError("merges, max_staleness must be >= 0 and subnetworks >= 1")
    n, d_hat, p = data.inputs.shape
    init_seq, mask_seq = np.random.SeedSequence(seed).spawn(2)
    model = init_cnn(width, d_hat, p, q, kappa, keep_rate, np.random.default_rng(init_seq))
    mask_rng = np.random.default_rng(mask_seq)
    xhat = data.patched(q)
    W0 = model.W.copy()
    W = W0.copy()
    history = deque([W0.copy()], maxlen=max_staleness + 1)
    losses = [mse_loss(cnn_predict(model, xhat), data.labels)]
    delays = []
    drifts = [np.zeros(width)]
    for t in range(merges):
        delay = bounded_staleness(t, max_staleness)
        base = model.with_weights(history[-1 - delay])
        total = np.zeros_like(W)
        keepers = np.zeros(width)
        for _ in range(subnetworks):
            mask = random_mask(width, keep_rate, mask_mode, mask_rng)
            total += cnn_gradient(base, (xhat, data.labels), mask)
            keepers += mask.kept
        W = W - lr * total / np.maximum(keepers, 1.0)[:, None]
        history.append(W.copy())
        model = model.with_weights(W)
        losses.append(mse_loss(cnn_predict(model, xhat), data.labels))
        delays.append(delay)
        drifts.append(filter_drift(W, W0))
    return TheoryTrace(np.asarray(losses), np.asarray(delays, dtype=np.int64),
                       np.asarray(drifts), model, lr, theta(keep_rate, subnetworks))
