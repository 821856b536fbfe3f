"""Dropout mask generation: random, score-ranked, ordered prefix, layerwise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError, DegenerateMaskError
from .params import ModelParams

MODES = ("bernoulli", "exact-k", "score-window", "ordered-prefix", "layerwise")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DropoutMask:
    kept: np.ndarray
    keep_rate: float = 1.0
    mode: str = "exact-k"

    def __post_init__(self):
        kept = np.array(self.kept, dtype=bool)
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}")

    def __len__(self):
        return len(self.kept)

    @property
    def num_kept(self) -> int:
        return int(self.kept.sum())

    @property
    def kept_fraction(self) -> float:
        return self.num_kept / len(self.kept)

    def complement(self) -> "DropoutMask":
        return DropoutMask(~self.kept, 1.0 - self.keep_rate, self.mode)

    def __eq__(self, other):
        if not isinstance(other, DropoutMask):
            return NotImplemented
        return (self.mode == other.mode and self.keep_rate == other.keep_rate
                and np.array_equal(self.kept, other.kept))

    def __hash__(self):
        return hash((self.mode, self.keep_rate, self.kept.tobytes()))


def full_mask(num_units: int, mode: str = "exact-k") -> DropoutMask:
    return DropoutMask(np.ones(num_units, dtype=bool), 1.0, mode)


def _check_keep_rate(keep_rate):
    if not (0.0 < keep_rate <= 1.0):
        raise ConfigError(f"keep_rate must be in (0, 1], got {keep_rate}")


def random_mask(num_units: int, keep_rate: float, mode: str = "exact-k", rng=None) -> DropoutMask:
    """I.i.d. (``bernoulli``) or fixed-size (``exact-k``) random mask."""
    _check_keep_rate(keep_rate)
    rng = np.random.default_rng(rng)
    if mode == "bernoulli":
        kept = rng.random(num_units) < keep_rate
    elif mode == "exact-k":
        k = round_half_up(keep_rate * num_units)
        kept = np.zeros(num_units, dtype=bool)
        kept[rng.permutation(num_units)[:k]] = True
    else:
        raise ConfigError(f"random_mask does not support mode {mode!r}")
    return DropoutMask(kept, keep_rate, mode)


def theta(keep_rate: float, subnetworks: int) -> float:
    """Probability that a unit is kept by at least one of ``subnetworks`` masks."""
    _check_keep_rate(keep_rate)
    if subnetworks < 1:
        raise ConfigError("subnetworks must be >= 1")
    return 1.0 - (1.0 - keep_rate) ** subnetworks


@dataclass(frozen=True)
class ScoreTable:
    """Per-group L1 drift of the global model from its initial values.

    ``by_layer`` selects whole tensors as groups instead of units.
    """

    scores: np.ndarray
    baseline: ModelParams
    by_layer: bool = False

    @classmethod
    def initial(cls, baseline: ModelParams, by_layer: bool = False) -> "ScoreTable":
        n = baseline.num_layers if by_layer else baseline.num_units
        return cls(np.zeros(n), baseline.copy(), by_layer)


def update_scores(table: ScoreTable, new_global: ModelParams) -> ScoreTable:
    if table.by_layer:
        scores = new_global.layer_l1(table.baseline)
    else:
        scores = new_global.unit_l1(table.baseline)
    return ScoreTable(scores, table.baseline, table.by_layer)


def score_order(scores) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def drop_window(num_groups: int, drop_count: int, level: int, levels: int) -> tuple[int, int]:
    """``[start, stop)`` positions in the score ranking dropped by ``level``."""
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    if not 1 <= level <= levels:
        raise ConfigError(f"capacity level {level} outside 1..{levels}")
    if drop_count > num_groups:
        raise ConfigError(f"cannot drop {drop_count} of {num_groups} groups")
    stride = (num_groups - drop_count) // (levels - 1) if levels > 1 else 0
    start = (level - 1) * stride
    return start, start + drop_count


def _window_mask(scores, level, levels, drop_count, keep_rate, mode):
    m = len(scores)
    start, stop = drop_window(m, drop_count, level, levels)
    kept = np.ones(m, dtype=bool)
    kept[score_order(scores)[start:stop]] = False
    return DropoutMask(kept, keep_rate, mode)


def hetero_mask(table: ScoreTable, capacity_level: int, levels: int, keep_rate: float) -> DropoutMask:
    """Score-ranked mask: faster levels drop the groups that moved most.

    Groups are sorted by score (descending) and level ``c`` drops the window
    of ``round((1 - keep_rate) * m)`` groups starting at ``(c - 1) * stride``.
    """
    _check_keep_rate(keep_rate)
    m = len(table.scores)
    w = round_half_up((1.0 - keep_rate) * m)
    return _window_mask(table.scores, capacity_level, levels, w, keep_rate, "score-window")


def layerwise_mask(table: ScoreTable, capacity_level: int, levels: int, keep_rate: float) -> DropoutMask:
    """Score-ranked mask over whole layers.

    At least one layer is dropped whenever ``keep_rate < 1``; a mask that
    drops every layer raises :class:`DegenerateMaskError`.
    """
    _check_keep_rate(keep_rate)
    m = len(table.scores)
    w = round_half_up((1.0 - keep_rate) * m)
    if keep_rate < 1.0:
        w = max(w, 1)
    mask = _window_mask(table.scores, capacity_level, levels, min(w, m), keep_rate, "layerwise")
    if not mask.kept.any():
        raise DegenerateMaskError("layerwise mask drops the whole model")
    return mask


def ordered_mask(num_units: int, capacity_level: int, levels: int) -> DropoutMask:
    """Nested prefix mask keeping ``round(m * (L - c + 1) / L)`` leading units."""
    if levels < 1 or not 1 <= capacity_level <= levels:
        raise ConfigError(f"capacity level {capacity_level} outside 1..{levels}")
    frac = (levels - capacity_level + 1) / levels
    width = max(1, round_half_up(num_units * frac))
    kept = np.zeros(num_units, dtype=bool)
    kept[:width] = True
    return DropoutMask(kept, frac, "ordered-prefix")


@dataclass(frozen=True)
class MomentStats:
    mean_nu: float
    var_nu: float
    theta_empirical: float
    conditioned: int
    trials: int
    mean_se: float
    var_se: float
    theta_se: float


def mask_moment_stats(keep_rate: float, subnetworks: int, trials: int, rng=None) -> MomentStats:
    """Monte-Carlo moments of the overlap ``nu`` between two distinct units.

    For each trial, ``S`` bernoulli masks are drawn over units ``r`` and
    ``r'``; ``nu = sum_s m_r m_r' / N_r`` with ``N_r = sum_s m_r``. Moments
    are conditioned on unit ``r`` being kept at least once.
    """
    _check_keep_rate(keep_rate)
    if trials < 10_000:
        raise ConfigError("mask_moment_stats needs at least 10^4 trials")
    rng = np.random.default_rng(rng)
    draws = rng.random((trials, subnetworks, 2)) < keep_rate
    m_r = draws[:, :, 0]
    m_rp = draws[:, :, 1]
    count = m_r.sum(axis=1)
    hit = count >= 1
    nu = (m_r & m_rp).sum(axis=1)[hit] / count[hit]
    k = len(nu)
    mean = float(nu.mean())
    var = float(nu.var(ddof=1)) if k > 1 else 0.0
    m4 = float(((nu - mean) ** 4).mean())
    theta_emp = k / trials
    return MomentStats(
        mean_nu=mean,
        var_nu=var,
        theta_empirical=theta_emp,
        conditioned=k,
        trials=trials,
        mean_se=math.sqrt(var / k) if k else 0.0,
        var_se=math.sqrt(max(m4 - var * var * (k - 3) / (k - 1), 0.0) / k) if k > 1 else 0.0,
        theta_se=math.sqrt(theta_emp * (1 - theta_emp) / trials),
    )


def nu_variance_bound(keep_rate: float, subnetworks: int) -> float:
    """``(theta - xi^2) / S``, the variance value used by the convergence analysis."""
    return (theta(keep_rate, subnetworks) - keep_rate ** 2) / subnetworks


def nu_variance_exact(keep_rate: float, subnetworks: int) -> float:
    """Exact conditional variance ``xi (1 - xi) E[1/N | N >= 1]``, N ~ Bin(S, xi)."""
    _check_keep_rate(keep_rate)
    ks = np.arange(1, subnetworks + 1)
    pmf = stats.binom.pmf(ks, subnetworks, keep_rate)
    inv_mean = float((pmf / ks).sum() / pmf.sum())
    return keep_rate * (1.0 - keep_rate) * inv_mean
