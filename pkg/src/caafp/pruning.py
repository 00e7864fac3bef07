"""Cluster-aware importance scores and the prune-and-heal mask scheduler.

All score vectors are indexed over the prunable positions of a ParamSet
(conv and dense kernels), in layout order. Ranking is global across layers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import ArchitectureSpec, ParamSet, _prunable_index, num_params

log = logging.getLogger(__name__)

_EPS = 1e-9


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + _EPS))


def floor_safe(x: float) -> int:
    return int(math.floor(x + _EPS))


@dataclass
class Mask:
    """Binary keep-mask over the prunable positions of one architecture."""

    bits: np.ndarray
    arch: ArchitectureSpec | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 1:
            raise ConfigError("mask bits must be a vector")
        if self.arch is not None and len(self.bits) != len(_prunable_index(self.arch)):
            raise ConfigError(f"mask needs {len(_prunable_index(self.arch))} bits, got {len(self.bits)}")

    @classmethod
    def ones(cls, arch: ArchitectureSpec) -> "Mask":
        return cls(np.ones(len(_prunable_index(arch)), dtype=bool), arch)

    @classmethod
    def full(cls, n_total: int) -> "Mask":
        return cls(np.ones(n_total, dtype=bool))

    @property
    def positions(self) -> np.ndarray:
        if self.arch is None:
            raise ConfigError("mask is not bound to an architecture")
        return _prunable_index(self.arch)

    @property
    def n_total(self) -> int:
        return len(self.bits)

    @property
    def n_active(self) -> int:
        return int(self.bits.sum())

    @property
    def n_pruned(self) -> int:
        return self.n_total - self.n_active

    @property
    def sparsity(self) -> float:
        return self.n_pruned / self.n_total

    def keep(self) -> np.ndarray:
        """Full-length 0/1 vector; non-prunable positions are always 1."""
        positions = self.positions
        out = np.ones(num_params(self.arch))
        out[positions] = self.bits
        return out

    def n_transmitted(self) -> int:
        """Entries sent when a model under this mask is communicated."""
        if self.arch is None:
            raise ConfigError("mask is not bound to an architecture")
        return num_params(self.arch) - self.n_pruned

    def copy(self) -> "Mask":
        return Mask(self.bits.copy(), self.arch)

    def __eq__(self, other):
        return isinstance(other, Mask) and self.arch == other.arch and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class ScoreWeights:
    alpha: float = 0.25
    beta: float = 0.25
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError(f"score weights must be non-negative: {self}")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise ConfigError(f"score weights must sum to 1: {self}")


@dataclass(frozen=True)
class PruneSchedule:
    s_start: float = 0.7
    s_target: float = 0.7
    frequency: int = 5
    churn: float = 0.05
    rounds: int = 50

    def __post_init__(self):
        if not 0.0 <= self.s_start <= self.s_target < 1.0:
            raise ConfigError(f"need 0 <= s_start <= s_target < 1, got {self.s_start}, {self.s_target}")
        if self.frequency < 1:
            raise ConfigError("pruning frequency must be >= 1")
        if not 0.0 <= self.churn < 1.0:
            raise ConfigError("churn rate must lie in [0, 1)")
        if self.rounds < self.frequency:
            raise ConfigError(f"{self.rounds} pruning rounds never reach a step at frequency {self.frequency}")

    def step_rounds(self) -> list[int]:
        return list(range(self.frequency, self.rounds + 1, self.frequency))

    def is_step(self, t: int) -> bool:
        return t >= 1 and t % self.frequency == 0


@dataclass
class ClusterSignals:
    """Per-client returned parameter vectors and gradients for one cluster."""

    client_params: list[np.ndarray]
    client_grads: list[np.ndarray]
    cluster_params: ParamSet


def magnitude_score(params: ParamSet) -> np.ndarray:
    w = np.abs(params.values[params.prunable_index])
    top = w.max() if w.size else 0.0
    if top == 0:
        return np.zeros_like(w)
    return w / top


def coherence_score(signals: ClusterSignals) -> np.ndarray:
    idx = signals.cluster_params.prunable_index
    stack = np.stack([np.asarray(p)[idx] for p in signals.client_params])
    return 1.0 / (1.0 + stack.var(axis=0))


def consistency_score(signals: ClusterSignals) -> np.ndarray:
    idx = signals.cluster_params.prunable_index
    signs = np.sign(np.stack([np.asarray(g)[idx] for g in signals.client_grads]))
    return np.abs(signs.mean(axis=0))


def importance(params: ParamSet, signals: ClusterSignals, weights: ScoreWeights) -> np.ndarray:
    score = weights.alpha * magnitude_score(params)
    # zero-weight terms are skipped so their signals may be omitted
    if weights.beta:
        score = score + weights.beta * coherence_score(signals)
    if weights.gamma:
        score = score + weights.gamma * consistency_score(signals)
    return score


def regrowth_signal(signals: ClusterSignals) -> np.ndarray:
    """|mean client gradient| over prunable positions."""
    idx = signals.cluster_params.prunable_index
    return np.abs(np.mean([np.asarray(g)[idx] for g in signals.client_grads], axis=0))


@dataclass(frozen=True)
class StepCounts:
    remaining: int
    delta_s: float
    n_deficit: int
    n_churn: int
    n_prune: int
    n_grow: int
    degenerate: bool = False


def step_counts(n_total: int, n_active: int, schedule: PruneSchedule, t: int) -> StepCounts:
    """Prune/regrow counts for the scheduled step at phase round ``t``."""
    n_pruned = n_total - n_active
    current = n_pruned / n_total
    remaining = max(1, (schedule.rounds - t) // schedule.frequency)
    delta_s = (schedule.s_target - current) / remaining
    target_pruned = round_half_up(schedule.s_target * n_total)
    gap = max(0, target_pruned - n_pruned)
    if remaining == 1:
        n_deficit = gap
    else:
        n_deficit = min(max(0, round_half_up(delta_s * n_total)), gap)
    # regrowth can only draw on positions pruned before this step
    n_churn = min(floor_safe(schedule.churn * n_active), n_pruned)
    n_prune = n_churn + n_deficit
    degenerate = False
    # at least one weight must stay active once the regrown positions are back
    if n_prune > n_active or n_active - n_prune + n_churn < 1:
        degenerate = True
        n_prune = min(n_active, max(0, n_active - 1 + n_churn))
        n_churn = min(n_churn, n_prune)
    return StepCounts(remaining, delta_s, n_deficit, n_churn, n_prune, n_churn, degenerate)


def prune_heal_step(mask: Mask, scores: np.ndarray, grads: np.ndarray, schedule: PruneSchedule,
                    t: int) -> Mask:
    """One scheduled prune-and-regrow update; returns a new mask.

    ``scores`` and ``grads`` (aggregated |gradient|) are indexed over prunable
    positions. Prunes the lowest-score active positions, then reactivates the
    positions that were already pruned before this step with the largest
    gradient signal. Ties go to the lower position index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if scores.shape != mask.bits.shape or grads.shape != mask.bits.shape:
        raise ConfigError("scores/gradients must align with the mask")
    if mask.sparsity > schedule.s_target + 1.0 / mask.n_total:
        raise ConfigError(f"sparsity {mask.sparsity:.4f} already exceeds target {schedule.s_target}")
    counts = step_counts(mask.n_total, mask.n_active, schedule, t)
    if counts.degenerate:
        log.warning("prune step at t=%d asks for more than the %d active weights; capping it", t, mask.n_active)

    bits = mask.bits.copy()
    active = np.flatnonzero(mask.bits)
    inactive = np.flatnonzero(~mask.bits)
    if counts.n_prune:
        order = np.argsort(scores[active], kind="stable")
        bits[active[order[:counts.n_prune]]] = False
    if counts.n_grow:
        order = np.argsort(-grads[inactive], kind="stable")
        bits[inactive[order[:counts.n_grow]]] = True
    return Mask(bits, mask.arch)


def prune_lowest(scores: np.ndarray, arch: ArchitectureSpec | None, sparsity: float) -> Mask:
    """Mask with the round(sparsity * N) lowest-score positions removed."""
    mask = Mask.ones(arch) if arch is not None else Mask.full(len(scores))
    n = round_half_up(sparsity * mask.n_total)
    order = np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")
    mask.bits[order[:n]] = False
    return mask


def apply_start_sparsity(params: ParamSet, signals: ClusterSignals, weights: ScoreWeights,
                         s_start: float) -> Mask:
    return prune_lowest(importance(params, signals, weights), params.arch, s_start)


def step_log_entry(t: int, before: Mask, after: Mask, counts: StepCounts, weights: ScoreWeights,
                   cluster: int | None = None) -> dict:
    return {
        "event": "prune_step",
        "round": t,
        "cluster": cluster,
        "sparsity_before": before.sparsity,
        "sparsity_after": after.sparsity,
        "n_prune": counts.n_prune,
        "n_grow": counts.n_grow,
        "weights": [weights.alpha, weights.beta, weights.gamma],
    }
