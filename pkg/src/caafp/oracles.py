"""Small brute-force reference computations.

Each oracle re-derives a result by a route that shares no code with the
production implementation (finite differences instead of backprop, exhaustive
linkage recomputation instead of Lance-Williams updates, scalar loops instead
of vectorised scores, exact fractions instead of float schedule arithmetic).
``run_all`` drives them and is what ``caafp oracle`` prints.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .clustering import agglomerative_cluster
from .nn import ArchitectureSpec, OptimizerState, ParamSet, adam_step, init_params, loss_and_grad, num_params
from .pruning import (ClusterSignals, Mask, PruneSchedule, ScoreWeights, coherence_score, consistency_score,
                      importance, magnitude_score, prune_heal_step, prune_lowest, step_counts)

# Small enough for a full finite-difference sweep, large enough to exercise
# every layer type (two conv blocks, hidden dense, output).
TOY_ARCH = ArchitectureSpec(input_len=14, channels=2, num_classes=3, filters=(3, 2), kernel=3,
                            hidden=4, conv_dropout=(0.3, 0.3), hidden_dropout=0.2)


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def fd_gradient(params: ParamSet, x, y, ref=None, lam=0.0, mask=None, training=False, seed=None,
                eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the loss over every coordinate."""
    base = params.values
    out = np.zeros_like(base)
    for i in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi, _ = loss_and_grad(params.with_values(hi), x, y, ref, lam, mask, training, seed)
        f_lo, _ = loss_and_grad(params.with_values(lo), x, y, ref, lam, mask, training, seed)
        out[i] = (f_hi - f_lo) / (2 * eps)
    return out


def gradient_check(seed: int, arch: ArchitectureSpec = TOY_ARCH, batch: int = 5) -> dict[str, float]:
    """Max relative error per layer for one random instance with dropout and a proximal term."""
    rng = np.random.default_rng(seed)
    params = init_params(arch, seed)
    params = params.with_values(params.values + 0.05 * rng.standard_normal(params.size))
    ref = params.with_values(params.values + 0.1 * rng.standard_normal(params.size))
    x = rng.standard_normal((batch, arch.input_len, arch.channels))
    y = rng.integers(0, arch.num_classes, batch)
    lam = float(rng.uniform(0.01, 1.0))
    dropout_seed = int(rng.integers(1 << 30))
    _, g = loss_and_grad(params, x, y, ref, lam, None, True, dropout_seed)
    num = fd_gradient(params, x, y, ref, lam, None, True, dropout_seed)
    return {slot.name: _rel_err(g[slot.offset:slot.stop], num[slot.offset:slot.stop]) for slot in params.layout}


def brute_average_linkage(dist: np.ndarray, k: int) -> frozenset[frozenset[int]]:
    """Greedy average linkage, recomputing every inter-cluster mean from scratch."""
    d = np.asarray(dist, dtype=np.float64)
    clusters = [[i] for i in range(d.shape[0])]
    while len(clusters) > k:
        clusters.sort(key=min)
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                total = 0.0
                for i in clusters[a]:
                    for j in clusters[b]:
                        total += d[i, j]
                avg = total / (len(clusters[a]) * len(clusters[b]))
                if best is None or avg < best[0]:
                    best = (avg, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return frozenset(frozenset(c) for c in clusters)


def random_distance_matrix(rng: np.random.Generator, n: int) -> np.ndarray:
    pts = rng.standard_normal((n, 3))
    return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))


def loop_magnitude(w: list[float]) -> list[float]:
    top = 0.0
    for v in w:
        top = max(top, abs(v))
    return [0.0 if top == 0 else abs(v) / top for v in w]


def loop_coherence(client_params: list[list[float]]) -> list[float]:
    out = []
    n = len(client_params)
    for j in range(len(client_params[0])):
        mean = sum(p[j] for p in client_params) / n
        var = sum((p[j] - mean) ** 2 for p in client_params) / n
        out.append(1.0 / (1.0 + var))
    return out


def loop_consistency(client_grads: list[list[float]]) -> list[float]:
    out = []
    for j in range(len(client_grads[0])):
        s = 0.0
        for g in client_grads:
            s += (g[j] > 0) - (g[j] < 0)
        out.append(abs(s / len(client_grads)))
    return out


def score_check(seed: int, arch: ArchitectureSpec = TOY_ARCH, clients: int = 4) -> dict[str, float]:
    """Max abs difference between vectorised scores and the scalar loops."""
    rng = np.random.default_rng(seed)
    n = num_params(arch)
    params = ParamSet(arch, rng.standard_normal(n))
    cps = [rng.standard_normal(n) for _ in range(clients)]
    grads = [rng.standard_normal(n) * (rng.random(n) > 0.1) for _ in range(clients)]
    raw = rng.random(3)
    weights = ScoreWeights(*(raw / raw.sum()))
    signals = ClusterSignals(cps, grads, params)
    idx = params.prunable_index
    mag = loop_magnitude(params.values[idx].tolist())
    coh = loop_coherence([p[idx].tolist() for p in cps])
    con = loop_consistency([g[idx].tolist() for g in grads])
    imp = [weights.alpha * a + weights.beta * b + weights.gamma * c for a, b, c in zip(mag, coh, con)]
    return {
        "magnitude": float(np.max(np.abs(magnitude_score(params) - mag))),
        "coherence": float(np.max(np.abs(coherence_score(signals) - coh))),
        "consistency": float(np.max(np.abs(consistency_score(signals) - con))),
        "importance": float(np.max(np.abs(importance(params, signals, weights) - imp))),
    }


def expected_counts(n_total: int, n_active: int, s_target: float, frequency: int, churn: float,
                    rounds: int, t: int) -> tuple[int, int]:
    """(N_prune, N_grow) for one step in exact rational arithmetic."""
    n_pruned = n_total - n_active
    target = Fraction(s_target).limit_denominator(10 ** 9)
    rho = Fraction(churn).limit_denominator(10 ** 9)
    remaining = max(1, (rounds - t) // frequency)
    gap = max(0, math.floor(target * n_total + Fraction(1, 2)) - n_pruned)
    want = (target * n_total - n_pruned) / remaining
    deficit = gap if remaining == 1 else min(max(0, math.floor(want + Fraction(1, 2))), gap)
    grow = min(math.floor(rho * n_active), n_pruned)
    prune = grow + deficit
    if prune > n_active or n_active - prune + grow < 1:
        prune = min(n_active, max(0, n_active - 1 + grow))
        grow = min(grow, prune)
    return prune, grow


def simulate_schedule(n_total: int, schedule: PruneSchedule, seed: int = 0) -> list[Mask]:
    """Masks after the start-sparsity prune and after every scheduled step, random scores."""
    rng = np.random.default_rng(seed)
    mask = None
    history = []
    for t in schedule.step_rounds():
        if mask is None:
            mask = prune_lowest(rng.random(n_total), None, schedule.s_start)
            history.append(mask)
        mask = prune_heal_step(mask, rng.random(n_total), rng.random(n_total), schedule, t)
        history.append(mask)
    return history


def schedule_check(n_total: int, schedule: PruneSchedule, seed: int = 0) -> dict[str, bool]:
    masks = simulate_schedule(n_total, schedule, seed)
    sp = [m.sparsity for m in masks]
    tol = 1.0 / n_total
    steps = schedule.step_rounds()
    counts_ok = True
    for t, before, after in zip(steps, masks[:-1], masks[1:]):
        prune, grow = expected_counts(n_total, before.n_active, schedule.s_target, schedule.frequency,
                                      schedule.churn, schedule.rounds, t)
        removed = int(np.sum(before.bits & ~after.bits))
        added = int(np.sum(~before.bits & after.bits))
        # a position both pruned and regrown in one step is impossible by construction
        counts_ok &= removed == prune and added == grow
    at_target = [i for i in range(1, len(masks)) if abs(masks[i - 1].sparsity - schedule.s_target) <= tol / 2]
    churn_ok = all(int(np.sum(masks[i - 1].bits ^ masks[i].bits)) ==
                   2 * min(math.floor(schedule.churn * masks[i - 1].n_active + 1e-9), masks[i - 1].n_pruned)
                   for i in at_target)
    monotone = all(b >= a - 1e-12 for a, b in zip(sp, sp[1:]))
    return {
        "final": abs(sp[-1] - schedule.s_target) <= tol,
        "monotone": monotone,
        "no_overshoot": max(sp) <= schedule.s_target + tol,
        "churn": churn_ok,
        "counts": counts_ok,
    }


def adam_first_step(w: float, g: float, lr: float = 1e-3, eps: float = 1e-8) -> float:
    """First Adam update by hand: bias correction makes m_hat = g and v_hat = g^2."""
    return w - lr * g / (abs(g) + eps)


def adam_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    arch = TOY_ARCH
    w = rng.standard_normal(num_params(arch))
    g = rng.standard_normal(w.size)
    p = ParamSet(arch, w.copy())
    adam_step(p, g, OptimizerState.fresh(w.size, 1e-3))
    want = np.array([adam_first_step(a, b) for a, b in zip(w, g)])
    return float(np.max(np.abs(p.values - want)))


def dense_volume_mb(n_params: int, rounds: int, clients: int) -> float:
    return rounds * clients * 2 * n_params * 4 / 1024 ** 2


def run_all(seed: int = 0, quick: bool = False) -> list[tuple[str, bool, str]]:
    """Every oracle as (name, passed, detail)."""
    out = []
    n_grad = 3 if quick else 20
    worst = max(max(gradient_check(seed + i).values()) for i in range(n_grad))
    out.append(("gradient-fd", worst < 1e-4, f"max rel err {worst:.2e} over {n_grad} instances"))

    rng = np.random.default_rng(seed)
    n_link = 30 if quick else 200
    bad = 0
    for _ in range(n_link):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        d = random_distance_matrix(rng, n)
        bad += agglomerative_cluster(d, k).partition() != brute_average_linkage(d, k)
    out.append(("average-linkage", bad == 0, f"{bad} mismatches over {n_link} matrices"))

    worst = max(max(score_check(seed + i).values()) for i in range(5))
    out.append(("scores", worst <= 1e-12, f"max abs diff {worst:.1e}"))

    fails = 0
    total = 0
    for s_start in (0.0, 0.3, 0.7):
        for rho in (0.0, 0.05):
            sched = PruneSchedule(s_start, 0.7, 5, rho, 50)
            total += 1
            fails += not all(schedule_check(100, sched, seed).values())
    out.append(("schedule", fails == 0, f"{fails} failing of {total} schedules"))

    c = step_counts(100, 70, PruneSchedule(0.3, 0.7, 5, 0.05, 35), 15)
    ok = (c.n_prune, c.n_grow, 100 - 70 + c.n_prune - c.n_grow) == (13, 3, 40)
    out.append(("prune-arithmetic", ok, f"N_prune={c.n_prune} N_grow={c.n_grow}"))

    err = adam_check(seed)
    out.append(("adam-step", err < 1e-15, f"max abs diff {err:.1e}"))
    return out
