"""Acceptance suite: one PASS/FAIL line per criterion at its stated tolerance."""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from caafp.clustering import agglomerative_cluster, cosine_distance_matrix, rand_index
from caafp.config import ExperimentConfig
from caafp.federation import Experiment, load_clients, run_experiment
from caafp.nn import ArchitectureSpec, num_params, num_prunable
from caafp.oracles import brute_average_linkage, gradient_check, random_distance_matrix, schedule_check, score_check
from caafp.pruning import Mask, PruneSchedule, prune_heal_step, step_counts


def test_criterion_1_gradients(record_criterion):
    t0 = time.time()
    worst = {}
    for seed in range(20):
        for layer, err in gradient_check(seed).items():
            worst[layer] = max(worst.get(layer, 0.0), err)
    elapsed = time.time() - t0
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 60
    record_criterion(1, ok, f"max rel err {top:.2e} over 20 instances, {len(worst)} parameter blocks, "
                            f"proximal term on, {elapsed:.1f}s (need < 1e-4, < 60s)")
    assert ok, worst


def _schedule_grid(n=50, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        target = float(rng.choice([0.5, 0.7, 0.9]))
        start = float(rng.choice([s for s in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9) if s <= target]))
        f = int(rng.choice([1, 2, 5, 10]))
        rho = float(rng.choice([0.0, 0.05, 0.1, 0.2]))
        out.append(PruneSchedule(start, target, f, rho, f * int(rng.integers(1, 11))))
    return out


def test_criterion_2_schedule(record_criterion):
    t0 = time.time()
    n_total = num_prunable(ArchitectureSpec.wisdm())
    failures = []
    for i, sched in enumerate(_schedule_grid()):
        res = schedule_check(n_total, sched, seed=i)
        if not all(res.values()):
            failures.append((sched, res))
    elapsed = time.time() - t0
    ok = not failures and elapsed < 60
    record_criterion(2, ok, f"{50 - len(failures)}/50 schedules land on target within 1/N "
                            f"(N={n_total}), monotone, churn conserved, "
                            f"counts match exact rational arithmetic; {elapsed:.1f}s")
    assert ok, failures[:3]


def test_criterion_3_clustering(record_criterion):
    t0 = time.time()
    rng = np.random.default_rng(3)
    mismatch = scale_bad = perm_bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        d = random_distance_matrix(rng, n)
        got = agglomerative_cluster(d, k).partition()
        mismatch += got != brute_average_linkage(d, k)
        perm = rng.permutation(n)
        perm_bad += agglomerative_cluster(d[np.ix_(perm, perm)], k, client_ids=list(perm)).partition() != got
        vecs = rng.standard_normal((n, 6))
        scaled = vecs * rng.uniform(0.01, 100, (n, 1))
        a = agglomerative_cluster(cosine_distance_matrix(list(vecs)), k).partition()
        scale_bad += agglomerative_cluster(cosine_distance_matrix(list(scaled)), k).partition() != a
    elapsed = time.time() - t0
    ok = mismatch == scale_bad == perm_bad == 0 and elapsed < 60
    record_criterion(3, ok, f"200 matrices n<=8: {mismatch} brute-force mismatches, {scale_bad} scale and "
                            f"{perm_bad} permutation violations; {elapsed:.1f}s")
    assert ok


def test_criterion_4_worked_example(record_criterion):
    sched = PruneSchedule(0.3, 0.7, 5, 0.05, 35)
    c = step_counts(100, 70, sched, 15)
    mask = Mask.full(100)
    mask.bits[:30] = False
    rng = np.random.default_rng(4)
    new = prune_heal_step(mask, rng.random(100), rng.random(100), sched, 15)
    got = (c.n_prune, c.n_grow, round(new.sparsity, 12))
    ok = got == (13, 3, 0.4)
    record_criterion(4, ok, f"N_prune={c.n_prune} N_grow={c.n_grow} next S={new.sparsity} "
                            f"(need 13, 3, 0.40)")
    assert ok


def test_criterion_5_scores(record_criterion):
    worst = {}
    for seed in range(20):
        for name, err in score_check(seed, clients=int(2 + seed % 5)).items():
            worst[name] = max(worst.get(name, 0.0), err)
    ok = max(worst.values()) <= 1e-12
    record_criterion(5, ok, "max |vectorised - scalar loop|: " +
                     ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (need <= 1e-12)")
    assert ok


def _comm_config(dataset):
    arch = ArchitectureSpec.wisdm() if dataset == "wisdm" else ArchitectureSpec.ucihar()
    # synthetic clients shaped like the real windows; traffic depends only on shapes and participation
    per_cluster = 12 if dataset == "wisdm" else 10
    return ExperimentConfig(method="fedavg", p1=0, p2=0, p3=50, p4=0, local_epochs=1, clients_per_round=10,
                            eval_every=50, synth_window=arch.input_len, synth_channels=arch.channels,
                            synth_clients=per_cluster, synth_samples=30, s_target=0.7)


@pytest.mark.slow
def test_criterion_6_communication(record_criterion):
    lines = []
    ok = True
    for dataset, ref in (("wisdm", 483.0), ("ucihar", 347.0)):
        cfg = _comm_config(dataset)
        clients = load_clients(cfg)
        dense = run_experiment(cfg, clients)
        sparse = run_experiment(cfg.replace(method="oneshot-prune"), clients)
        rel = (dense.comm_mb - ref) / ref
        ratio = sparse.comm_mb / dense.comm_mb
        ok &= abs(rel) <= 0.10 and ratio <= 0.40
        lines.append(f"{dataset} {len(clients)} clients |W|={num_params(cfg.architecture())}: dense "
                     f"{dense.comm_mb:.1f} MB vs {ref:.0f} ({rel:+.1%}), 70% sparse {ratio:.3f}x dense")
    record_criterion(6, ok, "; ".join(lines) + " (need within 10%, <= 0.40x)")
    assert ok


@pytest.mark.slow
def test_criterion_7_synthetic_end_to_end(record_criterion):
    t0 = time.time()
    base = ExperimentConfig(p1=0, p2=0, p3=50, p4=5, local_epochs=1, clusters=3, s_start=0.7, s_target=0.7,
                            synth_clusters=3, synth_clients=4, synth_noise=0.1, eval_every=10)
    clients = load_clients(base)
    ca = run_experiment(base, clients)
    dense = run_experiment(base.replace(method="dense-clustered"), clients)
    truth = [c.cluster for c in clients]
    ri = rand_index([ca.assignment.labels[c.client_id] for c in clients], truth)

    extreme = base.replace(scenario="non-iid-k", scenario_k=1, p4=0)
    ex_clients = load_clients(extreme)
    ca1 = run_experiment(extreme, ex_clients)
    one = run_experiment(extreme.replace(method="oneshot-prune"), ex_clients)
    elapsed = time.time() - t0

    a = ri >= 0.9
    b = abs(ca.mu - dense.mu) <= 0.03
    c = ca1.mu - one.mu >= 0.10
    ok = a and b and c and elapsed < 600
    record_criterion(7, ok, f"(a) Rand index {ri:.3f} (>= 0.9); (b) CA-AFP mu {ca.mu:.4f} at S="
                            f"{ca.final.mean_sparsity:.3f} vs dense-clustered {dense.mu:.4f} (within 0.03); "
                            f"(c) 1-class: CA-AFP {ca1.mu:.4f} vs oneshot-prune {one.mu:.4f} (>= +0.10); "
                            f"{elapsed:.0f}s")
    assert ok


UCIHAR = os.environ.get("CAAFP_UCIHAR_PATH", "")


@pytest.mark.slow
def test_criterion_8_real_data(record_criterion):
    if not UCIHAR or not os.path.isdir(UCIHAR):
        record_criterion(8, True, "optional; set CAAFP_UCIHAR_PATH to a UCI-HAR directory to run it",
                         status="SKIP")
        pytest.skip("UCI-HAR not available")
    cfg = ExperimentConfig(dataset="ucihar", data_path=UCIHAR, p1=0, p2=0, p3=50, p4=0, s_start=0.7,
                           s_target=0.7)
    exp = Experiment(cfg, load_clients(cfg))
    while exp.stage != "finetune":
        exp.step()
    mus = []
    for epochs in (0, 5, 10, 15, 20, 25):
        exp.cfg = cfg.replace(p4=epochs)
        exp._stage_finetune()
        mus.append(exp.final.mu)
    ok = mus[-1] >= 0.93 and all(b > a for a, b in zip(mus, mus[1:]))
    record_criterion(8, ok, "mu by fine-tune epochs 0..25: " + ", ".join(f"{m:.4f}" for m in mus) +
                     " (need final >= 0.93, strictly increasing)")
    assert ok


def test_criterion_9_determinism(record_criterion, tmp_path):
    args = ["run", "--synth-clusters", "2", "--synth-clients", "3", "--synth-samples", "30", "--synth-window",
            "16", "--synth-channels", "2", "--clusters", "2", "--p1", "1", "--p2", "1", "--p3", "4",
            "--prune-freq", "2", "--p4", "2", "--local-epochs", "1", "--seed", "7"]
    outputs = {}
    for method in ("caafp", "dense-clustered", "oneshot-prune", "fedavg"):
        runs = []
        for _ in range(2):
            # separate interpreters, so nothing can leak through process state
            proc = subprocess.run([sys.executable, "-m", "caafp", *args, "--method", method],
                                  capture_output=True, check=True)
            runs.append(proc.stdout)
        outputs[method] = runs
    same = {m: r[0] == r[1] and len(r[0]) > 0 for m, r in outputs.items()}
    ok = all(same.values())
    record_criterion(9, ok, "byte-identical CSV across two processes: " +
                     ", ".join(f"{m} {'yes' if v else 'NO'}" for m, v in same.items()))
    assert ok
