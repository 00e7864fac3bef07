import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caafp.metrics import (DOWN, UP, ResultRow, RoundMetrics, Transmission, aggregate_rows, best_by_score,
                           comm_cost, dense_round_cost, fairness, format_round_csv, format_rows, parse_rows,
                           round_rows, score_ratio, summarize)
from caafp.nn import ArchitectureSpec, num_params


def test_fairness_examples():
    assert fairness([0.7, 0.7, 0.7]) == 0
    assert fairness([1.0, 0.0]) == 0.5
    assert fairness([0.9, 0.8, 1.0]) == pytest.approx(0.0816496580927726)
    with pytest.raises(ValueError):
        fairness([])


@pytest.mark.parametrize("mu,sigma,reported", [(0.9119, 0.0981, 9.2963), (0.6654, 0.3270, 2.0350)])
def test_score_ratio_reported(mu, sigma, reported):
    # reported scores were computed before mu and sigma were rounded to 4 places
    h = 5e-5
    assert (mu - h) / (sigma + h) <= reported <= (mu + h) / (sigma - h)
    assert score_ratio(mu, sigma) == pytest.approx(reported, rel=1e-3)


def test_score_ratio_edges():
    assert score_ratio(0.4, 0.4) == 1
    assert score_ratio(0.9, 0.0) == math.inf


def test_comm_cost_examples():
    n = 1_048_576
    dense = [Transmission(1, 0, UP, n), Transmission(1, 0, DOWN, n)]
    assert comm_cost(dense) == 8.0
    sparse = [Transmission(1, 0, UP, n // 4), Transmission(1, 0, DOWN, n // 4)]
    assert comm_cost(sparse) == 2.0
    assert dense_round_cost(n, [0.75]) == 2.0


def test_mask_bits_opt_in():
    tx = [Transmission(1, 0, UP, 0, mask_bits=8 * 1024 * 1024)]
    assert comm_cost(tx) == 0
    assert comm_cost(tx, include_mask=True) == 1.0


@settings(max_examples=50)
@given(st.lists(st.floats(0, 0.95), min_size=1, max_size=12), st.integers(1, 10 ** 6))
def test_logged_matches_closed_form(sparsities, n_params):
    # one up and one down per client at its sparsity; counts are whole numbers of entries
    counts = [round(n_params * (1 - s)) for s in sparsities]
    tx = [Transmission(1, k, d, c) for k, c in enumerate(counts) for d in (UP, DOWN)]
    exact = [1 - c / n_params for c in counts]
    assert comm_cost(tx) == pytest.approx(dense_round_cost(n_params, exact), rel=1e-12)


def test_dense_volume_standard_architectures():
    for arch, ref in ((ArchitectureSpec.wisdm(), 483), (ArchitectureSpec.ucihar(), 347)):
        mb = 50 * dense_round_cost(num_params(arch), [0.0] * 10)
        assert abs(mb - ref) / ref <= 0.10


def test_summarize_empty():
    mu, sigma = summarize({})
    assert math.isnan(mu) and math.isnan(sigma)
    assert summarize({1: 1.0, 0: 0.0}) == (0.5, 0.5)


def test_round_metrics_roundtrip():
    m = RoundMetrics(3, "prune", {0: 0.5, 2: 1.0}, 0.75, 0.25, 1.5, 4.5, {0: 0.7, 1: 0.6})
    assert RoundMetrics.from_dict(m.to_dict()) == m
    assert m.mean_sparsity == pytest.approx(0.65)


def test_round_csv_schema():
    hist = [RoundMetrics(1, "global", {0: 1.0}, 1.0, 0.0, 2.0, 2.0, {0: 0.0})]
    text = format_round_csv(round_rows(hist, hist[0], "caafp", "synth", "standard", 4))
    lines = text.splitlines()
    assert lines[0] == "method,dataset,scenario,seed,round,mu,sigma,sparsity,comm_mb"
    assert lines[1] == "caafp,synth,standard,4,1,1.0,0.0,0.0,2.0"
    assert lines[2].split(",")[4] == "final"


rows_strategy = st.builds(
    ResultRow,
    method=st.sampled_from(["caafp", "fedavg"]), dataset=st.sampled_from(["synth", "wisdm"]),
    scenario=st.sampled_from(["standard", "drift"]), sparsity=st.floats(0, 1), ft_epochs=st.integers(0, 25),
    mu=st.floats(0, 1), sigma=st.floats(0, 0.5), comm_mb=st.floats(0, 1e4), seed=st.integers(0, 99),
    config_hash=st.text("0123456789abcdef", min_size=12, max_size=12),
    alpha=st.floats(0, 1), beta=st.floats(0, 1), gamma=st.floats(0, 1),
    p1=st.integers(0, 20), p2=st.integers(0, 20), p3=st.integers(1, 50), s_start=st.floats(0, 0.9),
)


@settings(max_examples=50)
@given(st.lists(rows_strategy, max_size=6))
def test_rows_roundtrip(rows):
    assert parse_rows(format_rows(rows)) == rows


def _row(mu, sigma, seed, **kw):
    base = dict(method="caafp", dataset="wisdm", scenario="standard", sparsity=0.7, ft_epochs=3, mu=mu,
                sigma=sigma, comm_mb=10.0, seed=seed, config_hash="abc")
    return ResultRow(**{**base, **kw})


def test_report_mean_over_seeds():
    rows = [_row(m, 0.1, s) for s, m in enumerate([0.94, 0.95, 0.96, 0.95, 0.95])]
    (line,) = aggregate_rows(rows)
    assert line.n == 5
    assert line.mu_mean == pytest.approx(0.95)
    assert line.mu_std == pytest.approx(np.std([0.94, 0.95, 0.96, 0.95, 0.95]))


def test_best_by_score():
    rows = [_row(0.9, 0.1, 0, config_hash="a", alpha=1.0), _row(0.8, 0.05, 0, config_hash="b", gamma=1.0),
            _row(0.5, 0.01, 0, config_hash="c", scenario="drift")]
    best = best_by_score(aggregate_rows(rows))
    assert best[("wisdm", "standard")].config_hash == "b"
    assert best[("wisdm", "drift")].config_hash == "c"
