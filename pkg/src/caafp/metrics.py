"""Accuracy/fairness summaries, communication accounting and result rows."""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

BYTES_PER_PARAM = 4
MEGABYTE = 1024 ** 2

UP = "up"
DOWN = "down"


def fairness(accuracies) -> float:
    """Population standard deviation of per-client accuracies."""
    values = [float(a) for a in accuracies]
    if not values:
        raise ValueError("fairness needs at least one accuracy")
    # pstdev is correctly rounded, so identical accuracies give exactly 0
    return statistics.pstdev(values)


def mean_accuracy(accuracies) -> float:
    return float(np.mean(list(accuracies)))


def score_ratio(mu: float, sigma: float) -> float:
    """Accuracy-to-fairness ratio used to rank score-weight settings."""
    if sigma == 0:
        return math.inf
    return mu / sigma


class Transmission(NamedTuple):
    round: int
    client: int
    direction: str
    count: int
    mask_bits: int = 0


def comm_cost(transmissions, include_mask: bool = False) -> float:
    """Total megabytes for a list of transmissions at 4 bytes per entry.

    With ``include_mask`` each transmission also pays for its 1-bit-per-position
    mask bitmap.
    """
    total = 0.0
    for tx in transmissions:
        nbytes = tx.count * BYTES_PER_PARAM
        if include_mask:
            nbytes += math.ceil(tx.mask_bits / 8)
        total += nbytes
    return total / MEGABYTE


def dense_round_cost(n_params: int, sparsities) -> float:
    """Closed-form round cost: sum over clients of 2 * |W| * (1 - S) * 4 bytes, in MB."""
    return sum(2 * n_params * (1.0 - s) * BYTES_PER_PARAM for s in sparsities) / MEGABYTE


@dataclass
class RoundMetrics:
    round: int
    phase: str
    accuracies: dict[int, float]
    mu: float
    sigma: float
    round_mb: float
    comm_mb: float
    sparsity: dict[int, float] = field(default_factory=dict)

    @property
    def mean_sparsity(self) -> float:
        return float(np.mean(list(self.sparsity.values()))) if self.sparsity else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracies"] = {str(k): v for k, v in self.accuracies.items()}
        d["sparsity"] = {str(k): v for k, v in self.sparsity.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundMetrics":
        d = dict(d)
        d["accuracies"] = {int(k): v for k, v in d["accuracies"].items()}
        d["sparsity"] = {int(k): v for k, v in d["sparsity"].items()}
        return cls(**d)


def summarize(accuracies: dict[int, float]) -> tuple[float, float]:
    if not accuracies:
        return math.nan, math.nan
    vals = [accuracies[k] for k in sorted(accuracies)]
    return mean_accuracy(vals), fairness(vals)


def fmt(x) -> str:
    """Lossless text form of a CSV cell."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


ROUND_COLUMNS = ("method", "dataset", "scenario", "seed", "round", "mu", "sigma", "sparsity", "comm_mb")


def round_rows(history: list[RoundMetrics], final: RoundMetrics | None, method: str, dataset: str,
               scenario: str, seed: int) -> list[list[str]]:
    rows = []
    for m in history:
        rows.append([method, dataset, scenario, str(seed), str(m.round), fmt(m.mu), fmt(m.sigma),
                     fmt(m.mean_sparsity), fmt(m.comm_mb)])
    if final is not None:
        rows.append([method, dataset, scenario, str(seed), "final", fmt(final.mu), fmt(final.sigma),
                     fmt(final.mean_sparsity), fmt(final.comm_mb)])
    return rows


def format_round_csv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def write_round_csv(path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_round_csv(rows))


@dataclass(frozen=True)
class ResultRow:
    method: str
    dataset: str
    scenario: str
    sparsity: float
    ft_epochs: int
    mu: float
    sigma: float
    comm_mb: float
    seed: int
    config_hash: str = ""
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    p1: int = 0
    p2: int = 0
    p3: int = 0
    s_start: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_cells(self) -> list[str]:
        return [fmt(getattr(self, name)) for name in self.columns()]

    @classmethod
    def from_cells(cls, cells: dict[str, str]) -> "ResultRow":
        kw = {}
        for f in fields(cls):
            raw = cells[f.name]
            if f.type in ("float", float):
                kw[f.name] = float(raw)
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def format_rows(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ResultRow.columns())
    for r in rows:
        w.writerow(r.to_cells())
    return buf.getvalue()


def parse_rows(text: str) -> list[ResultRow]:
    return [ResultRow.from_cells(d) for d in csv.DictReader(io.StringIO(text))]


@dataclass
class ReportLine:
    method: str
    dataset: str
    scenario: str
    config_hash: str
    n: int
    mu_mean: float
    mu_std: float
    sigma_mean: float
    sigma_std: float
    comm_mean: float
    alpha: float
    beta: float
    gamma: float
    score: float


def aggregate_rows(rows: list[ResultRow]) -> list[ReportLine]:
    """Group rows that differ only in seed; mean and population std per group."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.dataset, r.scenario, r.config_hash), []).append(r)
    out = []
    for key in sorted(groups):
        g = groups[key]
        mu = np.array([r.mu for r in g])
        sg = np.array([r.sigma for r in g])
        out.append(ReportLine(*key, len(g), float(mu.mean()), float(mu.std()), float(sg.mean()),
                              float(sg.std()), float(np.mean([r.comm_mb for r in g])),
                              g[0].alpha, g[0].beta, g[0].gamma,
                              score_ratio(float(mu.mean()), float(sg.mean()))))
    return out


def best_by_score(lines: list[ReportLine]) -> dict[tuple[str, str], ReportLine]:
    """Highest accuracy/fairness ratio per (dataset, scenario)."""
    best: dict[tuple[str, str], ReportLine] = {}
    for line in lines:
        key = (line.dataset, line.scenario)
        if key not in best or line.score > best[key].score:
            best[key] = line
    return best
