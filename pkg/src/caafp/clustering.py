"""Update-direction client clustering with average-linkage agglomeration."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset
from .errors import ConfigError
from .nn import OptimizerState, ParamSet, train_local


@dataclass
class UpdateDelta:
    client_id: int
    vector: np.ndarray


@dataclass
class ClusterAssignment:
    """Partition of clients; cluster ids are ordered by each cluster's smallest client id."""

    labels: dict[int, int]
    k: int = field(init=False)

    def __post_init__(self):
        ids = sorted(set(self.labels.values()))
        if ids != list(range(len(ids))):
            raise ConfigError(f"cluster ids must be 0..K-1, got {ids}")
        self.k = len(ids)

    @property
    def members(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.k)]
        for cid in sorted(self.labels):
            out[self.labels[cid]].append(cid)
        return out

    def partition(self) -> frozenset[frozenset[int]]:
        return frozenset(frozenset(m) for m in self.members)

    @classmethod
    def from_groups(cls, groups, client_ids=None) -> "ClusterAssignment":
        groups = sorted((sorted(g) for g in groups if len(g)), key=lambda g: g[0])
        labels = {}
        for c, g in enumerate(groups):
            for pos in g:
                labels[client_ids[pos] if client_ids is not None else pos] = c
        return cls(labels)


def compute_delta(ref: ParamSet, client: ClientDataset, batch_size: int = 32, lr: float = 1e-3,
                  seed: int = 0) -> UpdateDelta:
    """Parameter change after one local epoch from ``ref`` (fresh Adam, no dropout)."""
    state = OptimizerState.fresh(ref.size, lr)
    rng = np.random.default_rng([seed, client.client_id, 11])
    res = train_local(ref, client.x_train, client.y_train, 1, batch_size, state, rng, dropout=False)
    return UpdateDelta(client.client_id, res.params.values - ref.values)


def cosine_distance_matrix(deltas) -> np.ndarray:
    """Pairwise 1 - cosine similarity; zero-norm updates sit at distance 1 from all others."""
    vecs = [d.vector if isinstance(d, UpdateDelta) else np.asarray(d, dtype=np.float64) for d in deltas]
    if len(vecs) < 2:
        raise ConfigError("need at least two updates to compare")
    v = np.stack(vecs)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = v / safe[:, None]
    dist = 1.0 - unit @ unit.T
    zero = norms == 0
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    dist = np.clip((dist + dist.T) / 2, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    return dist


def agglomerative_cluster(dist: np.ndarray, k: int, client_ids=None) -> ClusterAssignment:
    """Average-linkage agglomeration down to ``k`` clusters.

    Clusters are kept in a list ordered by creation slot: a merge of slots
    (i, j), i < j, stores the union in slot i and deletes slot j. The pair with
    the smallest mean pairwise distance is merged; ties go to the
    lexicographically smallest (i, j).
    """
    d = np.asarray(dist, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ConfigError("distance matrix must be square")
    if not 1 <= k <= n:
        raise ConfigError(f"cannot form {k} clusters from {n} clients")
    groups = [[i] for i in range(n)]
    link = d.copy()
    sizes = np.ones(n)
    alive = list(range(n))
    while len(alive) > k:
        sub = link[np.ix_(alive, alive)]
        iu = np.triu_indices(len(alive), 1)
        vals = sub[iu]
        best = np.flatnonzero(vals == vals.min())[0]
        a, b = alive[iu[0][best]], alive[iu[1][best]]
        # Lance-Williams update for average linkage
        merged = (sizes[a] * link[a] + sizes[b] * link[b]) / (sizes[a] + sizes[b])
        link[a, :] = merged
        link[:, a] = merged
        link[a, a] = 0.0
        sizes[a] += sizes[b]
        groups[a] = groups[a] + groups[b]
        alive.remove(b)
    return ClusterAssignment.from_groups([groups[i] for i in alive], client_ids)


def cluster_clients(deltas: list[UpdateDelta], k: int) -> tuple[ClusterAssignment, np.ndarray]:
    dist = cosine_distance_matrix(deltas)
    return agglomerative_cluster(dist, k, [d.client_id for d in deltas]), dist


def rand_index(a, b) -> float:
    """Rand index between two labelings of the same items."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, 1)
    same_a = (a[:, None] == a[None, :])[iu]
    same_b = (b[:, None] == b[None, :])[iu]
    return float(np.mean(same_a == same_b))


def write_clustering_csv(path, dist: np.ndarray, assignment: ClusterAssignment, client_ids) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "cluster", *[f"d_{c}" for c in client_ids]])
        for i, cid in enumerate(client_ids):
            w.writerow([cid, assignment.labels[cid], *[repr(float(v)) for v in dist[i]]])
