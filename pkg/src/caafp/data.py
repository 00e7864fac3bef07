"""Client datasets: WISDM / UCI-HAR ingestion, synthetic populations, scenarios."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

WISDM_ACTIVITIES = ("Walking", "Jogging", "Upstairs", "Downstairs", "Sitting", "Standing")
WISDM_WINDOW = 200
WISDM_STRIDE = 100

UCIHAR_SIGNALS = (
    "body_acc_x", "body_acc_y", "body_acc_z",
    "body_gyro_x", "body_gyro_y", "body_gyro_z",
    "total_acc_x", "total_acc_y", "total_acc_z",
)

POPULATION_FORMAT = "caafp-population"
POPULATION_VERSION = 1


@dataclass
class ClientDataset:
    client_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    cluster: int | None = None

    @property
    def num_train(self) -> int:
        return len(self.y_train)

    @property
    def num_test(self) -> int:
        return len(self.y_test)

    def labels(self) -> np.ndarray:
        return np.unique(np.concatenate([self.y_train, self.y_test]))

    def validate(self, num_classes: int) -> None:
        for y in (self.y_train, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= num_classes):
                raise DataError(f"client {self.client_id}: labels outside [0, {num_classes})")
        if self.num_train == 0:
            raise DataError(f"client {self.client_id}: empty training split")


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def window_count(n_rows: int, window: int = WISDM_WINDOW, stride: int = WISDM_STRIDE) -> int:
    if n_rows < window:
        return 0
    return (n_rows - window) // stride + 1


def sliding_windows(rows: np.ndarray, window: int = WISDM_WINDOW, stride: int = WISDM_STRIDE) -> np.ndarray:
    n = window_count(len(rows), window, stride)
    if n == 0:
        return np.zeros((0, window, rows.shape[1]))
    return np.stack([rows[i * stride:i * stride + window] for i in range(n)])


def parse_wisdm(path) -> tuple[list[tuple[int, int, float, float, float]], int]:
    """Parse ``user,activity,timestamp,x,y,z;`` records; returns (records, malformed count)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"WISDM file not found: {path}")
    codes = {name: i for i, name in enumerate(WISDM_ACTIVITIES)}
    records = []
    malformed = 0
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            for piece in line.split(";"):
                piece = piece.strip().strip(",").strip()
                if not piece:
                    continue
                fields = [f.strip() for f in piece.split(",")]
                if len(fields) != 6 or fields[1] not in codes:
                    malformed += 1
                    continue
                try:
                    rec = (int(fields[0]), codes[fields[1]], float(fields[3]), float(fields[4]), float(fields[5]))
                except ValueError:
                    malformed += 1
                    continue
                if not all(math.isfinite(v) for v in rec[2:]):
                    malformed += 1
                    continue
                records.append(rec)
    return records, malformed


def wisdm_windows(records) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-user windows; runs of one activity are windowed separately."""
    streams: dict[int, list] = {}
    for user, act, x, y, z in records:
        streams.setdefault(user, []).append((act, x, y, z))
    out = {}
    for user in sorted(streams):
        rows = np.asarray(streams[user], dtype=np.float64)
        acts = rows[:, 0].astype(np.int64)
        breaks = np.flatnonzero(np.diff(acts)) + 1
        xs, ys = [], []
        for run in np.split(np.arange(len(acts)), breaks):
            w = sliding_windows(rows[run, 1:])
            if len(w):
                xs.append(w)
                ys.append(np.full(len(w), acts[run[0]]))
        if xs:
            out[user] = (np.concatenate(xs), np.concatenate(ys))
        else:
            out[user] = (np.zeros((0, WISDM_WINDOW, 3)), np.zeros(0, dtype=np.int64))
    return out


def standardize(ds: ClientDataset) -> ClientDataset:
    """Per-channel z-score using the client's training statistics."""
    mean = ds.x_train.mean(axis=(0, 1))
    std = ds.x_train.std(axis=(0, 1))
    std = np.where(std > 0, std, 1.0)
    return replace(ds, x_train=(ds.x_train - mean) / std, x_test=(ds.x_test - mean) / std)


def load_wisdm(path, test_fraction: float = 0.2, seed: int = 0, normalize: bool = True) -> list[ClientDataset]:
    records, malformed = parse_wisdm(path)
    if malformed:
        log.warning("WISDM: skipped %d malformed records", malformed)
    clients = []
    for user, (x, y) in wisdm_windows(records).items():
        if len(y) == 0:
            warnings.warn(f"WISDM user {user} has no complete window; dropped")
            continue
        ds = split_client(ClientDataset(user, x, y, x[:0], y[:0]), test_fraction, seed)
        clients.append(standardize(ds) if normalize else ds)
    return clients


def _read_matrix(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing UCI-HAR file: {path}")
    return np.loadtxt(path, ndmin=2)


def load_ucihar_arrays(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled train+test arrays: x (N,128,9), labels 0..5, subject ids."""
    root = Path(path)
    xs, ys, subjects = [], [], []
    for split in ("train", "test"):
        base = root / split
        channels = [_read_matrix(base / "Inertial Signals" / f"{name}_{split}.txt") for name in UCIHAR_SIGNALS]
        y = _read_matrix(base / f"y_{split}.txt").ravel().astype(np.int64) - 1
        subj = _read_matrix(base / f"subject_{split}.txt").ravel().astype(np.int64)
        rows = {c.shape for c in channels}
        if len(rows) != 1:
            raise DataError(f"UCI-HAR {split}: inertial channel files disagree in shape: {sorted(rows)}")
        if not (len(y) == len(subj) == channels[0].shape[0]):
            raise DataError(f"UCI-HAR {split}: {channels[0].shape[0]} signal rows, {len(y)} labels, {len(subj)} subjects")
        xs.append(np.stack(channels, axis=-1))
        ys.append(y)
        subjects.append(subj)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(subjects)


def load_ucihar(path, test_fraction: float = 0.2, seed: int = 0) -> list[ClientDataset]:
    x, y, subjects = load_ucihar_arrays(path)
    clients = []
    for s in np.unique(subjects):
        sel = subjects == s
        ds = ClientDataset(int(s), x[sel], y[sel], x[:0], y[:0])
        clients.append(split_client(ds, test_fraction, seed))
    return clients


def split_client(ds: ClientDataset, test_fraction: float = 0.2, seed: int = 0) -> ClientDataset:
    """Stratified train/test re-split of all of a client's samples.

    Each class sends round(n_c * test_fraction) samples to test, never all of
    them; singleton classes stay in train.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    x = np.concatenate([ds.x_train, ds.x_test])
    y = np.concatenate([ds.y_train, ds.y_test])
    rng = np.random.default_rng([seed, ds.client_id])
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = min(_half_up(len(idx) * test_fraction), len(idx) - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, dtype=np.int64)
    te = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, dtype=np.int64)
    return replace(ds, x_train=x[tr], y_train=y[tr], x_test=x[te], y_test=y[te])


SCENARIOS = ("standard", "noisy-clients", "drift", "non-iid-k")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "standard"
    noisy_fraction: float = 0.4
    corruption_rate: float | None = None
    k: int = 1
    seed: int = 0
    num_classes: int = 6

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if not 0.0 <= self.noisy_fraction <= 1.0:
            raise ConfigError("noisy_fraction must lie in [0, 1]")
        if self.corruption_rate is not None and not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError("corruption_rate must lie in [0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    @property
    def rate(self) -> float:
        if self.corruption_rate is not None:
            return self.corruption_rate
        return 1.0 if self.kind == "drift" else 0.3


def corrupted_clients(n_clients: int, spec: ScenarioSpec) -> np.ndarray:
    """Positions (into the client list) picked for label corruption."""
    n = int(math.floor(spec.noisy_fraction * n_clients + 1e-9))
    rng = np.random.default_rng([spec.seed, 7919])
    return np.sort(rng.choice(n_clients, size=n, replace=False))


def apply_scenario(clients: list[ClientDataset], spec: ScenarioSpec) -> list[ClientDataset]:
    """Return a new client list with the scenario applied.

    Label corruption touches training labels only; features are never changed.
    """
    if spec.kind == "standard":
        return list(clients)
    out = list(clients)
    if spec.kind in ("noisy-clients", "drift"):
        for pos in corrupted_clients(len(clients), spec):
            ds = clients[pos]
            rng = np.random.default_rng([spec.seed, ds.client_id, 1])
            y = ds.y_train.copy()
            n = int(math.floor(spec.rate * len(y) + 1e-9))
            idx = rng.choice(len(y), size=n, replace=False)
            y[idx] = rng.integers(0, spec.num_classes, size=n)
            out[pos] = replace(ds, y_train=y)
        return out
    for pos, ds in enumerate(clients):
        rng = np.random.default_rng([spec.seed, ds.client_id, 2])
        have = np.unique(ds.y_train)
        both = np.intersect1d(have, np.unique(ds.y_test))
        pool = both if len(both) >= min(spec.k, len(have)) else have
        keep = np.sort(rng.choice(pool, size=min(spec.k, len(pool)), replace=False))
        tr = np.isin(ds.y_train, keep)
        te = np.isin(ds.y_test, keep)
        out[pos] = replace(ds, x_train=ds.x_train[tr], y_train=ds.y_train[tr],
                           x_test=ds.x_test[te], y_test=ds.y_test[te])
    return out


def synth_population(num_clusters: int, clients_per_cluster: int, samples: int, window: int,
                     channels: int, classes: int, seed: int, noise: float = 0.1,
                     test_fraction: float = 0.2) -> list[ClientDataset]:
    """Clients drawn from latent clusters with cluster-specific class templates.

    All clusters share one bank of sinusoidal templates but map classes onto it
    through different permutations, so the same signal shape means different
    labels in different clusters.
    """
    if min(num_clusters, clients_per_cluster, samples, window, channels, classes) < 1:
        raise ConfigError("all synth_population counts must be positive")
    rng = np.random.default_rng([seed, 104729])
    t = np.arange(window) / window
    freq = rng.uniform(0.5, 4.0, size=(classes, channels))
    phase = rng.uniform(0, 2 * np.pi, size=(classes, channels))
    offset = rng.uniform(-1.0, 1.0, size=(classes, channels))
    templates = np.sin(2 * np.pi * freq[:, None, :] * t[None, :, None] + phase[:, None, :]) + offset[:, None, :]

    perms = [np.arange(classes)]
    while len(perms) < num_clusters:
        p = rng.permutation(classes)
        if classes == 1 or not any(np.array_equal(p, q) for q in perms) or len(perms) >= math.factorial(classes):
            perms.append(p)

    clients = []
    for c in range(num_clusters):
        for j in range(clients_per_cluster):
            cid = c * clients_per_cluster + j
            crng = np.random.default_rng([seed, cid, 3])
            y = crng.permutation(np.arange(samples) % classes)
            x = templates[perms[c][y]] + noise * crng.standard_normal((samples, window, channels))
            ds = ClientDataset(cid, x, y, x[:0], y[:0], cluster=c)
            clients.append(split_client(ds, test_fraction, seed))
    return clients


def dump_population(clients: list[ClientDataset], path) -> None:
    """Save clients to one ``.npz`` file (format tag + version + per-client arrays)."""
    arrays = {
        "format": np.array(POPULATION_FORMAT),
        "version": np.array(POPULATION_VERSION),
        "client_ids": np.array([c.client_id for c in clients], dtype=np.int64),
        "clusters": np.array([-1 if c.cluster is None else c.cluster for c in clients], dtype=np.int64),
    }
    for i, c in enumerate(clients):
        arrays[f"c{i}_x_train"] = c.x_train
        arrays[f"c{i}_y_train"] = c.y_train
        arrays[f"c{i}_x_test"] = c.x_test
        arrays[f"c{i}_y_test"] = c.y_test
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_population(path) -> list[ClientDataset]:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != POPULATION_FORMAT:
            raise DataError(f"{path} is not a client population file")
        if int(z["version"]) != POPULATION_VERSION:
            raise DataError(f"unsupported population version {int(z['version'])}")
        out = []
        for i, (cid, cl) in enumerate(zip(z["client_ids"], z["clusters"])):
            out.append(ClientDataset(int(cid), z[f"c{i}_x_train"], z[f"c{i}_y_train"],
                                     z[f"c{i}_x_test"], z[f"c{i}_y_test"],
                                     None if cl < 0 else int(cl)))
    return out


def heterogeneity_report(clients: list[ClientDataset], num_classes: int | None = None) -> dict:
    """Quantity, label and feature skew summary across clients."""
    if len(clients) < 2:
        raise ConfigError("heterogeneity_report needs at least two clients")
    counts = np.array([c.num_train + c.num_test for c in clients], dtype=np.float64)
    label_sets = [set(c.labels().tolist()) for c in clients]
    all_labels = set(range(num_classes)) if num_classes else set().union(*label_sets)
    missing = sum(1 for s in label_sets if not all_labels <= s)
    means = np.stack([np.concatenate([c.x_train, c.x_test]).mean(axis=(0, 1)) for c in clients])
    centre = means.mean(axis=0)
    spread = means.std(axis=0)
    usable = np.abs(centre) > 1e-12
    feature_cv = float(np.mean(spread[usable] / np.abs(centre[usable])) * 100) if usable.any() else 0.0
    return {
        "clients": len(clients),
        "count_mean": float(counts.mean()),
        "count_std": float(counts.std()),
        "count_cv_pct": float(counts.std() / counts.mean() * 100),
        "clients_missing_classes": missing,
        "missing_rate_pct": missing / len(clients) * 100,
        "feature_cv_pct": feature_cv,
    }
