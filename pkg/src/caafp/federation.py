"""Four-phase cluster-aware federated training and its baselines.

An :class:`Experiment` walks through a plan of stages:

``global``    FedAvg rounds on one shared model (warm-up, or the whole run
              for the ``fedavg`` / ``oneshot-prune`` baselines)
``cluster``   one probe epoch per client, cosine distances, agglomeration
``dense``     cluster rounds on the proximal objective, no pruning
``prune``     cluster rounds with scheduled prune-and-heal mask updates
``finetune``  local, communication-free training under the frozen mask

Every random draw is keyed on (seed, round, client), so results do not depend
on client iteration order and a run can resume from any round boundary.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .clustering import ClusterAssignment, cluster_clients, compute_delta
from .config import ExperimentConfig
from .data import ClientDataset
from .errors import ConfigError, DataError
from .metrics import DOWN, UP, RoundMetrics, Transmission, comm_cost, summarize
from .nn import (ArchitectureSpec, OptimizerState, ParamSet, evaluate, init_params, loss_and_grad, num_params,
                 num_prunable, train_local)
from .pruning import (ClusterSignals, Mask, importance, magnitude_score, prune_heal_step, prune_lowest,
                      regrowth_signal, step_counts, step_log_entry)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "caafp-checkpoint"
CHECKPOINT_VERSION = 1


def client_rng(seed: int, round_idx: int, client_id: int, purpose: int = 17) -> np.random.Generator:
    return np.random.default_rng([seed, round_idx, client_id, purpose])


def aggregate(returns: dict[int, np.ndarray], sizes: dict[int, int], base: np.ndarray | None = None) -> np.ndarray:
    """Data-size weighted mean of client vectors, reduced in client-id order.

    Computed as ``base + sum_k p_k (w_k - base)`` so that unchanged returns
    reproduce ``base`` bit for bit; a single return is passed through as is.
    """
    if not returns:
        raise ConfigError("nothing to aggregate")
    ids = sorted(returns)
    if len(ids) == 1:
        return np.array(returns[ids[0]], dtype=np.float64, copy=True)
    total = float(sum(sizes[i] for i in ids))
    base = returns[ids[0]] if base is None else base
    out = np.array(base, dtype=np.float64, copy=True)
    for i in ids:
        out += (sizes[i] / total) * (returns[i] - base)
    return out


def _apply_keep(values: np.ndarray, keep: np.ndarray | None) -> np.ndarray:
    return values if keep is None else np.where(keep > 0, values, 0.0)


def fedavg_round(global_params: ParamSet, clients: list[ClientDataset], epochs: int, batch_size: int,
                 lr: float = 1e-3, seed: int = 0, round_idx: int = 1, mask: Mask | None = None,
                 states: dict[int, OptimizerState] | None = None) -> ParamSet:
    """Broadcast, train each client for ``epochs`` on plain cross-entropy, aggregate."""
    if not clients:
        raise ConfigError("fedavg_round needs at least one client")
    keep = mask.keep() if mask is not None else None
    returns, sizes = {}, {}
    for c in sorted(clients, key=lambda c: c.client_id):
        state = states.get(c.client_id) if states is not None else None
        if state is None:
            state = OptimizerState.fresh(global_params.size, lr)
        res = train_local(global_params, c.x_train, c.y_train, epochs, batch_size, state,
                          client_rng(seed, round_idx, c.client_id), mask=keep)
        if states is not None:
            states[c.client_id] = res.state
        returns[c.client_id] = res.params.values
        sizes[c.client_id] = c.num_train
    agg = aggregate(returns, sizes, base=global_params.values)
    return global_params.with_values(_apply_keep(agg, keep))


@dataclass
class ClusterState:
    cluster_id: int
    params: ParamSet
    mask: Mask
    ref: ParamSet
    members: list[int]
    opt: dict[int, OptimizerState] = field(default_factory=dict)
    returns: dict[int, np.ndarray] = field(default_factory=dict)

    def personal_ref(self, client_id: int) -> ParamSet:
        # references are identical across members, so one copy is stored
        return self.ref


def cluster_round(state: ClusterState, members: list[ClientDataset], lam: float, epochs: int,
                  batch_size: int, mask_active: bool, lr: float = 1e-3, seed: int = 0,
                  round_idx: int = 1) -> ClusterState:
    """One proximal cluster round; updates ``state`` in place and returns it."""
    if not members:
        raise ConfigError("cluster_round needs at least one member")
    keep = state.mask.keep() if mask_active else None
    returns, sizes = {}, {}
    for c in sorted(members, key=lambda c: c.client_id):
        opt = state.opt.get(c.client_id) or OptimizerState.fresh(state.params.size, lr)
        res = train_local(state.params, c.x_train, c.y_train, epochs, batch_size, opt,
                          client_rng(seed, round_idx, c.client_id), ref=state.personal_ref(c.client_id),
                          lam=lam, mask=keep)
        state.opt[c.client_id] = res.state
        returns[c.client_id] = res.params.values
        sizes[c.client_id] = c.num_train
    agg = aggregate(returns, sizes, base=state.params.values)
    state.params = state.params.with_values(_apply_keep(agg, keep))
    state.returns = returns
    return state


def gradient_probe(params: ParamSet, client: ClientDataset, batch_size: int, ref: ParamSet | None,
                   lam: float, keep: np.ndarray | None) -> np.ndarray:
    """Sum of batch gradients over one pass of the client's data, parameters held fixed."""
    acc = np.zeros(params.size)
    n = client.num_train
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        _, g = loss_and_grad(params, client.x_train[sl], client.y_train[sl], ref=ref, lam=lam, mask=keep)
        acc += g
    return acc


def stage_plan(cfg: ExperimentConfig) -> list[tuple[str, int]]:
    if cfg.method in ("caafp", "global-ft"):
        return [("global", cfg.p1), ("cluster", 1), ("dense", cfg.p2), ("prune", cfg.p3), ("finetune", 1)]
    if cfg.method == "dense-clustered":
        return [("global", cfg.p1), ("cluster", 1), ("dense", cfg.p2 + cfg.p3), ("finetune", 1)]
    return [("global", cfg.p1 + cfg.p2 + cfg.p3), ("finetune", 1)]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    personal: dict[int, ParamSet]
    history: list[RoundMetrics]
    final: RoundMetrics
    assignment: ClusterAssignment | None
    masks: dict[int, Mask]
    transmissions: list[Transmission]
    events: list[dict]

    @property
    def mu(self) -> float:
        return self.final.mu

    @property
    def sigma(self) -> float:
        return self.final.sigma

    @property
    def comm_mb(self) -> float:
        return self.final.comm_mb


class Experiment:
    def __init__(self, config: ExperimentConfig, clients: list[ClientDataset], init: ParamSet | None = None):
        if not clients:
            raise DataError("experiment needs at least one client")
        self.cfg = config
        self.clients = sorted(clients, key=lambda c: c.client_id)
        self.by_id = {c.client_id: c for c in self.clients}
        if len(self.by_id) != len(self.clients):
            raise DataError("duplicate client ids")
        self.arch = init.arch if init is not None else config.architecture()
        shape = self.clients[0].x_train.shape[1:]
        if shape != (self.arch.input_len, self.arch.channels):
            raise ConfigError(f"client samples have shape {shape}, architecture expects "
                              f"({self.arch.input_len}, {self.arch.channels})")
        for c in self.clients:
            c.validate(self.arch.num_classes)
        self.plan = stage_plan(config)
        self.stage_index = 0
        self.stage_round = 0
        self.global_round = 0
        self.global_params = init.copy() if init is not None else init_params(self.arch, config.seed)
        self.global_mask: Mask | None = None
        self.global_opt: dict[int, OptimizerState] = {}
        self.assignment: ClusterAssignment | None = None
        self.clusters: list[ClusterState] = []
        self.personal: dict[int, ParamSet] = {}
        self.transmissions: list[Transmission] = []
        self.history: list[RoundMetrics] = []
        self.events: list[dict] = []
        self.final: RoundMetrics | None = None
        self._recorded_tx = 0
        self._comm_mb = 0.0

    # -- driving ---------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.stage_index >= len(self.plan)

    @property
    def stage(self) -> str | None:
        return None if self.done else self.plan[self.stage_index][0]

    def step(self) -> None:
        """Advance by one unit of work (one round, the clustering step, or fine-tuning)."""
        if self.done:
            return
        name, length = self.plan[self.stage_index]
        if self.stage_round >= length:
            self.stage_index += 1
            self.stage_round = 0
            # optimizer moments never carry across phases
            self.global_opt = {}
            for cl in self.clusters:
                cl.opt = {}
            return
        getattr(self, f"_stage_{name}")()
        self.stage_round += 1

    def run(self, until_round: int | None = None) -> ExperimentResult | None:
        """Run to completion, or stop once ``until_round`` communication rounds are done."""
        while not self.done:
            if until_round is not None and self.global_round >= until_round and self._at_round_boundary():
                return None
            self.step()
        return self.result()

    def _at_round_boundary(self) -> bool:
        return self.stage in ("global", "dense", "prune")

    def result(self) -> ExperimentResult:
        if self.final is None:
            raise RuntimeError("experiment has not finished")
        if self.clusters:
            masks = {cl.cluster_id: cl.mask for cl in self.clusters}
        else:
            masks = {0: self.global_mask or Mask.ones(self.arch)}
        return ExperimentResult(self.cfg, self.personal, self.history, self.final, self.assignment,
                                masks, self.transmissions, self.events)

    # -- stages ------------------------------------------------------------

    def _sample(self, round_idx: int, k: int) -> list[int]:
        ids = [c.client_id for c in self.clients]
        if k >= len(ids):
            return ids
        rng = np.random.default_rng([self.cfg.seed, round_idx, 5])
        return sorted(int(i) for i in rng.choice(ids, size=k, replace=False))

    def _log_round_traffic(self, round_idx: int, client_ids, count: int, masked: bool = False) -> None:
        bits = num_prunable(self.arch) if masked else 0
        for cid in client_ids:
            self.transmissions.append(Transmission(round_idx, cid, DOWN, count, bits))
            self.transmissions.append(Transmission(round_idx, cid, UP, count, bits))

    def _stage_global(self) -> None:
        cfg = self.cfg
        r = self.global_round + 1
        if cfg.method == "oneshot-prune" and self.global_mask is None:
            self.global_mask = prune_lowest(magnitude_score(self.global_params), self.arch, cfg.s_target)
            self.global_params = self.global_params.with_values(
                _apply_keep(self.global_params.values, self.global_mask.keep()))
            self.events.append({"event": "oneshot_prune", "round": r, "sparsity": self.global_mask.sparsity})
        selected = self._sample(r, cfg.clients_per_round)
        self.global_params = fedavg_round(self.global_params, [self.by_id[i] for i in selected],
                                          cfg.local_epochs, cfg.batch_size, cfg.lr, cfg.seed, r,
                                          mask=self.global_mask, states=self.global_opt)
        count = self.global_mask.n_transmitted() if self.global_mask else num_params(self.arch)
        self._log_round_traffic(r, selected, count, masked=self.global_mask is not None)
        self.global_round = r
        sparsity = {0: self.global_mask.sparsity if self.global_mask else 0.0}
        self._record(r, "global", lambda cid: self.global_params, sparsity)

    def _stage_cluster(self) -> None:
        cfg = self.cfg
        ref = self.global_params
        deltas = [compute_delta(ref, c, cfg.batch_size, cfg.lr, cfg.seed) for c in self.clients]
        if cfg.include_probe_traffic:
            self._log_round_traffic(self.global_round, [c.client_id for c in self.clients], num_params(self.arch))
        k = self.cfg.num_clusters
        if k > len(self.clients):
            raise ConfigError(f"{k} clusters requested for {len(self.clients)} clients")
        self.assignment, dist = cluster_clients(deltas, k)
        self.clusters = [
            ClusterState(c, ref.copy(), Mask.ones(self.arch), ref.copy(), members)
            for c, members in enumerate(self.assignment.members)
        ]
        self.events.append({"event": "clustered", "round": self.global_round,
                            "members": self.assignment.members})

    def _cluster_participants(self, round_idx: int) -> dict[int, list[int]]:
        k = self.cfg.cluster_clients_per_round
        chosen = set(self._sample(round_idx, k)) if k else None
        return {cl.cluster_id: [m for m in cl.members if chosen is None or m in chosen] for cl in self.clusters}

    def _stage_dense(self) -> None:
        self._cluster_stage(prune=False)

    def _stage_prune(self) -> None:
        self._cluster_stage(prune=True)

    def _cluster_stage(self, prune: bool) -> None:
        cfg = self.cfg
        r = self.global_round + 1
        t = self.stage_round + 1
        participants = self._cluster_participants(r)
        for cl in self.clusters:
            ids = participants[cl.cluster_id]
            if not ids:
                continue
            if prune and cfg.schedule.is_step(t):
                self._prune_step(cl, ids, t, r)
            cluster_round(cl, [self.by_id[i] for i in ids], cfg.lam, cfg.local_epochs, cfg.batch_size,
                          mask_active=prune, lr=cfg.lr, seed=cfg.seed, round_idx=r)
            self._log_round_traffic(r, ids, cl.mask.n_transmitted(), masked=prune)
        self.global_round = r
        owner = {cid: cl for cl in self.clusters for cid in cl.members}
        self._record(r, "prune" if prune else "dense", lambda cid: owner[cid].params,
                     {cl.cluster_id: cl.mask.sparsity for cl in self.clusters})

    def _prune_step(self, cl: ClusterState, ids: list[int], t: int, r: int) -> None:
        cfg = self.cfg
        schedule = cfg.schedule
        old = cl.mask
        keep = old.keep()
        grads = [gradient_probe(cl.params, self.by_id[i], cfg.batch_size, cl.ref, cfg.lam, keep) for i in ids]
        returned = [cl.returns[i] for i in ids if i in cl.returns] or [cl.params.values]
        signals = ClusterSignals(returned, grads, cl.params)
        scores = importance(cl.params, signals, cfg.weights)
        regrow = regrowth_signal(signals)
        mask = cl.mask
        if t == schedule.frequency:
            mask = prune_lowest(scores, self.arch, schedule.s_start)
            self.events.append({"event": "start_sparsity", "round": r, "cluster": cl.cluster_id,
                                "sparsity": mask.sparsity})
        counts = step_counts(mask.n_total, mask.n_active, schedule, t)
        new = prune_heal_step(mask, scores, regrow, schedule, t)
        self.events.append(step_log_entry(r, mask, new, counts, cfg.weights, cl.cluster_id))
        keep = new.keep()
        cl.mask = new
        cl.params = cl.params.with_values(_apply_keep(cl.params.values, keep))
        changed = new.positions[old.bits != new.bits]
        for opt in cl.opt.values():
            opt.m[changed] = 0.0
            opt.v[changed] = 0.0

    def _stage_finetune(self) -> None:
        cfg = self.cfg
        owner = {cid: cl for cl in self.clusters for cid in cl.members}
        for c in self.clients:
            if owner:
                model, mask = owner[c.client_id].params, owner[c.client_id].mask
            else:
                model, mask = self.global_params, self.global_mask
            keep = mask.keep() if mask is not None else None
            if cfg.p4 > 0:
                res = train_local(model, c.x_train, c.y_train, cfg.p4, cfg.batch_size,
                                  OptimizerState.fresh(model.size, cfg.lr),
                                  client_rng(cfg.seed, 0, c.client_id, purpose=23), mask=keep)
                self.personal[c.client_id] = res.params
            else:
                self.personal[c.client_id] = model.copy()
        accs = {c.client_id: evaluate(self.personal[c.client_id], c) for c in self.clients}
        mu, sigma = summarize(accs)
        if self.clusters:
            sparsity = {cl.cluster_id: cl.mask.sparsity for cl in self.clusters}
        else:
            sparsity = {0: self.global_mask.sparsity if self.global_mask else 0.0}
        self._flush_comm()
        self.final = RoundMetrics(self.global_round, "final", accs, mu, sigma, 0.0, self._comm_mb, sparsity)
        self.events.append({"event": "final", "mu": mu, "sigma": sigma, "comm_mb": self._comm_mb})

    # -- bookkeeping -----------------------------------------------------------

    def _flush_comm(self) -> float:
        new = self.transmissions[self._recorded_tx:]
        self._recorded_tx = len(self.transmissions)
        mb = comm_cost(new, include_mask=self.cfg.include_mask_bits)
        self._comm_mb += mb
        return mb

    def _record(self, r: int, phase: str, model_for, sparsity: dict[int, float]) -> None:
        accs = {}
        if r % self.cfg.eval_every == 0:
            accs = {c.client_id: evaluate(model_for(c.client_id), c) for c in self.clients}
        mu, sigma = summarize(accs)
        round_mb = self._flush_comm()
        m = RoundMetrics(r, phase, accs, mu, sigma, round_mb, self._comm_mb, sparsity)
        self.history.append(m)
        self.events.append({"event": "round", **m.to_dict()})

    # -- checkpoints -----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Write the full state at a round boundary to one ``.npz`` file."""
        arrays: dict[str, np.ndarray] = {"global": self.global_params.values}
        if self.global_mask is not None:
            arrays["global_mask"] = self.global_mask.bits
        opt_meta = {}

        def put_opt(prefix, states):
            opt_meta[prefix] = {}
            for cid, st in states.items():
                arrays[f"{prefix}_{cid}_m"] = st.m
                arrays[f"{prefix}_{cid}_v"] = st.v
                opt_meta[prefix][str(cid)] = [st.t, st.lr]

        put_opt("gopt", self.global_opt)
        clusters_meta = []
        for cl in self.clusters:
            p = f"cl{cl.cluster_id}"
            arrays[f"{p}_params"] = cl.params.values
            arrays[f"{p}_mask"] = cl.mask.bits
            arrays[f"{p}_ref"] = cl.ref.values
            for cid, vec in cl.returns.items():
                arrays[f"{p}_ret_{cid}"] = vec
            put_opt(f"{p}opt", cl.opt)
            clusters_meta.append({"id": cl.cluster_id, "members": cl.members, "returns": sorted(cl.returns)})
        for cid, v in self.personal.items():
            arrays[f"v_{cid}"] = v.values
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "arch": self.arch.to_dict(),
            "stage_index": self.stage_index,
            "stage_round": self.stage_round,
            "global_round": self.global_round,
            "assignment": None if self.assignment is None else {str(k): v for k, v in self.assignment.labels.items()},
            "clusters": clusters_meta,
            "opt": opt_meta,
            "personal": sorted(self.personal),
            "transmissions": [list(tx) for tx in self.transmissions],
            "recorded_tx": self._recorded_tx,
            "comm_mb": self._comm_mb,
            "history": [m.to_dict() for m in self.history],
            "events": self.events,
            "final": None if self.final is None else self.final.to_dict(),
        }
        arrays["meta"] = np.array(json.dumps(meta))
        with open(Path(path), "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def from_checkpoint(cls, path, clients: list[ClientDataset]) -> "Experiment":
        meta, arrays = _read_checkpoint(path)
        cfg = ExperimentConfig.from_dict(meta["config"])
        arch = ArchitectureSpec.from_dict(meta["arch"])
        exp = cls(cfg, clients, init=ParamSet(arch, arrays["global"]))
        exp.stage_index = meta["stage_index"]
        exp.stage_round = meta["stage_round"]
        exp.global_round = meta["global_round"]
        if "global_mask" in arrays:
            exp.global_mask = Mask(arrays["global_mask"], arch)

        def get_opt(prefix):
            out = {}
            for cid, (t, lr) in meta["opt"].get(prefix, {}).items():
                out[int(cid)] = OptimizerState(arrays[f"{prefix}_{cid}_m"].copy(), arrays[f"{prefix}_{cid}_v"].copy(), lr, t)
            return out

        exp.global_opt = get_opt("gopt")
        if meta["assignment"] is not None:
            exp.assignment = ClusterAssignment({int(k): v for k, v in meta["assignment"].items()})
        for cm in meta["clusters"]:
            p = f"cl{cm['id']}"
            cl = ClusterState(cm["id"], ParamSet(arch, arrays[f"{p}_params"]), Mask(arrays[f"{p}_mask"], arch),
                              ParamSet(arch, arrays[f"{p}_ref"]), list(cm["members"]), get_opt(f"{p}opt"),
                              {cid: arrays[f"{p}_ret_{cid}"] for cid in cm["returns"]})
            exp.clusters.append(cl)
        exp.personal = {cid: ParamSet(arch, arrays[f"v_{cid}"]) for cid in meta["personal"]}
        exp.transmissions = [Transmission(*tx) for tx in meta["transmissions"]]
        exp._recorded_tx = meta["recorded_tx"]
        exp._comm_mb = meta["comm_mb"]
        exp.history = [RoundMetrics.from_dict(m) for m in meta["history"]]
        exp.events = meta["events"]
        exp.final = None if meta["final"] is None else RoundMetrics.from_dict(meta["final"])
        return exp


def _read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z.files:
            raise DataError(f"{path}: not a checkpoint")
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        return meta, {k: z[k] for k in z.files}


def checkpoint_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(_read_checkpoint(path)[0]["config"])


def run_caafp(config: ExperimentConfig, clients: list[ClientDataset]) -> ExperimentResult:
    if config.method not in ("caafp", "global-ft"):
        config = config.replace(method="caafp")
    return Experiment(config, clients).run()


def run_baseline(config: ExperimentConfig, clients: list[ClientDataset]) -> ExperimentResult:
    if config.method == "caafp":
        raise ConfigError("run_baseline needs a baseline method, got 'caafp'")
    return Experiment(config, clients).run()


def run_experiment(config: ExperimentConfig, clients: list[ClientDataset]) -> ExperimentResult:
    return Experiment(config, clients).run()


def load_clients(cfg: ExperimentConfig) -> list[ClientDataset]:
    """Build the client population named by the config and apply its scenario."""
    if cfg.dataset == "synth":
        clients = data_mod.synth_population(cfg.synth_clusters, cfg.synth_clients, cfg.synth_samples,
                                            cfg.synth_window, cfg.synth_channels, cfg.synth_classes,
                                            cfg.seed, noise=cfg.synth_noise, test_fraction=cfg.test_fraction)
    elif not cfg.data_path:
        raise DataError(f"dataset {cfg.dataset!r} needs --data-path")
    elif cfg.dataset == "wisdm":
        clients = data_mod.load_wisdm(cfg.data_path, cfg.test_fraction, cfg.seed)
    else:
        clients = data_mod.load_ucihar(cfg.data_path, cfg.test_fraction, cfg.seed)
    return data_mod.apply_scenario(clients, cfg.scenario_spec())
