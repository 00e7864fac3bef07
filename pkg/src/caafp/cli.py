"""Command-line entry point: run, sweep, report, validate-data, oracle.

Exit codes: 0 success, 1 usage/configuration error (or a failing oracle),
2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from . import data as data_mod
from .config import DATASETS, METHODS, ExperimentConfig, coerce, field_kind, load_config
from .data import SCENARIOS
from .errors import ConfigError, DataError
from .federation import Experiment, ExperimentResult, checkpoint_config, load_clients
from .metrics import (ResultRow, aggregate_rows, best_by_score, fmt, format_round_csv, format_rows, parse_rows,
                      round_rows, write_round_csv)

log = logging.getLogger("caafp")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

WEIGHT_GRID = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (0.50, 0.25, 0.25),
    (0.25, 0.50, 0.25),
    (0.25, 0.25, 0.50),
    (0.33, 0.33, 0.34),
)
WEIGHT_GRID_SCENARIOS = ("standard", "drift", "noisy-clients")
WEIGHT_GRID_PRESET = dict(p1=0, p2=0, p3=15, p4=0, local_epochs=1, prune_freq=5, s_start=0.3, s_target=0.7)

PHASE_STUDIES = {
    "A": ("s_start", [round(0.1 * i, 1) for i in range(10)], dict(p1=0, p2=0, p3=40, p4=3)),
    "B": ("p2", [0, 5, 10, 15, 20], dict(p1=0, p3=40, p4=3, s_start=0.5)),
    "C": ("p1", [0, 5, 10, 15, 20], dict(p2=0, p3=40, p4=3, s_start=0.5)),
}


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags override its values")
    g = p.add_argument_group("experiment settings (mirror config keys)")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = field_kind(f)
        kw = dict(dest=f"cfg_{f.name}", default=argparse.SUPPRESS, metavar=kind.__name__.upper(),
                  help=f"(default: {f.default})")
        if f.name == "method":
            kw.update(choices=METHODS, metavar=None)
        elif f.name == "dataset":
            kw.update(choices=DATASETS, metavar=None)
        elif f.name == "scenario":
            kw.update(choices=SCENARIOS, metavar=None)
        g.add_argument(flag, **kw)


def _overrides(args) -> dict:
    known = {f.name: f for f in fields(ExperimentConfig)}
    return {k[4:]: coerce(known[k[4:]], v) for k, v in vars(args).items() if k.startswith("cfg_")}


def resolve_config(args, preset: dict | None = None) -> ExperimentConfig:
    """File values, then any sweep preset, then explicit flags."""
    base = load_config(args.config).to_dict() if getattr(args, "config", None) else {}
    base.update(preset or {})
    base.update(_overrides(args))
    return ExperimentConfig.from_dict(base)


def result_row(cfg: ExperimentConfig, res: ExperimentResult) -> ResultRow:
    return ResultRow(cfg.method, cfg.dataset, cfg.scenario, res.final.mean_sparsity, cfg.p4, res.mu, res.sigma,
                     res.comm_mb, cfg.seed, cfg.config_hash(), cfg.alpha, cfg.beta, cfg.gamma,
                     cfg.p1, cfg.p2, cfg.p3, cfg.s_start)


def manifest(cfg: ExperimentConfig | None, files: list[str], extra: dict | None = None) -> dict:
    out = {"tool": "caafp", "version": __version__, "files": files}
    if cfg is not None:
        out.update(config=cfg.to_dict(), config_hash=cfg.config_hash(), seed=cfg.seed)
    out.update(extra or {})
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    if args.resume:
        # the checkpoint carries the config; the population is rebuilt from it
        cfg = checkpoint_config(args.resume)
        exp = Experiment.from_checkpoint(args.resume, load_clients(cfg))
    else:
        cfg = resolve_config(args)
        exp = Experiment(cfg, load_clients(cfg))
    res = exp.run(until_round=args.stop_after)
    if args.checkpoint:
        exp.save_checkpoint(args.checkpoint)
    if res is None:
        print(f"stopped after round {exp.global_round}; checkpoint at {args.checkpoint}", file=sys.stderr)
        return EXIT_OK
    rows = round_rows(res.history, res.final, cfg.method, cfg.dataset, cfg.scenario, cfg.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_round_csv(out / "rounds.csv", rows)
        (out / "results.csv").write_text(format_rows([result_row(cfg, res)]))
        files = ["rounds.csv", "results.csv"]
        if args.events:
            with open(out / "events.jsonl", "w") as fh:
                for ev in res.events:
                    fh.write(json.dumps(ev, sort_keys=True) + "\n")
            files.append("events.jsonl")
        extra = {"final": {"mu": res.mu, "sigma": res.sigma, "comm_mb": res.comm_mb}}
        if res.assignment is not None:
            extra["clusters"] = res.assignment.members
        _write_json(out / "manifest.json", manifest(cfg, files, extra))
    else:
        sys.stdout.write(format_round_csv(rows))
    return EXIT_OK


def sweep_configs(args) -> list[ExperimentConfig]:
    seeds = args.seeds or [None]
    configs = []

    def with_seeds(cfg):
        for s in seeds:
            configs.append(cfg if s is None else cfg.replace(seed=s))

    if args.weights_grid:
        base = resolve_config(args, WEIGHT_GRID_PRESET)
        for scenario in WEIGHT_GRID_SCENARIOS:
            for a, b, g in WEIGHT_GRID:
                with_seeds(base.replace(scenario=scenario, alpha=a, beta=b, gamma=g))
    elif args.phase_study:
        key, values, preset = PHASE_STUDIES[args.phase_study]
        base = resolve_config(args, preset)
        for v in values:
            changes = {key: v}
            if key == "s_start":
                # a start above the target leaves nothing to schedule; hold it instead
                changes["s_target"] = max(base.s_target, v)
            with_seeds(base.replace(**changes))
    elif args.ft_grid:
        base = resolve_config(args)
        for e in args.ft_grid:
            with_seeds(base.replace(p4=e))
    elif args.lam_grid:
        base = resolve_config(args)
        for lam in args.lam_grid:
            with_seeds(base.replace(lam=lam))
    else:
        with_seeds(resolve_config(args))
    return configs


def cmd_sweep(args) -> int:
    configs = sweep_configs(args)
    rows = []
    for i, cfg in enumerate(configs):
        log.info("sweep %d/%d: %s seed=%d", i + 1, len(configs), cfg.config_hash(), cfg.seed)
        res = Experiment(cfg, load_clients(cfg)).run()
        rows.append(result_row(cfg, res))
    text = format_rows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(text)
        grid = {"weights_grid": args.weights_grid, "phase_study": args.phase_study, "ft_grid": args.ft_grid,
                "lam_grid": args.lam_grid, "seeds": args.seeds}
        _write_json(out / "manifest.json", manifest(None, ["results.csv"], {
            "grid": grid, "runs": [{"config": c.to_dict(), "config_hash": c.config_hash(), "seed": c.seed}
                                   for c in configs]}))
    else:
        sys.stdout.write(text)
    return EXIT_OK


REPORT_COLUMNS = ("method", "dataset", "scenario", "config_hash", "n", "mu_mean", "mu_std", "sigma_mean",
                  "sigma_std", "comm_mean", "alpha", "beta", "gamma", "score")


def cmd_report(args) -> int:
    rows = []
    for path in args.files:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(path)
        try:
            rows.extend(parse_rows(p.read_text()))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: not a results file ({exc})") from None
    lines = aggregate_rows(rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for ln in lines:
        w.writerow([fmt(getattr(ln, c)) for c in REPORT_COLUMNS])
    if args.best:
        print()
        print("best weights by mu/sigma:")
        for (dataset, scenario), ln in sorted(best_by_score(lines).items()):
            print(f"  {dataset}/{scenario}: alpha={ln.alpha} beta={ln.beta} gamma={ln.gamma} "
                  f"mu={ln.mu_mean:.4f} sigma={ln.sigma_mean:.4f} score={ln.score:.4f}")
    return EXIT_OK


def cmd_validate_data(args) -> int:
    cfg = resolve_config(args)
    info: dict = {"dataset": cfg.dataset}
    if cfg.dataset == "wisdm" and cfg.data_path:
        records, malformed = data_mod.parse_wisdm(cfg.data_path)
        info.update(records=len(records), malformed_lines=malformed)
    clients = load_clients(cfg)
    for c in clients:
        c.validate(cfg.num_classes)
    info.update(clients=len(clients), train_windows=sum(c.num_train for c in clients),
                test_windows=sum(c.num_test for c in clients),
                window_shape=list(clients[0].x_train.shape[1:]))
    if len(clients) >= 2:
        info["heterogeneity"] = data_mod.heterogeneity_report(clients, cfg.num_classes)
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracles import run_all
    results = run_all(args.seed, quick=args.quick)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_USAGE


def build_parser() -> ArgParser:
    parser = ArgParser(prog="caafp", description="Cluster-aware adaptive federated pruning experiments.")
    parser.add_argument("--version", action="version", version=f"caafp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _add_config_flags(p)
    p.add_argument("--out", help="directory for rounds.csv, results.csv and manifest.json (default: CSV to stdout)")
    p.add_argument("--events", action="store_true", help="also write the event stream as events.jsonl")
    p.add_argument("--checkpoint", help="write the experiment state here when the command stops")
    p.add_argument("--stop-after", type=int, help="stop after this many communication rounds")
    p.add_argument("--resume", help="continue from a checkpoint (its config is used)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of experiments, one result row each")
    _add_config_flags(p)
    grid = p.add_mutually_exclusive_group()
    grid.add_argument("--weights-grid", choices=("table3",), help="7 score-weight settings x 3 scenarios")
    grid.add_argument("--phase-study", choices=sorted(PHASE_STUDIES),
                      help="A: start sparsity, B: post-cluster rounds, C: warm-up rounds")
    grid.add_argument("--ft-grid", type=_int_list, help="comma-separated fine-tuning epochs")
    grid.add_argument("--lam-grid", type=lambda s: [float(v) for v in s.split(",")],
                      help="comma-separated proximal strengths")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: the config seed)")
    p.add_argument("--out", help="directory for results.csv and manifest.json (default: stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate result rows over seeds")
    p.add_argument("files", nargs="+", help="results.csv files")
    p.add_argument("--best", action="store_true", help="also print the best weights per scenario")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate-data", help="load a dataset and print ingestion statistics")
    _add_config_flags(p)
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("oracle", help="run the brute-force reference checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"caafp: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"caafp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
