"""Command-line entry point: ``gpn gen | train | eval | ablate``.

Exit codes: 0 on success, 2 for usage, configuration or input problems,
3 when training aborts on a numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .bench import BenchSpec, GenerationError, generate, load_benchmark, save_benchmark
from .checkpoint import CheckpointError, load_store, save_store
from .evaluator import EvalConfig, EvalConfigError, EvalReport, evaluate
from .kvconfig import ConfigError, load_dataclass
from .memory import PrototypeMemory
from .propagation import VARIANTS
from .trainer import GPNModel, TrainConfig, TrainingAborted, load_config, save_config, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

ABLATION_AXES = {
    "sampling": [("SR-S", {"sampling_mix": "SR-S"}), ("S-S", {"sampling_mix": "S-S"}),
                 ("R-S", {"sampling_mix": "R-S"})],
    "direction": [(v, {"variant": v}) for v in VARIANTS],
    "aux": [("AUX", {"aux_mode": "anneal"}), ("no-AUX", {"aux_mode": "off"})],
    "mst": [("MST", {"use_mst": True}), ("no-MST", {"use_mst": False})],
    "heads": [("k=1", {"heads": 1}), ("k=5", {"heads": 5})],
    "attention": [("M-A", {"attention": "multiplicative"}), ("A-A", {"attention": "additive"})],
}

CKPT_FILES = ("params.bin", "memory.bin", "config.txt")


class UsageError(Exception):
    """Bad flags, files or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers

def _load_bench(path):
    try:
        return load_benchmark(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load benchmark {path}: {exc}") from None


def _load_train_config(path, **overrides) -> TrainConfig:
    try:
        return load_config(path, **overrides)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except ConfigError as exc:
        raise UsageError(f"bad config {path}: {exc}") from None


def _run_training(bench, cfg: TrainConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = train(bench.graph, bench.pools, cfg, bench.train)
    except TrainingAborted as exc:
        with open(out / "abort.json", "w", encoding="utf-8") as fh:
            json.dump(exc.dump, fh, indent=2)
        raise
    save_store(out / "params.bin", res.model.store)
    res.memory.save(out / "memory.bin")
    write_log(res.log, out / "train.jsonl")
    save_config(cfg, out / "config.txt")
    return res


def _load_checkpoint(ckpt: Path, bench) -> tuple[GPNModel, PrototypeMemory, TrainConfig]:
    missing = [f for f in CKPT_FILES if not (ckpt / f).is_file()]
    if missing:
        raise UsageError(f"checkpoint {ckpt} lacks {', '.join(missing)}")
    cfg = _load_train_config(ckpt / "config.txt")
    try:
        store = load_store(ckpt / "params.bin")
        memory = PrototypeMemory.load(ckpt / "memory.bin", allowed=bench.train)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint {ckpt} does not match benchmark: {exc}") from None
    input_dim = next(iter(bench.pools.values())).shape[1]
    enc = cfg.encoder(input_dim)
    if store.values.get("enc/w0") is None or store["enc/w0"].shape[1] != input_dim:
        raise UsageError(f"checkpoint encoder does not take {input_dim}-dim inputs")
    model = GPNModel(store, enc, cfg.propagation, tuple(bench.train))
    return model, memory, cfg


def _emit(report: EvalReport, out: str | None, csv_path: str | None) -> None:
    if out:
        Path(out).write_text(report.to_json() + "\n", encoding="utf-8")
    else:
        sys.stdout.write(report.to_json() + "\n")
    sys.stderr.write(report.table() + "\n")
    if csv_path:
        report.write_csv(csv_path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    try:
        spec = load_dataclass(BenchSpec, args.spec)
        bench = generate(spec)
    except OSError as exc:
        raise UsageError(f"cannot read spec {args.spec}: {exc}") from None
    except (ConfigError, ValueError, GenerationError) as exc:
        raise UsageError(f"invalid spec: {exc}") from None
    save_benchmark(bench, args.out)
    print(f"wrote {args.out}: {len(bench.graph)} classes, {len(bench.train)} train, "
          + ", ".join(f"{len(v)} {k} test" for k, v in bench.test.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    bench = _load_bench(args.bench)
    cfg = _load_train_config(args.config)
    res = _run_training(bench, cfg, Path(args.out))
    episodes = sum(r["branch"] == "episode" for r in res.log)
    print(f"trained {cfg.tau_total} steps ({episodes} episodic) -> {args.out}")
    return EXIT_OK


def _eval_config(args, mode: str, use_mst: bool = True) -> EvalConfig:
    try:
        return EvalConfig(mode=mode, n_tasks=args.tasks, sampling=args.sampling,
                          lambda_eval=args.lam, k_c=args.k_c, seed=args.seed, use_mst=use_mst,
                          n_way=args.n_way, k_shot=args.k_shot)
    except EvalConfigError as exc:
        raise UsageError(str(exc)) from None


def _test_split(bench, regime: str):
    try:
        return bench.split(regime)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def cmd_eval(args) -> int:
    bench = _load_bench(args.bench)
    model, memory, cfg = _load_checkpoint(Path(args.ckpt), bench)
    ecfg = _eval_config(args, args.mode, cfg.use_mst)
    if ecfg.mode != "ProtoNet" and model.propagation.t_steps == 0:
        raise UsageError(f"mode {ecfg.mode} needs a checkpoint trained with propagation (t_steps = 0)")
    if ecfg.mode != "ProtoNet" and not any(n.startswith("prop/") for n in model.store.values):
        raise UsageError(f"checkpoint has no propagation parameters for mode {ecfg.mode}")
    train_ids, test_ids = _test_split(bench, args.regime)
    try:
        report = evaluate(model, memory, bench.graph, bench.pools, train_ids, test_ids, ecfg)
    except EvalConfigError as exc:
        raise UsageError(str(exc)) from None
    _emit(report, args.out, args.csv)
    return EXIT_OK


def cmd_ablate(args) -> int:
    bench = _load_bench(args.bench)
    base = _load_train_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ids, test_ids = _test_split(bench, args.regime)
    rows = []
    for label, change in ABLATION_AXES[args.axis]:
        try:
            cfg = dataclasses.replace(base, **change)
        except ValueError as exc:
            raise UsageError(f"{args.axis}={label}: {exc}") from None
        run_dir = out / f"{args.axis}_{label.replace('->', '_').replace('=', '')}"
        res = _run_training(bench, cfg, run_dir)
        ecfg = _eval_config(args, args.mode, cfg.use_mst)
        try:
            report = evaluate(res.model, res.memory, bench.graph, bench.pools, train_ids, test_ids, ecfg)
        except EvalConfigError as exc:
            raise UsageError(str(exc)) from None
        (run_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        rows.append((label, report.mean, report.ci95))
        print(f"{args.axis:>9} {label:>8}  {100 * report.mean:6.2f} +- {100 * report.ci95:.2f} %", flush=True)
    with open(out / f"ablation_{args.axis}.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mean", "ci95"])
        for label, mean, ci in rows:
            w.writerow([label, repr(mean), repr(ci)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _eval_flags(p):
    p.add_argument("--mode", type=str.lower, choices=["gpn+", "gpn", "protonet"], default="gpn+")
    p.add_argument("--regime", type=str.lower, choices=["close", "far"], default="close")
    p.add_argument("--sampling", choices=["random", "snowball"], default="random")
    p.add_argument("--tasks", type=int, default=600)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="test-time lambda")
    p.add_argument("--k-c", dest="k_c", type=int, default=2, help="attachment degree in gpn mode")
    p.add_argument("--seed", type=int, default=0, help="task sampling seed")
    p.add_argument("--n-way", dest="n_way", type=int, default=5)
    p.add_argument("--k-shot", dest="k_shot", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpn", description="Gated propagation networks on synthetic class hierarchies.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--spec", required=True, help="key = value BenchSpec file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a benchmark")
    p.add_argument("--bench", required=True)
    p.add_argument("--config", required=True, help="key = value TrainConfig file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test tasks")
    p.add_argument("--bench", required=True)
    p.add_argument("--ckpt", required=True)
    _eval_flags(p)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--csv", help="per-task accuracies as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate one run per value of an ablation axis")
    p.add_argument("--bench", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--out", required=True)
    _eval_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gpn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gpn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"gpn {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
