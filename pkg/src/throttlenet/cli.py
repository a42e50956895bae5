"""``throttlenet`` command line: train-datapath, train-controller, sweep, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .architectures import build_network
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, arch_config, load_config, load_data, substream_seed, sweep_spec, train_config
from .data import DataFormatError
from .evaluation import auc, curve_csv, peak_accuracy, profile_csv, sweep, utilization_profile
from .gradcheck import format_table, run_gradcheck
from .strategies import ControllerParams
from .training import STREAM_CONTROLLER, DivergenceError, train_controller, train_datapath

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

DATAPATH_CKPT = "datapath.ckpt"
CONTROLLER_CKPT = "controller.ckpt"

logger = logging.getLogger("throttlenet")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.epochs=1 (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="global seed")

    p = argparse.ArgumentParser(prog="throttlenet", description="Runtime-throttleable networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-datapath", parents=[common], help="phase 1: train the data path")
    tc = sub.add_parser("train-controller", parents=[common], help="phase 2: train the gate controller")
    tc.add_argument("--datapath", required=True, help="data path checkpoint")
    sw = sub.add_parser("sweep", parents=[common], help="accuracy/utilization curve over the u grid")
    sw.add_argument("--datapath", required=True, help="data path checkpoint")
    sw.add_argument("--controller", help="controller checkpoint (for strategy 'learned')")
    sw.add_argument("--strategy", help="override sweep.strategy")
    sw.add_argument("--out-csv", help="curve CSV path (default: OUT/curve_STRATEGY.csv)")
    sub.add_parser("gradcheck", help="finite-difference check of every op")
    return p


def _resolve(args) -> dict:
    overrides = list(args.set)
    if getattr(args, "strategy", None):
        overrides.append(f'sweep.strategy="{args.strategy}"')
    return load_config(args.config, overrides, seed=args.seed, out=args.out)


def _prepare_out(tree: dict, command: str) -> Path:
    out = Path(tree["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config.json").write_text(json.dumps(tree, indent=2, sort_keys=True) + "\n")
    return out


class _JsonlLog:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self.fh.close()


def _network(tree: dict, train_ds):
    return build_network(arch_config(tree, train_ds.input_shape, train_ds.n_classes))


def _load_datapath(net, path) -> None:
    try:
        net.load_state_dict(load_checkpoint(path))
    except FileNotFoundError:
        raise UsageError(f"data path checkpoint {path} not found") from None
    except (CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"data path checkpoint {path} does not fit the configured network: {exc}") from None


def _load_controller(path, n_gates: int) -> ControllerParams:
    try:
        psi = ControllerParams.from_state_dict(load_checkpoint(path))
    except FileNotFoundError:
        raise UsageError(f"controller checkpoint {path} not found") from None
    except (CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"controller checkpoint {path} is invalid: {exc}") from None
    if psi.n_outputs != n_gates:
        raise UsageError(f"controller emits {psi.n_outputs} gates, network has {n_gates}")
    return psi


def cmd_train_datapath(args) -> int:
    tree = _resolve(args)
    out = _prepare_out(tree, "train-datapath")
    train_ds, _ = load_data(tree, need_test=False)
    net = _network(tree, train_ds)
    log = _JsonlLog(out / "datapath_metrics.jsonl")
    try:
        result = train_datapath(net, train_ds, train_config(tree, "train"), log)
    finally:
        log.close()
    save_checkpoint(out / DATAPATH_CKPT, net.state_dict())
    print(f"trained {net.name} for {len(result.epochs)} epochs; final loss {result.epochs[-1]['train_loss']:.4f}")
    print(f"checkpoint: {out / DATAPATH_CKPT}")
    return EXIT_OK


def cmd_train_controller(args) -> int:
    tree = _resolve(args)
    out = _prepare_out(tree, "train-controller")
    train_ds, _ = load_data(tree, need_test=False)
    net = _network(tree, train_ds)
    _load_datapath(net, args.datapath)
    cfg = train_config(tree, "controller")
    psi = ControllerParams.init(net.n_gates, hidden=tree["controller"]["hidden"],
                                rng=np.random.default_rng(substream_seed(tree["seed"], STREAM_CONTROLLER)),
                                alpha=cfg.alpha_start)
    log = _JsonlLog(out / "controller_metrics.jsonl")
    try:
        result = train_controller(net, psi, train_ds, cfg, log)
    finally:
        log.close()
    save_checkpoint(out / CONTROLLER_CKPT, psi.state_dict())
    print(f"trained controller for {len(result.epochs)} epochs; final mean J {result.epochs[-1]['mean_J']:.4f}")
    print(f"checkpoint: {out / CONTROLLER_CKPT}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    tree = _resolve(args)
    spec = sweep_spec(tree)
    if spec.strategy == "learned" and not args.controller:
        raise UsageError("strategy 'learned' needs --controller")
    out = _prepare_out(tree, "sweep")
    train_ds, test_ds = load_data(tree, need_test=True)
    if test_ds is None:
        raise ConfigError("data.test_count: the sweep needs a test split")
    net = _network(tree, train_ds)
    _load_datapath(net, args.datapath)
    psi = _load_controller(args.controller, net.n_gates) if args.controller else None
    records = sweep(net, spec, test_ds, controller=psi, threads=tree["sweep"]["threads"])
    csv_path = Path(args.out_csv) if args.out_csv else out / f"curve_{spec.strategy}.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(curve_csv(records))
    if psi is not None and spec.strategy == "learned":
        (out / "profile.csv").write_text(profile_csv(utilization_profile(net, spec.grid, psi)))
    area = auc(records) if len(records) >= 2 else float("nan")
    print(f"strategy {spec.strategy}: auc {area:.4f} peak accuracy {peak_accuracy(records):.4f}")
    print(f"curve: {csv_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck()
    print(format_table(results))
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "train-datapath": cmd_train_datapath,
    "train-controller": cmd_train_controller,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
