"""Command-line driver for the train -> binarize -> fine-tune -> quantize workflow.

Exit codes: 0 success, 2 usage problems (bad flags, missing files, wrong
stage order), 1 runtime failures.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np

from . import store
from .arch import RESNET_DEPTHS, build_resnet_cifar, build_sepnet, count_params, param_table
from .compress import BLOCK_ROLES, binarize_network, parse_scope, quantization_error_report, quantize8
from .graph import Network, UsageError
from .train import (
    AugmentSpec,
    Dataset,
    DataSplits,
    TrainConfig,
    cifar_config,
    evaluate,
    load_cifar10,
    load_digits,
    load_npz_dataset,
    preprocess,
    run_pipeline,
)

log = logging.getLogger("sepnet")

ARCHS = ("sepnet-small", "sepnet-large") + tuple(f"resnet{d}" for d in RESNET_DEPTHS)
DATA_KEYS = {"gcn": True, "zca": True, "zca_epsilon": 1e-2, "pad_pixels": 4, "random_crop": True,
             "mirror": False, "train_limit": None, "test_fraction": 0.2, "image_size": 32}


class CliError(Exception):
    """Usage-level failure; reported with exit code 2."""


# ------------------------------------------------------------------ config


def load_config(path: str | None) -> tuple[dict, dict, dict]:
    """Split a JSON config into (train, data, arch) sections.

    Either ``{"train": {...}, "data": {...}, "arch": {...}}`` or a flat
    object of TrainConfig keys.
    """
    if path is None:
        return {}, {}, {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise CliError(f"{path}: expected a JSON object")
    if set(raw) <= {"train", "data", "arch"}:
        tr, da, ar = raw.get("train", {}), raw.get("data", {}), raw.get("arch", {})
    else:
        tr, da, ar = raw, {}, {}
    unknown = set(da) - set(DATA_KEYS)
    if unknown:
        raise CliError(f"unknown data config keys: {sorted(unknown)}")
    if set(ar) - {"width", "shortcut"}:
        raise CliError(f"unknown arch config keys: {sorted(set(ar) - {'width', 'shortcut'})}")
    return tr, da, ar


def train_config(args, section: dict) -> TrainConfig:
    d = dict(section)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        base = cifar_config().to_dict()
        base.update(d)
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training config: {exc}") from exc


# -------------------------------------------------------------------- data


def load_data(path: str | None, opts: dict) -> DataSplits:
    """``digits`` (bundled), a CIFAR-10 binary directory, or an ``.npz`` file."""
    if path is None:
        raise CliError("--data is required for this command")
    o = {**DATA_KEYS, **opts}
    if path == "digits":
        train, test = load_digits(size=o["image_size"], test_fraction=o["test_fraction"])
    elif os.path.isdir(path):
        train, test = load_cifar10(path, o["train_limit"])
    elif os.path.isfile(path):
        train, test = _split_npz(path, o["test_fraction"])
    else:
        raise CliError(f"data not found: {path}")
    if o["train_limit"] and len(train) > o["train_limit"]:
        train = train.subset(o["train_limit"])
    train, test = preprocess(train, test, o["gcn"], o["zca"], o["zca_epsilon"])
    return DataSplits(train, test, AugmentSpec(o["pad_pixels"], o["random_crop"], o["mirror"]))


def _split_npz(path, test_fraction):
    with np.load(path) as z:
        if "test_images" in z:
            cc = int(max(z["train_labels"].max(), z["test_labels"].max())) + 1
            return (Dataset(z["train_images"].astype(np.float32), z["train_labels"].astype(np.int64), cc),
                    Dataset(z["test_images"].astype(np.float32), z["test_labels"].astype(np.int64), cc))
    d = load_npz_dataset(path)
    perm = np.random.default_rng(0).permutation(len(d))
    n_test = int(round(len(d) * test_fraction))
    te, tr = perm[:n_test], perm[n_test:]
    return (Dataset(d.images[tr], d.labels[tr], d.class_count),
            Dataset(d.images[te], d.labels[te], d.class_count))


# ----------------------------------------------------------------- models


def build_arch(name: str, input_shape=None, class_count=None, width: float = 1.0,
               shortcut: str = "conv3") -> Network:
    try:
        if name.startswith("sepnet-"):
            return build_sepnet(name.split("-", 1)[1], width, input_shape or (3, 224, 224), class_count or 1000)
        return build_resnet_cifar(int(name[6:]), shortcut, class_count or 10, input_shape or (3, 32, 32))
    except ValueError as exc:  # GraphError / ConfigError from an impossible width or shortcut
        raise CliError(f"cannot build {name}: {exc}") from exc


def read_model(path: str | None) -> Network:
    if path is None:
        raise CliError("--in is required for this command")
    if not os.path.exists(path):
        raise CliError(f"model file not found: {path}")
    return store.load(path)


def model_from_args(args, arch_opts: dict) -> Network:
    """--in takes priority; otherwise build --arch with seeded weights."""
    if args.inp:
        return read_model(args.inp)
    if args.arch:
        net = build_arch(args.arch, width=arch_opts.get("width", 1.0),
                         shortcut=arch_opts.get("shortcut", "conv3"))
        return net.initialize(args.seed or 0)
    raise CliError("give --in <model file> or --arch <name>")


def write_model(net: Network, path: str | None) -> None:
    if path is None:
        raise CliError("--out is required for this command")
    n = store.save(net, path)
    log.info("wrote %s (%d bytes, state %s)", path, n, net.state)


def scope_args(args):
    try:
        parse_scope(args.scope)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return args.scope, (None if args.all_layers else BLOCK_ROLES), args.granularity


# --------------------------------------------------------------- commands


def cmd_train(args, cfg):
    tr, da, ar = cfg
    config = train_config(args, tr)
    data = load_data(args.data, da)
    shape = tuple(data.train.images.shape[1:])
    net = build_arch(args.arch, shape, data.train.class_count, ar.get("width", 1.0), ar.get("shortcut", "conv3"))
    net.initialize(config.seed)
    _log_resolved(args, config, da, ar)
    with _log_target(args.log) as lf:
        res = run_pipeline(net, data, config, "full-train", log_file=lf)
    write_model(res.net, args.out)
    print(json.dumps({"state": res.net.state, **res.metrics}))


def cmd_binarize(args, cfg):
    net = read_model(args.inp)
    scope, roles, gran = scope_args(args)
    _log_resolved(args)
    if net.state != "Full":
        raise UsageError(f"binarize needs a Full model, {args.inp} is {net.state}")
    bnet, report = binarize_network(net, scope, roles, gran)
    write_model(bnet, args.out)
    print(report.to_table(), end="")


def cmd_finetune(args, cfg):
    tr, da, _ = cfg
    config = train_config(args, tr)
    net = read_model(args.inp)
    if net.state not in ("BiPattern", "Refined"):
        raise UsageError(f"finetune needs a BiPattern model, {args.inp} is {net.state}")
    data = load_data(args.data, da)
    _log_resolved(args, config, da)
    with _log_target(args.log) as lf:
        res = run_pipeline(net, data, config, "finetune", log_file=lf)
    write_model(res.net, args.out)
    print(json.dumps({"state": res.net.state, **res.metrics}))


def cmd_quantize(args, cfg):
    net = read_model(args.inp)
    _log_resolved(args)
    if net.state == "BQ":
        raise UsageError(f"{args.inp} is already quantized")
    write_model(quantize8(net, args.per_channel), args.out)


def cmd_eval(args, cfg):
    net = read_model(args.inp)
    data = load_data(args.data, cfg[1])
    _log_resolved(args, data_opts=cfg[1])
    print(json.dumps({"state": net.state, **evaluate(net, data.test)}))


def cmd_report_params(args, cfg):
    net = model_from_args(args, cfg[2])
    _log_resolved(args)
    if args.table:
        print("slot\tencoding\tfull\teffective")
        for row in param_table(net):
            print("\t".join(str(v) for v in row))
    eff = count_params(net, "effective")
    if args.inp is None and args.binarized:
        scope, roles, gran = scope_args(args)
        eff = count_params(binarize_network(net, scope, roles, gran)[0], "effective")
    print(f"full\t{count_params(net, 'full')}\neffective\t{eff}")


def cmd_report_qerror(args, cfg):
    net = model_from_args(args, cfg[2])
    _log_resolved(args)
    print(quantization_error_report(net, args.granularity).to_table(), end="")


def cmd_report_size(args, cfg):
    net = model_from_args(args, cfg[2])
    scope, roles, gran = scope_args(args)
    _log_resolved(args)
    rep = store.size_report(net, scope, roles, gran, args.per_channel)
    if args.table:
        print(rep.to_tsv(), end="")
    else:
        print("\t".join(f"{k}\t{v}" for k, v in rep.totals.items()))


def cmd_export_descriptor(args, cfg):
    net = model_from_args(args, cfg[2])
    _log_resolved(args)
    if args.out is None:
        json.dump(net.describe(), sys.stdout, indent=2)
        print()
    else:
        store.export_descriptor(net, args.out)


COMMANDS = {
    "train": cmd_train, "binarize": cmd_binarize, "finetune": cmd_finetune, "quantize": cmd_quantize,
    "eval": cmd_eval, "report-params": cmd_report_params, "report-qerror": cmd_report_qerror,
    "report-size": cmd_report_size, "export-descriptor": cmd_export_descriptor,
}


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--arch", choices=ARCHS)
    common.add_argument("--data", help="'digits', a CIFAR-10 binary directory or an .npz file")
    common.add_argument("--config", help="JSON file with train/data/arch sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--scope", default="k>1", help="kernel predicate, e.g. k>1, k==1, k==3, k>=3")
    common.add_argument("--all-layers", action="store_true",
                        help="binarize stem/transition/shortcut convs too (default: block convs only)")
    common.add_argument("--granularity", choices=("filter", "kernel"), default="filter")
    common.add_argument("--in", dest="inp", metavar="PATH")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--threads", type=int, help="BLAS worker threads")
    common.add_argument("--log", metavar="PATH", help="training log (tab separated); default stdout")
    common.add_argument("--per-channel", action="store_true", help="per-output-channel 8-bit scales")
    common.add_argument("--table", action="store_true", help="print the per-layer table")
    common.add_argument("--binarized", action="store_true",
                        help="report-params on --arch: also count after binarization")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sepnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def validate(args) -> None:
    if args.command == "train" and not args.arch:
        raise CliError("train needs --arch")
    if args.threads is not None and args.threads < 1:
        raise CliError("--threads must be >= 1")


def _log_resolved(args, config: TrainConfig | None = None, data_opts=None, arch_opts=None):
    resolved = {k: v for k, v in vars(args).items() if v is not None}
    if config is not None:
        resolved["train"] = config.to_dict()
    if data_opts is not None:
        resolved["data"] = {**DATA_KEYS, **data_opts}
    if arch_opts:
        resolved["arch_opts"] = arch_opts
    log.info("resolved configuration: %s", json.dumps(resolved, sort_keys=True, default=str))


@contextlib.contextmanager
def _log_target(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as f:
            yield f


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    log.setLevel(logging.INFO)  # resolved configuration is always logged
    try:
        validate(args)
        cfg = load_config(args.config)
        with _threads(args.threads):
            COMMANDS[args.command](args, cfg)
    except (CliError, UsageError, store.ModelFormatError) as exc:
        print(f"sepnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"sepnet {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
