"""Command-line interface: ``mdcnn {gen,train,eval,permtest,checkgrad}``.

Every option can also come from ``--config FILE`` (``key = value`` lines, keys
spelled like the long flags with ``-`` or ``_``). Flags given on the command line
win over the file. Each run writes the resolved settings to ``<output>.cfg`` so it
can be replayed with ``--config``.

Exit codes: 0 success, 1 check or threshold failure, 2 usage or input error.
"""
import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SequenceDataset, gen_group_sequences, gen_rotating_spd, load_dataset, save_dataset
from .errors import DomainError, FormatError, NumericalError
from .net import NetConfig, parse_kv
from .params import ModelParams
from .stats import PermutationConfig, PermutationError, permutation_test, write_histogram_csv, write_result_csv
from .train import SgdConfig, check_gradients, predict_logits, train_classifier

log = logging.getLogger("mdcnn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _add_arch(p, manifold="spd", dim=3, blocks="1,3,3;3,3,3", nC=4, num_classes=2):
    g = p.add_argument_group("architecture")
    g.add_argument("--arch", help="architecture file (key = value); flags below override it")
    g.add_argument("--manifold", choices=["spd", "sphere"], default=manifold)
    g.add_argument("--dim", type=int, default=dim)
    g.add_argument("--blocks", default=blocks, help="block channel triples, e.g. '1,3,3;3,3,3'")
    g.add_argument("--kernel", type=int, default=3)
    g.add_argument("--nC", type=int, default=nC)
    g.add_argument("--head", choices=["invariant", "tangent"], default="invariant")
    g.add_argument("--num-classes", type=int, default=num_classes)
    g.add_argument("--in-channels", type=int, default=1)


def _add_sgd(p, lr=0.1, epochs=12, batch=16):
    g = p.add_argument_group("optimizer")
    g.add_argument("--lr", type=float, default=lr)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=batch)


def build_parser():
    parser = argparse.ArgumentParser(prog="mdcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    def command(name, help, required=()):
        p = sub.add_parser(name, help=help)
        p.required_keys = required
        parser.subcommands[name] = p
        p.add_argument("--config", help="settings file; command-line flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        return p

    p = command("gen", "generate a synthetic dataset", ("kind", "out"))
    p.add_argument("--kind", choices=["spd-rotating", "groups"])
    p.add_argument("--out", help="output file (groups: stem for _A/_B files)")
    p.add_argument("--n", type=int, default=200, help="sequences per class or per group")
    p.add_argument("--len", type=int, default=20, help="sequence length (groups: maximum length)")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--classes", default="30,60", help="per-step rotation angles in degrees")
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--rate", type=float, default=0.2, help="group A rotation rate (radians per step)")
    p.add_argument("--effect", type=float, default=0.0, help="relative rate increase of group B")

    p = command("train", "train a classifier", ("data", "out"))
    p.add_argument("--data")
    p.add_argument("--out", help="model file (MPAR); the architecture goes to <out>.arch")
    p.add_argument("--history", help="per-epoch CSV (default <out>.history.csv)")
    _add_arch(p)
    _add_sgd(p)

    p = command("eval", "evaluate a classifier", ("data", "model"))
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--arch", help="architecture file (default <model>.arch)")
    p.add_argument("--metrics", help="metrics CSV")

    p = command("permtest", "two-group permutation test", ("a", "b", "out"))
    p.add_argument("--a", help="group A dataset")
    p.add_argument("--b", help="group B dataset")
    p.add_argument("--out", help="per-permutation result CSV")
    p.add_argument("--hist", help="null histogram CSV (default <out>.hist.csv)")
    p.add_argument("--perms", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--pretrain-epochs", type=int, default=20)
    p.add_argument("--finetune-epochs", type=int, default=5)
    _add_arch(p, manifold="sphere", dim=8, blocks="1,1,1", nC=1)
    _add_sgd(p, lr=0.05, epochs=1, batch=64)

    p = command("checkgrad", "compare gradients with central differences")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--len", type=int, default=8)
    p.add_argument("--corrupt-adjoint", metavar="GROUP", help="test hook: scale one group's adjoint by 1.5")
    p.add_argument("--out", help="per-group report CSV")
    _add_arch(p, blocks="1,3,3;3,3,3;3,3,3")
    return parser


# --- config handling ---------------------------------------------------------

def _read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        return {k.replace("-", "_"): v for k, v in parse_kv(text).items()}
    except DomainError as exc:
        raise UsageError(f"{path}: {exc}") from None


def parse_args(argv):
    """Parse flags, filling anything not given on the command line from ``--config``."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = _read_config(args.config)
        values.pop("command", None)
        values.pop("config", None)
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    if args.command != "eval" and getattr(args, "arch", None):
        try:
            arch = parse_kv(Path(args.arch).read_text())
        except (OSError, DomainError) as exc:
            raise UsageError(f"cannot read architecture {args.arch}: {exc}") from None
        parser.subcommands[args.command].set_defaults(**arch)
        args = parser.parse_args(argv)
    missing = [k for k in parser.subcommands[args.command].required_keys if getattr(args, k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def dump_config(args, path):
    skip = {"config", "verbose"}
    lines = [f"command = {args.command}"]
    lines += [f"{k} = {v}" for k, v in sorted(vars(args).items())
              if k not in skip | {"command"} and v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def arch_from_args(args):
    keys = ("manifold", "dim", "blocks", "kernel", "nC", "head", "num_classes", "in_channels")
    return NetConfig.from_mapping({k: getattr(args, k) for k in keys})


def _sgd(args, **over):
    return replace(SgdConfig(args.lr, args.momentum, args.epochs, args.batch_size, args.seed), **over)


def _check_data(config, ds):
    space, data_space = config.space, ds.manifold
    if space.kind != data_space.kind:
        raise UsageError(f"model is on {space.kind} but data is on {data_space.kind}")
    if space.dim != data_space.dim:
        raise UsageError(f"model expects dim {space.dim} but data has dim {data_space.dim}")
    if ds.channels != config.in_channels:
        raise UsageError(f"model expects {config.in_channels} channels but data has {ds.channels}")


# --- commands ------------------------------------------------------------------

def cmd_gen(args):
    if args.kind == "spd-rotating":
        noise = 0.05 if args.noise is None else args.noise
        ds = gen_rotating_spd(args.n, args.len, args.dim, _floats(args.classes), noise, args.seed)
        save_dataset(ds, args.out)
        print(f"wrote {args.out}: {len(ds)} sequences on {ds.manifold!r}, length {args.len}, "
              f"{len(_floats(args.classes))} classes")
        outputs = [args.out]
    else:
        noise = 0.3 if args.noise is None else args.noise
        a, b = gen_group_sequences(args.n, args.len, args.dim, args.rate, args.effect, args.seed, noise)
        stem = str(args.out)[:-4] if str(args.out).endswith(".msq") else str(args.out)
        outputs = []
        for tag, seqs in (("A", a), ("B", b)):
            ds = SequenceDataset(seqs[0].manifold, 1)
            for s in seqs:
                ds.append(s)
            path = f"{stem}_{tag}.msq"
            save_dataset(ds, path)
            outputs.append(path)
            print(f"wrote {path}: {len(ds)} sequences on {ds.manifold!r}, lengths "
                  f"{min(s.length for s in seqs)}..{max(s.length for s in seqs)}")
    dump_config(args, outputs[0] + ".cfg")
    return EXIT_OK


def cmd_train(args):
    config = arch_from_args(args)
    ds = load_dataset(args.data)
    _check_data(config, ds)
    X, y = ds.arrays()
    if np.any(y < 0):
        raise UsageError(f"{args.data} has unlabeled sequences")
    t0 = time.perf_counter()
    params, history = train_classifier(config, (X, y), _sgd(args))
    params.save(args.out)
    Path(args.out + ".arch").write_text(config.to_text())
    hist_path = args.history or args.out + ".history.csv"
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "accuracy"])
        for h in history:
            w.writerow([h["epoch"], repr(h["loss"]), repr(h["accuracy"])])
    dump_config(args, args.out + ".cfg")
    last = history[-1] if history else {"loss": float("nan"), "accuracy": float("nan")}
    print(f"trained {len(params)} parameters for {len(history)} epochs: loss {last['loss']:.4f}, "
          f"train accuracy {last['accuracy']:.4f}")
    print(f"wall time {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    arch = args.arch or args.model + ".arch"
    try:
        config = NetConfig.from_text(Path(arch).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read architecture {arch}: {exc}") from None
    params = ModelParams.load(args.model)
    if params.index_map() != ModelParams(config.param_specs()).index_map():
        raise UsageError(f"{args.model} does not match architecture {arch}")
    ds = load_dataset(args.data)
    _check_data(config, ds)
    X, y = ds.arrays()
    pred = np.argmax(predict_logits(config, params, X), axis=1)
    acc = float(np.mean(pred == y))
    k = config.num_classes
    confusion = np.zeros((k, k), dtype=int)
    valid = (y >= 0) & (y < k)
    np.add.at(confusion, (y[valid], pred[valid]), 1)
    print(f"accuracy {acc:.4f} on {len(y)} sequences")
    for i in range(k):
        print(f"class {i}: " + " ".join(str(c) for c in confusion[i]))
    if args.metrics:
        with open(args.metrics, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "true", "predicted", "value"])
            w.writerow(["accuracy", "", "", repr(acc)])
            for i in range(k):
                for j in range(k):
                    w.writerow(["count", i, j, int(confusion[i, j])])
        dump_config(args, args.metrics + ".cfg")
    return EXIT_OK


def cmd_permtest(args):
    config = arch_from_args(args)
    a, b = load_dataset(args.a), load_dataset(args.b)
    for ds in (a, b):
        _check_data(config, ds)
    perm = PermutationConfig(args.perms, args.alpha, args.seed, args.pretrain_epochs,
                             args.finetune_epochs, args.threads)
    t0 = time.perf_counter()
    result = permutation_test(a.sequences, b.sequences, config, _sgd(args), perm)
    write_result_csv(result, args.out)
    write_histogram_csv(result, args.hist or args.out + ".hist.csv")
    dump_config(args, args.out + ".cfg")
    print(f"sigma {result.sigma_observed:.6g}")
    print(f"p-value {result.p_value:.4g} ({args.perms} permutations)")
    print(f"wall time {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_checkgrad(args):
    config = arch_from_args(args)
    t0 = time.perf_counter()
    report = check_gradients(config, args.seed, args.batch, args.len, corrupt=args.corrupt_adjoint)
    for name, g in report["groups"].items():
        print(f"{name:16s} max_abs {g['max_abs']:.3e} max_rel {g['max_rel']:.3e}")
    diag = report["diagnostics"]
    print(f"finite-difference fallbacks: {diag['fd_fallback_nodes']} nodes, "
          f"{diag['fd_fallback_matrices']} matrices")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "max_abs", "max_rel"])
            for name, g in report["groups"].items():
                w.writerow([name, repr(g["max_abs"]), repr(g["max_rel"])])
        dump_config(args, args.out + ".cfg")
    print(f"wall time {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    if report["passed"]:
        print(f"PASS max relative error {report['max_rel']:.3e}")
        return EXIT_OK
    print(f"FAIL max relative error {report['max_rel']:.3e} at parameter {report['worst_index']} "
          f"({report['worst_group']})")
    return EXIT_FAIL


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "permtest": cmd_permtest, "checkgrad": cmd_checkgrad}


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return exc.code
    except UsageError as exc:
        print(f"mdcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("mdcnn: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DomainError, FormatError, OSError, ValueError) as exc:
        print(f"mdcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, PermutationError) as exc:
        print(f"mdcnn {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
