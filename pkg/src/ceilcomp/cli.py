"""Command-line entry point: ``ceilcomp <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numerical error or infeasible ceiling. Failures print one line
``error,<code>,<kind>,<message>`` on standard error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from .arch import load_arch, with_input
from .data import DATASETS, load_dataset
from .errors import CeilCompError, ConfigurationError, DataIOError, ParameterError
from .network import NetworkGraph
from .planner import CeilingPlan, compression_report, largest_fm_ratio, plan_ceiling, profile, report_csv, report_svg
from .projection import projections
from .store import export_folded, load_checkpoint, load_model, read_header, save_checkpoint
from .trainer import TrainConfig, evaluate, progressive_compress, train_baseline

log = logging.getLogger("ceilcomp")


class UsageError(CeilCompError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _shape(text):
    try:
        dims = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"expected positive dimensions, got {text!r}")
    return dims


def build_parser():
    p = _Parser(prog="ceilcomp", description="Feature-map ceiling compression with folded channel projections.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr (-vv for debug)")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    def arch_flags(sp, required=True):
        sp.add_argument("--arch", required=required, help="catalog name or .arch file")
        sp.add_argument("--input", type=_shape, help="input shape CxHxW (default: the description's own)")

    def train_flags(sp):
        sp.add_argument("--dataset", required=True, choices=DATASETS)
        sp.add_argument("--data-dir", help="dataset directory (default: $CEILCOMP_DATA_DIR/<dataset>)")
        sp.add_argument("--config", help="key = value file overriding training defaults")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--log", help="write the per-epoch training log (CSV) here")

    sp = sub.add_parser("profile", help="stored feature-map inventory and largest_fm_ratio")
    arch_flags(sp)
    sp.add_argument("--format", choices=("csv", "svg"), default="csv")
    sp.add_argument("--out", help="write the report here instead of stdout")

    sp = sub.add_parser("plan", help="assign projection ranks under a feature-map ceiling")
    arch_flags(sp)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--ceiling-factor", type=float)
    g.add_argument("--ceiling-elements", type=int)
    sp.add_argument("--format", choices=("csv", "svg"), default="csv")
    sp.add_argument("--out", help="write the plan (JSON) here")
    sp.add_argument("--report", help="write the report here instead of stdout")

    sp = sub.add_parser("train-baseline", help="train an uncompressed network")
    arch_flags(sp, required=False)
    train_flags(sp)
    sp.add_argument("--epochs", type=int, help="baseline epochs")
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = sub.add_parser("compress", help="insert and fine-tune projections on a frozen baseline")
    sp.add_argument("--ckpt", required=True, help="baseline checkpoint")
    sp.add_argument("--plan", required=True, help="plan JSON written by 'plan --out'")
    train_flags(sp)
    sp.add_argument("--init", choices=("svd", "pca", "random"))
    sp.add_argument("--epochs-per-insertion", type=int)
    sp.add_argument("--final-epochs", type=int)
    sp.add_argument("--out", required=True, help="compressed checkpoint path")

    sp = sub.add_parser("fold", help="fold every lift into its consumer and export")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--explicit-lift", action="store_true", help="keep a 1x1 lift before non-convolution consumers")

    sp = sub.add_parser("eval", help="accuracy of a checkpoint or exported model")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--model")
    sp.add_argument("--dataset", required=True, choices=DATASETS)
    sp.add_argument("--data-dir")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--seed", type=int, default=0, help="seed of the train/val split")

    sp = sub.add_parser("report", help="before/after feature-map bars with the ceiling line")
    sp.add_argument("--ckpt-before", required=True)
    sp.add_argument("--ckpt-after", required=True)
    sp.add_argument("--out", required=True, help="SVG path; the CSV goes to stdout")
    return p


# ---------------------------------------------------------------- helpers


def _need_file(path, what):
    if not Path(path).is_file():
        raise DataIOError(f"{what} not found: {path}")


def _arch(args):
    arch = load_arch(args.arch)
    if args.input is not None and tuple(args.input) != tuple(arch.input_shape):
        arch = with_input(arch, args.input)
    return arch


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _train_config(args):
    overrides = {
        "seed": args.seed,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "baseline_epochs": getattr(args, "epochs", None),
        "init": getattr(args, "init", None),
        "epochs_per_insertion": getattr(args, "epochs_per_insertion", None),
        "final_epochs": getattr(args, "final_epochs", None),
    }
    if args.config:
        _need_file(args.config, "config file")
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def _empty_plan(inv):
    top = inv.max_elements()
    sizes = {e.site: e.elements for e in inv.entries}
    return CeilingPlan(top, 1.0, {}, dict(sizes), dict(sizes), 1.0)


def _check_input(net, ds):
    if tuple(ds.images.shape[1:]) != tuple(net.input_shape):
        raise ConfigurationError(
            f"dataset images are {'x'.join(map(str, ds.images.shape[1:]))}, "
            f"network expects {'x'.join(map(str, net.input_shape))}"
        )


# ---------------------------------------------------------------- subcommands


def cmd_profile(args):
    arch = _arch(args)
    inv = profile(arch)
    ratio = largest_fm_ratio(arch)
    summary = f"largest_fm_ratio,{100 * ratio:.1f}%\nmax_elements,{inv.max_elements()}\n"
    if args.format == "csv":
        _emit(report_csv(inv, _empty_plan(inv)) + summary, args.out)
    else:
        svg = report_svg(inv, _empty_plan(inv))
        if args.out:
            Path(args.out).write_text(svg)
            sys.stdout.write(summary)
        else:
            sys.stdout.write(f"<!-- {summary.strip()} -->\n" + svg)
    return 0


def cmd_plan(args):
    inv = profile(_arch(args))
    plan = plan_ceiling(inv, ceiling_factor=args.ceiling_factor, ceiling_elements=args.ceiling_elements)
    if args.out:
        Path(args.out).write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True) + "\n")
    report = compression_report(inv, plan, args.format)
    summary = (
        f"ceiling_elements,{plan.ceiling_elements}\n"
        f"ceiling_factor,{plan.ceiling_factor:.2f}x\n"
        f"overall_compression,{plan.overall_compression:.2f}x\n"
        + "".join(f"warning,{w}\n" for w in plan.warnings)
    )
    if args.report:
        Path(args.report).write_text(report)
        sys.stdout.write(summary)
    elif args.format == "csv":
        sys.stdout.write(report + summary)
    else:
        sys.stdout.write(report)
    return 0


def cmd_train_baseline(args):
    cfg = _train_config(args)
    arch = _arch(args) if args.arch else load_arch("mnist_convnet")
    ds = load_dataset(args.dataset, args.data_dir, seed=cfg.seed)
    net = NetworkGraph.from_arch(arch, seed=cfg.seed)
    _check_input(net, ds)
    ckpt = train_baseline(net, ds, cfg, log_path=args.log)
    ckpt.net.freeze()
    test = evaluate(ckpt.net, ds, "test")
    ckpt.meta.update({"test_acc": test, "dataset": args.dataset, "seed": cfg.seed})
    save_checkpoint(ckpt, args.out, metadata={"kind": "baseline"})
    print(f"val_acc,{ckpt.val_acc:.4f}\ntest_acc,{test:.4f}")
    return 0


def cmd_compress(args):
    _need_file(args.ckpt, "checkpoint")
    _need_file(args.plan, "plan")
    cfg = _train_config(args)
    try:
        plan = CeilingPlan.from_dict(json.loads(Path(args.plan).read_text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParameterError(f"unreadable plan file {args.plan}: {exc}") from None
    base = load_checkpoint(args.ckpt)
    ds = load_dataset(args.dataset, args.data_dir, seed=cfg.seed)
    _check_input(base.net, ds)
    base_test = evaluate(base.net, ds, "test")
    ckpt = progressive_compress(base, plan, ds, cfg, log_path=args.log)
    test = evaluate(ckpt.net, ds, "test")
    ckpt.meta.update({"test_acc": test, "baseline_test_acc": base_test})
    save_checkpoint(ckpt, args.out, plan=plan, metadata={"kind": "compressed"})
    print(f"baseline_test_acc,{base_test:.4f}\nval_acc,{ckpt.val_acc:.4f}\ntest_acc,{test:.4f}\n"
          f"delta_pp,{100 * (test - base_test):+.2f}")
    return 0


def cmd_fold(args):
    _need_file(args.ckpt, "checkpoint")
    header = read_header(args.ckpt)
    ckpt = load_checkpoint(args.ckpt)
    folded = export_folded(ckpt.net, args.out, explicit_lift=args.explicit_lift, plan=header.get("plan"))
    print(f"params_before,{ckpt.net.num_param_elements()}\nparams_after,{folded.num_param_elements()}")
    return 0


def cmd_eval(args):
    path = args.ckpt or args.model
    _need_file(path, "model file")
    net = load_checkpoint(path).net if args.ckpt else load_model(path)[0]
    ds = load_dataset(args.dataset, args.data_dir, seed=args.seed)
    _check_input(net, ds)
    print(f"accuracy,{evaluate(net, ds, args.split):.4f}")
    return 0


def cmd_report(args):
    _need_file(args.ckpt_before, "checkpoint")
    _need_file(args.ckpt_after, "checkpoint")
    before = load_checkpoint(args.ckpt_before).net
    after_header = read_header(args.ckpt_after)
    after = load_checkpoint(args.ckpt_after).net
    inv = profile(before.arch())
    ranks = {site: pair.k for site, pair in projections(after).items()}
    after_sizes = {e.site: ranks[e.site] * e.spatial if e.site in ranks else e.elements for e in inv.entries}
    if after_header.get("plan"):
        plan = CeilingPlan.from_dict(after_header["plan"])
    else:
        plan = _empty_plan(inv)
        plan.ceiling_elements = max(after_sizes.values())
    plan.predicted = after_sizes
    Path(args.out).write_text(report_svg(inv, plan, before={e.site: e.elements for e in inv.entries}, after=after_sizes))
    sys.stdout.write(report_csv(inv, plan))
    return 0


COMMANDS = {
    "profile": cmd_profile,
    "plan": cmd_plan,
    "train-baseline": cmd_train_baseline,
    "compress": cmd_compress,
    "fold": cmd_fold,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
            format="%(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](args)
    except UsageError as exc:
        msg = str(exc).splitlines()
        print(f"error,1,usage,{msg[0]}", file=sys.stderr)
        print(parser.format_usage().strip(), file=sys.stderr)
        return 1
    except CeilCompError as exc:
        print(f"error,{exc.exit_code},{exc.kind},{_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error,2,io,{_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc):
    return " ".join(str(exc).split())


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
