"""Desk-scale run on MNIST: baseline, 4x ceiling compression, early-vs-late sweep.

    CEILCOMP_DATA_DIR=/path/to/data python3 scripts/mnist_experiment.py --out-dir runs/mnist

Writes checkpoints, training logs, plan JSON, an SVG report and results.json.
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from ceilcomp.arch import load_arch
from ceilcomp.data import load_dataset
from ceilcomp.network import NetworkGraph
from ceilcomp.planner import plan_ceiling, profile, report_svg
from ceilcomp.store import export_folded, save_checkpoint
from ceilcomp.trainer import TrainConfig, compress_single_site, evaluate, progressive_compress, train_baseline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir")
    ap.add_argument("--out-dir", default="runs/mnist")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--baseline-epochs", type=int, default=4)
    ap.add_argument("--epochs-per-insertion", type=int, default=2)
    ap.add_argument("--final-epochs", type=int, default=4)
    ap.add_argument("--ceiling-factor", type=float, default=4.0)
    ap.add_argument("--channel-factor", type=int, default=8, help="c/k for the early-vs-late sweep")
    ap.add_argument("--sweep-epochs", type=int, default=2)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cfg = TrainConfig(seed=args.seed, baseline_epochs=args.baseline_epochs,
                      epochs_per_insertion=args.epochs_per_insertion, final_epochs=args.final_epochs)
    ds = load_dataset("mnist", args.data_dir, seed=cfg.seed)
    results = {"config": vars(args)}

    t = time.time()
    base = train_baseline(NetworkGraph.from_arch(load_arch("mnist_convnet"), seed=cfg.seed), ds, cfg,
                          log_path=out / "baseline_log.csv")
    base.net.freeze()
    base_test = evaluate(base.net, ds, "test")
    save_checkpoint(base, out / "baseline.ceil")
    results["baseline"] = {"val_acc": base.val_acc, "test_acc": base_test, "seconds": time.time() - t}

    inv = profile(base.net.arch())
    plan = plan_ceiling(inv, ceiling_factor=args.ceiling_factor)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True))
    t = time.time()
    comp = progressive_compress(base, plan, ds, cfg, log_path=out / "compress_log.csv")
    comp_test = evaluate(comp.net, ds, "test")
    save_checkpoint(comp, out / "compressed.ceil", plan=plan)
    folded = export_folded(comp.net, out / "folded.ceil", explicit_lift=True, plan=plan)
    (out / "report.svg").write_text(report_svg(inv, plan))
    base_ok = all(np.array_equal(a, comp.net.get(k)) for k, a in base.net.named_tensors())
    results["compressed"] = {
        "assignments": plan.assignments, "overall_compression": plan.overall_compression,
        "val_acc": comp.val_acc, "test_acc": comp_test, "delta_pp": 100 * (comp_test - base_test),
        "base_bit_exact": base_ok, "params_unfolded": comp.net.num_param_elements(),
        "params_folded": folded.num_param_elements(), "seconds": time.time() - t,
    }

    sites = [e for e in inv.entries if not e.classifier]
    sweep = {}
    for e in (sites[0], sites[-1]):
        t = time.time()
        k = max(1, e.c // args.channel_factor)
        ck = compress_single_site(base, e.site, k, ds, cfg, args.sweep_epochs)
        acc = evaluate(ck.net, ds, "test")
        sweep[e.site] = {"c": e.c, "k": k, "test_acc": acc, "drop_pp": 100 * (base_test - acc),
                         "seconds": time.time() - t}
    results["early_vs_late"] = sweep
    (out / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    print(json.dumps(results, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
