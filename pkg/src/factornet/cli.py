"""Command line entry point: train, suite, check, diagnose."""
import argparse
import json
import logging
import os
import sys
from importlib import resources

from . import diagnostics as diag
from .factorization import weighted_layers
from .harness import (ExperimentConfig, Grid, default_out_dir, load_checkpoint,
                      model_from_checkpoint, run_suite, train, write_run)
from .tensor import Rng, frobenius_norm, spectral_norm


def resolve_path(name):
    """A file path, or the name of a config shipped with the package."""
    if os.path.exists(name):
        return name
    stem = name if name.endswith(".json") else name + ".json"
    shipped = resources.files("factornet") / "configs" / stem
    if shipped.is_file():
        return str(shipped)
    raise FileNotFoundError(f"no config file or shipped config named {name!r}")


def shipped_configs():
    root = resources.files("factornet") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def cmd_train(args):
    cfg = ExperimentConfig.load(resolve_path(args.config))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg = cfg.replace(**overrides)
    out = os.path.join(args.out or default_out_dir(), cfg.name, f"seed{cfg.seed}")
    res = train(cfg)
    write_run(res, out)
    for k, v in sorted(res.metrics.items()):
        print(f"{k}: {v:.6g}")
    print(f"wrote {out}")
    return 0


def cmd_suite(args):
    grid = Grid.load(resolve_path(args.grid))
    out = os.path.join(args.out or default_out_dir(), grid.name)
    res = run_suite(grid, out)
    for cell, stats in res.summary.items():
        acc = stats.get("eval_accuracy")
        if acc:
            print(f"{cell}: eval_accuracy {acc[0]:.4f} +- {acc[1]:.4f}")
    for c in res.checks:
        tag = "PASS" if c["passed"] else "FAIL"
        note = "" if c.get("enforced", True) else " (reported only)"
        print(f"[{tag}] {c['description']}{note}")
    for cell, seed, err in res.failures:
        print(f"[FAIL] run {cell} seed {seed}: {err}")
    print(f"wrote {os.path.join(out, 'summary.csv')}")
    failed = res.failures or any(not c["passed"] and c.get("enforced", True) for c in res.checks)
    return 1 if failed else 0


def cmd_check(args):
    from .checks import run_fast_checks

    results = run_fast_checks()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def diagnose(ckpt):
    cfg, model = model_from_checkpoint(ckpt)
    lr = cfg.lr
    report = {"config": cfg.name, "step": ckpt["step"], "layers": {}}
    mats = []
    for layer in weighted_layers(model):
        W = layer.dense_matrix()
        mats.append(W)
        entry = {"frobenius": frobenius_norm(W), "spectral": spectral_norm(W),
                 "normalized": bool(getattr(layer, "normalized", False))}
        w = layer.weight
        if hasattr(w, "inner"):
            entry["rank"] = w.rank
            entry["depth"] = w.depth
            if not w.inner:
                from .regularization import nuclear_bound_gap

                bound, nuc, gap = nuclear_bound_gap(w)
                entry.update(nuclear=nuc, factor_bound=bound, gap=gap)
                G = Rng(0, 90).normal(w.target_shape)
                fit = diag.update_order_check(w.U.value, w.V.value, G)
                entry["update_order_slope"] = fit.slope
        report["layers"][layer.name] = entry
    normalized = [l for l in diag.normalized_weighted_layers(model) if hasattr(l.weight, "inner")]
    if normalized:
        report["eff_step_size"] = diag.effective_step_size(model, lr, normalized)
    if mats:
        width = max(max(W.shape) for W in mats)
        inp = diag.BoundInputs(mats, margin=1.0, data_bound=1.0,
                               n_samples=cfg.n_train, width=width)
        report["frobenius_bound_term"] = diag.frobenius_bound(inp)
        ranks = [min(W.shape) for W in mats]
        report["rank_bound_term"] = diag.rank_bound(inp, max(ranks))
    return report


def cmd_diagnose(args):
    report = diagnose(load_checkpoint(args.checkpoint))
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="factornet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one config")
    t.add_argument("--config", required=True, help="config path or shipped config name")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output root (default: $FACTORNET_OUT or ./runs)")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("suite", help="run a grid of configs x seeds")
    s.add_argument("--grid", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_suite)

    c = sub.add_parser("check", help="run the oracle and invariant verifiers")
    c.set_defaults(fn=cmd_check)

    d = sub.add_parser("diagnose", help="norm, bound and update-rule report for a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.set_defaults(fn=cmd_diagnose)

    sub.add_parser("list", help="list shipped configs").set_defaults(
        fn=lambda a: print("\n".join(shipped_configs())) or 0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
