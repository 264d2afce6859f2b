"""Command-line surface: search, child training, evaluation, cost reports,
the brute-force oracle, architecture sampling, and figure rendering.

Every subcommand takes a JSON config; unknown keys abort with the
offending key path and a nonzero exit.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .cost import cost_report
from .engine import checkpoint
from .oracle import DesignSpace, oracle_rank, percentile_of, write_oracle_csv
from .pipeline import (
    ChildConfig, DivergedError, SearchConfig, child_seed, evaluate,
    load_results_csv, run_search, stream, train_child, write_results_csv,
)
from .supernet import (
    Architecture, arch_from_json, arch_to_json, build_child,
    sample_architecture,
)


def _load(args):
    return cfgmod.load_config(args.config)


def _read_arch(spec, path):
    with open(path) as f:
        return arch_from_json(spec, json.load(f))


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_search(args) -> int:
    cfg = _load(args)
    spec = cfgmod.build_space(cfg["space"])
    train, _ = cfgmod.build_datasets(cfg["data"])
    cost_cfg = cfgmod.build_cost_config(cfg["cost"])
    seed = cfg["seed"] if args.seed is None else args.seed
    scfg = SearchConfig.from_dict(cfg["search"], seed=seed)
    res = run_search(spec, scfg, cost_cfg, train, args.out,
                     resolved_config=cfg)
    with open(os.path.join(args.out, "selected.json")) as f:
        selected = json.load(f)
    _emit({"out": args.out, "sampled": len(res.queue),
           "selected": {"blocks": selected["blocks"],
                        "compression": selected["cost_report"]["compression"]}})
    return 0


def cmd_train_child(args) -> int:
    cfg = _load(args)
    spec = cfgmod.build_space(cfg["space"])
    train, test = cfgmod.build_datasets(cfg["data"])
    arch = _read_arch(spec, args.arch)
    ccfg = ChildConfig.from_dict(cfg["child"])
    seed = cfg["seed"] if args.seed is None else args.seed
    res = train_child(spec, arch, train, test, ccfg,
                      seed=child_seed(spec, arch, seed))
    out = {"encoding": arch.encoding(spec), "failed": res.failed,
           "accuracy": res.accuracy}
    if args.out and res.net is not None:
        os.makedirs(args.out, exist_ok=True)
        name = os.path.splitext(os.path.basename(args.arch))[0]
        ckpt = os.path.join(args.out, f"child-{name}.ckpt")
        checkpoint.save_checkpoint(ckpt, res.net.state_dict())
        out["checkpoint"] = ckpt
        _update_results(args.out, spec, name, res)
    _emit(out)
    return 0


def _update_results(out_dir, spec, arch_name, res):
    """When the arch came from <run>/archs/NNN.json, fill that results row."""
    path = os.path.join(out_dir, "results.csv")
    if not (arch_name.isdigit() and os.path.exists(path)):
        return
    rows = load_results_csv(path)
    for row in rows:
        if int(row["arch_id"]) == int(arch_name):
            row["test_accuracy"] = "failed" if res.failed \
                else repr(float(res.accuracy))
    import csv as csvmod
    from .pipeline import RESULTS_HEADER
    with open(path, "w", newline="") as f:
        w = csvmod.writer(f)
        w.writerow(RESULTS_HEADER)
        for row in rows:
            w.writerow([row[k] for k in RESULTS_HEADER])


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.data)
    spec = cfgmod.build_space(cfg["space"])
    _, test = cfgmod.build_datasets(cfg["data"])
    arch = _read_arch(spec, args.arch)
    net = build_child(spec, arch, stream(0, 0))
    net.load_state_dict(checkpoint.load_checkpoint(args.checkpoint))
    _emit({"accuracy": evaluate(net, test), "examples": len(test.labels)})
    return 0


def cmd_cost(args) -> int:
    cfg = cfgmod.load_config(args.spec)
    spec = cfgmod.build_space(cfg["space"])
    cost_cfg = cfgmod.build_cost_config(cfg["cost"])
    if args.objective:
        objective = {"size": "model-size", "flops": "compute"}[args.objective]
        cost_cfg = cfgmod.build_cost_config({**cfg["cost"],
                                             "objective": objective})
    arch = _read_arch(spec, args.arch)
    _emit(cost_report(spec, arch, cost_cfg).to_json())
    return 0


def cmd_oracle(args) -> int:
    cfg = _load(args)
    spec = cfgmod.build_space(cfg["space"])
    train, test = cfgmod.build_datasets(cfg["data"])
    cost_cfg = cfgmod.build_cost_config(cfg["cost"])
    ocfg = cfg["oracle"]
    budget = ChildConfig(epochs=ocfg["epochs"], batch_size=ocfg["batch_size"],
                         lr=ocfg["lr"], momentum=ocfg["momentum"],
                         weight_decay=ocfg["weight_decay"],
                         cutout=ocfg["cutout"])
    space = DesignSpace(spec, limit=ocfg["limit"])
    seed = cfg["seed"] if args.seed is None else args.seed
    entries = oracle_rank(space, train, test, budget, cost_cfg, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    write_oracle_csv(os.path.join(args.out, "oracle_results.csv"), entries)
    best = entries[0]
    _emit({"out": args.out, "space_size": space.size,
           "best": {"encoding": best.encoding, "loss": best.loss,
                    "accuracy": best.accuracy}})
    return 0


def cmd_sample(args) -> int:
    cfg = _load(args)
    spec = cfgmod.build_space(cfg["space"])
    with open(args.theta) as f:
        snap = json.load(f)
    try:
        thetas = [np.asarray(snap["theta"][b.id], dtype=np.float64)
                  for b in spec.blocks]
    except KeyError as e:
        raise ConfigError(f"theta snapshot missing block {e}")
    rng = stream(args.seed, 6, 0)
    out = []
    for i in range(args.n):
        arch = sample_architecture(spec, thetas, rng,
                                   meta={"seed": args.seed, "draw": i})
        out.append(arch_to_json(spec, arch))
    _emit(out)
    return 0


def cmd_report(args) -> int:
    from .report import render_run
    written = render_run(args.run, args.out)
    _emit({"figures": written})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bitnas",
        description="mixed-precision architecture search toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the differentiable search")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_search)

    s = sub.add_parser("train-child", help="train one sampled architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_train_child)

    s = sub.add_parser("eval", help="evaluate a child checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True,
                   help="config file providing the data and space sections")
    s.add_argument("--arch", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("cost", help="cost report for an architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--spec", required=True,
                   help="config file providing the space section")
    s.add_argument("--objective", choices=("size", "flops"), default=None)
    s.set_defaults(fn=cmd_cost)

    s = sub.add_parser("oracle", help="exhaustively rank a tiny design space")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("sample", help="draw architectures from a theta snapshot")
    s.add_argument("--config", required=True)
    s.add_argument("--theta", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("report", help="render figures from a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
