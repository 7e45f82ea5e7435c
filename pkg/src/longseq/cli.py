"""Command line entry point: ``longseq {train,compare,ablate,estimate,validate-config}``.

Exit codes: 0 ok, 1 run error, 2 config error, 3 equivalence verdict failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import yaml

from . import __version__
from . import memest as M
from .errors import ConfigError, ValidationError

log = logging.getLogger("longseq")

EXIT_OK, EXIT_RUN, EXIT_CONFIG, EXIT_VERDICT = 0, 1, 2, 3

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mib": 1 << 20,
          "g": 1 << 30, "gib": 1 << 30, "kb": 10 ** 3, "mb": 10 ** 6, "gb": 10 ** 9}


def parse_bytes(text: str) -> int:
    """'67108864', '64MiB', '64M' or '1.5GiB' -> bytes. 'none' -> None."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"not a byte size: {text!r} (e.g. 64MiB or 67108864)")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def _budget(text: str):
    return None if text.lower() in ("none", "off") else parse_bytes(text)


def _run_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", help="output directory for artifacts")
    p.add_argument("--precision", choices=["float64", "float32"], help="override train.precision")
    p.add_argument("--device-budget", type=_budget, default=argparse.SUPPRESS,
                   help="simulated device memory per rank, e.g. 64MiB, or 'none'")
    p.add_argument("--host-budget", type=_budget, default=argparse.SUPPRESS,
                   help="simulated host memory per rank, e.g. 1GiB, or 'none'")


def load_config(path: str | None, args: argparse.Namespace):
    from .train import RunConfig

    cfg = RunConfig.load(path) if path else RunConfig.from_dict({})
    feats, train = {}, {}
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "precision", None):
        train["precision"] = args.precision
    if hasattr(args, "device_budget"):
        feats["device_budget"] = args.device_budget
    if hasattr(args, "host_budget"):
        feats["host_budget"] = args.host_budget
    if feats or train:
        cfg = cfg.replace(features=feats, train=train)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="longseq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run training and write loss, ledger and comm artifacts")
    _run_overrides(p)

    p = sub.add_parser("compare", help="run two configs and compare per-step losses")
    _run_overrides(p)
    p.add_argument("--other", help="second config; default is the matched single-rank baseline")
    p.add_argument("--tolerance", type=float, default=1e-8)

    p = sub.add_parser("ablate", help="max feasible seqlen per feature row under a device budget")
    _run_overrides(p)
    p.add_argument("--sp", type=int, default=8, help="SP degree for the ulysses rows")
    p.add_argument("--resolution", type=float, default=0.02, help="relative bisection resolution")

    p = sub.add_parser("estimate", help="closed-form memory estimates")
    p.add_argument("--preset", choices=sorted(M.PRESETS))
    p.add_argument("--params", type=float, help="parameter count, e.g. 8e9")
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--seqlen", type=int, default=125_000)
    p.add_argument("--sp", type=int, default=1)
    p.add_argument("--world-size", type=int, default=1)
    p.add_argument("--gpus-per-node", type=int, default=8)
    p.add_argument("--anchors", action="store_true", help="print the recomputed published anchors")
    p.add_argument("--format", choices=["json", "table"], default="table")
    p.add_argument("--out", help="also write the JSON here")

    p = sub.add_parser("validate-config", help="check a config file against the schema")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--schema", action="store_true", help="print the schema instead")
    return ap


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _train(args) -> int:
    from .train import cmd_train

    cfg = load_config(args.config, args)
    res = cmd_train(cfg, out_dir=args.out)
    rep = res.report()
    print(json.dumps({k: rep[k] for k in ("seed", "final_loss", "peak_device_bytes", "peak_host_bytes",
                                          "wall_time_s")}))
    return EXIT_OK


def _compare(args) -> int:
    from .train import RunConfig, cmd_compare, matched_baseline

    a = load_config(args.config, args)
    b = load_config(args.other, args) if args.other else matched_baseline(a)
    res = cmd_compare(a, b, args.tolerance, out_dir=args.out)
    verdict = "PASS" if res.passed else "FAIL"
    print(f"{verdict} max |loss_a - loss_b| = {res.max_abs_diff:.3e} over {len(res.per_step)} steps "
          f"(tolerance {res.tolerance:g})")
    return EXIT_OK if res.passed else EXIT_VERDICT


def _ablate(args) -> int:
    from .train import RunConfig, ablation_base_config, cmd_ablate, format_ablation_csv

    base = RunConfig.load(args.config) if args.config else ablation_base_config()
    if args.seed is not None or args.precision or hasattr(args, "device_budget") or hasattr(args, "host_budget"):
        feats, train = {}, {}
        if args.seed is not None:
            train["seed"] = args.seed
        if args.precision:
            train["precision"] = args.precision
        for k in ("device_budget", "host_budget"):
            if hasattr(args, k):
                feats[k] = getattr(args, k)
        base = base.replace(features=feats, train=train)
    table = cmd_ablate(base, sp=args.sp, resolution=args.resolution, out_dir=args.out)
    print(f"device budget: {base.features.device_budget} bytes")
    print(format_ablation_csv(table), end="")
    return EXIT_RUN if any(r.error for r in table) else EXIT_OK


def _estimate(args) -> int:
    if args.anchors:
        got = M.published_anchors()
        doc = {k: {"computed": got[k], "published": M.PUBLISHED_VALUES.get(k)} for k in got}
    else:
        dims = dict(M.PRESETS[args.preset]) if args.preset else {}
        for key, val in (("param_count", args.params), ("hidden", args.hidden),
                         ("layers", args.layers), ("vocab", args.vocab)):
            if val is not None:
                dims[key] = val
        missing = [k for k in ("param_count", "hidden", "layers", "vocab") if k not in dims]
        if missing:
            raise ConfigError(f"missing model dimensions: {', '.join(missing)}", "estimate",
                              "pass --preset or --params/--hidden/--layers/--vocab")
        e = M.report(dims["param_count"], dims["hidden"], dims["layers"], dims["vocab"], args.seqlen,
                     args.sp, args.world_size, args.gpus_per_node)
        doc = {"inputs": {**dims, "seqlen": args.seqlen, "sp": args.sp, "world_size": args.world_size,
                          "gpus_per_node": args.gpus_per_node},
               "bytes": e.to_dict(), "gib": e.to_dict(M.GiB)}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    if args.format == "json":
        print(text)
    elif args.anchors:
        print(f"{'anchor':40s} {'computed':>12s} {'published':>10s}")
        for k, v in doc.items():
            pub = "-" if v["published"] is None else f"{v['published']:.2f}"
            print(f"{k:40s} {v['computed']:12.3f} {pub:>10s}")
    else:
        for k, v in doc["gib"].items():
            if isinstance(v, float):
                print(f"{k:30s} {v:14.3f} GiB")
    return EXIT_OK


def _validate(args) -> int:
    from .train import RunConfig, config_schema

    if args.schema:
        print(yaml.safe_dump(config_schema(), sort_keys=False), end="")
        return EXIT_OK
    if not args.config:
        raise ConfigError("no config given", "--config", "pass --config FILE or --schema")
    cfg = RunConfig.load(args.config)
    print(f"ok: {args.config} (version {cfg.version})")
    return EXIT_OK


COMMANDS = {"train": _train, "compare": _compare, "ablate": _ablate, "estimate": _estimate,
            "validate-config": _validate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
