"""Command-line entry point: ``python -m spclab <command> --config FILE``."""

import argparse
import json
import sys

import numpy as np

from . import bounds as bd
from . import experiments as ex
from . import posterior_core as pc
from .errors import ConfigError, SpcLabError

EXIT_OK, EXIT_DOMINANCE, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3


def _parser():
    parser = argparse.ArgumentParser(prog="spclab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("certify", "print the link certificate of the configured instance"),
        ("spc", "closed-form (and optional Monte Carlo) SPC at one (alpha, delta)"),
        ("bound-check", "bias, spread and SPC dominance sweep"),
        ("rate-study", "balanced SPC along the delta grid with a fitted rate"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--output", default=None, help="output path prefix")
        if name == "spc":
            p.add_argument("--alpha", type=float, required=True)
            p.add_argument("--delta", type=float, required=True)
        if name == "rate-study":
            p.add_argument("--workers", type=int, default=1)
    return parser


def _with_overrides(cfg, args):
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.output is not None:
        changes["output_path"] = args.output
    if not changes:
        return cfg
    fields = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    fields.update(changes)
    return ex.ExperimentConfig(**fields)


def _certify(cfg):
    inst = ex.build_instance(cfg)
    payload = {"kind": inst.kind, "dim": inst.dim, "m": inst.link_m, "M": inst.link_M}
    if inst.lifting is not None:
        payload["lifting"] = {"u": inst.lifting.u, "m": inst.lifting.m, "M": inst.lifting.M}
    ex.ensure_parent(cfg.output_path + ".json")
    ex.write_json(payload, cfg.output_path + ".json")
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def _spc(cfg, alpha, delta):
    inst = ex.build_instance(cfg)
    spec = ex.build_spec(cfg, inst)
    summary = pc.spc_closed(inst, spec, alpha, delta)
    if cfg.n_mc > 0:
        est, se = pc.spc_monte_carlo(inst, spec, alpha, delta, cfg.n_mc, cfg.seed)
        summary = pc.with_monte_carlo(summary, est, se, cfg.n_mc)
    ex.ensure_parent(cfg.output_path + ".csv")
    pc.write_summaries_csv([summary], cfg.output_path + ".csv")
    print(json.dumps({k: v for k, v in summary.row().items()}, sort_keys=True))
    return EXIT_OK


def _bound_check(cfg):
    reports = ex.run_dominance_sweep(cfg)
    ex.ensure_parent(cfg.output_path + ".json")
    for rep in reports:
        rep.write_csv(f"{cfg.output_path}_{rep.quantity}.csv")
    payload = {rep.quantity: {"dominated": rep.dominated, "worst_ratio": rep.worst_ratio}
               for rep in reports}
    ex.write_json(payload, cfg.output_path + ".json")
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK if all(r.dominated for r in reports) else EXIT_DOMINANCE


def _rate_study(cfg, workers):
    result = ex.run_rate_study(cfg, workers=workers)
    ex.ensure_parent(cfg.output_path + ".csv")
    ex.write_rate_csv(result, cfg.output_path + ".csv")
    ex.write_json(result.summary(), cfg.output_path + ".json")
    print(json.dumps(result.summary(), sort_keys=True))
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = _with_overrides(ex.load_config(args.config), args)
        if args.command == "certify":
            return _certify(cfg)
        if args.command == "spc":
            return _spc(cfg, args.alpha, args.delta)
        if args.command == "bound-check":
            return _bound_check(cfg)
        return _rate_study(cfg, args.workers)
    except ConfigError as exc:
        print(f"error code={exc.code} {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpcLabError as exc:
        print(f"error code={exc.code} {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error code=io {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
