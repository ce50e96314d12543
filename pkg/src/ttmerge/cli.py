"""Command-line interface: ``ttmerge {gen,precompute,eval,diag}``.

Exit codes: 0 success, 1 I/O failure, 2 usage or invalid input,
3 stale cache or inconsistent inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import bench, dynamic
from .coefficient import CoefficientConfig
from .errors import AlignmentError, DivergenceError, StalenessError, TTMergeError
from .models import Dataset
from .params import atomic_write, check_aligned, load_checkpoint

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_STALE = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs once flags are parsed and paths validated."""

    pt: str | None = None
    ft: str | None = None
    data: str | None = None
    scenario: str | None = None
    cache: str | None = None
    out: str | None = None
    coeff: CoefficientConfig = field(default_factory=CoefficientConfig)
    methods: list[str] = field(default_factory=list)
    batch_size: int = dynamic.DEFAULT_BATCH_SIZE
    seed: int = 0
    report: str = "json"
    bins: int = 10

    def validate(self) -> None:
        if self.batch_size < 1:
            raise UsageError("--batch-size must be >= 1")
        if self.bins < 1:
            raise UsageError("--bins must be >= 1")
        if self.scenario is None and (self.pt is None or self.ft is None or self.data is None):
            raise UsageError("give --scenario DIR, or all of --pt, --ft and --data")
        for path in (self.pt, self.ft, self.data, self.scenario):
            if path is not None and not os.path.exists(path):
                raise FileNotFoundError(f"no such file or directory: {path}")


# -- input resolution ----------------------------------------------------------------


def _models(cfg: RunConfig):
    pt = cfg.pt or os.path.join(cfg.scenario, "pt.ttmc")
    ft = cfg.ft or os.path.join(cfg.scenario, "ft.ttmc")
    theta_pt, theta_ft = load_checkpoint(pt), load_checkpoint(ft)
    check_aligned(theta_pt, theta_ft)
    return theta_pt, theta_ft


def _scenario_test_sets(directory) -> dict[str, Dataset]:
    """Test files of a scenario directory keyed by file stem, in report order."""
    names = ["test_in_domain", "test_novel"]
    names += [f"test_{k}_s{s}" for k in bench.CORRUPTIONS for s in bench.SEVERITIES]
    return {n: Dataset.load(os.path.join(directory, n + ".ttds")) for n in names}


def _write(path, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write(path, text.encode())


# -- commands ---------------------------------------------------------------------------


def _scenario_params(overrides: list[str], params_file: str | None) -> bench.ScenarioParams:
    block = {}
    if params_file:
        with open(params_file) as fh:
            block.update(json.load(fh))
    known = {f.name for f in fields(bench.ScenarioParams)}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or key not in known:
            raise UsageError(f"bad --set {item!r}; keys: {', '.join(sorted(known))}")
        try:
            block[key] = json.loads(raw)
        except json.JSONDecodeError:
            block[key] = raw
    base = bench.ScenarioParams().to_json()
    for key in ("pretrain", "expert"):
        if isinstance(block.get(key), dict):
            block[key] = {**base[key], **block[key]}
    try:
        return bench.ScenarioParams.from_json({**base, **block})
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def cmd_gen(seed: int, params: bench.ScenarioParams, out_dir) -> int:
    scenario = bench.gen_scenario(seed, params)
    scenario.save(out_dir)
    return EXIT_OK


def cmd_precompute(cfg: RunConfig) -> int:
    """Write one cache file for ``--data``, or one per test set into a directory for ``--scenario``."""
    if cfg.out is None:
        raise UsageError("precompute needs --out")
    theta_pt, theta_ft = _models(cfg)
    if cfg.data is not None:
        data = Dataset.load(cfg.data)
        dynamic.precompute_lambdas(theta_pt, theta_ft, data, cfg.coeff, cfg.batch_size).save(cfg.out)
        return EXIT_OK
    os.makedirs(cfg.out, exist_ok=True)
    for name, data in _scenario_test_sets(cfg.scenario).items():
        cache = dynamic.precompute_lambdas(theta_pt, theta_ft, data, cfg.coeff, cfg.batch_size)
        cache.save(os.path.join(cfg.out, name + ".ttlc"))
    return EXIT_OK


def _scenario_caches(cache_dir, cfg: RunConfig) -> dict[str, list]:
    names = {
        "in_domain": ["test_in_domain"],
        "novel": ["test_novel"],
        **{k: [f"test_{k}_s{s}" for s in bench.SEVERITIES] for k in bench.CORRUPTIONS},
    }
    sets = _scenario_test_sets(cfg.scenario)
    return {
        setting: [dynamic.LambdaCache.load(os.path.join(cache_dir, s + ".ttlc"), cfg.coeff, len(sets[s])) for s in stems]
        for setting, stems in names.items()
    }


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.methods:
        raise UsageError("--methods is empty")
    specs = [bench.MethodSpec.parse(m) for m in cfg.methods]
    if cfg.data is not None:
        theta_pt, theta_ft = _models(cfg)
        data = Dataset.load(cfg.data)
        cache = None
        if cfg.cache is not None:
            cache = dynamic.LambdaCache.load(cfg.cache, cfg.coeff, len(data))
        reports = bench.run_on_dataset(theta_pt, theta_ft, data, specs, cfg.coeff, cfg.batch_size, cache, cfg.seed)
    else:
        scenario = bench.ShiftScenario.load(cfg.scenario)
        if cfg.pt or cfg.ft:
            scenario.theta_pt, scenario.theta_ft = _models(cfg)
        caches = _scenario_caches(cfg.cache, cfg) if cfg.cache is not None else None
        reports = bench.run_benchmark(scenario, specs, cfg.coeff, cfg.batch_size, caches)
    text = bench.reports_csv(reports) if cfg.report == "csv" else bench.reports_json(reports)
    _write(cfg.out, text)
    return EXIT_OK


def diagnostics(theta_pt, theta_ft, data: Dataset, coeff: CoefficientConfig, bins: int = 10) -> dict:
    """Lambda histogram, quadrant report and rho(I, R) for one dataset."""
    records = dynamic.precompute_lambdas(theta_pt, theta_ft, data, coeff, len(data)).per_sample
    quad = bench.quadrant_analysis(theta_pt, theta_ft, data)
    lam = np.array([r.lambda_prime for r in records])
    return {
        "config": coeff.to_json(),
        "histogram": bench.lambda_histogram(lam, bins),
        "lambda_mean": float(lam.mean()),
        "n": len(data),
        "quadrants": quad.to_json(),
        "rho": quad.rho_all,
    }


def cmd_diag(cfg: RunConfig) -> int:
    theta_pt, theta_ft = _models(cfg)
    if cfg.data is not None:
        data = Dataset.load(cfg.data)
    else:
        # pool every test set of the scenario
        sets = list(_scenario_test_sets(cfg.scenario).values())
        data = Dataset(np.concatenate([d.X for d in sets]), np.concatenate([d.y for d in sets]), sets[0].c)
    out = diagnostics(theta_pt, theta_ft, data, cfg.coeff, cfg.bins)
    _write(cfg.out, json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------


def _add_coefficient_flags(p: argparse.ArgumentParser) -> None:
    d = CoefficientConfig()
    p.add_argument("--lambda-min", type=float, default=d.lambda_min)
    p.add_argument("--lambda-max", type=float, default=d.lambda_max)
    p.add_argument("--delta", type=float, default=d.delta)
    p.add_argument("--tau-pt", type=float, default=d.tau_pt)
    p.add_argument("--tau-ft", type=float, default=d.tau_ft)
    p.add_argument("--policy", default=d.policy, help="js_sigmoid, entropy_ratio, confidence_ratio or fixed(a)")
    p.add_argument("--direction", default=d.direction, choices=("per_eq10", "inverted"))
    p.add_argument("--batch-size", type=int, default=dynamic.DEFAULT_BATCH_SIZE)
    p.add_argument("--seed", type=int, default=0)


def _add_io_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pt", help="generalist checkpoint (.ttmc)")
    p.add_argument("--ft", help="expert checkpoint (.ttmc)")
    p.add_argument("--data", help="dataset file (.ttds)")
    p.add_argument("--scenario", help="directory written by 'gen'")
    p.add_argument("--out", help="output path (stdout when omitted, where allowed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttmerge", description="Test-time adaptive model merging toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a seeded synthetic shift scenario with trained checkpoints")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--params", help="JSON file with scenario parameter overrides")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one scenario parameter")

    pre = sub.add_parser("precompute", help="build a lambda cache")
    _add_io_flags(pre)
    _add_coefficient_flags(pre)

    ev = sub.add_parser("eval", help="evaluate merging methods")
    _add_io_flags(ev)
    _add_coefficient_flags(ev)
    ev.add_argument("--methods", default="pretrained,expert,t3,t3_batch", help="comma-separated method list")
    ev.add_argument("--cache", help="cache file (with --data) or directory (with --scenario)")
    ev.add_argument("--report", choices=("json", "csv"), default="json")

    dg = sub.add_parser("diag", help="lambda histogram, quadrant report and rho(I, R)")
    _add_io_flags(dg)
    _add_coefficient_flags(dg)
    dg.add_argument("--bins", type=int, default=10)
    return parser


def _run_config(args) -> RunConfig:
    coeff = CoefficientConfig(
        lambda_min=args.lambda_min,
        lambda_max=args.lambda_max,
        delta=args.delta,
        tau_pt=args.tau_pt,
        tau_ft=args.tau_ft,
        policy=args.policy,
        direction=args.direction,
    )
    cfg = RunConfig(
        pt=args.pt,
        ft=args.ft,
        data=args.data,
        scenario=args.scenario,
        cache=getattr(args, "cache", None),
        out=args.out,
        coeff=coeff,
        methods=[m for m in getattr(args, "methods", "").split(",") if m.strip()],
        batch_size=args.batch_size,
        seed=args.seed,
        report=getattr(args, "report", "json"),
        bins=getattr(args, "bins", 10),
    )
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "gen":
            return cmd_gen(args.seed, _scenario_params(args.set, args.params), args.out)
        cfg = _run_config(args)
        return {"precompute": cmd_precompute, "eval": cmd_eval, "diag": cmd_diag}[args.command](cfg)
    except (StalenessError, AlignmentError) as exc:
        print(f"ttmerge: {exc}", file=sys.stderr)
        return EXIT_STALE
    except (UsageError, TTMergeError, ValueError, DivergenceError) as exc:
        print(f"ttmerge: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ttmerge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
