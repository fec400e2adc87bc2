"""Command-line entry point: ``harmonium <subcommand> [options]``.

Exit codes: 0 success, 1 validation or test failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, bt, color, dataset, gift, metrics, selftest
from .errors import BuildError, ConfigError, FitError, HarmoniumError

log = logging.getLogger("harmonium")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SEED_ENV = "HARMONIUM_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _existing(path, flag: str, kind: str = "file") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise UsageError(f"{flag}: {kind} not found: {path}")
    return p


def run_config(args, **resolved) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("handler", "json", "log_level")}
    params.update(resolved)
    clean = {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v) for k, v in params.items()}
    return {"subcommand": args.subcommand, "tool_version": __version__, "parameters": clean}


def write_config(out_dir: Path, config: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.json"
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return path


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text.rstrip("\n") + "\n")


def _standard(args) -> np.ndarray:
    if args.standard is None:
        return color.standard_patch_colors()
    return color.load_patch_colors(_existing(args.standard, "--standard"))


# -- subcommands -------------------------------------------------------------

def cmd_fit(args) -> int:
    src = color.load_patch_colors(_existing(args.src, "--src"))
    dst = _standard(args)
    t = color.fit_transform(src, dst, args.degree, args.ridge)
    rt = color.roundtrip_error(src, dst, args.degree, args.ridge)
    payload = {
        "degree": t.degree,
        "rank": color.transform_rank(src, args.degree),
        "fit_residual_rms": t.fit_residual_rms,
        "roundtrip_max_error": rt,
    }
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        t.save(out)
        write_config(out.parent, run_config(args))
        payload["transform"] = str(out)
    _emit(args, payload, "\n".join(f"{k}: {v}" for k, v in payload.items()))
    return EXIT_OK


def cmd_build(args) -> int:
    catalog = dataset.load_catalog(_existing(args.catalog, "--catalog"))
    standard = _standard(args)
    split = dataset.SplitSpec(test_fraction=args.test_fraction)
    cfg = dataset.BuildConfig(args.refs, args.seed, args.degree, args.ridge, split)
    out = Path(args.out)
    write_config(out, run_config(args, build=cfg.to_dict()))
    log.info("building dataset: %d images, refs=%d, seed=%d", len(catalog), args.refs, args.seed)
    try:
        manifest = dataset.build_dataset(catalog, standard, out, cfg, jobs=args.jobs)
    except BuildError as exc:
        for f in exc.failures:
            log.error("%s", f)
        _emit(args, {"ok": False, "failures": list(exc.failures)}, f"build failed: {len(exc.failures)} failure(s)")
        return EXIT_FAIL
    splits = {s: sum(e.split == s for e in manifest.entries) for s in ("train", "test")}
    payload = {"ok": True, "entries": len(manifest.entries), "splits": splits,
               "manifest": str(out / "manifest.json")}
    _emit(args, payload, f"{len(manifest.entries)} entries (train {splits['train']}, test {splits['test']}) "
                         f"-> {out / 'manifest.json'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    manifest = dataset.DatasetManifest.load(_existing(args.manifest, "--manifest"))
    report = dataset.validate_manifest(manifest)
    lines = [f"{report.n_entries} entries, {len(report.violations)} violation(s)"]
    lines += [f"  {v.kind}: {v.entry} {v.detail}" for v in report.violations]
    _emit(args, report.to_dict(), "\n".join(lines))
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_eval(args) -> int:
    manifest = dataset.DatasetManifest.load(_existing(args.manifest, "--manifest"))
    pred_dir = _existing(args.predictions, "--predictions", "dir")
    ev = metrics.evaluate_manifest(manifest, pred_dir, jobs=args.jobs)
    if not ev.reports:
        log.error("no predictions found in %s", pred_dir)
        _emit(args, ev.summary(), "no predictions found")
        return EXIT_FAIL
    if args.out:
        ev.write(args.out, run_config(args))
        write_config(Path(args.out), run_config(args))
    for name in ev.missing:
        log.warning("missing prediction: %s", name)
    _emit(args, ev.summary(), ev.table())
    return EXIT_OK if ev.complete else EXIT_FAIL


def cmd_rank(args) -> int:
    results = bt.PairwiseResults.load(_existing(args.input, "--input"))
    try:
        scores = bt.fit_bt(results, args.max_iters, args.tol, args.prior)
    except FitError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    if not scores.converged:
        log.warning("did not converge in %d iterations", scores.iterations)
    table = bt.rank_markdown(scores) if args.format == "markdown" else bt.rank_csv(scores)
    if args.out:
        out = Path(args.out)
        write_config(out, run_config(args))
        (out / "ranking.csv").write_text(bt.rank_csv(scores))
        (out / "ranking.md").write_text(bt.rank_markdown(scores))
    payload = {"scores": scores.as_dict(), "iterations": scores.iterations, "converged": scores.converged,
               "ranking": [{"rank": r, "method": m, "bt_score": s} for r, m, s in bt.rank_table(scores)]}
    _emit(args, payload, table)
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run(seed=args.seed, quick=args.quick)
    ok = all(r.passed for r in results)
    payload = {"ok": ok, "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]}
    text = "\n".join(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.1f}s)" for r in results)
    if args.out:
        out = Path(args.out)
        write_config(out, run_config(args))
        (out / "selftest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(args, payload, text)
    return EXIT_OK if ok else EXIT_FAIL


def _gift_config(args) -> gift.GiftConfig:
    return gift.GiftConfig(
        sites=tuple(args.sites), gift_kernel=args.gift_kernel, gamma=args.gamma, lam=args.lam, eps=args.eps,
        relation_scope=args.relation_scope, zero_background_input=args.zero_background_input,
        padding=args.padding, seed=args.seed,
    )


def cmd_train_toy(args) -> int:
    cfg = _gift_config(args)
    out = Path(args.out) if args.out else None
    if out:
        write_config(out, run_config(args, gift=cfg.to_dict()))
    run = gift.run_toy_experiment(cfg, n_pairs=args.pairs, size=args.size, steps=args.steps, lr=args.lr,
                                  recon_steps=args.recon_steps, recon_lr=args.recon_lr, data_seed=args.seed)
    h = run.history
    payload = {"initial_harmonization": h.harmonization[0], "final_harmonization": h.harmonization[-1],
               "reduction": run.reduction, "final_total": h.total[-1],
               "recon_final": run.recon_history.harmonization[-1]}
    if out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "total", "harmonization"])
        for i, (t, l) in enumerate(zip(h.total, h.harmonization)):
            w.writerow([i, repr(t), repr(l)])
        (out / "history.csv").write_text(buf.getvalue())
        run.network.save(out / "checkpoint.json")
        (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(args, payload, "\n".join(f"{k}: {v:.6g}" for k, v in payload.items()))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser(default_seed: int = 0) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default_seed, help=f"random seed (env {SEED_ENV} sets the default)")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="harmonium", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def poly(p):
        p.add_argument("--standard", help="standard-illuminant patch colors JSON (default: bundled chart)")
        p.add_argument("--degree", type=int, default=2, choices=[1, 2])
        p.add_argument("--ridge", type=float, default=0.0)

    p = sub.add_parser("fit", parents=[common], help="fit a patch-to-standard color transform")
    p.add_argument("--src", required=True, help="source patch colors JSON (24x3, in [0,1])")
    p.add_argument("--out", help="write the transform JSON here")
    poly(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("build-dataset", parents=[common], help="build composite/real pairs from a catalog")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refs", type=int, default=10, help="references per foreground")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--jobs", type=int, default=1)
    poly(p)
    p.set_defaults(handler=cmd_build)

    p = sub.add_parser("validate", parents=[common], help="check a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("eval", parents=[common], help="score predictions against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True, help="directory of predictions named like the composites")
    p.add_argument("--out", help="write metrics.csv and aggregate.json here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("rank", parents=[common], help="Bradley-Terry ranking from pairwise preferences")
    p.add_argument("--input", required=True, help="winner,loser CSV or wins-matrix JSON")
    p.add_argument("--prior", type=float, default=0.1)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_rank)

    p = sub.add_parser("gift-selftest", parents=[common], help="run GIFT invariant and gradient checks")
    p.add_argument("--quick", action="store_true", help="gradient-check a narrow network only")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_selftest)

    p = sub.add_parser("train-toy", parents=[common], help="train a small GIFT network on synthetic pairs")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--recon-steps", type=int, default=200)
    p.add_argument("--recon-lr", type=float, default=0.1)
    p.add_argument("--pairs", type=int, default=16)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--sites", nargs="*", default=list(gift.GiftConfig().sites), choices=list(gift.SITES))
    p.add_argument("--gift-kernel", type=int, default=gift.GiftConfig().gift_kernel)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--lam", type=float, default=0.001)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--relation-scope", choices=["all", "background"], default="all")
    p.add_argument("--padding", choices=["zeros", "circular"], default="zeros")
    p.add_argument("--zero-background-input", action="store_true")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_train_toy)
    return parser


def run(argv=None) -> int:
    try:
        parser = build_parser(_default_seed())
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.handler(args)
    except UsageError as exc:
        sys.stderr.write(f"harmonium {args.subcommand}: error: {exc}\n")
        return EXIT_USAGE
    except HarmoniumError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_FAIL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
