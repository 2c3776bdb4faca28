"""Command-line runner: ``shotfree <command> [flags]``.

Commands: gen-data, meta-train, eval-matrix, ablate, collapse-demo, gradcheck.
Each run writes ``manifest.json`` into ``--out-dir`` and every other output
file points back at it.  Settings come from flags, then ``--config`` (a JSON
object keyed by flag name), then built-in defaults.

Exit codes: 0 success, 1 numerical or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .baseline import protonet_baseline_train
from .checkpoint import load_checkpoint, save_checkpoint
from .data import gen_heteroscedastic, gen_synthetic, load_csv, save_csv
from .errors import (ContractError, DatasetFormatError, DegenerateInputError, DimensionError, DivergenceError,
                     NonFiniteError, ProtocolError)
from .experiments import (AXES, ShotMismatchConfig, ablate, eval_matrix, long_format, pivot, shot_mismatch,
                          summarize_ablation, write_json, write_rows)
from .fewshot import METHODS, Scenario
from .gradcheck import run_suite
from .losses import collapse_demo, raise_if_diverged
from .training import TrainConfig, TrainLog, meta_train

log = logging.getLogger("shotfree")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def artifact_version() -> str:
    """Package version plus the source revision when run from a git checkout."""
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    duration_seconds: float = 0.0

    @property
    def run_id(self) -> str:
        """Hash of command and resolved config; identical for reruns with the same settings."""
        blob = json.dumps({"command": self.command, "config": self.config}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def ref(self) -> str:
        """Back-reference embedded in every output file."""
        return f"{MANIFEST} run {self.run_id}"

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        d = asdict(self)
        d["run_id"] = self.run_id
        path.write_text(json.dumps(d, indent=2, sort_keys=True))
        return path


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default="runs", help="directory for every output file (created if missing)")
    g.add_argument("--config", help="JSON file of defaults keyed by flag name; explicit flags win")
    g.add_argument("--workers", type=int, default=1, help="parallel evaluation workers")


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--recipe", choices=["adam", "sgd"], default=d.recipe)
    g.add_argument("--ways", type=int, default=d.ways)
    g.add_argument("--per-class", type=int, default=d.per_class, help="samples per class in a training episode")
    g.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="entropy penalty weight")
    g.add_argument("--entropy-sign", type=float, default=d.entropy_sign, choices=[1.0, -1.0])
    g.add_argument("--mu-factor", type=int, default=d.mu_factor, help="prototype dimension as a multiple of d")
    g.add_argument("--episodes-per-iteration", type=int, default=d.episodes_per_iteration)
    g.add_argument("--iterations", dest="max_iterations", type=int, default=d.max_iterations)
    g.add_argument("--dropout", dest="dropout_rate", type=float, default=d.dropout_rate)
    g.add_argument("--validation-interval", type=int, default=d.validation_interval)
    g.add_argument("--val-episodes", type=int, default=d.val_episodes)
    g.add_argument("--patience", type=int, default=None)
    g.add_argument("--decay-every", type=int, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--hidden", type=int, nargs="+", default=list(d.hidden))
    g.add_argument("--embed-dim", type=int, default=d.embed_dim)
    g.add_argument("--scale-init", type=float, default=d.scale_init)
    g.add_argument("--train-shots", dest="shots", type=int, default=d.shots, help="baseline training shot")
    g.add_argument("--train-queries", dest="queries", type=int, default=d.queries, help="baseline training queries")


def _eval_flags(p: argparse.ArgumentParser, shots=(1, 5, 10), episodes=2000) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--eval-ways", type=int, default=5)
    g.add_argument("--shots", dest="test_shots", type=int, nargs="+", default=list(shots))
    g.add_argument("--queries", dest="test_queries", type=int, default=30)
    g.add_argument("--episodes", type=int, default=episodes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shotfree", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    _common(p)
    p.add_argument("--generator", choices=["gaussian", "heteroscedastic"], default="gaussian")
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--spread", type=float, default=0.1, help="intra-class standard deviation (gaussian)")
    p.add_argument("--anisotropy", type=float, default=0.0, help="per-class log-spread jitter (gaussian)")
    p.add_argument("--output", default="dataset.csv", help="file name inside --out-dir")

    p = sub.add_parser("meta-train", help="meta-train a shot-free model or the prototypical-network baseline")
    _common(p)
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--model", choices=["shotfree", "protonet"], default="shotfree")
    _train_flags(p)

    p = sub.add_parser("eval-matrix", help="evaluate checkpoints across test scenarios")
    _common(p)
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--checkpoint", action="append", default=[], metavar="[LABEL=]PATH",
                   help="checkpoint file, repeatable")
    p.add_argument("--methods", nargs="+", default=["mean"], choices=[m for m in METHODS if m != "protonet"])
    _eval_flags(p)

    p = sub.add_parser("ablate", help="sweep one training axis with paired seeds")
    _common(p)
    p.add_argument("--data", help="dataset CSV (not used by the shot-mismatch axis, which generates its own)")
    p.add_argument("--axis", required=True, help=f"one of {sorted(AXES) + ['shot_mismatch']} (dashes allowed)")
    p.add_argument("--values", nargs="+", help="axis values; default is the axis' standard sweep")
    p.add_argument("--seeds", type=int, nargs="+", help="paired seeds; default is --seed alone")
    p.add_argument("--method", choices=[m for m in METHODS if m != "protonet"], default="mean")
    _train_flags(p)
    _eval_flags(p, shots=(1,), episodes=2000)

    p = sub.add_parser("collapse-demo", help="center-loss collapse vs episode-loss contrast")
    _common(p)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--spread-tol", type=float, default=1e-3)
    p.add_argument("--loss-tol", type=float, default=1e-6)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable primitive")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-6)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse twice: once to find ``--config``, then with its values installed as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {args.config} must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in subparser._actions}
    flag_to_dest = {opt.lstrip("-").replace("-", "_"): a.dest for a in subparser._actions for opt in a.option_strings}
    defaults, unknown = {}, []
    for key, value in cfg.items():
        k = key.replace("-", "_")
        dest = k if k in dests else flag_to_dest.get(k)
        if dest is None or dest in ("config", "help"):
            unknown.append(key)
        else:
            defaults[dest] = value
    if unknown:
        raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _need_file(path, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _train_config(args) -> TrainConfig:
    keys = {f for f in TrainConfig.__dataclass_fields__}
    kw = {k: v for k, v in vars(args).items() if k in keys}
    kw["hidden"] = tuple(kw["hidden"])
    cfg = TrainConfig(**kw)
    bad = cfg.problems()
    if bad:
        raise UsageError("invalid training config:\n  " + "\n  ".join(bad))
    return cfg


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "out_dir", "config")}


def cmd_gen_data(args, man: RunManifest, out: Path) -> int:
    if args.generator == "heteroscedastic":
        ds = gen_heteroscedastic(args.classes, clean_dim=args.dim // 2, noisy_dim=args.dim - args.dim // 2,
                                 samples_per_class=args.per_class, seed=args.seed)
    else:
        ds = gen_synthetic(args.classes, args.dim, args.per_class, args.spread, args.seed, args.anisotropy)
    path = out / args.output
    save_csv(ds, path, comment=man.ref)
    back = load_csv(path)
    if back.features.shape != ds.features.shape:
        raise ContractError(f"{path}: reloaded {back.features.shape} rows, wrote {ds.features.shape}")
    man.outputs.append(str(path))
    print(f"wrote {len(ds.labels)} rows x {ds.input_dim} features to {path}")
    return EXIT_OK


def cmd_meta_train(args, man: RunManifest, out: Path) -> int:
    data = _need_file(args.data, "data")
    man.inputs.append(str(data))
    cfg = _train_config(args)
    ds = load_csv(data)
    if args.model == "protonet":
        ck, trainlog = protonet_baseline_train(ds, cfg)
    else:
        ck, trainlog = meta_train(ds, cfg)
    paths = [save_checkpoint(ck, out / "checkpoint.json", manifest=man.ref),
             _write_trainlog(trainlog, out, man.ref)]
    paths.append(write_rows(out / "train_series.csv",
                            long_format(trainlog.rows, ["iteration"], [c for c in TrainLog.COLUMNS[1:]]),
                            ["iteration", "metric", "value"], comment=man.ref))
    man.outputs.extend(str(p) for p in paths)
    score = "n/a" if ck.validation_score is None else f"{ck.validation_score:.4f}"
    print(f"{args.model} checkpoint {ck.checkpoint_id()} (iteration {ck.iteration}, validation {score}) -> {paths[0]}")
    return EXIT_OK


def _write_trainlog(trainlog: TrainLog, out: Path, ref: str) -> Path:
    path = out / "train_log.csv"
    trainlog.to_csv(path, comment=ref)
    return path


def _load_checkpoints(specs) -> dict:
    if not specs:
        raise UsageError("--checkpoint is required (repeat it for several models)")
    cks = {}
    for spec in specs:
        label, _, path = spec.rpartition("=")
        p = _need_file(path, "checkpoint")
        ck = load_checkpoint(p)
        if not label:
            label = ck.method if ck.method != "protonet" else f"protonet {ck.config.get('shots', '?')}-shot"
        if label in cks:
            label = f"{label} ({p.stem})"
        cks[label] = ck
    return cks


def cmd_eval_matrix(args, man: RunManifest, out: Path) -> int:
    data = _need_file(args.data, "data")
    cks = _load_checkpoints(args.checkpoint)
    man.inputs.extend([str(data)] + [str(s.rpartition("=")[2]) for s in args.checkpoint])
    ds = load_csv(data)
    for label, ck in cks.items():
        if ck.embedding.input_dim != ds.input_dim:
            raise UsageError(f"checkpoint '{label}' expects {ck.embedding.input_dim} input features but {data} "
                             f"has {ds.input_dim}; train it on this dataset or pick the matching one")
    scenarios = [Scenario(args.eval_ways, k, args.test_queries, args.episodes) for k in args.test_shots]
    rows = eval_matrix(cks, ds, scenarios, args.methods, seed=args.seed, workers=args.workers)
    fields = ["train", "method", "scenario", "ways", "shots", "queries", "episodes", "accuracy", "ci95", "seed",
              "checkpoint_id"]
    table = pivot(rows)
    paths = [write_rows(out / "eval_matrix.csv", rows, fields, comment=man.ref),
             write_rows(out / "eval_table.csv", table, comment=man.ref),
             write_json(out / "eval_matrix.json", {"reports": rows}, manifest=man.ref)]
    man.outputs.extend(str(p) for p in paths)
    _print_table(table)
    return EXIT_OK


def _print_table(table: list) -> None:
    if not table:
        return
    cols = list(table[0].keys())
    print("  ".join(f"{c:>24}" for c in cols))
    for r in table:
        print("  ".join(f"{'' if r[c] is None else (f'{r[c]:.4f}' if isinstance(r[c], float) else r[c]):>24}"
                        for c in cols))


def cmd_ablate(args, man: RunManifest, out: Path) -> int:
    axis = args.axis.replace("-", "_")
    axis = {"optimizer": "recipe", "lambda": "lam", "episodes": "episodes_per_iteration"}.get(axis, axis)
    seeds = args.seeds or [args.seed]
    if axis == "shot_mismatch":
        return _shot_mismatch(args, man, out, seeds)
    if axis not in AXES:
        raise UsageError(f"unknown ablation axis {args.axis!r}; choose from {sorted(AXES) + ['shot_mismatch']}")
    data = _need_file(args.data, "data")
    man.inputs.append(str(data))
    ds = load_csv(data)
    cfg = _train_config(args)
    if len(args.test_shots) != 1:
        raise UsageError("ablate evaluates a single test shot; pass one value to --shots")
    sc = Scenario(args.eval_ways, args.test_shots[0], args.test_queries, args.episodes)
    try:
        result = ablate(ds, cfg, axis, args.values, seeds, sc, args.method, args.workers)
    except ValueError as exc:
        raise UsageError(f"bad value for {axis}: {exc}") from exc
    rows = [r.to_row() for r in result]
    summary = summarize_ablation(result)
    paths = [write_rows(out / "ablation.csv", rows, comment=man.ref),
             write_rows(out / "ablation_summary.csv", summary, comment=man.ref),
             write_json(out / "ablation.json", {"axis": axis, "scenario": sc.label, "rows": rows,
                                                "summary": summary}, manifest=man.ref)]
    man.outputs.extend(str(p) for p in paths)
    for r in summary:
        print(f"{axis}={r['value']}: accuracy {r['accuracy']:.4f} over {r['seeds']} seed(s)")
    return EXIT_OK


def _shot_mismatch(args, man: RunManifest, out: Path, seeds) -> int:
    cfg = ShotMismatchConfig(iterations=args.max_iterations, ways=args.eval_ways, test_queries=args.test_queries,
                             episodes=args.episodes, validation_interval=args.validation_interval,
                             val_episodes=args.val_episodes)
    results = [shot_mismatch(int(s), cfg, workers=args.workers) for s in seeds]
    rows = [r for res in results for r in res.to_rows()]
    summary = [res.summary() for res in results]
    passed = sum(res.passed for res in results)
    paths = [write_rows(out / "shot_mismatch.csv", rows, comment=man.ref),
             write_rows(out / "shot_mismatch_summary.csv", summary, comment=man.ref),
             write_json(out / "shot_mismatch.json", {"config": asdict(cfg), "rows": rows, "summary": summary,
                                                     "seeds_passed": passed}, manifest=man.ref)]
    man.outputs.extend(str(p) for p in paths)
    for s in summary:
        print(f"seed {s['seed']}: shot-free gap {s['shot_free_gap']:.4f}, protonet gap {s['protonet_gap']:.4f}, "
              f"{'pass' if s['passed'] else 'fail'}")
    print(f"{passed}/{len(results)} paired seeds show the shot-free property")
    return EXIT_OK


def cmd_collapse_demo(args, man: RunManifest, out: Path) -> int:
    center = collapse_demo(args.points, args.dim, args.steps, args.lr, args.seed, objective="center")
    contrast = collapse_demo(args.points, args.dim, args.steps, args.lr, args.seed, objective="episode", lam=1.0)
    rows = [{"objective": res.objective, "step": s, "loss": loss, "spread": spread}
            for res in (center, contrast) for s, loss, spread in res.trajectory]
    collapsed = (not center.diverged and center.final_spread < args.spread_tol
                 and center.final_loss < args.loss_tol)
    report = {
        "center": {"final_loss": center.final_loss, "final_spread": center.final_spread,
                   "diverged": center.diverged, "collapsed": collapsed},
        "episode": {"final_loss": contrast.final_loss, "final_spread": contrast.final_spread,
                    "diverged": contrast.diverged},
        "lr": args.lr, "steps": args.steps, "points": args.points,
    }
    paths = [write_rows(out / "collapse_trajectory.csv",
                        long_format(rows, ["objective", "step"], ["loss", "spread"]),
                        ["objective", "step", "metric", "value"], comment=man.ref),
             write_json(out / "collapse_report.json", report, manifest=man.ref)]
    man.outputs.extend(str(p) for p in paths)
    print(f"center loss: spread {center.final_spread:.3e}, loss {center.final_loss:.3e}"
          f"{' (diverged)' if center.diverged else ''}")
    print(f"episode loss: spread {contrast.final_spread:.3e}{' (diverged)' if contrast.diverged else ''}")
    raise_if_diverged(center)
    if not collapsed:
        print("FAIL: center-loss descent did not collapse the points")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_gradcheck(args, man: RunManifest, out: Path) -> int:
    res = run_suite(seed=args.seed, h=args.step, tolerance=args.tolerance)
    paths = [write_rows(out / "gradcheck.csv", res.rows(), comment=man.ref),
             write_json(out / "gradcheck.json", {"max_rel_error": res.max_rel_error, "tolerance": args.tolerance,
                                                 "passed": res.passed, "cases": res.rows()}, manifest=man.ref)]
    man.outputs.extend(str(p) for p in paths)
    for c in res.cases:
        print(f"{'ok  ' if c.passed else 'FAIL'} {c.name:<20} {c.max_rel_error:.2e}")
    print(f"max relative error {res.max_rel_error:.2e} (tolerance {args.tolerance:g}) in {res.seconds:.2f}s")
    return EXIT_OK if res.passed else EXIT_FAILURE


COMMANDS = {
    "gen-data": cmd_gen_data,
    "meta-train": cmd_meta_train,
    "eval-matrix": cmd_eval_matrix,
    "ablate": cmd_ablate,
    "collapse-demo": cmd_collapse_demo,
    "gradcheck": cmd_gradcheck,
}


def _setup_logging() -> None:
    name = os.environ.get("SHOTFREE_LOG", "warning").lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"shotfree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse already printed the message
        return EXIT_USAGE if exc.code else EXIT_OK

    out = Path(args.out_dir)
    man = RunManifest(args.command, _resolved(args), args.seed, artifact_version())
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, man, out)
    except (UsageError, ContractError, DimensionError, ProtocolError, DatasetFormatError) as exc:
        print(f"shotfree {args.command}: error: {exc}", file=sys.stderr)
        problems = getattr(exc, "problems", None)
        for p in problems or []:
            print(f"  {p}", file=sys.stderr)
        code = EXIT_USAGE
    except (DivergenceError, NonFiniteError, DegenerateInputError) as exc:
        print(f"shotfree {args.command}: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_FAILURE
    except OSError as exc:
        print(f"shotfree {args.command}: I/O error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    man.duration_seconds = round(time.perf_counter() - t0, 3)
    if out.is_dir():
        man.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
