"""Command-line entry point: ``promptcal <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .artifact import verify_bundle, write_manifest
from .config import RunConfig, load_config
from .demo import write_demo
from .errors import ConfigError, EvalError, PromptCalError
from .evaluation import fmt3, sensitivity_csv, sensitivity_table, sensitivity_text, write_text
from .workflow import (DEFAULT_FP_SCORES, GRID_MANIFEST, find_artifact, inspect_bundle, read_matrix_log,
                       bundle_members, run_ablation, run_compile, run_evaluate, run_roundtrip)

logger = logging.getLogger("promptcal")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _mock_script(text: str) -> tuple[str, str]:
    role, sep, path = text.partition("=")
    if not sep or role not in ("student", "reflection") or not path:
        raise argparse.ArgumentTypeError("--mock-script takes student=PATH or reflection=PATH")
    return role, path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptcal",
                                     description="Calibrate, evaluate and audit prompt harnesses for screening tasks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, type=Path, help="run configuration (JSON)")
        p.add_argument("--backend", choices=("mock", "http"), help="force the backend kind for both roles")
        p.add_argument("--mock-script", action="append", type=_mock_script, default=[], metavar="ROLE=PATH",
                       help="scripted mock responses for a role (implies --backend mock for that role)")

    p = sub.add_parser("init-example", help="write the 12-record offline demonstration project")
    p.add_argument("--out", type=Path, default=Path("example"))

    p = sub.add_parser("compile", help="split, calibrate the harness and write a bundle")
    with_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int, help="max_full_evals")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate", help="score a compiled program (or the baseline) on one split")
    with_config(p)
    p.add_argument("--artifact", required=True, type=Path, help="artifact file or bundle directory")
    p.add_argument("--dataset", type=Path, help="dataset to split (default: the config's)")
    p.add_argument("--split", default="test")
    p.add_argument("--baseline", action="store_true", help="evaluate the config's starting harness instead")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("ablate", help="run the seeds x budgets grid (resumable)")
    with_config(p)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--budgets", type=_int_list)
    p.add_argument("--fp-scores", type=_float_list, default=list(DEFAULT_FP_SCORES))
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sensitivity", help="recompute utility from archived confusion matrices")
    p.add_argument("matrices", type=Path, help="JSON Lines of {condition, seed, tp, fp, tn, fn}")
    p.add_argument("--fp-scores", type=_float_list, default=list(DEFAULT_FP_SCORES))
    p.add_argument("--out", type=Path)

    p = sub.add_parser("roundtrip", help="save, reload and re-evaluate; compare predictions")
    with_config(p)
    p.add_argument("--artifact", required=True, type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--split", default="test")

    p = sub.add_parser("inspect", help="print fixed layers, harness diff and provenance checklist")
    p.add_argument("artifact", type=Path, help="artifact file or bundle directory")

    p = sub.add_parser("verify", help="check every bundle member against the manifest")
    p.add_argument("bundle", type=Path)
    return parser


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, validate=False)
    for role in ("student", "reflection"):
        spec = dict(getattr(cfg, role))
        if args.backend == "mock":
            spec["kind"] = "scripted_mock"
        elif args.backend == "http":
            spec["kind"] = "http"
        for name, path in args.mock_script:
            if name == role:
                spec["kind"] = "scripted_mock"
                spec["script"] = str(Path(path).resolve())
        if spec["kind"] in ("scripted_mock", "mock") and "script" not in spec:
            raise ConfigError(f"{role}: mock backend selected but no script given (use --mock-script {role}=PATH)")
        setattr(cfg, role, spec)
    cfg.validate()
    return cfg


def cmd_init_example(args: argparse.Namespace) -> int:
    paths = write_demo(args.out)
    print(f"wrote demonstration project to {args.out}")
    for name, path in sorted(paths.items()):
        print(f"  {name}: {path}")
    print(f"next: promptcal compile --config {paths['config']}")
    return 0


def cmd_compile(args: argparse.Namespace) -> int:
    cfg = _load(args)
    seed = cfg.seed if args.seed is None else args.seed
    budget = cfg.optimizer_config(budget=args.budget).max_full_evals
    out = args.out or cfg.output_dir / f"{cfg.contract.contract_id}.{seed}.{budget}"
    result = run_compile(cfg, out, seed=seed, budget=budget)
    print(f"bundle: {out}")
    print(f"budget_used: {result.trace.budget_used} / {budget}")
    print(f"val mean score: baseline {fmt3(result.baseline_mean)} -> compiled {fmt3(result.compiled_mean)}"
          f" (winner candidate {result.trace.winner_id})")
    print(f"artifact sha256: {result.artifact_digest}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = args.out or find_artifact(args.artifact).parent / "evaluation"
    metrics, paths = run_evaluate(cfg, args.artifact, args.split, out, baseline=args.baseline,
                                  dataset_path=args.dataset)
    write_manifest(out, bundle_members(out))
    print(f"{metrics.condition} on {args.split} (n={metrics.n}): "
          + ", ".join(f"{k}={fmt3(metrics.get(k))}" for k in ("accuracy", "precision", "recall", "f1", "utility")))
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = args.out or cfg.output_dir / "ablation"
    result = run_ablation(cfg, out, seeds=args.seeds, budgets=args.budgets, fp_scores=args.fp_scores)
    print(f"grid: {len(result.baseline_runs)} baseline runs, {len(result.condition_runs)} condition runs "
          f"({len(result.computed)} computed, {len(result.skipped)} resumed)")
    if (out / "aggregate.txt").is_file():
        print((out / "aggregate.txt").read_text(encoding="utf-8"), end="")
    if (out / "deltas.txt").is_file():
        print((out / "deltas.txt").read_text(encoding="utf-8"), end="")
    if result.failures:
        for f in result.failures:
            print(f"error [{f['stage']}]: cell {f['cell']}: {f['error']}", file=sys.stderr)
        print(f"{len(result.failures)} cell(s) failed; see {out / 'failures.json'}", file=sys.stderr)
        return 1
    return 0


def cmd_sensitivity(args: argparse.Namespace) -> int:
    rows = read_matrix_log(args.matrices)
    if not rows:
        raise EvalError(f"{args.matrices}: no confusion matrices")
    table = sensitivity_table(rows, args.fp_scores)
    text = sensitivity_text(table)
    print(text, end="")
    if args.out:
        write_text(args.out / "sensitivity.csv", sensitivity_csv(table))
        write_text(args.out / "sensitivity.txt", text)
        write_manifest(args.out, bundle_members(args.out))
    return 0


def cmd_roundtrip(args: argparse.Namespace) -> int:
    cfg = _load(args)
    report = run_roundtrip(cfg, args.artifact, args.split, args.dataset)
    print(report.summary())
    return 0 if report.equal else 1


def cmd_inspect(args: argparse.Namespace) -> int:
    result = inspect_bundle(args.artifact)
    print(result.text, end="")
    return 1 if result.problems else 0


def cmd_verify(args: argparse.Namespace) -> int:
    root = args.bundle
    problems = verify_bundle(root, require_provenance=not (root / GRID_MANIFEST).is_file())
    for problem in problems:
        print(f"FAIL {problem}")
    if problems:
        return 1
    members = json.loads((root / "manifest.json").read_text(encoding="utf-8"))["members"]
    print(f"OK {len(members)} members verified")
    return 0


COMMANDS = {
    "init-example": cmd_init_example,
    "compile": cmd_compile,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sensitivity": cmd_sensitivity,
    "roundtrip": cmd_roundtrip,
    "inspect": cmd_inspect,
    "verify": cmd_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PromptCalError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error [cli.{args.command}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
