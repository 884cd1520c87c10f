"""End-to-end pipelines behind the command-line interface."""

from __future__ import annotations

import difflib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .artifact import (FP_POLICY_NOTE, MANIFEST, PROVENANCE_SCHEMA, UNAVAILABLE, RoundTripReport, artifact_filename,
                       dump_canonical, environment_record, file_digest, load_artifact, metric_source_digest,
                       missing_provenance_fields, roundtrip_check, save_artifact, verify_bundle, write_manifest)
from .backend import REFLECTION, STUDENT, Backend, RunLog
from .canonical import digest_of
from .config import RunConfig
from .dataset import (SPLIT_NAMES, DatasetSplits, Record, dataset_fingerprint, load_records, splits_from_manifest,
                      stratified_split, write_split_manifest)
from .errors import BackendError, EvalError, FormatError, IntegrityError, PromptCalError
from .evaluation import (AggregateStats, ConfusionMatrix, EvaluationResult, PairedDelta, RunMetrics,
                         aggregate_csv, aggregate_runs, aggregate_text, compute_metrics, delta_csv, delta_text,
                         evaluate_program, paired_deltas, sensitivity_csv, sensitivity_table, sensitivity_text,
                         write_text)
from .metric import make_metric
from .optimizer import OptimizationTrace, compile_program
from .program import CompiledProgram

logger = logging.getLogger(__name__)

BASELINE_CONDITION = "baseline"
DEFAULT_FP_SCORES = (0.2, 0.4, 0.6)


def condition_name(budget: int) -> str:
    return f"max_eval={budget}"


def load_dataset(cfg: RunConfig) -> list[Record]:
    return load_records(cfg.dataset_path, labels=cfg.contract.allowed_labels,
                        default_criteria=cfg.contract.criteria_text)


def _write_rows(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    write_text(path, "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows))


def bundle_members(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root).as_posix()) for p in root.rglob("*")
                  if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."))


@dataclass
class CompileResult:
    program: CompiledProgram
    trace: OptimizationTrace
    splits: DatasetSplits
    bundle_dir: Path
    artifact_path: Path
    artifact_digest: str
    manifest_digest: str

    @property
    def baseline_mean(self) -> float:
        return self.trace.candidates[0].mean_val_score

    @property
    def compiled_mean(self) -> float:
        return next(c for c in self.trace.candidates if c.candidate_id == self.trace.winner_id).mean_val_score


def build_provenance(cfg: RunConfig, records: Sequence[Record], splits: DatasetSplits, seed: int,
                     budget: int, trace: OptimizationTrace, log: RunLog, artifact_file: str,
                     artifact_digest: str, logs: Sequence[str], backends: tuple[Backend, Backend]) -> dict[str, Any]:
    opt = cfg.optimizer_config(seed=seed, budget=budget)
    tokens = log.token_totals()
    student, reflector = backends
    models = {}
    for role, backend in ((STUDENT, student), (REFLECTION, reflector)):
        settings = cfg.settings(role)
        models[role] = {**settings.to_dict(), "backend": backend.describe()}
    return {
        "dataset": {"fingerprint": dataset_fingerprint(records), "n_records": len(records),
                    "source": cfg.dataset_path.name},
        "splits": {"seed": splits.seed, "split_fingerprint": splits.split_fingerprint,
                   "sizes": {"train": len(splits.train), "val": len(splits.val), "test": len(splits.test)},
                   "ids": splits.ids()},
        "metric": {"id": cfg.metric, "policy": cfg.policy.to_dict(), "source_sha256": metric_source_digest(),
                   "policy_note": FP_POLICY_NOTE},
        "optimizer": opt.to_dict(),
        "models": models,
        "seeds": {"split": splits.seed, "optimizer": opt.seed},
        "baseline": {"harness_text": cfg.contract.harness_text, "criteria_text": cfg.contract.criteria_text,
                     "interface_fingerprint": cfg.contract.interface_fingerprint},
        "environment": environment_record(),
        "budget_used": trace.budget_used,
        "tokens": tokens if tokens is not None else UNAVAILABLE,
        "model_calls": {"student": log.count(STUDENT), "reflection": log.count(REFLECTION)},
        "evaluation": {"baseline_val_mean": trace.candidates[0].mean_val_score,
                       "compiled_val_mean": next(c.mean_val_score for c in trace.candidates
                                                 if c.candidate_id == trace.winner_id),
                       "winner_candidate_id": trace.winner_id,
                       "logs": list(logs)},
        "artifact": {"file": artifact_file, "sha256": artifact_digest},
    }


def run_compile(cfg: RunConfig, out_dir: Path, *, seed: int | None = None, budget: int | None = None,
                records: Sequence[Record] | None = None) -> CompileResult:
    """Split, calibrate and write a bundle into ``out_dir`` (replacing its previous contents)."""
    seed = cfg.seed if seed is None else seed
    opt = cfg.optimizer_config(seed=seed, budget=budget)
    budget = opt.max_full_evals
    records = list(records) if records is not None else load_dataset(cfg)
    splits = stratified_split(records, cfg.split_sizes, seed)
    student, reflector = cfg.make_backends()
    log = RunLog()
    metric = make_metric(cfg.metric, cfg.policy)

    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    try:
        program, trace = compile_program(cfg.contract, splits.train, splits.val, metric, student,
                                         cfg.settings(STUDENT), reflector, cfg.settings(REFLECTION), opt, log)
    except BackendError as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None:
            partial.write_jsonl(out_dir / "trace.partial.jsonl")
        log.write_jsonl(out_dir / "calls.partial.jsonl")
        raise

    name = artifact_filename(cfg.contract.contract_id, seed, budget)
    digest = save_artifact(program, out_dir / name)
    write_split_manifest(splits, out_dir / "splits.json")
    trace.write_jsonl(out_dir / "trace.jsonl")
    log.write_jsonl(out_dir / "calls.jsonl")
    logs = ["calls.jsonl", "trace.jsonl", "predictions_val_baseline.jsonl", "predictions_val_compiled.jsonl"]
    _write_rows(out_dir / "predictions_val_baseline.jsonl", trace.val_predictions[0])
    _write_rows(out_dir / "predictions_val_compiled.jsonl", trace.val_predictions[trace.winner_id])
    prov = build_provenance(cfg, records, splits, seed, budget, trace, log, name, digest, logs,
                            (student, reflector))
    write_text(out_dir / "provenance.json", dump_canonical(prov))
    manifest_digest = write_manifest(out_dir, bundle_members(out_dir))
    return CompileResult(program, trace, splits, out_dir, out_dir / name, digest, manifest_digest)


def baseline_program(cfg: RunConfig) -> CompiledProgram:
    return CompiledProgram(cfg.contract, cfg.settings(STUDENT))


def evaluate_split(cfg: RunConfig, program: CompiledProgram, records: Sequence[Record],
                   backend: Backend, *, condition: str, seed: int | None,
                   log: RunLog | None = None) -> tuple[RunMetrics, EvaluationResult]:
    threads = cfg.optimizer_config().num_threads
    result = evaluate_program(program, records, backend, cfg.policy, metric=make_metric(cfg.metric, cfg.policy),
                              log=log, num_threads=threads)
    metrics = compute_metrics(result.matrix, cfg.policy, seed=seed, condition=condition, rows=result.rows)
    return metrics, result


def write_run_report(out_dir: Path, stem: str, metrics: RunMetrics, result: EvaluationResult) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"metrics_{stem}.json"
    preds_path = out_dir / f"predictions_{stem}.jsonl"
    write_text(metrics_path, dump_canonical(metrics.to_dict()))
    result.write_jsonl(preds_path)
    return [metrics_path, preds_path]


def resolve_splits(cfg: RunConfig, records: Sequence[Record], splits_path: Path | None,
                   seed: int | None = None) -> DatasetSplits:
    if splits_path is not None and splits_path.is_file():
        return splits_from_manifest(records, json.loads(splits_path.read_text(encoding="utf-8")))
    return stratified_split(records, cfg.split_sizes, cfg.seed if seed is None else seed)


# --- ablation -------------------------------------------------------------------

GRID_MANIFEST = "grid_manifest.json"


@dataclass
class AblationResult:
    out_dir: Path
    condition_runs: list[RunMetrics]
    baseline_runs: list[RunMetrics]
    aggregates: list[AggregateStats]
    baseline_aggregate: AggregateStats | None
    deltas: list[PairedDelta]
    failures: list[dict[str, Any]] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    computed: list[str] = field(default_factory=list)


def _cell_key(condition: str, seed: int) -> str:
    return f"seed-{seed}/{condition.replace('=', '-')}"


def _grid_digest(cfg: RunConfig) -> str:
    return digest_of({
        "contract": cfg.contract.to_dict(),
        "dataset": file_digest(cfg.dataset_path),
        "split_sizes": list(cfg.split_sizes),
        "metric": cfg.metric,
        "policy": cfg.policy.to_dict(),
        "optimizer": {k: v for k, v in cfg.optimizer.items() if k not in ("max_full_evals", "seed")},
        "backends": cfg.backend_record(),
    })


def run_ablation(cfg: RunConfig, out_dir: Path, *, seeds: Sequence[int] | None = None,
                 budgets: Sequence[int] | None = None,
                 fp_scores: Sequence[float] = DEFAULT_FP_SCORES) -> AblationResult:
    """Run the seeds x budgets grid, resuming any cells completed by an earlier run.

    Each cell gets fresh backends, so a mock-backed cell is reproducible on its
    own and a resumed grid matches an uninterrupted one.
    """
    seeds = list(seeds or cfg.seeds)
    budgets = list(budgets or cfg.budgets)
    if not seeds or not budgets:
        raise EvalError("ablation needs at least one seed and one budget")
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_digest = _grid_digest(cfg)
    manifest_path = out_dir / GRID_MANIFEST
    done: dict[str, str] = {}
    if manifest_path.is_file():
        state = json.loads(manifest_path.read_text(encoding="utf-8"))
        if state.get("config_digest") == grid_digest:
            done = dict(state.get("completed", {}))
        else:
            logger.warning("grid configuration changed; ignoring previously completed cells")

    records = load_dataset(cfg)
    result = AblationResult(out_dir, [], [], [], None, [])

    def save_state() -> None:
        write_text(manifest_path, dump_canonical({"config_digest": grid_digest, "completed": done}))

    def cell(condition: str, seed: int, work: Callable[[Path], RunMetrics]) -> RunMetrics | None:
        key = _cell_key(condition, seed)
        cell_dir = out_dir / key
        metrics_path = cell_dir / "metrics_test.json"
        if key in done and metrics_path.is_file() and file_digest(metrics_path) == done[key]:
            result.skipped.append(key)
            return RunMetrics.from_dict(json.loads(metrics_path.read_text(encoding="utf-8")))
        try:
            metrics = work(cell_dir)
        except PromptCalError as exc:
            result.failures.append({"cell": key, "condition": condition, "seed": seed,
                                    "stage": exc.stage, "error": f"{type(exc).__name__}: {exc}"})
            done.pop(key, None)
            save_state()
            return None
        done[key] = file_digest(metrics_path)
        result.computed.append(key)
        save_state()
        return metrics

    for seed in seeds:
        splits = stratified_split(records, cfg.split_sizes, seed)

        def baseline_work(cell_dir: Path, splits=splits, seed=seed) -> RunMetrics:
            if cell_dir.exists():
                shutil.rmtree(cell_dir)
            student, _ = cfg.make_backends()
            metrics, evaluation = evaluate_split(cfg, baseline_program(cfg), splits.test, student,
                                                 condition=BASELINE_CONDITION, seed=seed)
            write_run_report(cell_dir, "test", metrics, evaluation)
            return metrics

        base = cell(BASELINE_CONDITION, seed, baseline_work)
        if base is not None:
            result.baseline_runs.append(base)

        for budget in budgets:
            def budget_work(cell_dir: Path, seed=seed, budget=budget) -> RunMetrics:
                compiled = run_compile(cfg, cell_dir, seed=seed, budget=budget, records=records)
                student, _ = cfg.make_backends()
                split = compiled.splits
                metrics, evaluation = evaluate_split(cfg, compiled.program, split.test, student,
                                                     condition=condition_name(budget), seed=seed)
                write_run_report(cell_dir, "test", metrics, evaluation)
                write_manifest(cell_dir, bundle_members(cell_dir))
                return metrics

            run = cell(condition_name(budget), seed, budget_work)
            if run is not None:
                result.condition_runs.append(run)

    _write_ablation_reports(result, budgets, fp_scores)
    return result


def _write_ablation_reports(result: AblationResult, budgets: Sequence[int], fp_scores: Sequence[float]) -> None:
    out = result.out_dir
    all_runs = result.baseline_runs + result.condition_runs
    _write_rows(out / "runs.jsonl", [r.to_dict() for r in all_runs])
    _write_rows(out / "confusion.jsonl",
                [{"condition": r.condition, "seed": r.seed, **r.matrix.to_dict()} for r in all_runs])
    if result.baseline_runs:
        result.baseline_aggregate = aggregate_runs(result.baseline_runs)
    for budget in budgets:
        runs = [r for r in result.condition_runs if r.condition == condition_name(budget)]
        if not runs:
            continue
        result.aggregates.append(aggregate_runs(runs))
        if result.baseline_runs:
            try:
                result.deltas.append(paired_deltas(runs, result.baseline_runs))
            except EvalError as exc:
                result.failures.append({"cell": condition_name(budget), "stage": "evaluation.paired_deltas",
                                        "error": str(exc)})
    table = ([result.baseline_aggregate] if result.baseline_aggregate else []) + result.aggregates
    if table:
        write_text(out / "aggregate.csv", aggregate_csv(table))
        write_text(out / "aggregate.txt", aggregate_text(table))
    if result.deltas:
        write_text(out / "deltas.csv", delta_csv(result.deltas))
        write_text(out / "deltas.txt", delta_text(result.deltas))
    if all_runs:
        sens = sensitivity_table([(r.condition, r.seed, r.matrix) for r in all_runs], fp_scores)
        write_text(out / "sensitivity.csv", sensitivity_csv(sens))
        write_text(out / "sensitivity.txt", sensitivity_text(sens))
    failures_path = out / "failures.json"
    if result.failures:
        write_text(failures_path, dump_canonical({"failures": result.failures}))
    elif failures_path.exists():
        failures_path.unlink()
    write_manifest(out, bundle_members(out))


def read_matrix_log(path: Path) -> list[tuple[str, int | None, ConfusionMatrix]]:
    """Parse a confusion-matrix log (JSON Lines of condition, seed and the counts)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                rows.append((str(data["condition"]), data.get("seed"), ConfusionMatrix.from_dict(data)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EvalError(f"{path}: line {lineno}: malformed matrix row ({exc})") from exc
    return rows


# --- single-artifact commands ------------------------------------------------------


def find_artifact(path: Path) -> Path:
    """Accept either a compiled artifact file or a bundle directory holding exactly one."""
    if path.is_dir():
        found = sorted(path.glob("*.compiled.json"))
        if len(found) != 1:
            raise FormatError(f"{path}: expected one *.compiled.json in the bundle, found {len(found)}")
        return found[0]
    if not path.is_file():
        raise FormatError(f"artifact not found: {path}")
    return path


def _records_for(cfg: RunConfig, dataset_path: Path | None) -> list[Record]:
    if dataset_path is None:
        return load_dataset(cfg)
    return load_records(dataset_path, labels=cfg.contract.allowed_labels,
                        default_criteria=cfg.contract.criteria_text)


def select_split(cfg: RunConfig, artifact_path: Path, records: Sequence[Record], split: str) -> tuple[list[Record], int]:
    if split not in SPLIT_NAMES:
        raise EvalError(f"unknown split {split!r}; expected one of {', '.join(SPLIT_NAMES)}")
    splits = resolve_splits(cfg, records, artifact_path.parent / "splits.json")
    chosen = splits.get(split)
    if not chosen:
        raise EvalError(f"split {split!r} is empty")
    return list(chosen), splits.seed


def run_evaluate(cfg: RunConfig, artifact: Path, split: str, out_dir: Path, *, baseline: bool = False,
                 dataset_path: Path | None = None) -> tuple[RunMetrics, list[Path]]:
    """Score the compiled program (or the config's baseline harness) on one split."""
    artifact_path = find_artifact(artifact)
    program = load_artifact(artifact_path)
    name = "compiled"
    if baseline:
        base = baseline_program(cfg)
        if base.contract.interface_fingerprint != program.contract.interface_fingerprint:
            raise EvalError("the config's contract does not match the artifact's fixed layers")
        program, name = base, BASELINE_CONDITION
    records = _records_for(cfg, dataset_path)
    chosen, seed = select_split(cfg, artifact_path, records, split)
    student, _ = cfg.make_backends()
    metrics, evaluation = evaluate_split(cfg, program, chosen, student, condition=name, seed=seed)
    return metrics, write_run_report(out_dir, f"{split}_{name}", metrics, evaluation)


def run_roundtrip(cfg: RunConfig, artifact: Path, split: str = "test",
                  dataset_path: Path | None = None) -> RoundTripReport:
    artifact_path = find_artifact(artifact)
    program = load_artifact(artifact_path)
    records = _records_for(cfg, dataset_path)
    chosen, _ = select_split(cfg, artifact_path, records, split)
    student, _ = cfg.make_backends()
    return roundtrip_check(program, chosen, student, cfg.policy,
                           num_threads=cfg.optimizer_config().num_threads)


@dataclass
class Inspection:
    text: str
    problems: list[str]


def inspect_bundle(path: Path) -> Inspection:
    """Human-readable dump of a compiled program and, when present, its bundle."""
    artifact_path = find_artifact(path)
    problems: list[str] = []
    lines: list[str] = [f"artifact: {artifact_path.name}"]
    try:
        program = load_artifact(artifact_path)
    except (FormatError, IntegrityError) as exc:
        return Inspection("\n".join(lines + [f"LOAD FAILED: {type(exc).__name__}: {exc}"]) + "\n", [str(exc)])
    c = program.contract
    lines += ["", "== fixed layers ==",
              f"contract_id: {c.contract_id}",
              f"interface_fingerprint: {c.interface_fingerprint}",
              "inputs: " + ", ".join(c.field_names("input")),
              "outputs: " + ", ".join(c.field_names("output")),
              f"decision field: {c.decision_field.name} ({', '.join(c.allowed_labels)})",
              "criteria:", c.criteria_text,
              "", "== harness ==", c.harness_text,
              "", "== student ==", json.dumps(program.student_settings.to_dict(), sort_keys=True)]
    bundle = artifact_path.parent
    prov_path = bundle / "provenance.json"
    if prov_path.is_file():
        prov = json.loads(prov_path.read_text(encoding="utf-8"))
        base = (prov.get("baseline") or {}).get("harness_text")
        if isinstance(base, str):
            diff = list(difflib.unified_diff(base.splitlines(), c.harness_text.splitlines(),
                                             "baseline harness", "compiled harness", lineterm=""))
            lines += ["", "== harness diff vs baseline =="] + (diff or ["(identical)"])
        missing = set(missing_provenance_fields(prov))
        lines += ["", "== provenance checklist =="]
        for section, keys in PROVENANCE_SCHEMA.items():
            gaps = [k for k in keys if f"{section}.{k}" in missing]
            value = prov.get(section)
            status = "MISSING" if section in missing else ("INCOMPLETE" if gaps else "ok")
            if status == "ok" and (value == UNAVAILABLE or (isinstance(value, Mapping) and UNAVAILABLE in value.values())):
                status = "ok (some values unavailable)"
            lines.append(f"  {section:<12} {status}" + (f" ({', '.join(gaps)})" if gaps else ""))
    if (bundle / MANIFEST).is_file():
        problems = verify_bundle(bundle)
        lines += ["", "== bundle verification =="] + ([f"  {p}" for p in problems] or ["  all members match the manifest"])
    return Inspection("\n".join(lines) + "\n", problems)
