"""Held-out evaluation and the statistics reported for calibration runs."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .backend import Backend, RunLog
from .dataset import Record, normalize_label
from .errors import EvalError
from .metric import MetricFn, ScoringPolicy, make_metric, utility_from_confusion
from .program import CompiledProgram, run_program

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "mcc", "kappa", "include_rate", "utility")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary counts with the include label as the positive class.

    ``invalid`` counts off-vocabulary or unparseable outputs on records whose
    gold label is negative. They are wrong but are neither a rejection nor an
    inclusion, so they sit outside the four cells while still counting in
    ``n``. Invalid outputs on positive records are false negatives.
    """

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    invalid: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn", "invalid"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise EvalError(f"confusion count {name} must be a non-negative integer, got {value!r}")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn + self.invalid

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "invalid": self.invalid}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ConfusionMatrix:
        return cls(int(data["tp"]), int(data["fp"]), int(data["tn"]), int(data["fn"]),
                   int(data.get("invalid", 0)))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], policy: ScoringPolicy = ScoringPolicy()) -> ConfusionMatrix:
        """Tally ``(gold, observed)`` label pairs; both sides are normalized first."""
        pos, neg = policy.labels
        tp = fp = tn = fn = invalid = 0
        for gold, observed in pairs:
            gold, observed = normalize_label(gold), normalize_label(observed)
            if gold not in (pos, neg):
                raise EvalError(f"gold label {gold!r} is not one of {policy.labels}")
            if observed == pos:
                tp, fp = (tp + 1, fp) if gold == pos else (tp, fp + 1)
            elif observed == neg:
                tn, fn = (tn + 1, fn) if gold == neg else (tn, fn + 1)
            elif gold == pos:
                fn += 1
            else:
                invalid += 1
        return cls(tp, fp, tn, fn, invalid)


@dataclass(frozen=True)
class PredictionRow:
    record_id: str
    gold: str
    observed: str
    checks: str
    score: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RunMetrics:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    mcc: float | None
    kappa: float | None
    include_rate: float | None
    utility: float | None
    n: int
    seed: int | None
    condition: str
    matrix: ConfusionMatrix
    fp_score: float
    invalid_count: int = 0
    rows: tuple[PredictionRow, ...] = field(default=(), compare=False, repr=False)

    def get(self, name: str) -> float | None:
        return getattr(self, name)

    def to_dict(self) -> dict[str, Any]:
        d = {name: self.get(name) for name in METRIC_NAMES}
        d.update(n=self.n, seed=self.seed, condition=self.condition, fp_score=self.fp_score,
                 invalid_count=self.invalid_count, matrix=self.matrix.to_dict())
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunMetrics:
        return cls(**{name: data.get(name) for name in METRIC_NAMES}, n=int(data["n"]), seed=data.get("seed"),
                   condition=data.get("condition", ""), matrix=ConfusionMatrix.from_dict(data["matrix"]),
                   fp_score=float(data["fp_score"]), invalid_count=int(data.get("invalid_count", 0)))


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def compute_metrics(cm: ConfusionMatrix, policy: ScoringPolicy = ScoringPolicy(), *,
                    seed: int | None = None, condition: str = "",
                    rows: Sequence[PredictionRow] = ()) -> RunMetrics:
    """Derive every reported statistic from the counts; undefined ones are ``None``."""
    n = cm.n
    if n < 1:
        raise EvalError("cannot compute metrics for an empty confusion matrix")
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    accuracy = (tp + tn) / n
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    mcc_den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = _ratio(tp * tn - fp * fn, mcc_den)
    # chance agreement from the run's own marginals; invalid outputs never agree
    gold_pos, gold_neg = tp + fn, fp + tn + cm.invalid
    pred_pos, pred_neg = tp + fp, tn + fn
    p_e = (gold_pos * pred_pos + gold_neg * pred_neg) / (n * n)
    kappa = _ratio(accuracy - p_e, 1 - p_e) if not math.isclose(p_e, 1.0) else None
    return RunMetrics(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1, mcc=mcc, kappa=kappa,
        include_rate=(tp + fp) / n,
        utility=utility_from_confusion(cm, policy.false_positive_score),
        n=n, seed=seed, condition=condition, matrix=cm, fp_score=policy.false_positive_score,
        invalid_count=cm.invalid, rows=tuple(rows),
    )


@dataclass(frozen=True)
class EvaluationResult:
    rows: tuple[PredictionRow, ...]
    matrix: ConfusionMatrix

    @property
    def predictions(self) -> list[tuple[str, str]]:
        return [(r.gold, r.observed) for r in self.rows]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def evaluate_program(program: CompiledProgram, records: Sequence[Record], backend: Backend,
                     policy: ScoringPolicy = ScoringPolicy(), *, metric: MetricFn | None = None,
                     log: RunLog | None = None, num_threads: int = 1) -> EvaluationResult:
    if not records:
        raise EvalError("no records to evaluate")
    metric = metric or make_metric("expanded", policy)
    outputs = run_program(program.contract, records, backend, program.student_settings, log, num_threads)
    rows = []
    for record, (_, pred) in zip(records, outputs):
        rows.append(PredictionRow(
            record_id=record.record_id,
            gold=normalize_label(record.gold_label),
            observed=normalize_label(pred.label_raw),
            checks=pred.checks,
            score=metric(record, pred).score,
        ))
    cm = ConfusionMatrix.from_pairs(((r.gold, r.observed) for r in rows), policy)
    return EvaluationResult(tuple(rows), cm)


# --- aggregation ------------------------------------------------------------


@dataclass(frozen=True)
class Summary:
    mean: float | None
    sd: float | None
    count: int
    excluded: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def summarize(values: Sequence[float | None]) -> Summary:
    present = [v for v in values if v is not None]
    excluded = len(values) - len(present)
    if not present:
        return Summary(None, None, 0, excluded)
    mean = statistics.fmean(present)
    sd = statistics.stdev(present) if len(present) >= 2 else None
    return Summary(mean, sd, len(present), excluded)


@dataclass(frozen=True)
class AggregateStats:
    condition: str
    n_runs: int
    stats: dict[str, Summary]

    def to_dict(self) -> dict[str, Any]:
        return {"condition": self.condition, "n_runs": self.n_runs,
                "stats": {k: v.to_dict() for k, v in self.stats.items()}}


def aggregate_runs(runs: Sequence[RunMetrics]) -> AggregateStats:
    if not runs:
        raise EvalError("no runs to aggregate")
    conditions = {r.condition for r in runs}
    if len(conditions) > 1:
        raise EvalError(f"cannot aggregate mixed conditions: {sorted(conditions)}")
    # sorting by seed makes the floating-point sums independent of run order
    ordered = sorted(runs, key=lambda r: (r.seed is None, r.seed if r.seed is not None else 0,
                                          json.dumps(r.to_dict(), sort_keys=True)))
    stats = {name: summarize([r.get(name) for r in ordered]) for name in METRIC_NAMES}
    return AggregateStats(runs[0].condition, len(runs), stats)


@dataclass(frozen=True)
class PairedDelta:
    condition: str
    baseline: str
    seeds: tuple[int, ...]
    excluded_seeds: tuple[int, ...]
    stats: dict[str, Summary]
    recomputed_seeds: tuple[int, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"condition": self.condition, "baseline": self.baseline, "seeds": list(self.seeds),
                "excluded_seeds": list(self.excluded_seeds), "recomputed_seeds": list(self.recomputed_seeds),
                "stats": {k: v.to_dict() for k, v in self.stats.items()}}


def _common_subset(a: RunMetrics, b: RunMetrics) -> tuple[RunMetrics, RunMetrics]:
    ids_b = {r.record_id for r in b.rows}
    common = [r.record_id for r in a.rows if r.record_id in ids_b]
    if not common:
        raise EvalError(f"seed {a.seed}: runs share no records")
    keep = set(common)
    out = []
    for run in (a, b):
        rows = [r for r in run.rows if r.record_id in keep]
        policy = ScoringPolicy(false_positive_score=run.fp_score)
        cm = ConfusionMatrix.from_pairs(((r.gold, r.observed) for r in rows), policy)
        out.append(compute_metrics(cm, policy, seed=run.seed, condition=run.condition, rows=rows))
    return out[0], out[1]


def paired_deltas(condition_runs: Sequence[RunMetrics], baseline_runs: Sequence[RunMetrics]) -> PairedDelta:
    """Per-seed ``condition - baseline`` differences summarized across seeds.

    When the two runs for a seed evaluated different numbers of records and
    both carry prediction rows, both sides are recomputed on the records they
    share before differencing.
    """
    cond = {r.seed: r for r in condition_runs}
    base = {r.seed: r for r in baseline_runs}
    if len(cond) != len(condition_runs) or len(base) != len(baseline_runs):
        raise EvalError("duplicate seeds within a condition")
    common = sorted(set(cond) & set(base))
    if not common:
        raise EvalError("condition and baseline share no seeds")
    excluded = tuple(sorted(set(cond) ^ set(base)))
    diffs: dict[str, list[float | None]] = {name: [] for name in METRIC_NAMES}
    recomputed = []
    for seed in common:
        a, b = cond[seed], base[seed]
        if a.n != b.n and a.rows and b.rows:
            a, b = _common_subset(a, b)
            recomputed.append(seed)
        for name in METRIC_NAMES:
            va, vb = a.get(name), b.get(name)
            diffs[name].append(None if va is None or vb is None else va - vb)
    conditions = {r.condition for r in condition_runs}
    return PairedDelta(
        condition=conditions.pop() if len(conditions) == 1 else "mixed",
        baseline=baseline_runs[0].condition,
        seeds=tuple(common), excluded_seeds=excluded,
        stats={name: summarize(vals) for name, vals in diffs.items()},
        recomputed_seeds=tuple(recomputed),
    )


@dataclass(frozen=True)
class SensitivityTable:
    """Utility recomputed from stored matrices; optimization was not rerun."""

    fp_scores: tuple[float, ...]
    rows: dict[str, tuple[Summary, ...]]
    seeds: dict[str, tuple[int | None, ...]]
    label: str = "post-hoc"


def sensitivity_table(matrices: Sequence[tuple[str, int | None, ConfusionMatrix]],
                      fp_scores: Sequence[float]) -> SensitivityTable:
    if not fp_scores:
        raise EvalError("no false-positive scores given")
    if not matrices:
        raise EvalError("no confusion matrices given")
    grouped: dict[str, dict[Any, ConfusionMatrix]] = {}
    for condition, seed, cm in matrices:
        by_seed = grouped.setdefault(condition, {})
        if seed in by_seed and by_seed[seed] != cm:
            raise EvalError(f"conflicting matrices for condition {condition!r}, seed {seed}")
        by_seed[seed] = cm
    rows = {}
    seeds = {}
    for condition, by_seed in grouped.items():
        cms = list(by_seed.values())
        rows[condition] = tuple(summarize([utility_from_confusion(cm, s) for cm in cms]) for s in fp_scores)
        seeds[condition] = tuple(by_seed)
    return SensitivityTable(tuple(fp_scores), rows, seeds)


# --- formatting and report files ------------------------------------------


def fmt3(value: float | None) -> str:
    """Three decimals, round-half-even on the shortest decimal repr."""
    if value is None:
        return "n/a"
    q = Decimal(repr(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN)
    if q == 0:
        q = abs(q)
    return f"{q:.3f}"


def fmt_summary(s: Summary, signed: bool = False) -> str:
    if s.mean is None:
        return "n/a"
    mean = fmt3(s.mean)
    if signed and not mean.startswith("-"):
        mean = "+" + mean
    return mean if s.sd is None else f"{mean} ± {fmt3(s.sd)}"


def _csv(header: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _cell(x: float | None) -> str:
    return "" if x is None else repr(x)


def aggregate_csv(aggregates: Sequence[AggregateStats]) -> str:
    header = ["condition", "n_runs"] + [f"{m}_{k}" for m in METRIC_NAMES for k in ("mean", "sd")]
    rows = [[a.condition, a.n_runs] + [_cell(getattr(a.stats[m], k)) for m in METRIC_NAMES for k in ("mean", "sd")]
            for a in aggregates]
    return _csv(header, rows)


def aggregate_text(aggregates: Sequence[AggregateStats]) -> str:
    header = ["condition"] + list(METRIC_NAMES)
    body = [[a.condition] + [fmt_summary(a.stats[m]) for m in METRIC_NAMES] for a in aggregates]
    return _table(header, body) + "values: mean ± sample SD across runs\n"


def delta_csv(deltas: Sequence[PairedDelta]) -> str:
    header = ["condition", "baseline", "seeds", "excluded_seeds"] + \
        [f"delta_{m}_{k}" for m in METRIC_NAMES for k in ("mean", "sd")]
    rows = [[d.condition, d.baseline, " ".join(map(str, d.seeds)), " ".join(map(str, d.excluded_seeds))]
            + [_cell(getattr(d.stats[m], k)) for m in METRIC_NAMES for k in ("mean", "sd")] for d in deltas]
    return _csv(header, rows)


def delta_text(deltas: Sequence[PairedDelta]) -> str:
    header = ["condition"] + [f"Δ{m}" for m in METRIC_NAMES]
    body = [[d.condition] + [fmt_summary(d.stats[m], signed=True) for m in METRIC_NAMES] for d in deltas]
    return _table(header, body) + "values: mean ± sample SD of per-seed differences (condition − baseline)\n"


def sensitivity_csv(table: SensitivityTable) -> str:
    header = ["condition"] + [f"fp_{s}_{k}" for s in table.fp_scores for k in ("mean", "sd")]
    rows = [[c] + [_cell(getattr(s, k)) for s in summaries for k in ("mean", "sd")]
            for c, summaries in table.rows.items()]
    return _csv(header, rows)


def sensitivity_text(table: SensitivityTable) -> str:
    header = ["condition"] + [f"FP score {s:g}" for s in table.fp_scores]
    body = [[c] + [fmt_summary(s) for s in summaries] for c, summaries in table.rows.items()]
    return (f"[{table.label}] label-level utility (TP + TN + s*FP) / N recomputed from stored confusion "
            "matrices; optimization was not rerun for each score\n" + _table(header, body))


def _table(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
