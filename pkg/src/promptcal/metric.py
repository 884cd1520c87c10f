"""Asymmetric screening metrics with natural-language feedback.

Both metrics always return a :class:`MetricOutcome`; callers needing a scalar
read ``.score``. ``compact_metric`` uses the lenient three-word trace check,
``expanded_metric`` the stricter bullet-format validator plus case-grounded
feedback for the reflection model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

from .dataset import Record, normalize_label
from .errors import MetricError

if TYPE_CHECKING:
    from .evaluation import ConfusionMatrix


@dataclass(frozen=True)
class ScoringPolicy:
    correct_score: float = 1.0
    false_negative_score: float = 0.0
    false_positive_score: float = 0.4
    checks_cap: float = 0.6
    positive_label: str = "include"
    negative_label: str = "exclude"

    def __post_init__(self) -> None:
        if not (0.0 <= self.false_negative_score <= self.false_positive_score
                <= self.correct_score <= 1.0):
            raise MetricError(
                "policy must satisfy 0 <= false_negative_score <= false_positive_score <= correct_score <= 1"
            )
        if not (0.0 < self.checks_cap < self.correct_score):
            raise MetricError("policy must satisfy 0 < checks_cap < correct_score")
        if self.positive_label == self.negative_label:
            raise MetricError("positive and negative labels must differ")

    @property
    def labels(self) -> tuple[str, str]:
        return (self.positive_label, self.negative_label)

    def to_dict(self) -> dict[str, Any]:
        return {
            "correct_score": self.correct_score,
            "false_negative_score": self.false_negative_score,
            "fp_score": self.false_positive_score,
            "checks_cap": self.checks_cap,
            "positive_label": self.positive_label,
            "negative_label": self.negative_label,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScoringPolicy:
        known = {"correct_score", "false_negative_score", "fp_score", "checks_cap",
                 "positive_label", "negative_label"}
        unknown = set(data) - known
        if unknown:
            raise MetricError(f"unknown policy key(s): {', '.join(sorted(unknown))}")
        kwargs = {k: v for k, v in data.items() if k != "fp_score"}
        if "fp_score" in data:
            kwargs["false_positive_score"] = float(data["fp_score"])
        return cls(**kwargs)


@dataclass(frozen=True)
class MetricOutcome:
    score: float
    feedback: str


@dataclass(frozen=True)
class Prediction:
    label_raw: str
    checks: str = ""
    parse_ok: bool = True
    fields: dict[str, str] = field(default_factory=dict, compare=False, hash=False)


def has_supporting_checks(pred: Prediction) -> bool:
    checks = (pred.checks or "").strip()
    return bool(checks) and len(checks.split()) >= 3


def checks_format_ok(checks: str | None) -> bool:
    """2-5 non-blank lines, each <= 8 words after bullet stripping, <= 30 words total."""
    if not checks:
        return False
    lines = [ln.strip() for ln in checks.splitlines() if ln.strip()]
    if not 2 <= len(lines) <= 5:
        return False
    total = 0
    for line in lines:
        words = line.lstrip("-* ").strip().split()
        if len(words) > 8:
            return False
        total += len(words)
    return total <= 30


def _check_gold(gold_label: Any, policy: ScoringPolicy) -> str:
    gold = normalize_label(gold_label)
    if gold not in policy.labels:
        raise MetricError(f"gold label {gold_label!r} is not one of {policy.labels}")
    return gold


def compact_metric(gold_label: str, pred: Prediction, policy: ScoringPolicy = ScoringPolicy()) -> MetricOutcome:
    expected = _check_gold(gold_label, policy)
    observed = str(pred.label_raw or "").strip().lower()
    pos, neg = policy.labels

    if observed not in policy.labels:
        score = 0.0
        feedback = f"The label must be exactly '{pos}' or '{neg}'."
    elif observed == expected:
        score = policy.correct_score
        feedback = "Correct screening decision."
    elif expected == pos:
        score = policy.false_negative_score
        feedback = "False negative. Missing relevant studies is costly in screening."
    else:
        score = policy.false_positive_score
        feedback = "False positive. Include only when criteria are clearly satisfied."

    if not has_supporting_checks(pred):
        score = min(score, policy.checks_cap)
        feedback += " Also provide brief checks that justify the label."
    return MetricOutcome(score, feedback)


CRITERIA_EXCERPT = 800
TITLE_EXCERPT = 300
ABSTRACT_EXCERPT = 1200


def output_contract_text(policy: ScoringPolicy = ScoringPolicy()) -> str:
    pos, neg = policy.labels
    return (
        "Return outputs using DSPy field markers exactly:\n"
        "[[ ## checks ## ]]\n"
        "(2-5 bullet fragments, each <= 8 words, max 30 words total)\n"
        "[[ ## label ## ]]\n"
        f"(exactly one token: {pos} or {neg})\n"
        "[[ ## completed ## ]]\n"
        "Do not add other text.\n"
    )


def case_block(gold: Record) -> str:
    return (
        f"\n\nCASE\nCRITERIA:\n{gold.criteria[:CRITERIA_EXCERPT]}"
        f"\n\nTITLE:\n{gold.title[:TITLE_EXCERPT]}"
        f"\n\nABSTRACT:\n{gold.abstract[:ABSTRACT_EXCERPT]}\n"
    )


def expanded_metric(gold: Record, pred: Prediction, policy: ScoringPolicy = ScoringPolicy()) -> MetricOutcome:
    gold_lab = _check_gold(gold.gold_label, policy)
    pred_lab = normalize_label(pred.label_raw)
    checks = (pred.checks or "").strip()
    pos, neg = policy.labels
    contract = output_contract_text(policy)
    case = case_block(gold)

    if pred_lab not in policy.labels:
        score = 0.0
        feedback = (f"Invalid label '{pred_lab}'. Label must be exactly one of: {pos} or {neg}.\n"
                    + contract + case)
    elif pred_lab == gold_lab:
        score = policy.correct_score
        feedback = "Correct.\n" + contract
    elif gold_lab == pos:
        score = policy.false_negative_score
        feedback = (f"False negative. Prefer {pos.upper()} when uncertain to avoid missing relevant "
                    f"studies. Identify which criteria clause supports inclusion.\n" + contract + case)
    else:
        score = policy.false_positive_score
        feedback = (f"False positive. Only {pos.upper()} when the criteria are clearly satisfied. "
                    f"Identify which clause was over-applied.\n" + contract + case)

    if not checks_format_ok(checks):
        if score > 0:
            score = min(score, policy.checks_cap)
        feedback = "checks format invalid or missing.\n" + contract + feedback
    return MetricOutcome(score, feedback)


def utility_from_confusion(cm: ConfusionMatrix, fp_score: float) -> float:
    """Label-level utility ``(TP + TN + fp_score * FP) / N``."""
    n = cm.n
    if n < 1:
        raise MetricError("utility is undefined for an empty confusion matrix")
    return (cm.tp + cm.tn + fp_score * cm.fp) / n


MetricFn = Callable[[Record, Prediction], MetricOutcome]

METRICS = ("compact", "expanded")


def make_metric(name: str, policy: ScoringPolicy = ScoringPolicy()) -> MetricFn:
    """Bind a named metric to ``policy`` as a ``(record, prediction)`` callable."""
    if name == "compact":
        def metric(gold: Record, pred: Prediction) -> MetricOutcome:
            return compact_metric(gold.gold_label, pred, policy)
    elif name == "expanded":
        def metric(gold: Record, pred: Prediction) -> MetricOutcome:
            return expanded_metric(gold, pred, policy)
    else:
        raise MetricError(f"unknown metric {name!r}; expected one of {METRICS}")
    metric.metric_id = name  # type: ignore[attr-defined]
    return metric
