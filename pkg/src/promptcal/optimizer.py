"""Budget-bounded reflective harness search.

The loop keeps a pool of candidate harnesses, each fully scored on the
validation set. Every iteration picks a parent, runs it on a small training
minibatch, shows the failures and metric feedback to the reflection model,
and tries the proposed replacement harness on the same minibatch. Only a
proposal that beats its parent there is given a full validation evaluation,
which is the budgeted resource (``max_full_evals``, baseline included).
"""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .backend import Backend, ChatExchange, GenerationSettings, RunLog, complete
from .canonical import SplitMix64, derive_seed
from .contract import TaskContract, with_harness
from .dataset import Record, normalize_label
from .errors import BackendError, ConfigError
from .metric import MetricFn, MetricOutcome
from .program import CompiledProgram, run_program

logger = logging.getLogger(__name__)

FRONTIER = "frontier"
BEST_FIRST = "best_first"
PARENT_STRATEGIES = (FRONTIER, BEST_FIRST)

BASELINE = "baseline"
REFLECTION = "reflection"


@dataclass(frozen=True)
class OptimizerConfig:
    max_full_evals: int
    reflection_minibatch_size: int = 2
    num_threads: int = 1
    seed: int = 0
    skip_perfect_score: bool = True
    track_stats: bool = True
    parent_strategy: str = FRONTIER
    # reflection rounds are capped so a reflector that never improves cannot loop forever
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.max_full_evals, int) or self.max_full_evals < 1:
            raise ConfigError(f"max_full_evals must be a positive integer, got {self.max_full_evals!r}")
        if self.reflection_minibatch_size < 1:
            raise ConfigError("reflection_minibatch_size must be positive")
        if self.num_threads < 1:
            raise ConfigError("num_threads must be positive")
        if self.parent_strategy not in PARENT_STRATEGIES:
            raise ConfigError(f"parent_strategy must be one of {PARENT_STRATEGIES}")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ConfigError("max_iterations must be non-negative")

    @property
    def iteration_cap(self) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return 5 * self.max_full_evals

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_full_evals": self.max_full_evals,
            "reflection_minibatch_size": self.reflection_minibatch_size,
            "num_threads": self.num_threads,
            "seed": self.seed,
            "skip_perfect_score": self.skip_perfect_score,
            "track_stats": self.track_stats,
            "parent_strategy": self.parent_strategy,
            "max_iterations": self.iteration_cap,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> OptimizerConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown optimizer key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass(frozen=True)
class Candidate:
    candidate_id: int
    harness_text: str
    parent_id: int | None
    val_scores: tuple[float, ...]
    mean_val_score: float
    origin: str
    interface_fingerprint: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "candidate_id": self.candidate_id,
            "parent_id": self.parent_id,
            "origin": self.origin,
            "mean_val_score": self.mean_val_score,
            "val_scores": list(self.val_scores),
            "interface_fingerprint": self.interface_fingerprint,
            "harness_text": self.harness_text,
        }


@dataclass
class OptimizationTrace:
    events: list[dict[str, Any]] = field(default_factory=list)
    budget_used: int = 0
    candidates: list[Candidate] = field(default_factory=list)
    winner_id: int | None = None
    # candidate id -> per-record validation outputs, for prediction logs
    val_predictions: dict[int, list[dict[str, Any]]] = field(default_factory=dict)

    def add(self, event: str, **payload: Any) -> None:
        self.events.append({"event": event, **payload})

    def of_kind(self, event: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["event"] == event]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, ensure_ascii=False, sort_keys=True) + "\n" for e in self.events)

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def select_parent(pool: Sequence[Candidate], rng: SplitMix64, strategy: str = FRONTIER) -> Candidate:
    """Pick the candidate to reflect on.

    ``best_first`` returns the highest mean (lowest id on ties). ``frontier``
    samples uniformly among candidates that hold the best score on at least
    one validation example.
    """
    if not pool:
        raise ValueError("empty candidate pool")
    if len(pool) == 1:
        return pool[0]
    if strategy == BEST_FIRST:
        return min(pool, key=lambda c: (-c.mean_val_score, c.candidate_id))
    n_examples = len(pool[0].val_scores)
    frontier: set[int] = set()
    for i in range(n_examples):
        best = max(c.val_scores[i] for c in pool)
        frontier.update(c.candidate_id for c in pool if c.val_scores[i] == best)
    if not frontier:
        frontier = {c.candidate_id for c in pool}
    members = sorted(frontier)
    chosen = members[rng.randbelow(len(members))]
    return next(c for c in pool if c.candidate_id == chosen)


REFLECTION_SYSTEM = """\
You improve the instruction harness of a prompt program for a language model.

The harness is the ONLY part you may rewrite. The task criteria, the input
fields, the output fields, the allowed labels and the output markers are
fixed; the program supplies them separately. Do not restate, weaken or change
them, and do not add new output fields.

You will see the current harness and a few examples, each with the inputs the
program received, the program's raw response, the score that response earned
and the evaluator's feedback. Work out why the low-scoring responses failed and
revise the harness so the program handles such cases correctly while keeping
what already works.

Return the complete replacement harness as plain text. Do not return a diff,
commentary, a preamble or code fences."""


def _fmt_score(x: float) -> str:
    return repr(float(x))


def build_reflection_request(parent: Candidate,
                             minibatch_results: Sequence[tuple[Record, ChatExchange, MetricOutcome]]) -> tuple[str, str]:
    if not minibatch_results:
        raise ValueError("reflection needs at least one example")
    parts = ["Current harness:", "<harness>", parent.harness_text, "</harness>", ""]
    for i, (record, exchange, outcome) in enumerate(minibatch_results, 1):
        parts += [
            f"### Example {i} (record {record.record_id})",
            "Inputs:",
            exchange.user_text,
            "",
            "Program response:",
            exchange.response_text,
            "",
            f"Score: {_fmt_score(outcome.score)}",
            "Feedback:",
            outcome.feedback,
            "",
        ]
    parts.append("Write the full replacement harness now.")
    return REFLECTION_SYSTEM, "\n".join(parts)


def clean_proposal(text: str) -> str:
    """Strip whitespace and one enclosing code fence from a reflector reply."""
    body = (text or "").strip()
    if body.startswith("```") and body.endswith("```") and len(body) >= 6:
        body = body[3:-3]
        first_newline = body.find("\n")
        if first_newline >= 0 and body[:first_newline].strip().isalnum():
            body = body[first_newline + 1:]  # drop a language tag such as ```text
        body = body.strip()
    return body


def _mean(values: Sequence[float]) -> float:
    return statistics.fmean(values) if values else 0.0


class _Run:
    """State for one compile call."""

    def __init__(self, contract, train, val, metric, student, student_settings, reflector,
                 reflector_settings, config, log):
        self.contract = contract
        self.train = list(train)
        self.val = list(val)
        self.metric = metric
        self.student = student
        self.student_settings = student_settings
        self.reflector = reflector
        self.reflector_settings = reflector_settings
        self.config = config
        self.log = log
        self.trace = OptimizationTrace()
        self.pool: list[Candidate] = []
        self.train_scores: dict[int, dict[str, float]] = {}
        self.next_id = 0

    def _scores(self, contract: TaskContract, records: Sequence[Record]):
        outputs = run_program(contract, records, self.student, self.student_settings, self.log,
                              self.config.num_threads)
        return [(record, exchange, pred, self.metric(record, pred))
                for record, (exchange, pred) in zip(records, outputs)]

    def _stat(self, scores: Sequence[float]) -> dict[str, Any]:
        out: dict[str, Any] = {"mean": _mean(scores)}
        if self.config.track_stats:
            out["scores"] = list(scores)
        return out

    def full_eval(self, contract: TaskContract, parent_id: int | None, origin: str, cid: int) -> Candidate:
        results = self._scores(contract, self.val)
        scores = tuple(o.score for *_, o in results)
        self.trace.val_predictions[cid] = [
            {"record_id": r.record_id, "gold": normalize_label(r.gold_label),
             "observed": normalize_label(pred.label_raw), "checks": pred.checks, "score": o.score}
            for r, _, pred, o in results
        ]
        cand = Candidate(cid, contract.harness_text, parent_id, scores, _mean(scores), origin,
                         contract.interface_fingerprint)
        self.trace.budget_used += 1
        self.trace.add("full_eval", candidate_id=cid, interface_fingerprint=contract.interface_fingerprint,
                       example_ids=[r.record_id for r in self.val], budget_used=self.trace.budget_used,
                       **self._stat(scores))
        self.pool.append(cand)
        self.trace.candidates.append(cand)
        return cand

    def minibatch(self, parent: Candidate, iteration: int) -> list[Record]:
        k = min(self.config.reflection_minibatch_size, len(self.train))
        rng = SplitMix64(derive_seed(self.config.seed, 1, iteration))
        if not self.config.skip_perfect_score:
            picked = rng.sample(self.train, k)
        else:
            known = self.train_scores.get(parent.candidate_id, {})
            imperfect = [r for r in self.train if known.get(r.record_id, 0.0) < 1.0]
            perfect = [r for r in self.train if known.get(r.record_id, 0.0) >= 1.0]
            if len(imperfect) >= k:
                picked = rng.sample(imperfect, k)
            else:
                # too few imperfect examples: backfill with already-perfect ones
                picked = imperfect + rng.sample(perfect, k - len(imperfect))
        order = {r.record_id: i for i, r in enumerate(self.train)}
        return sorted(picked, key=lambda r: order[r.record_id])

    def remember(self, cid: int, results) -> None:
        seen = self.train_scores.setdefault(cid, {})
        for record, *_, outcome in results:
            seen[record.record_id] = outcome.score

    def iterate(self, iteration: int) -> None:
        rng = SplitMix64(derive_seed(self.config.seed, 0, iteration))
        parent = select_parent(self.pool, rng, self.config.parent_strategy)
        batch = self.minibatch(parent, iteration)
        parent_contract = with_harness(self.contract, parent.harness_text)
        parent_results = self._scores(parent_contract, batch)
        self.remember(parent.candidate_id, parent_results)
        parent_scores = [o.score for *_, o in parent_results]
        self.trace.add("minibatch_eval", iteration=iteration, candidate_id=parent.candidate_id, role="parent",
                       example_ids=[r.record_id for r in batch], **self._stat(parent_scores))

        system_text, user_text = build_reflection_request(
            parent, [(r, ex, o) for r, ex, _, o in parent_results])
        reply = complete(self.reflector, self.reflector_settings, system_text, user_text, self.log)
        proposal = clean_proposal(reply.response_text)
        self.trace.add("reflection_call", iteration=iteration, parent_id=parent.candidate_id,
                       proposed_harness=proposal)

        if not proposal:
            self.trace.add("acceptance", iteration=iteration, candidate_id=None, accepted=False,
                           reason="empty proposal")
            return
        if proposal == parent.harness_text.strip():
            self.trace.add("acceptance", iteration=iteration, candidate_id=None, accepted=False,
                           reason="proposal identical to parent harness")
            return

        cid = self.next_id
        self.next_id += 1
        child_contract = with_harness(self.contract, proposal)
        if child_contract.interface_fingerprint != self.contract.interface_fingerprint:
            raise AssertionError("harness rewrite changed the fixed interface")  # cannot happen via with_harness
        child_results = self._scores(child_contract, batch)
        child_scores = [o.score for *_, o in child_results]
        self.trace.add("minibatch_eval", iteration=iteration, candidate_id=cid, role="proposal",
                       example_ids=[r.record_id for r in batch], **self._stat(child_scores))

        before, after = _mean(parent_scores), _mean(child_scores)
        if after > before:
            self.full_eval(child_contract, parent.candidate_id, REFLECTION, cid)
            self.remember(cid, child_results)
            self.trace.add("acceptance", iteration=iteration, candidate_id=cid, accepted=True,
                           reason=f"minibatch mean {before!r} -> {after!r}")
        else:
            self.trace.add("acceptance", iteration=iteration, candidate_id=cid, accepted=False,
                           reason=f"minibatch mean {before!r} -> {after!r}, not an improvement")

    def run(self) -> Candidate:
        self.next_id = 1
        self.full_eval(self.contract, None, BASELINE, 0)
        iteration = 0
        while self.trace.budget_used < self.config.max_full_evals and iteration < self.config.iteration_cap:
            self.iterate(iteration)
            iteration += 1
        winner = min(self.pool, key=lambda c: (-c.mean_val_score, c.candidate_id))
        self.trace.winner_id = winner.candidate_id
        self.trace.add("result", winner_id=winner.candidate_id, budget_used=self.trace.budget_used,
                       iterations=iteration, baseline_mean=self.pool[0].mean_val_score,
                       winner_mean=winner.mean_val_score)
        return winner


def compile_program(contract: TaskContract, train: Sequence[Record], val: Sequence[Record], metric: MetricFn,
                    student: Backend, student_settings: GenerationSettings, reflector: Backend,
                    reflector_settings: GenerationSettings, config: OptimizerConfig,
                    log: RunLog | None = None) -> tuple[CompiledProgram, OptimizationTrace]:
    """Calibrate ``contract``'s harness and return the best program and the trace.

    A :class:`BackendError` is re-raised with the partial trace attached as
    ``exc.trace``.
    """
    if not train or not val:
        raise ConfigError("compile needs non-empty train and validation sets")
    if config.reflection_minibatch_size > len(train):
        raise ConfigError(f"reflection_minibatch_size {config.reflection_minibatch_size} exceeds "
                          f"training-set size {len(train)}")
    run = _Run(contract, train, val, metric, student, student_settings, reflector, reflector_settings,
               config, log)
    try:
        winner = run.run()
    except BackendError as exc:
        run.trace.add("error", stage="optimizer.compile", message=str(exc), budget_used=run.trace.budget_used)
        exc.trace = run.trace  # type: ignore[attr-defined]
        raise
    program = CompiledProgram(with_harness(contract, winner.harness_text), student_settings)
    return program, run.trace
