"""A runnable program: a contract with its harness plus student settings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

from .backend import Backend, ChatExchange, GenerationSettings, RunLog, complete_many, parse_fields, render_messages
from .contract import TaskContract
from .dataset import Record
from .errors import RenderError
from .metric import Prediction

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SUPPORTED_FORMAT_VERSIONS = frozenset({FORMAT_VERSION})


@dataclass(frozen=True)
class CompiledProgram:
    contract: TaskContract
    student_settings: GenerationSettings
    format_version: int = FORMAT_VERSION
    # reserved for few-shot state; always empty in this package
    demonstrations: tuple[Any, ...] = field(default=())

    @property
    def harness_text(self) -> str:
        return self.contract.harness_text


_warned_criteria: set[str] = set()


def record_inputs(contract: TaskContract, record: Record) -> dict[str, str]:
    """Map a record onto the contract's input fields.

    A per-record ``criteria`` value wins over the contract's frozen block; a
    record without one falls back to the contract's criteria text.
    """
    values: dict[str, str] = {}
    for f in contract.input_fields:
        if f.name == "criteria":
            value = record.criteria or contract.criteria_text
            if record.criteria and record.criteria != contract.criteria_text \
                    and record.record_id not in _warned_criteria:
                _warned_criteria.add(record.record_id)
                logger.warning("record %s carries its own criteria; using it instead of the contract's",
                               record.record_id)
        else:
            value = record.field_value(f.name)
        if value is None:
            raise RenderError(f"record {record.record_id!r} has no value for input field {f.name!r}")
        values[f.name] = value
    return values


def run_program(contract: TaskContract, records: Sequence[Record], backend: Backend,
                settings: GenerationSettings, log: RunLog | None = None,
                num_threads: int = 1) -> list[tuple[ChatExchange, Prediction]]:
    prompts = [render_messages(contract, record_inputs(contract, r)) for r in records]
    exchanges = complete_many(backend, settings, prompts, log, num_threads)
    return [(ex, parse_fields(ex.response_text, contract)) for ex in exchanges]
