"""Task contracts: fixed criteria and interface plus a mutable prompt harness.

A contract has three layers. The criteria and the field interface are frozen
at construction and covered by ``interface_fingerprint``; the harness text is
the only part an optimizer may replace, and only through :func:`with_harness`,
which returns a new contract.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .canonical import digest_of, normalize_newlines
from .errors import ContractError, IntegrityError

INPUT = "input"
OUTPUT = "output"
FREE_TEXT = "free_text"
TOKEN_SET = "token_set"


@dataclass(frozen=True)
class FieldSpec:
    name: str
    description: str
    role: str
    constraint: str | None = None
    tokens: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ContractError(f"field name must be non-empty without whitespace: {self.name!r}")
        if self.role not in (INPUT, OUTPUT):
            raise ContractError(f"field {self.name!r}: role must be 'input' or 'output', got {self.role!r}")
        if self.constraint not in (None, FREE_TEXT, TOKEN_SET):
            raise ContractError(f"field {self.name!r}: unknown constraint {self.constraint!r}")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.constraint == TOKEN_SET:
            if len(set(self.tokens)) < 2 or len(set(self.tokens)) != len(self.tokens):
                raise ContractError(f"field {self.name!r}: token_set needs >=2 distinct tokens")
            for tok in self.tokens:
                if not tok or tok != tok.strip().lower() or any(ch.isspace() for ch in tok):
                    raise ContractError(f"field {self.name!r}: token {tok!r} must be a lowercase word")
        elif self.tokens:
            raise ContractError(f"field {self.name!r}: tokens given without a token_set constraint")

    @classmethod
    def input(cls, name: str, description: str) -> FieldSpec:
        return cls(name, description, INPUT)

    @classmethod
    def output(cls, name: str, description: str, tokens: Sequence[str] | None = None) -> FieldSpec:
        if tokens is None:
            return cls(name, description, OUTPUT, FREE_TEXT)
        return cls(name, description, OUTPUT, TOKEN_SET, tuple(tokens))

    def to_dict(self) -> dict[str, Any]:
        if self.constraint is None:
            constraint = None
        elif self.constraint == FREE_TEXT:
            constraint = {"kind": FREE_TEXT}
        else:
            constraint = {"kind": TOKEN_SET, "tokens": list(self.tokens)}
        return {
            "name": self.name,
            "description": self.description,
            "role": self.role,
            "constraint": constraint,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FieldSpec:
        try:
            constraint = data.get("constraint")
            kind = None if constraint is None else constraint["kind"]
            tokens = () if constraint is None else tuple(constraint.get("tokens", ()))
            return cls(data["name"], data.get("description", ""), data["role"], kind, tokens)
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed field spec: {data!r}") from exc


def compute_fingerprint(criteria_text: str, input_fields: Iterable[FieldSpec],
                        output_fields: Iterable[FieldSpec]) -> str:
    """SHA-256 over the fixed layers only; the harness never enters the digest."""

    def norm_field(f: FieldSpec) -> dict[str, Any]:
        d = f.to_dict()
        d["description"] = normalize_newlines(d["description"])
        return d

    return digest_of({
        "criteria_text": normalize_newlines(criteria_text),
        "input_fields": [norm_field(f) for f in input_fields],
        "output_fields": [norm_field(f) for f in output_fields],
    })


@dataclass(frozen=True)
class TaskContract:
    contract_id: str
    criteria_text: str
    input_fields: tuple[FieldSpec, ...]
    output_fields: tuple[FieldSpec, ...]
    harness_text: str
    interface_fingerprint: str

    @property
    def decision_field(self) -> FieldSpec:
        """The first token_set-constrained output field."""
        for f in self.output_fields:
            if f.constraint == TOKEN_SET:
                return f
        raise ContractError("contract has no token_set output field")  # unreachable for valid contracts

    @property
    def allowed_labels(self) -> tuple[str, ...]:
        return self.decision_field.tokens

    def field_names(self, role: str | None = None) -> list[str]:
        fields = self.input_fields + self.output_fields
        return [f.name for f in fields if role is None or f.role == role]

    def to_dict(self) -> dict[str, Any]:
        return {
            "contract_id": self.contract_id,
            "criteria_text": self.criteria_text,
            "input_fields": [f.to_dict() for f in self.input_fields],
            "output_fields": [f.to_dict() for f in self.output_fields],
            "harness_text": self.harness_text,
            "interface_fingerprint": self.interface_fingerprint,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], *, verify: bool = True) -> TaskContract:
        """Rebuild a contract; a stale fingerprint raises :class:`IntegrityError`."""
        try:
            contract = new_contract(
                data["criteria_text"],
                [FieldSpec.from_dict(f) for f in data["input_fields"]],
                [FieldSpec.from_dict(f) for f in data["output_fields"]],
                data["harness_text"],
                contract_id=data["contract_id"],
            )
        except (KeyError, TypeError) as exc:
            raise ContractError(f"contract document missing key: {exc}") from exc
        stored = data.get("interface_fingerprint")
        if verify and stored is not None and stored != contract.interface_fingerprint:
            raise IntegrityError(
                f"interface fingerprint mismatch: stored {stored}, recomputed {contract.interface_fingerprint}"
            )
        return contract


def new_contract(criteria: str, inputs: Sequence[FieldSpec], outputs: Sequence[FieldSpec],
                 harness: str, *, contract_id: str = "task") -> TaskContract:
    if not contract_id or any(ch.isspace() for ch in contract_id):
        raise ContractError(f"contract_id must be a non-empty identifier: {contract_id!r}")
    if not criteria or not criteria.strip():
        raise ContractError("criteria text is empty")
    if not harness or not harness.strip():
        raise ContractError("harness text is empty")
    for f in inputs:
        if f.role != INPUT:
            raise ContractError(f"field {f.name!r} listed as input but has role {f.role!r}")
    for f in outputs:
        if f.role != OUTPUT:
            raise ContractError(f"field {f.name!r} listed as output but has role {f.role!r}")
    seen: set[str] = set()
    for f in list(inputs) + list(outputs):
        if f.name in seen:
            raise ContractError(f"duplicate field name {f.name!r}")
        seen.add(f.name)
    if not any(f.constraint == TOKEN_SET for f in outputs):
        raise ContractError("at least one output field must carry a token_set constraint")
    inputs, outputs = tuple(inputs), tuple(outputs)
    return TaskContract(
        contract_id=contract_id,
        criteria_text=criteria,
        input_fields=inputs,
        output_fields=outputs,
        harness_text=harness,
        interface_fingerprint=compute_fingerprint(criteria, inputs, outputs),
    )


def with_harness(contract: TaskContract, new_harness: str) -> TaskContract:
    """Return a copy of ``contract`` carrying ``new_harness``; fixed layers are shared."""
    if not new_harness or not new_harness.strip():
        raise ContractError("replacement harness is empty")
    return dataclasses.replace(contract, harness_text=new_harness)


def save_contract(contract: TaskContract, path: str | Path) -> None:
    text = json.dumps(contract.to_dict(), ensure_ascii=False, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_contract(path: str | Path) -> TaskContract:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: not valid JSON ({exc})") from exc
    return TaskContract.from_dict(data)
