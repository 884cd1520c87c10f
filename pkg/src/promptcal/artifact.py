"""Persisting compiled programs, provenance records and artifact bundles.

Only state is saved (contract, harness, student settings), never pickled code.
A bundle is a directory holding the compiled program, its provenance record,
the optimization trace, the call log and prediction logs, plus a manifest
with the SHA-256 of every member.
"""

from __future__ import annotations

import datetime as _dt
import inspect
import json
import os
import platform
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__
from .backend import Backend, GenerationSettings
from .canonical import sha256_hex
from .contract import ContractError, TaskContract
from .dataset import Record
from .errors import FormatError, IntegrityError, IoError
from .evaluation import evaluate_program
from .metric import ScoringPolicy
from .program import FORMAT_VERSION, SUPPORTED_FORMAT_VERSIONS, CompiledProgram

UNAVAILABLE = "unavailable"


def _sorted(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _sorted(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_sorted(v) for v in obj]
    return obj


def dump_canonical(obj: Mapping[str, Any], first: str | None = None) -> str:
    """Pretty, key-sorted JSON with a trailing newline; ``first`` is hoisted to the top."""
    body = _sorted(dict(obj))
    if first is not None and first in body:
        body = {first: body.pop(first), **body}
    return json.dumps(body, ensure_ascii=False, indent=2, allow_nan=False) + "\n"


def program_to_dict(program: CompiledProgram) -> dict[str, Any]:
    return {
        "format_version": program.format_version,
        "contract": program.contract.to_dict(),
        "student_settings": program.student_settings.to_dict(),
        "demonstrations": list(program.demonstrations),
    }


def serialize_program(program: CompiledProgram) -> str:
    if program.format_version not in SUPPORTED_FORMAT_VERSIONS:
        raise IoError(f"cannot save format_version {program.format_version}; "
                      f"supported: {sorted(SUPPORTED_FORMAT_VERSIONS)}")
    return dump_canonical(program_to_dict(program), first="format_version")


def _atomic_write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_artifact(program: CompiledProgram, path: str | Path) -> str:
    """Write ``program`` canonically and return the file's SHA-256."""
    text = serialize_program(program)
    _atomic_write(Path(path), text)
    return sha256_hex(text)


def program_from_dict(data: Any) -> CompiledProgram:
    if not isinstance(data, dict):
        raise FormatError("artifact must be a JSON object")
    found = data.get("format_version")
    if found not in SUPPORTED_FORMAT_VERSIONS:
        raise FormatError(f"unsupported artifact format_version: expected one of "
                          f"{sorted(SUPPORTED_FORMAT_VERSIONS)}, found {found!r}")
    try:
        contract = TaskContract.from_dict(data["contract"])
        settings = GenerationSettings.from_dict(data["student_settings"])
        demos = tuple(data.get("demonstrations", ()))
    except IntegrityError:
        raise
    except (KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"artifact does not match schema version {found}: {exc}") from exc
    return CompiledProgram(contract, settings, found, demos)


def load_artifact(path: str | Path) -> CompiledProgram:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return program_from_dict(data)


def artifact_filename(contract_id: str, seed: int, budget: int) -> str:
    return f"{contract_id}.{seed}.{budget}.compiled.json"


@dataclass(frozen=True)
class RoundTripReport:
    equal: bool
    n: int
    first_divergence: int | None
    original: tuple[tuple[str, str], ...]
    reloaded: tuple[tuple[str, str], ...]
    digest: str
    deterministic_backend: bool

    def summary(self) -> str:
        status = "PASS" if self.equal else "FAIL"
        text = f"round trip {status}: {self.n} predictions compared, artifact sha256 {self.digest}"
        if self.first_divergence is not None:
            i = self.first_divergence
            text += f"; first divergence at index {i}: {self.original[i]} vs {self.reloaded[i]}"
        if not self.deterministic_backend:
            text += " (backend is not deterministic; provider-side variation can cause mismatches)"
        return text


def roundtrip_check(program: CompiledProgram, records: Sequence[Record], backend: Backend,
                    policy: ScoringPolicy = ScoringPolicy(), *, path: str | Path | None = None,
                    before_load: Callable[[Path], None] | None = None,
                    num_threads: int = 1) -> RoundTripReport:
    """Save, reload and re-evaluate ``program``; compare ordered predictions.

    Mock backends are reset before each pass so both passes see the same
    script positions. ``before_load`` may edit the saved file (tamper tests).
    """
    with tempfile.TemporaryDirectory() as tmp:
        target = Path(path) if path is not None else Path(tmp) / "roundtrip.compiled.json"
        backend.reset()
        first = evaluate_program(program, records, backend, policy, num_threads=num_threads)
        digest = save_artifact(program, target)
        if before_load is not None:
            before_load(target)
        reloaded = load_artifact(target)
        backend.reset()
        second = evaluate_program(reloaded, records, backend, policy, num_threads=num_threads)
    a, b = tuple(first.predictions), tuple(second.predictions)
    divergence = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), None)
    if divergence is None and len(a) != len(b):
        divergence = min(len(a), len(b))
    return RoundTripReport(a == b, len(a), divergence, a, b, digest, backend.deterministic)


# --- provenance -------------------------------------------------------------

# Sections every provenance record must carry, with the keys each must hold.
PROVENANCE_SCHEMA: dict[str, tuple[str, ...]] = {
    "dataset": ("fingerprint", "n_records", "source"),
    "splits": ("seed", "split_fingerprint", "sizes", "ids"),
    "metric": ("id", "policy", "source_sha256", "policy_note"),
    "optimizer": ("max_full_evals", "reflection_minibatch_size", "num_threads", "seed",
                  "skip_perfect_score", "track_stats", "parent_strategy"),
    "models": ("student", "reflection"),
    "seeds": ("split", "optimizer"),
    "baseline": ("harness_text", "criteria_text", "interface_fingerprint"),
    "environment": ("python", "promptcal", "httpx", "platform", "execution_date"),
    "budget_used": (),
    "tokens": (),
    "evaluation": ("baseline_val_mean", "compiled_val_mean", "logs"),
    "artifact": ("file", "sha256"),
}

FP_POLICY_NOTE = ("fp_score is a policy choice for this run (partial credit for a false inclusion), "
                  "not a recommended default for every screening task")


def metric_source_digest() -> str:
    from . import metric

    return sha256_hex(inspect.getsource(metric))


def execution_date() -> str:
    """UTC date of the run; ``SOURCE_DATE_EPOCH`` pins it for reproducible bundles."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc).date().isoformat()
    return _dt.datetime.now(_dt.timezone.utc).date().isoformat()


def environment_record() -> dict[str, str]:
    try:
        import httpx

        httpx_version = httpx.__version__
    except Exception:  # pragma: no cover - httpx is a dependency
        httpx_version = UNAVAILABLE
    return {
        "python": platform.python_version(),
        "promptcal": __version__,
        "httpx": httpx_version,
        "platform": f"{platform.system()} {platform.machine()}".strip() or UNAVAILABLE,
        "execution_date": execution_date(),
    }


def missing_provenance_fields(prov: Mapping[str, Any]) -> list[str]:
    """Dotted names of schema fields that are absent or null.

    The string ``"unavailable"`` counts as present: it records that the
    value could not be obtained rather than silently dropping it.
    """
    missing = []
    for section, keys in PROVENANCE_SCHEMA.items():
        if section not in prov or prov[section] is None:
            missing.append(section)
            continue
        value = prov[section]
        for key in keys:
            if not isinstance(value, Mapping) or key not in value or value[key] is None:
                missing.append(f"{section}.{key}")
    return missing


# --- bundles ------------------------------------------------------------------

MANIFEST = "manifest.json"


def file_digest(path: str | Path) -> str:
    return sha256_hex(Path(path).read_bytes())


def write_manifest(bundle_dir: str | Path, members: Sequence[str]) -> str:
    root = Path(bundle_dir)
    entries = [{"path": m, "sha256": file_digest(root / m)} for m in sorted(members)]
    text = dump_canonical({"format_version": FORMAT_VERSION, "members": entries}, first="format_version")
    _atomic_write(root / MANIFEST, text)
    return sha256_hex(text)


def verify_bundle(bundle_dir: str | Path, *, require_provenance: bool = True) -> list[str]:
    """Problems found in a bundle: digest mismatches, missing files, provenance gaps."""
    root = Path(bundle_dir)
    problems: list[str] = []
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
        members = manifest["members"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        return [f"manifest unreadable: {exc}"]
    for entry in members:
        path = root / entry["path"]
        if not path.is_file():
            problems.append(f"missing member {entry['path']}")
        elif file_digest(path) != entry["sha256"]:
            problems.append(f"digest mismatch for {entry['path']}")
    listed = {e["path"] for e in members}
    if "provenance.json" not in listed:
        if require_provenance:
            problems.append("manifest does not list provenance.json")
    elif (root / "provenance.json").is_file():
        try:
            prov = json.loads((root / "provenance.json").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            problems.append(f"provenance.json unreadable: {exc.msg}")
        else:
            problems += [f"provenance field missing: {name}" for name in missing_provenance_fields(prov)]
            art = prov.get("artifact") or {}
            if isinstance(art, Mapping) and art.get("file") and art.get("file") in listed:
                if (root / art["file"]).is_file() and file_digest(root / art["file"]) != art.get("sha256"):
                    problems.append(f"provenance digest does not match {art['file']}")
    return problems
