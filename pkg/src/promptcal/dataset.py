"""Labelled records, label normalization and seeded stratified splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .canonical import SplitMix64, digest_of
from .errors import IngestError, SplitError

DEFAULT_LABELS = ("include", "exclude")

_ALIASES = {"included": "include", "excluded": "exclude"}


def normalize_label(value: Any) -> str:
    """Trim and lowercase; fold ``included``/``excluded``; ``None`` becomes ``""``."""
    text = str(value or "").strip().lower()
    return _ALIASES.get(text, text)


@dataclass(frozen=True)
class Record:
    record_id: str
    title: str
    abstract: str
    criteria: str
    gold_label: str
    extra: dict[str, str] = field(default_factory=dict, compare=False, hash=False)

    def field_value(self, name: str) -> str | None:
        if name in ("title", "abstract", "criteria"):
            return getattr(self, name)
        return self.extra.get(name)

    def to_dict(self) -> dict[str, Any]:
        d = {"id": self.record_id, "title": self.title, "abstract": self.abstract,
             "label": self.gold_label}
        if self.criteria:
            d["criteria"] = self.criteria
        d.update(self.extra)
        return d


def dataset_fingerprint(records: Iterable[Record]) -> str:
    return digest_of([r.to_dict() for r in records])


def load_records(path: str | Path, labels: Sequence[str] = DEFAULT_LABELS,
                 default_criteria: str = "") -> list[Record]:
    """Read a JSON Lines record file.

    Each line holds ``id``, ``title``, ``abstract``, ``label`` and optionally
    ``criteria``; unknown keys are kept in ``Record.extra``. Blank lines are
    skipped. Row numbers in errors are 1-based line numbers.
    """
    records: list[Record] = []
    seen: set[str] = set()
    allowed = set(labels)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"row {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise IngestError(f"row {lineno}: expected an object")
            missing = [k for k in ("id", "title", "abstract", "label") if k not in row]
            if missing:
                raise IngestError(f"row {lineno}: missing key(s) {', '.join(missing)}")
            rid = str(row["id"])
            if not rid.strip():
                raise IngestError(f"row {lineno}: empty id")
            if rid in seen:
                raise IngestError(f"row {lineno}: duplicate id {rid!r}")
            label = normalize_label(row["label"])
            if label not in allowed:
                raise IngestError(f"row {lineno}: unknown label {row['label']!r} (normalized {label!r})")
            seen.add(rid)
            extra = {k: str(v) for k, v in row.items()
                     if k not in ("id", "title", "abstract", "label", "criteria")}
            records.append(Record(
                record_id=rid,
                title=str(row["title"]),
                abstract=str(row["abstract"]),
                criteria=str(row.get("criteria") or default_criteria),
                gold_label=label,
                extra=extra,
            ))
    return records


def write_records(records: Iterable[Record], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSplits:
    train: tuple[Record, ...]
    val: tuple[Record, ...]
    test: tuple[Record, ...]
    seed: int
    split_fingerprint: str

    def get(self, name: str) -> tuple[Record, ...]:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def ids(self) -> dict[str, list[str]]:
        return {name: [r.record_id for r in self.get(name)] for name in SPLIT_NAMES}

    def manifest(self) -> dict[str, Any]:
        return {"seed": self.seed, "split_fingerprint": self.split_fingerprint, **self.ids()}


def split_fingerprint(ids: dict[str, list[str]], seed: int) -> str:
    return digest_of({"seed": seed, **{k: ids[k] for k in SPLIT_NAMES}})


def _largest_remainder(total: int, weights: dict[str, int]) -> dict[str, int]:
    """Apportion ``total`` units across classes proportionally to ``weights``."""
    pop = sum(weights.values())
    quotas = {c: total * w / pop for c, w in weights.items()}
    counts = {c: math.floor(q) for c, q in quotas.items()}
    leftover = total - sum(counts.values())
    # ties broken by class order, which is sorted and therefore deterministic
    by_fraction = sorted(weights, key=lambda c: -(quotas[c] - counts[c]))
    for c in by_fraction[:leftover]:
        counts[c] += 1
    return counts


def _allocate(sizes: Sequence[int], class_sizes: dict[str, int]) -> list[dict[str, int]]:
    """Per-split class counts, each within one record of the global share."""
    pop = sum(class_sizes.values())
    table = [_largest_remainder(n, class_sizes) for n in sizes]
    quota = [{c: n * w / pop for c, w in class_sizes.items()} for n in sizes]
    while True:
        over = [c for c in class_sizes if sum(row[c] for row in table) > class_sizes[c]]
        if not over:
            return table
        c = over[0]
        # undo the most generous round-up of c, handing the slot to a class that was rounded down
        candidates = sorted(
            (s for s in range(len(sizes)) if table[s][c] > quota[s][c]),
            key=lambda s: -(table[s][c] - quota[s][c]),
        )
        moved = False
        for s in candidates:
            spare = [d for d in class_sizes if d != c and table[s][d] < quota[s][d]
                     and sum(row[d] for row in table) < class_sizes[d]]
            if spare:
                d = max(spare, key=lambda d: quota[s][d] - table[s][d])
                table[s][c] -= 1
                table[s][d] += 1
                moved = True
                break
        if not moved:
            raise SplitError(f"class {c!r} has too few records ({class_sizes[c]}) to stratify these split sizes")


def stratified_split(records: Sequence[Record], sizes: tuple[int, int, int], seed: int) -> DatasetSplits:
    """Draw disjoint train/val/test splits preserving class proportions.

    Each class is shuffled once with SplitMix64 seeded by ``seed``; splits take
    consecutive slices of every shuffled class. Within a split, records keep
    their input order.
    """
    if len(sizes) != 3 or any(n < 0 for n in sizes):
        raise SplitError(f"sizes must be three non-negative integers, got {sizes!r}")
    if sum(sizes) > len(records):
        raise SplitError(f"split sizes {tuple(sizes)} exceed the {len(records)} available records")
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise SplitError("record ids are not unique")

    if sum(sizes) == 0:
        empty = {name: [] for name in SPLIT_NAMES}
        return DatasetSplits((), (), (), seed, split_fingerprint(empty, seed))

    position = {r.record_id: i for i, r in enumerate(records)}
    by_class: dict[str, list[Record]] = {}
    for r in records:
        by_class.setdefault(r.gold_label, []).append(r)
    classes = sorted(by_class)
    class_sizes = {c: len(by_class[c]) for c in classes}
    table = _allocate(sizes, class_sizes)

    rng = SplitMix64(seed)
    chosen: list[list[Record]] = [[] for _ in sizes]
    for c in classes:
        pool = list(by_class[c])
        rng.shuffle(pool)
        start = 0
        for s, row in enumerate(table):
            chosen[s].extend(pool[start:start + row[c]])
            start += row[c]
    parts = [tuple(sorted(group, key=lambda r: position[r.record_id])) for group in chosen]
    id_lists = {name: [r.record_id for r in part] for name, part in zip(SPLIT_NAMES, parts)}
    return DatasetSplits(parts[0], parts[1], parts[2], seed, split_fingerprint(id_lists, seed))


def splits_from_manifest(records: Sequence[Record], manifest: dict[str, Any]) -> DatasetSplits:
    """Rebuild splits from a saved manifest, checking its fingerprint."""
    index = {r.record_id: r for r in records}
    seed = int(manifest["seed"])
    try:
        parts = [tuple(index[i] for i in manifest[name]) for name in SPLIT_NAMES]
    except KeyError as exc:
        raise SplitError(f"split manifest references unknown record id {exc}") from exc
    fp = split_fingerprint({name: list(manifest[name]) for name in SPLIT_NAMES}, seed)
    if manifest.get("split_fingerprint") not in (None, fp):
        raise SplitError("split manifest fingerprint does not match its id lists")
    return DatasetSplits(parts[0], parts[1], parts[2], seed, fp)


def write_split_manifest(splits: DatasetSplits, path: str | Path) -> None:
    Path(path).write_text(json.dumps(splits.manifest(), indent=2) + "\n", encoding="utf-8")


def read_split_manifest(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
