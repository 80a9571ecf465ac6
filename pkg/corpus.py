"""
Comment-edit corpus: canonical record type, JSON-lines/CSV loading, saving,
splitting and summary statistics.
"""

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import (
    DuplicateId,
    EmptyCorpus,
    MalformedRecord,
    RatioSum,
    UnknownSplitTag,
)

logger = logging.getLogger(__name__)


class Label(str, Enum):
    VALID = "Valid"
    INVALID = "Invalid"


class CorpusFormat(str, Enum):
    JSONL = "jsonl"
    CSV = "csv"


# Canonical key order of the JSON-lines format.
FIELD_ORDER = (
    "pair_id",
    "post_id",
    "comment_text",
    "code_before",
    "code_after",
    "label",
    "comment_time",
    "edit_time",
    "commenter_id",
    "editor_id",
    "language_tag",
)

_LABEL_ALIASES = {
    "1": Label.VALID,
    "valid": Label.VALID,
    "yes": Label.VALID,
    "true": Label.VALID,
    "0": Label.INVALID,
    "invalid": Label.INVALID,
    "no": Label.INVALID,
    "false": Label.INVALID,
}

_SPLIT_ALIASES = {
    "train": "train",
    "training": "train",
    "validation": "validation",
    "valid": "validation",
    "val": "validation",
    "dev": "validation",
    "test": "test",
    "testing": "test",
}


@dataclass(frozen=True)
class CommentEditPair:
    pair_id: str
    comment_text: str
    code_before: str
    code_after: str = ""
    post_id: str = ""
    label: Optional[Label] = None
    comment_time: Optional[datetime] = None
    edit_time: Optional[datetime] = None
    commenter_id: Optional[str] = None
    editor_id: Optional[str] = None
    language_tag: Optional[str] = None
    # keys outside FIELD_ORDER (e.g. a published split tag), kept for round trips
    extra: Tuple[Tuple[str, Any], ...] = field(default=(), compare=True)

    def extra_value(self, key: str) -> Any:
        for k, v in self.extra:
            if k == key:
                return v
        return None

    def to_record(self) -> Dict[str, Any]:
        record = {
            "pair_id": self.pair_id,
            "post_id": self.post_id,
            "comment_text": self.comment_text,
            "code_before": self.code_before,
            "code_after": self.code_after,
            "label": self.label.value if self.label else None,
            "comment_time": format_timestamp(self.comment_time),
            "edit_time": format_timestamp(self.edit_time),
            "commenter_id": self.commenter_id,
            "editor_id": self.editor_id,
            "language_tag": self.language_tag,
        }
        for k, v in self.extra:
            record[k] = v
        return record


@dataclass(frozen=True)
class DatasetSplit:
    train: List[CommentEditPair]
    validation: List[CommentEditPair]
    test: List[CommentEditPair]

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def by_name(self, name: str) -> List[CommentEditPair]:
        canonical = _SPLIT_ALIASES.get(name.lower())
        if canonical is None:
            raise UnknownSplitTag(f"unknown split {name!r}", tag=name)
        return getattr(self, canonical)


@dataclass(frozen=True)
class SplitSpec:
    """Either an explicit per-record split field, or ratios plus a seed."""
    field: Optional[str] = None
    ratios: Optional[Tuple[float, float, float]] = None
    seed: int = 0


@dataclass(frozen=True)
class CorpusStats:
    total: int
    valid: int
    invalid: int
    unlabeled: int
    valid_ratio: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total": self.total,
            "valid": self.valid,
            "invalid": self.invalid,
            "unlabeled": self.unlabeled,
            "valid_ratio": self.valid_ratio,
        }


def parse_label(value: Any) -> Optional[Label]:
    """Normalize {1, 0, "Valid", "Invalid", "YES", "NO"} to a Label; blanks are unlabeled."""
    if value is None:
        return None
    if isinstance(value, Label):
        return value
    if isinstance(value, bool):
        return Label.VALID if value else Label.INVALID
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    text = str(value).strip()
    if not text:
        return None
    label = _LABEL_ALIASES.get(text.lower())
    if label is None:
        raise ValueError(f"unrecognized label {value!r}")
    return label


def parse_timestamp(value: Any, line: int, name: str) -> Optional[datetime]:
    """RFC-3339 parse; unparseable values become absent with a warning."""
    if value is None:
        return None
    text = str(value).strip()
    if not text:
        return None
    try:
        parsed = datetime.fromisoformat(text.replace("Z", "+00:00").replace("z", "+00:00"))
    except ValueError:
        logger.warning(f"line {line}: unparseable {name} {text!r}, treating as absent")
        return None
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc)


def format_timestamp(value: Optional[datetime]) -> Optional[str]:
    if value is None:
        return None
    return value.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _optional_str(value: Any) -> Optional[str]:
    if value is None:
        return None
    text = str(value)
    return text if text.strip() else None


def record_to_pair(record: Mapping[str, Any], line: int) -> CommentEditPair:
    """Validate one raw record and build a CommentEditPair."""
    pair_id = _optional_str(record.get("pair_id"))
    if pair_id is None:
        raise MalformedRecord(line, "missing pair_id")

    comment = record.get("comment_text")
    if comment is None or not str(comment).strip():
        raise MalformedRecord(line, "missing or empty comment_text")

    code_before = record.get("code_before")
    if code_before is None or not str(code_before).strip():
        raise MalformedRecord(line, "missing or empty code_before")

    try:
        label = parse_label(record.get("label"))
    except ValueError as e:
        raise MalformedRecord(line, str(e)) from e

    code_after = record.get("code_after")
    extra = tuple((k, v) for k, v in record.items() if k not in FIELD_ORDER)

    return CommentEditPair(
        pair_id=pair_id,
        post_id=_optional_str(record.get("post_id")) or "",
        comment_text=str(comment),
        code_before=str(code_before),
        code_after="" if code_after is None else str(code_after),
        label=label,
        comment_time=parse_timestamp(record.get("comment_time"), line, "comment_time"),
        edit_time=parse_timestamp(record.get("edit_time"), line, "edit_time"),
        commenter_id=_optional_str(record.get("commenter_id")),
        editor_id=_optional_str(record.get("editor_id")),
        language_tag=_optional_str(record.get("language_tag")),
        extra=extra,
    )


def _read_jsonl(path: Path) -> Iterable[Tuple[int, Dict[str, Any]]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}") from e
            if not isinstance(record, dict):
                raise MalformedRecord(line_no, "record is not a JSON object")
            yield line_no, record


def _read_csv(path: Path) -> Iterable[Tuple[int, Dict[str, Any]]]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    # header is line 1
    for offset, row in enumerate(df.to_dict("records")):
        yield offset + 2, {k: (v if v != "" else None) for k, v in row.items()}


def load_corpus(path, format: CorpusFormat = CorpusFormat.JSONL) -> List[CommentEditPair]:
    """Load a corpus in file order; duplicate pair_ids and malformed records are rejected."""
    path = Path(path)
    fmt = CorpusFormat(format)
    reader = _read_jsonl if fmt is CorpusFormat.JSONL else _read_csv

    pairs: List[CommentEditPair] = []
    seen = set()
    for line_no, record in reader(path):
        pair = record_to_pair(record, line_no)
        if pair.pair_id in seen:
            raise DuplicateId(pair.pair_id)
        seen.add(pair.pair_id)
        pairs.append(pair)

    if not pairs:
        raise EmptyCorpus(f"no records in {path}", path=str(path))
    logger.info(f"Loaded {len(pairs)} pairs from {path}")
    return pairs


def guess_format(path) -> CorpusFormat:
    return CorpusFormat.CSV if str(path).lower().endswith(".csv") else CorpusFormat.JSONL


def dump_pair(pair: CommentEditPair) -> str:
    return json.dumps(pair.to_record(), ensure_ascii=False)


def save_corpus(pairs: Sequence[CommentEditPair], path) -> Path:
    """Write canonical JSON-lines with keys in declared field order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair in pairs:
            f.write(dump_pair(pair) + "\n")
    return path


def corpus_digest(pairs: Sequence[CommentEditPair]) -> str:
    h = hashlib.sha256()
    for pair in pairs:
        h.update(dump_pair(pair).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def split_corpus(pairs: Sequence[CommentEditPair], spec: SplitSpec) -> DatasetSplit:
    """Partition pairs by an explicit split field or by seeded ratios."""
    if spec.field:
        buckets: Dict[str, List[CommentEditPair]] = {"train": [], "validation": [], "test": []}
        for pair in pairs:
            tag = pair.extra_value(spec.field)
            canonical = _SPLIT_ALIASES.get(str(tag).strip().lower()) if tag is not None else None
            if canonical is None:
                raise UnknownSplitTag(f"pair {pair.pair_id!r} has split tag {tag!r}",
                                      pair_id=pair.pair_id, tag=tag)
            buckets[canonical].append(pair)
        return DatasetSplit(buckets["train"], buckets["validation"], buckets["test"])

    if spec.ratios is None:
        raise RatioSum("split spec needs either a field or ratios")
    r_train, r_val, r_test = spec.ratios
    if min(spec.ratios) < 0 or abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise RatioSum(f"ratios {spec.ratios} must be non-negative and sum to 1.0",
                       ratios=list(spec.ratios))

    n = len(pairs)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = min(n, int(round(r_train * n)))
    n_val = min(n - n_train, int(round(r_val * n)))
    # each split keeps source order
    train_idx = sorted(order[:n_train])
    val_idx = sorted(order[n_train:n_train + n_val])
    test_idx = sorted(order[n_train + n_val:])
    return DatasetSplit(
        [pairs[i] for i in train_idx],
        [pairs[i] for i in val_idx],
        [pairs[i] for i in test_idx],
    )


def corpus_stats(pairs: Iterable[CommentEditPair]) -> CorpusStats:
    counts = Counter(p.label for p in pairs)
    valid = counts.get(Label.VALID, 0)
    invalid = counts.get(Label.INVALID, 0)
    unlabeled = counts.get(None, 0)
    labeled = valid + invalid
    return CorpusStats(
        total=valid + invalid + unlabeled,
        valid=valid,
        invalid=invalid,
        unlabeled=unlabeled,
        valid_ratio=valid / labeled if labeled else 0.0,
    )
