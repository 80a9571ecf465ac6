"""
Evaluation metrics: confusion counts and per-class precision/recall/F1 with
Valid as the positive class, Cohen's kappa, and the code-update metrics
(exact match and add-one smoothed BLEU-4).
"""

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Any, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from corpus import Label
from errors import LengthMismatch, MissingLabel


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassReport:
    valid: ClassMetrics
    invalid: ClassMetrics

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {"Valid": asdict(self.valid), "Invalid": asdict(self.invalid)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Any]]) -> "ClassReport":
        return cls(valid=ClassMetrics(**data["Valid"]), invalid=ClassMetrics(**data["Invalid"]))


def _decision(value) -> Label:
    return value if isinstance(value, Label) else value.decision


def confusion(predictions: Sequence, labels: Sequence[Optional[Label]],
              pair_ids: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    """Predictions may be Labels or Verdicts; a missing gold label is an error."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels",
                             predictions=len(predictions), labels=len(labels))
    counts = Counter()
    for i, (pred, gold) in enumerate(zip(predictions, labels)):
        if gold is None:
            raise MissingLabel(pair_ids[i] if pair_ids else str(i))
        predicted_valid = _decision(pred) is Label.VALID
        gold_valid = gold is Label.VALID
        if predicted_valid and gold_valid:
            counts["tp"] += 1
        elif predicted_valid:
            counts["fp"] += 1
        elif gold_valid:
            counts["fn"] += 1
        else:
            counts["tn"] += 1
    return ConfusionMatrix(**counts)


def safe_ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def class_report(cm: ConfusionMatrix) -> ClassReport:
    """Both classes; Invalid metrics come from swapping the roles of tp/tn and fp/fn."""
    vp, vr = safe_ratio(cm.tp, cm.tp + cm.fp), safe_ratio(cm.tp, cm.tp + cm.fn)
    ip, ir = safe_ratio(cm.tn, cm.tn + cm.fn), safe_ratio(cm.tn, cm.tn + cm.fp)
    return ClassReport(
        valid=ClassMetrics(vp, vr, f1_score(vp, vr), cm.tp + cm.fn),
        invalid=ClassMetrics(ip, ir, f1_score(ip, ir), cm.tn + cm.fp),
    )


def cohen_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    if len(a) != len(b):
        raise LengthMismatch(f"annotations differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise LengthMismatch("kappa needs at least one item")
    n = len(a)
    p_o = sum(1 for x, y in zip(a, b) if x == y) / n
    count_a, count_b = Counter(a), Counter(b)
    p_e = sum(count_a[c] * count_b[c] for c in set(count_a) | set(count_b)) / (n * n)
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


# code update metrics

def normalize_code(text: str) -> str:
    """CRLF to LF, trailing whitespace stripped per line, outer blank lines dropped."""
    lines = [line.rstrip() for line in text.replace("\r\n", "\n").replace("\r", "\n").split("\n")]
    while lines and not lines[0]:
        lines.pop(0)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


def exact_match(candidate: str, reference: str) -> bool:
    return normalize_code(candidate) == normalize_code(reference)


def bleu_tokens(text: str) -> List[str]:
    return normalize_code(text).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_counts(candidate: Sequence[str], reference: Sequence[str], n: int) -> Tuple[int, int]:
    cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
    matches = sum(min(count, ref[gram]) for gram, count in cand.items())
    return matches, max(len(candidate) - n + 1, 0)


def _bleu_from_counts(matches: Sequence[int], totals: Sequence[int], cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for n, (m, c) in enumerate(zip(matches, totals), start=1):
        # add-one smoothing only for n >= 2
        p = m / c if n == 1 else (m + 1) / (c + 1)
        if p == 0:
            return 0.0
        log_sum += math.log(p) / len(matches)
    brevity = math.exp(1 - ref_len / cand_len) if cand_len < ref_len else 1.0
    return brevity * math.exp(log_sum)


def bleu4_addone(candidate: str, reference: str) -> float:
    cand, ref = bleu_tokens(candidate), bleu_tokens(reference)
    counts = [_clipped_counts(cand, ref, n) for n in range(1, 5)]
    return _bleu_from_counts([m for m, _ in counts], [c for _, c in counts], len(cand), len(ref))


def corpus_bleu4_addone(pairs: Sequence[Tuple[str, str]]) -> float:
    """Counts pooled over all (candidate, reference) pairs before smoothing."""
    matches, totals = [0] * 4, [0] * 4
    cand_len = ref_len = 0
    for candidate, reference in pairs:
        cand, ref = bleu_tokens(candidate), bleu_tokens(reference)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            m, c = _clipped_counts(cand, ref, n)
            matches[n - 1] += m
            totals[n - 1] += c
    return _bleu_from_counts(matches, totals, cand_len, ref_len)


@dataclass(frozen=True)
class ApuInstance:
    pair_id: str
    em: bool
    bleu: float
    formatting_only: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ApuScore:
    em_rate: float
    bleu4: float
    instances: Tuple[ApuInstance, ...] = ()
    formatting_only: int = 0
    bleu_variant: str = "sentence-mean"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "em_rate": self.em_rate,
            "bleu4": self.bleu4,
            "bleu_variant": self.bleu_variant,
            "formatting_only": self.formatting_only,
            "count": len(self.instances),
            "instances": [i.to_dict() for i in self.instances],
        }


def score_apu(items: Sequence[Tuple[str, str, str]], corpus_bleu: bool = False) -> ApuScore:
    """Score (pair_id, candidate, reference) triples; BLEU is the sentence mean unless corpus_bleu."""
    instances = []
    for pair_id, candidate, reference in items:
        em = exact_match(candidate, reference)
        bleu = bleu4_addone(candidate, reference)
        instances.append(ApuInstance(pair_id, em, bleu, formatting_only=(not em and bleu == 1.0)))
    if not instances:
        return ApuScore(0.0, 0.0, (), 0, "corpus" if corpus_bleu else "sentence-mean")
    em_rate = sum(i.em for i in instances) / len(instances)
    if corpus_bleu:
        bleu4 = corpus_bleu4_addone([(c, r) for _, c, r in items])
    else:
        bleu4 = sum(i.bleu for i in instances) / len(instances)
    return ApuScore(
        em_rate=em_rate,
        bleu4=bleu4,
        instances=tuple(instances),
        formatting_only=sum(i.formatting_only for i in instances),
        bleu_variant="corpus" if corpus_bleu else "sentence-mean",
    )


# tables

TABLE_COLUMNS = ["Technique", "Invalid P", "Invalid R", "Invalid F1", "Valid P", "Valid R", "Valid F1"]


def vcp_table(reports: Mapping[str, Optional[ClassReport]]) -> pd.DataFrame:
    """One row per technique: Invalid-class triple then Valid-class triple."""
    rows = []
    for technique, report in reports.items():
        if report is None:
            continue
        rows.append([technique,
                     report.invalid.precision, report.invalid.recall, report.invalid.f1,
                     report.valid.precision, report.valid.recall, report.valid.f1])
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def _cell(value: Union[str, float, int, None], decimals: int) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "–"
    if isinstance(value, float):
        return f"{value:.{decimals}f}"
    return str(value)


def markdown_table(df: pd.DataFrame, decimals: int = 4) -> str:
    header = "| " + " | ".join(str(c) for c in df.columns) + " |"
    rule = "|" + "|".join("---" for _ in df.columns) + "|"
    body = ["| " + " | ".join(_cell(v, decimals) for v in row) + " |" for row in df.itertuples(index=False)]
    return "\n".join([header, rule] + body)


def text_table(df: pd.DataFrame, decimals: int = 4) -> str:
    if df.empty:
        return "(no rows)"
    return df.to_string(index=False, float_format=lambda v: f"{v:.{decimals}f}")
