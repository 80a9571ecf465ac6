"""
Line diffing and lexical-overlap utilities for comment/code comparison.
"""

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import FrozenSet, List, Sequence, Tuple

DATA_DIR = Path(__file__).resolve().parent / "data"

CODE_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|[0-9]+")


@lru_cache(maxsize=None)
def load_word_list(name: str) -> Tuple[str, ...]:
    """Read a shipped keyword list from data/<name>.txt ('#' lines are comments)."""
    path = DATA_DIR / f"{name}.txt"
    words = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line.lower())
    return tuple(words)


def stopwords() -> FrozenSet[str]:
    return frozenset(load_word_list("stopwords"))


@dataclass(frozen=True)
class LineDiff:
    added_lines: List[Tuple[int, str]] = field(default_factory=list)
    removed_lines: List[Tuple[int, str]] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not self.added_lines and not self.removed_lines


@dataclass(frozen=True)
class TokenDelta:
    added_tokens: Counter = field(default_factory=Counter)
    removed_tokens: Counter = field(default_factory=Counter)

    def changed_tokens(self) -> FrozenSet[str]:
        return frozenset(self.added_tokens) | frozenset(self.removed_tokens)

    def is_empty(self) -> bool:
        return not self.added_tokens and not self.removed_tokens


@dataclass(frozen=True)
class OverlapScore:
    count: int
    ratio: float


def split_lines(text: str) -> List[str]:
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return text.split("\n") if text else []


def _lcs_suffix_table(a: Sequence[str], b: Sequence[str]) -> List[List[int]]:
    # table[i][j] = LCS length of a[i:] and b[j:]
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, below = table[i], table[i + 1]
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                row[j] = below[j + 1] + 1
            else:
                row[j] = max(below[j], row[j + 1])
    return table


def line_diff(before: str, after: str) -> LineDiff:
    """LCS line diff; matches are taken as early as possible in both texts."""
    a, b = split_lines(before), split_lines(after)
    table = _lcs_suffix_table(a, b)
    added: List[Tuple[int, str]] = []
    removed: List[Tuple[int, str]] = []
    i = j = 0
    while i < len(a) and j < len(b):
        if a[i] == b[j] and table[i][j] == table[i + 1][j + 1] + 1:
            i += 1
            j += 1
        elif table[i + 1][j] >= table[i][j + 1]:
            removed.append((i, a[i]))
            i += 1
        else:
            added.append((j, b[j]))
            j += 1
    removed.extend((k, a[k]) for k in range(i, len(a)))
    added.extend((k, b[k]) for k in range(j, len(b)))
    return LineDiff(added_lines=added, removed_lines=removed)


def apply_line_diff(before: str, diff: LineDiff) -> str:
    """Rebuild the after-text from the before-text and its diff."""
    removed = {idx for idx, _ in diff.removed_lines}
    kept = [line for idx, line in enumerate(split_lines(before)) if idx not in removed]
    added = dict(diff.added_lines)
    result: List[str] = []
    kept_iter = iter(kept)
    total = len(kept) + len(added)
    for idx in range(total):
        if idx in added:
            result.append(added[idx])
        else:
            result.append(next(kept_iter))
    return "\n".join(result)


def tokenize_code(text: str) -> List[str]:
    return CODE_TOKEN_RE.findall(text)


def token_delta(diff: LineDiff) -> TokenDelta:
    added = Counter()
    removed = Counter()
    for _, line in diff.added_lines:
        added.update(tokenize_code(line))
    for _, line in diff.removed_lines:
        removed.update(tokenize_code(line))
    return TokenDelta(added_tokens=added, removed_tokens=removed)


def pair_delta(code_before: str, code_after: str) -> TokenDelta:
    return token_delta(line_diff(code_before, code_after))


def comment_content_tokens(comment: str) -> List[str]:
    """Distinct lowercased comment tokens with stopwords removed, in first-seen order."""
    stop = stopwords()
    seen = []
    for token in tokenize_code(comment):
        lowered = token.lower()
        if lowered not in stop and lowered not in seen:
            seen.append(lowered)
    return seen


def lexical_overlap(comment: str, delta: TokenDelta) -> OverlapScore:
    content = comment_content_tokens(comment)
    if not content:
        return OverlapScore(count=0, ratio=0.0)
    changed = {t.lower() for t in delta.changed_tokens()}
    count = sum(1 for token in content if token in changed)
    return OverlapScore(count=count, ratio=count / len(content))
