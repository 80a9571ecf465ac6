"""
Non-LLM baselines: Tang's three matching rules, the engineered comment/code
features, standardization, and logistic regression trained by full-batch
gradient descent with (XᵀWX)⁻¹ standard errors.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from corpus import CommentEditPair, Label
from errors import BaselineError, DimensionMismatch, EmptyMatrix, NonFinite, SingleClass, SingularMatrix
from rules import contains_any
from textdiff import lexical_overlap, load_word_list, pair_delta, tokenize_code

logger = logging.getLogger(__name__)

FEATURE_GROUPS = (
    ("Lexical/Length", ("char_count", "word_count", "sentence_count", "avg_sentence_len", "lexical_diversity")),
    ("Pragmatics", ("has_thanks", "has_please", "has_modal", "num_questions", "is_question", "num_exclaims")),
    ("Action/Error", ("contains_fix_words", "contains_negative")),
    ("Code-like/Refs", ("has_code_ticks", "has_identifier_style", "has_function_pattern", "num_digits",
                        "code_like_ratio", "ref_tokens", "avg_token_len")),
    ("Structure/Overlap", ("loc_before", "num_functions_before", "num_comments_in_code",
                           "token_overlap_count", "token_overlap_ratio")),
)
FEATURE_NAMES: Tuple[str, ...] = tuple(name for _, names in FEATURE_GROUPS for name in names)

SENTENCE_END_RE = re.compile(r"[.!?]+(?=\s|$)")
THANKS_RE = re.compile(r"\b(?:thanks?|thx)\b", re.IGNORECASE)
PLEASE_RE = re.compile(r"\b(?:please|pls)\b", re.IGNORECASE)
BACKTICK_RE = re.compile(r"`[^`]+`")
CAMEL_RE = re.compile(r"\b[a-z][a-z0-9]*[A-Z][A-Za-z0-9]*\b")
SNAKE_RE = re.compile(r"\b[A-Za-z][A-Za-z0-9]*_[A-Za-z0-9_]+\b")
FUNCTION_CALL_RE = re.compile(r"\b[A-Za-z_][A-Za-z0-9_]*\(")
CODE_WORD_RE = re.compile(r"[`(){}\[\];=<>]|[a-z][A-Z]|_|\w\.\w")
URL_RE = re.compile(r"https?://\S+")
MENTION_RE = re.compile(r"(?<!\w)@\w+")
FUNCTION_LINE_RE = re.compile(r"^\s*(?:[\w<>\[\],]+\s+)*([A-Za-z_]\w*)\s*\(")
CONTROL_KEYWORDS = frozenset({
    "if", "elif", "else", "for", "foreach", "while", "switch", "case", "catch", "return",
    "with", "try", "except", "assert", "new", "sizeof", "typeof", "not", "and", "or",
})
COMMENT_PREFIXES = ("//", "#", "/*", "*", "<!--")


@dataclass(frozen=True)
class FeatureVector:
    values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(FEATURE_NAMES):
            raise DimensionMismatch(len(FEATURE_NAMES), len(self.values), what="feature vector")

    def __getitem__(self, name: str) -> float:
        return self.values[FEATURE_NAMES.index(name)]

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def split_sentences(text: str) -> List[str]:
    return [s for s in (part.strip() for part in SENTENCE_END_RE.split(text)) if s]


def count_function_cues(code: str) -> int:
    count = 0
    for line in code.splitlines():
        match = FUNCTION_LINE_RE.match(line)
        if match and match.group(1) not in CONTROL_KEYWORDS:
            count += 1
    return count


def count_code_comments(code: str) -> int:
    return sum(1 for line in code.splitlines() if line.strip().startswith(COMMENT_PREFIXES))


def extract_features(pair: CommentEditPair) -> FeatureVector:
    text = pair.comment_text
    words = text.split()
    sentences = split_sentences(text)
    n_words = len(words)

    overlap = lexical_overlap(text, pair_delta(pair.code_before, pair.code_after))
    values = {
        "char_count": len(text),
        "word_count": n_words,
        "sentence_count": len(sentences),
        "avg_sentence_len": n_words / len(sentences) if sentences else 0.0,
        "lexical_diversity": len({w.lower() for w in words}) / n_words if n_words else 0.0,
        "has_thanks": int(bool(THANKS_RE.search(text))),
        "has_please": int(bool(PLEASE_RE.search(text))),
        "has_modal": int(contains_any(text, load_word_list("modal_words"))),
        "num_questions": text.count("?"),
        "is_question": int(text.rstrip().endswith("?")),
        "num_exclaims": text.count("!"),
        "contains_fix_words": int(contains_any(text, load_word_list("fix_words"))),
        "contains_negative": int(contains_any(text, load_word_list("negative_words"))),
        "has_code_ticks": int(bool(BACKTICK_RE.search(text))),
        "has_identifier_style": int(bool(CAMEL_RE.search(text) or SNAKE_RE.search(text))),
        "has_function_pattern": int(bool(FUNCTION_CALL_RE.search(text))),
        "num_digits": sum(ch.isdigit() for ch in text),
        "code_like_ratio": sum(1 for w in words if CODE_WORD_RE.search(w)) / n_words if n_words else 0.0,
        "ref_tokens": len(URL_RE.findall(text)) + len(MENTION_RE.findall(text)) + len(BACKTICK_RE.findall(text)),
        "avg_token_len": sum(len(w) for w in words) / n_words if n_words else 0.0,
        "loc_before": len(pair.code_before.splitlines()),
        "num_functions_before": count_function_cues(pair.code_before),
        "num_comments_in_code": count_code_comments(pair.code_before),
        "token_overlap_count": overlap.count,
        "token_overlap_ratio": overlap.ratio,
    }
    return FeatureVector(tuple(float(values[name]) for name in FEATURE_NAMES))


def feature_matrix(pairs: Sequence[CommentEditPair]) -> np.ndarray:
    if not pairs:
        return np.zeros((0, len(FEATURE_NAMES)))
    return np.vstack([extract_features(p).as_array() for p in pairs])


def features_frame(pairs: Sequence[CommentEditPair]) -> pd.DataFrame:
    """Feature table with the canonical column names, one row per pair."""
    df = pd.DataFrame(feature_matrix(pairs), columns=list(FEATURE_NAMES))
    df.insert(0, "pair_id", [p.pair_id for p in pairs])
    df["label"] = [p.label.value if p.label else "" for p in pairs]
    return df


def label_vector(pairs: Sequence[CommentEditPair]) -> np.ndarray:
    if any(p.label is None for p in pairs):
        raise BaselineError("training pairs must all be labeled")
    return np.asarray([1.0 if p.label is Label.VALID else 0.0 for p in pairs])


# standardization

@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant: Tuple[bool, ...]

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": list(self.constant)}

    @classmethod
    def from_dict(cls, data: Dict) -> "StandardizationStats":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64),
                   tuple(bool(c) for c in data["constant"]))


def fit_standardizer(X: np.ndarray, eps: float = 1e-12) -> StandardizationStats:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise EmptyMatrix(f"cannot standardize a matrix of shape {X.shape}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)  # population std
    constant = tuple(bool(s <= eps) for s in std)
    if any(constant):
        logger.info(f"Constant feature columns mapped to 0: {[i for i, c in enumerate(constant) if c]}")
    return StandardizationStats(mean=mean, std=std, constant=constant)


def apply_standardizer(stats: StandardizationStats, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(stats.mean):
        raise DimensionMismatch(len(stats.mean), X.shape[-1] if X.ndim else 0, what="feature matrix")
    mask = np.asarray(stats.constant)
    safe_std = np.where(mask, 1.0, stats.std)
    Z = (X - stats.mean) / safe_std
    Z[:, mask] = 0.0
    return Z


# logistic regression

@dataclass(frozen=True)
class LRHyper:
    learning_rate: float = 0.1
    iterations: int = 2000
    l2: float = 1e-4


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    hyper: LRHyper = field(default_factory=LRHyper)
    feature_names: Tuple[str, ...] = FEATURE_NAMES
    stats: Optional[StandardizationStats] = None
    loss_history: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "feature_names": list(self.feature_names),
            "stats": self.stats.to_dict() if self.stats else None,
            "hyper": {"learning_rate": self.hyper.learning_rate, "iterations": self.hyper.iterations,
                      "l2": self.hyper.l2},
            "final_loss": self.loss_history[-1] if self.loss_history else None,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "LogisticModel":
        stats = StandardizationStats.from_dict(data["stats"]) if data.get("stats") else None
        return cls(
            weights=np.asarray(data["weights"], dtype=np.float64),
            bias=float(data["bias"]),
            hyper=LRHyper(**data["hyper"]),
            feature_names=tuple(data["feature_names"]),
            stats=stats,
        )


PROBA_EPS = 1e-12


def sigmoid(z):
    """Logistic function, clipped to [PROBA_EPS, 1 - PROBA_EPS]."""
    p = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))
    return np.clip(p, PROBA_EPS, 1.0 - PROBA_EPS)


def logistic_loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean negative log-likelihood plus (l2/2)·‖w‖², with its gradient in (w, b)."""
    z = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * np.dot(w, w))
    residual = sigmoid(z) - y
    grad_w = X.T @ residual / len(y) + l2 * w
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


def fit_logistic(X: np.ndarray, y: np.ndarray, hyper: LRHyper = LRHyper(),
                 feature_names: Optional[Sequence[str]] = None) -> LogisticModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyMatrix(f"cannot fit on a matrix of shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise BaselineError(f"{X.shape[0]} rows but {y.shape[0]} labels")
    if len(np.unique(y)) < 2:
        raise SingleClass("training labels contain a single class", classes=sorted(set(y.tolist())))

    w = np.zeros(X.shape[1])
    b = 0.0
    history: List[float] = []
    for iteration in range(hyper.iterations):
        loss, grad_w, grad_b = logistic_loss_and_grad(w, b, X, y, hyper.l2)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad_w)):
            raise NonFinite(f"non-finite loss at iteration {iteration}", iteration=iteration, loss=loss,
                            max_abs_weight=float(np.max(np.abs(w))))
        history.append(loss)
        w = w - hyper.learning_rate * grad_w
        b = b - hyper.learning_rate * grad_b
    if hyper.iterations:
        history.append(logistic_loss_and_grad(w, b, X, y, hyper.l2)[0])
        logger.info(f"Logistic regression: loss {history[0]:.4f} -> {history[-1]:.4f} "
                    f"after {hyper.iterations} iterations")
    if feature_names is None:
        feature_names = FEATURE_NAMES if X.shape[1] == len(FEATURE_NAMES) else tuple(
            f"x{i}" for i in range(X.shape[1]))
    return LogisticModel(weights=w, bias=b, hyper=hyper, feature_names=tuple(feature_names),
                         loss_history=history)


def predict_proba(model: LogisticModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(model.weights):
        raise DimensionMismatch(len(model.weights), x.shape[-1], what="feature input")
    return sigmoid(x @ model.weights + model.bias)


def classify(model: LogisticModel, x, threshold: float = 0.5) -> Label:
    return Label.VALID if float(predict_proba(model, x)) >= threshold else Label.INVALID


def predict_pairs(model: LogisticModel, pairs: Sequence[CommentEditPair], threshold: float = 0.5) -> List[Tuple[Label, float]]:
    X = feature_matrix(pairs)
    if model.stats is not None:
        X = apply_standardizer(model.stats, X)
    probs = predict_proba(model, X)
    return [(Label.VALID if p >= threshold else Label.INVALID, float(p)) for p in probs]


def save_model(model: LogisticModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model.to_dict(), f, indent=2)
        f.write("\n")
    return path


def load_model(path) -> LogisticModel:
    with open(path, "r", encoding="utf-8") as f:
        return LogisticModel.from_dict(json.load(f))


# coefficient standard errors

@dataclass(frozen=True)
class CoefficientRow:
    feature: str
    beta: float
    se: float

    @property
    def z(self) -> float:
        return self.beta / self.se


@dataclass(frozen=True)
class CoefficientStats:
    rows: Tuple[CoefficientRow, ...]
    dropped: Tuple[str, ...] = ()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"feature": r.feature, "beta": r.beta, "se": r.se, "z": r.z} for r in self.rows])

    def row(self, feature: str) -> CoefficientRow:
        return next(r for r in self.rows if r.feature == feature)


def coefficient_stats(model: LogisticModel, X_standardized: np.ndarray) -> CoefficientStats:
    """Covariance (XᵀWX)⁻¹ over the retained columns plus an intercept column."""
    X = np.asarray(X_standardized, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyMatrix(f"cannot compute standard errors on shape {X.shape}")
    if X.shape[1] != len(model.weights):
        raise DimensionMismatch(len(model.weights), X.shape[1], what="standardized matrix")

    p = predict_proba(model, X)
    weights = p * (1.0 - p)
    keep = np.any(X != 0.0, axis=0)
    names = list(model.feature_names)
    Xa = np.hstack([X[:, keep], np.ones((X.shape[0], 1))])
    hessian = Xa.T @ (Xa * weights[:, None])

    eigenvalues = np.linalg.eigvalsh(hessian)
    if eigenvalues.max() <= 0 or eigenvalues.min() <= 1e-10 * eigenvalues.max():
        raise SingularMatrix("XᵀWX is singular or nearly so",
                             min_eigenvalue=float(eigenvalues.min()), max_eigenvalue=float(eigenvalues.max()))
    se = np.sqrt(np.diag(np.linalg.inv(hessian)))

    kept_names = [n for n, k in zip(names, keep) if k]
    betas = list(model.weights[keep]) + [model.bias]
    rows = tuple(CoefficientRow(feature, float(beta), float(s))
                 for feature, beta, s in zip(kept_names + ["(intercept)"], betas, se))
    return CoefficientStats(rows=rows, dropped=tuple(n for n, k in zip(names, keep) if not k))


# Tang et al. matching rules

def tang_rules(pair: CommentEditPair) -> Tuple[bool, bool, bool]:
    """(comment before edit, comment names a changed code token, different users)."""
    before = (pair.comment_time is not None and pair.edit_time is not None
              and pair.comment_time < pair.edit_time)
    delta = pair_delta(pair.code_before, pair.code_after)
    mentions = bool(set(tokenize_code(pair.comment_text)) & delta.changed_tokens())
    different_users = (pair.commenter_id is not None and pair.editor_id is not None
                       and pair.commenter_id != pair.editor_id)
    return before, mentions, different_users


def tang_match(pair: CommentEditPair) -> bool:
    return all(tang_rules(pair))
