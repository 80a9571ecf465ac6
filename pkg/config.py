"""
Pipeline configuration: a YAML file mapped onto nested dataclasses.
API keys are never read from the YAML; they come from the environment (.env is loaded here).
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from cache import content_digest
from errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

class Mode(str, Enum):
    ZERO_SHOT = "zero-shot"
    FEW_SHOT = "few-shot"
    FEW_SHOT_COT = "few-shot-cot"
    TANG = "tang"
    FEATURES_LR = "features-lr"
    RAG_ONLY = "rag-only"
    RAG_RULES = "rag-rules"
    REFLECT_ONLY = "reflect-only"
    RAG_REFLECT = "rag-reflect"

    @property
    def uses_retrieval(self) -> bool:
        return self in (Mode.RAG_ONLY, Mode.RAG_RULES, Mode.RAG_REFLECT)

    @property
    def uses_ruleset(self) -> bool:
        return self in (Mode.RAG_RULES, Mode.REFLECT_ONLY, Mode.RAG_REFLECT)

    @property
    def uses_llm(self) -> bool:
        return self not in (Mode.TANG, Mode.FEATURES_LR)


MODES = tuple(m.value for m in Mode)
EMBEDDING_BACKENDS = ("hashing", "sentence-transformers", "openai")
CHAT_BACKENDS = ("rule-following", "scripted", "openai", "anthropic")


@dataclass
class CorpusConfig:
    path: Optional[str] = None
    format: Optional[str] = None
    split_field: Optional[str] = "split"
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    eval_split: str = "test"
    index_split: str = "train"
    few_shot_ids: List[str] = field(default_factory=list)


@dataclass
class RetrievalConfig:
    k: int = 3
    backend: str = "hashing"
    dim: int = 64
    model_name: Optional[str] = None
    index_path: Optional[str] = None
    # None: exclude the query pair only when the indexed split overlaps the evaluated one
    leave_one_out: Optional[bool] = None


@dataclass
class GatewayConfig:
    backend: str = "rule-following"
    model_id: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 256
    parallelism: int = 4
    max_attempts: int = 3
    retry_backoff: float = 0.5
    timeout: float = 60.0
    cache_dir: Optional[str] = None
    base_url: Optional[str] = None
    api_key_env: Optional[str] = None
    scripted_path: Optional[str] = None


@dataclass
class RulesConfig:
    ruleset_path: Optional[str] = None
    sample_size: int = 200
    batch_size: int = 20
    min_overlap: int = 1


@dataclass
class PredictConfig:
    mode: str = "rag-reflect"
    parse_failure_default: str = "Invalid"
    fallback_to_zero_shot: bool = True


@dataclass
class LRConfig:
    learning_rate: float = 0.1
    iterations: int = 2000
    l2: float = 1e-4
    threshold: float = 0.5
    model_path: Optional[str] = None


@dataclass
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    rules: RulesConfig = field(default_factory=RulesConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    lr: LRConfig = field(default_factory=LRConfig)
    seed: int = 0
    output_dir: str = "runs"
    source: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data.pop("source")
        return data

    def digest(self) -> str:
        # output location does not change any artifact's content
        data = self.to_dict()
        data.pop("output_dir")
        return content_digest(data)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def cache_dir(self) -> Path:
        return Path(self.gateway.cache_dir) if self.gateway.cache_dir else self.out / "cache"

    def index_path(self) -> Path:
        return Path(self.retrieval.index_path) if self.retrieval.index_path else self.out / "index" / "index.jsonl"

    def ruleset_path(self) -> Path:
        return Path(self.rules.ruleset_path) if self.rules.ruleset_path else self.out / "rules" / "ruleset.json"

    def model_path(self) -> Path:
        return Path(self.lr.model_path) if self.lr.model_path else self.out / "lr" / "model.json"

    def validate(self, require_corpus: bool = True) -> "PipelineConfig":
        if self.retrieval.k < 1:
            raise ConfigError(f"retrieval.k must be >= 1, got {self.retrieval.k}")
        if self.gateway.parallelism < 1:
            raise ConfigError(f"gateway.parallelism must be >= 1, got {self.gateway.parallelism}")
        if self.gateway.max_attempts < 1:
            raise ConfigError(f"gateway.max_attempts must be >= 1, got {self.gateway.max_attempts}")
        if self.gateway.temperature < 0:
            raise ConfigError(f"gateway.temperature must be >= 0, got {self.gateway.temperature}")
        if self.retrieval.backend not in EMBEDDING_BACKENDS:
            raise ConfigError(f"unknown retrieval.backend {self.retrieval.backend!r}", choices=EMBEDDING_BACKENDS)
        if self.gateway.backend not in CHAT_BACKENDS:
            raise ConfigError(f"unknown gateway.backend {self.gateway.backend!r}", choices=CHAT_BACKENDS)
        if self.predict.mode not in MODES:
            raise ConfigError(f"unknown predict.mode {self.predict.mode!r}", choices=MODES)
        if self.predict.parse_failure_default not in ("Valid", "Invalid"):
            raise ConfigError("predict.parse_failure_default must be Valid or Invalid")
        if len(self.corpus.ratios) != 3:
            raise ConfigError("corpus.ratios needs three values")
        if require_corpus:
            if not self.corpus.path:
                raise ConfigError("corpus.path is not set")
            if not Path(self.corpus.path).is_file():
                raise ConfigError(f"corpus file not found: {self.corpus.path}", path=self.corpus.path)
        if self.gateway.backend == "scripted" and not (
                self.gateway.scripted_path and Path(self.gateway.scripted_path).is_file()):
            raise ConfigError("gateway.scripted_path must point to a scripted-response fixture",
                              path=self.gateway.scripted_path)
        return self


SECTIONS = {
    "corpus": CorpusConfig,
    "retrieval": RetrievalConfig,
    "gateway": GatewayConfig,
    "rules": RulesConfig,
    "predict": PredictConfig,
    "lr": LRConfig,
}
PATH_FIELDS = {
    "corpus": ("path",),
    "retrieval": ("index_path",),
    "gateway": ("cache_dir", "scripted_path"),
    "rules": ("ruleset_path",),
    "lr": ("model_path",),
}


def _build_section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {unknown}", section=name, keys=unknown)
    values = dict(data)
    if "ratios" in values and values["ratios"] is not None:
        values["ratios"] = tuple(float(r) for r in values["ratios"])
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"bad {name} section: {e}") from e


def _resolve(value: Optional[str], base: Path) -> Optional[str]:
    if not value:
        return value
    p = Path(value).expanduser()
    return str(p if p.is_absolute() else (base / p))


def config_from_dict(data: Dict[str, Any], base_dir: Optional[Path] = None) -> PipelineConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(SECTIONS) - {"seed", "output_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}", keys=unknown)
    sections = {name: _build_section(cls, data.get(name), name) for name, cls in SECTIONS.items()}
    config = PipelineConfig(**sections, seed=int(data.get("seed", 0)),
                            output_dir=str(data.get("output_dir", "runs")))
    if base_dir is not None:
        for name, fields in PATH_FIELDS.items():
            section = getattr(config, name)
            for f in fields:
                setattr(section, f, _resolve(getattr(section, f), base_dir))
        config.output_dir = _resolve(config.output_dir, base_dir)
    return config


def load_config(path=None, out: Optional[str] = None) -> PipelineConfig:
    """Read YAML config; relative paths resolve against the file's directory, --out wins over output_dir."""
    if path is None:
        config = PipelineConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", path=str(path))
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        config = config_from_dict(data, base_dir=path.resolve().parent)
        config.source = str(path)
    if out is not None:
        config.output_dir = str(out)
    logger.debug(f"Loaded config {config.source or '<defaults>'} (digest {config.digest()[:12]})")
    return config
