"""
Per-pair prediction flows for every mode, run manifests, evaluation and the
combined report. The CLI in pipeline_cli.py wires these to files.
"""

import asyncio
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from baselines import LogisticModel, predict_pairs, tang_match, tang_rules
from cache import ContentCache, file_digest, text_digest
from config import MODES, GatewayConfig, Mode, PipelineConfig, RetrievalConfig
from corpus import CommentEditPair, Label
from errors import GatewayError, MissingLabel, MissingPrerequisite, NoNeighbors, UnknownPairId
from llm_gateway import (
    AnthropicChatBackend,
    DecodingParams,
    LLMGateway,
    OpenAIChatBackend,
    ParseFailure,
    Stage,
    Verdict,
    parse_binary,
    parse_final_answer,
)
from metrics import (
    ClassReport,
    ConfusionMatrix,
    class_report,
    cohen_kappa,
    confusion,
    markdown_table,
    vcp_table,
)
from mock_backends import RuleFollowingBackend, ScriptedBackend
from prompting import (
    RenderedPrompt,
    render_few_shot,
    render_reasoning,
    render_reflection,
    render_zero_shot,
    template_digests,
)
from retrieval import (
    HashingEmbeddingBackend,
    OpenAIEmbeddingBackend,
    Retriever,
    SentenceTransformerBackend,
)
from rules import ValidationRuleSet, apply_machine_rules

logger = logging.getLogger(__name__)

MODE_LABELS = {
    Mode.ZERO_SHOT: "Zero-shot",
    Mode.FEW_SHOT: "2-shot (reconstructed prompt)",
    Mode.FEW_SHOT_COT: "2-shot + CoT (reconstructed prompt)",
    Mode.TANG: "Tang et al. rules",
    Mode.FEATURES_LR: "Logistic Regression (features)",
    Mode.RAG_ONLY: "RAG only",
    Mode.RAG_RULES: "RAG + rule filter",
    Mode.REFLECT_ONLY: "Reflection only",
    Mode.RAG_REFLECT: "RAG-Reflect",
}

# Published headline values for comparison; not produced by this code.
REFERENCE_RESULTS = {
    "source": "Published headline results (GPT-4o, SOUP test split); reference only, not reproduced here",
    "vcp": [
        {"Technique": "GPT-4o zero-shot", "Invalid P": 0.88, "Invalid R": 0.82, "Invalid F1": 0.85,
         "Valid P": 0.56, "Valid R": 0.67, "Valid F1": 0.61},
        {"Technique": "Logistic Regression", "Invalid P": 0.84, "Invalid R": 0.68, "Invalid F1": 0.75,
         "Valid P": 0.39, "Valid R": 0.61, "Valid F1": 0.48},
        {"Technique": "Tang et al.", "Invalid P": None, "Invalid R": None, "Invalid F1": None,
         "Valid P": 0.57, "Valid R": 0.12, "Valid F1": 0.20},
        {"Technique": "SOUP (fine-tuned)", "Invalid P": None, "Invalid R": None, "Invalid F1": None,
         "Valid P": 0.80, "Valid R": 0.74, "Valid F1": 0.77},
        {"Technique": "RAG-Reflect", "Invalid P": 0.92, "Invalid R": 0.95, "Invalid F1": 0.94,
         "Valid P": 0.81, "Valid R": 0.74, "Valid F1": 0.78},
    ],
    "ablation": [
        {"Technique": "RAG only", "Invalid P": 0.92, "Invalid R": 0.69, "Invalid F1": 0.79,
         "Valid P": 0.47, "Valid R": 0.83, "Valid F1": 0.60},
        {"Technique": "Reflection only", "Invalid P": 0.91, "Invalid R": 0.91, "Invalid F1": 0.91,
         "Valid P": 0.73, "Valid R": 0.74, "Valid F1": 0.73},
        {"Technique": "RAG-Reflect", "Invalid P": 0.92, "Invalid R": 0.95, "Invalid F1": 0.94,
         "Valid P": 0.81, "Valid R": 0.74, "Valid F1": 0.78},
    ],
    "prompting": [
        {"Strategy": "Zero-shot", "Invalid F1": 0.85, "Valid F1": 0.61},
        {"Strategy": "2-shot", "Invalid F1": 0.87, "Valid F1": 0.67},
        {"Strategy": "2-shot + CoT", "Invalid F1": 0.84, "Valid F1": 0.64},
    ],
    "apu": {"em_rate": 0.093, "bleu4": 0.71},
    "reflection_yes_flipped_share": 0.28,
    "pyvcp": {"Invalid F1": 0.91, "Valid F1": 0.68},
}


# component factories

def build_embedding_backend(cfg: RetrievalConfig):
    if cfg.backend == "hashing":
        return HashingEmbeddingBackend(cfg.dim)
    if cfg.backend == "sentence-transformers":
        return SentenceTransformerBackend(cfg.model_name or "all-MiniLM-L6-v2")
    return OpenAIEmbeddingBackend(cfg.model_name or "text-embedding-3-small", cfg.dim)


def build_chat_backend(cfg: GatewayConfig, ruleset: Optional[ValidationRuleSet] = None):
    if cfg.backend == "rule-following":
        return RuleFollowingBackend(ruleset)
    if cfg.backend == "scripted":
        return ScriptedBackend.from_file(cfg.scripted_path)
    if cfg.backend == "anthropic":
        return AnthropicChatBackend(cfg.base_url, cfg.api_key_env or "ANTHROPIC_API_KEY", cfg.timeout)
    return OpenAIChatBackend(cfg.base_url, cfg.api_key_env or "OPENAI_API_KEY", cfg.timeout)


def build_gateway(config: PipelineConfig, ruleset: Optional[ValidationRuleSet] = None,
                  cache: Optional[ContentCache] = None) -> LLMGateway:
    g = config.gateway
    return LLMGateway(
        backend=build_chat_backend(g, ruleset),
        params=DecodingParams(temperature=g.temperature, max_tokens=g.max_tokens, model_id=g.model_id),
        cache=cache if cache is not None else ContentCache(config.cache_dir()),
        max_attempts=g.max_attempts,
        retry_backoff=g.retry_backoff,
        parallelism=g.parallelism,
    )


# prediction records

@dataclass(frozen=True)
class StageVerdict:
    stage: Stage
    decision: Label
    evidence_digest: str

    def to_dict(self) -> Dict[str, str]:
        return {"stage": self.stage.value, "decision": self.decision.value, "evidence_digest": self.evidence_digest}


@dataclass
class PredictionRecord:
    pair_id: str
    mode: Mode
    stage_verdicts: List[StageVerdict]
    final: Verdict
    neighbors_used: List[str] = field(default_factory=list)
    violations: List[str] = field(default_factory=list)
    parse_failures: int = 0
    cache_hits: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "mode": self.mode.value,
            "stage_verdicts": [s.to_dict() for s in self.stage_verdicts],
            "final": self.final.to_dict(),
            "neighbors_used": self.neighbors_used,
            "violations": self.violations,
            "parse_failures": self.parse_failures,
            "cache_hits": self.cache_hits,
        }


@dataclass
class PredictionContext:
    """Everything a mode may need; unused members stay None."""
    mode: Mode
    gateway: Optional[LLMGateway] = None
    retriever: Optional[Retriever] = None
    ruleset: Optional[ValidationRuleSet] = None
    lr_model: Optional[LogisticModel] = None
    exemplars: Sequence[CommentEditPair] = ()
    leave_one_out: bool = False
    parse_failure_default: Label = Label.INVALID
    fallback_to_zero_shot: bool = True
    lr_threshold: float = 0.5

    def validate(self) -> "PredictionContext":
        mode = self.mode
        if mode.uses_llm and self.gateway is None:
            raise MissingPrerequisite(mode.value, "an LLM gateway")
        if mode.uses_retrieval and self.retriever is None:
            raise MissingPrerequisite(mode.value, "a retrieval index (run `index` first)")
        if mode.uses_ruleset and self.ruleset is None:
            raise MissingPrerequisite(mode.value, "a validation ruleset (run `interpret` first)")
        if mode is Mode.FEATURES_LR and self.lr_model is None:
            raise MissingPrerequisite(mode.value, "a trained model (run `train-lr` first)")
        if mode in (Mode.FEW_SHOT, Mode.FEW_SHOT_COT) and not self.exemplars:
            raise MissingPrerequisite(mode.value, "labelled few-shot exemplars")
        return self


class PairTrace:
    """Collects stage verdicts and counters while one pair moves through a mode."""

    def __init__(self, ctx: PredictionContext):
        self.ctx = ctx
        self.verdicts: List[Verdict] = []
        self.neighbors: List[str] = []
        self.violations: List[str] = []
        self.parse_failures = 0
        self.cache_hits = 0

    def add(self, verdict: Verdict) -> Verdict:
        self.verdicts.append(verdict)
        return verdict

    async def ask(self, prompt: RenderedPrompt, stage: Stage, step_by_step: bool = False) -> Verdict:
        result = await self.ctx.gateway.complete(prompt)
        self.cache_hits += int(result.from_cache)
        parser = parse_final_answer if step_by_step else parse_binary
        parsed = parser(result.raw_text, prompt.expected_vocabulary, stage)
        if isinstance(parsed, ParseFailure):
            self.parse_failures += 1
            logger.warning(f"Unparseable {stage.value} answer {result.raw_text[:60]!r}, "
                           f"using {self.ctx.parse_failure_default.value}")
            parsed = Verdict(self.ctx.parse_failure_default, stage, result.raw_text)
        return self.add(parsed)

    def record(self, pair: CommentEditPair) -> PredictionRecord:
        stages = [StageVerdict(v.source_stage, v.decision, text_digest(v.raw_evidence)) for v in self.verdicts]
        return PredictionRecord(
            pair_id=pair.pair_id,
            mode=self.ctx.mode,
            stage_verdicts=stages,
            final=self.verdicts[-1],
            neighbors_used=self.neighbors,
            violations=self.violations,
            parse_failures=self.parse_failures,
            cache_hits=self.cache_hits,
        )


async def _initial_verdict(pair: CommentEditPair, trace: PairTrace) -> Verdict:
    ctx = trace.ctx
    if not ctx.mode.uses_retrieval:
        return await trace.ask(render_zero_shot(pair), Stage.ZERO_SHOT)
    neighbors = ctx.retriever.neighbors_for(pair, leave_one_out=ctx.leave_one_out)
    if not neighbors:
        if not ctx.fallback_to_zero_shot:
            raise NoNeighbors(f"no neighbors for pair {pair.pair_id!r}", pair_id=pair.pair_id)
        logger.warning(f"No neighbors for {pair.pair_id}, falling back to the zero-shot prompt")
        return await trace.ask(render_zero_shot(pair), Stage.ZERO_SHOT)
    trace.neighbors = [n.pair_id for n in neighbors]
    return await trace.ask(render_reasoning(pair, neighbors, k=ctx.retriever.k), Stage.REASONING)


async def predict_pair(pair: CommentEditPair, ctx: PredictionContext) -> PredictionRecord:
    """Run one pair through the configured mode; the last stage verdict is final."""
    trace = PairTrace(ctx)
    mode = ctx.mode

    if mode is Mode.TANG:
        checks = tang_rules(pair)
        decision = Label.VALID if tang_match(pair) else Label.INVALID
        trace.add(Verdict(decision, Stage.BASELINE, f"tang rules {checks}"))
    elif mode is Mode.FEATURES_LR:
        decision, probability = predict_pairs(ctx.lr_model, [pair], ctx.lr_threshold)[0]
        trace.add(Verdict(decision, Stage.BASELINE, f"p_valid={probability:.6f}"))
    elif mode is Mode.ZERO_SHOT:
        await trace.ask(render_zero_shot(pair), Stage.ZERO_SHOT)
    elif mode in (Mode.FEW_SHOT, Mode.FEW_SHOT_COT):
        cot = mode is Mode.FEW_SHOT_COT
        await trace.ask(render_few_shot(pair, ctx.exemplars, cot=cot), Stage.FEW_SHOT, step_by_step=cot)
    else:
        initial = await _initial_verdict(pair, trace)
        if mode.uses_ruleset:
            outcome = apply_machine_rules(pair, initial, ctx.ruleset)
            trace.violations = outcome.violations
            if outcome.changed:
                trace.add(outcome.corrected)
        if mode in (Mode.REFLECT_ONLY, Mode.RAG_REFLECT):
            reflected = await trace.ask(render_reflection(pair, ctx.ruleset), Stage.REFLECTION)
            # machine forcings outrank the reflection answer
            final = apply_machine_rules(pair, reflected, ctx.ruleset)
            if final.changed:
                trace.add(final.corrected)
    return trace.record(pair)


async def run_predictions(pairs: Sequence[CommentEditPair], ctx: PredictionContext
                          ) -> Tuple[List[PredictionRecord], List[Dict[str, str]]]:
    """Predict every pair concurrently; results come back in input order, failures quarantined."""

    async def guarded(pair: CommentEditPair):
        try:
            return await predict_pair(pair, ctx), None
        except (GatewayError, NoNeighbors) as e:
            logger.error(f"Quarantined pair {pair.pair_id}: {e.message}")
            return None, {"pair_id": pair.pair_id, "error": e.code, "message": e.message}

    outcomes = await asyncio.gather(*(guarded(p) for p in pairs))
    records = [r for r, _ in outcomes if r is not None]
    quarantined = [q for _, q in outcomes if q is not None]
    logger.info(f"{ctx.mode.value}: {len(records)} predictions, {len(quarantined)} quarantined")
    return records, quarantined


def write_jsonl(rows: Sequence[Dict[str, Any]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


def read_jsonl(path) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(data: Any, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


# manifests

def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    corpus_digest: Optional[str] = None
    ruleset_digest: Optional[str] = None
    index_digest: Optional[str] = None
    model_digest: Optional[str] = None
    template_digests: Dict[str, str] = field(default_factory=template_digests)
    backend_ids: Dict[str, str] = field(default_factory=dict)
    started_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None
    totals: Dict[str, Any] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)

    def finish(self, outputs: Sequence[Path], **totals: Any) -> "RunManifest":
        self.finished_at = utc_now()
        self.totals.update(totals)
        self.outputs = {Path(p).name: file_digest(p) for p in outputs}
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config_digest": self.config_digest,
            "corpus_digest": self.corpus_digest,
            "ruleset_digest": self.ruleset_digest,
            "index_digest": self.index_digest,
            "model_digest": self.model_digest,
            "template_digests": self.template_digests,
            "backend_ids": self.backend_ids,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "totals": self.totals,
            "outputs": self.outputs,
        }

    def save(self, directory, name: str = "manifest.json") -> Path:
        return write_json(self.to_dict(), Path(directory) / name)


def load_manifest(directory, name: str = "manifest.json") -> Dict[str, Any]:
    with open(Path(directory) / name, "r", encoding="utf-8") as f:
        return json.load(f)


# evaluation

@dataclass
class EvalReport:
    mode: str
    confusion: ConfusionMatrix
    report: ClassReport
    kappa: Optional[float]
    scored: int
    parse_failures: int
    quarantined: List[str]
    initial: Optional[Dict[str, Any]] = None
    flips: Optional[Dict[str, Any]] = None
    per_language: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "confusion": self.confusion.to_dict(),
            "report": self.report.to_dict(),
            "kappa": self.kappa,
            "scored": self.scored,
            "parse_failures": self.parse_failures,
            "quarantined": self.quarantined,
            "initial": self.initial,
            "flips": self.flips,
            "per_language": self.per_language,
        }

    def table(self) -> str:
        label = MODE_LABELS[Mode(self.mode)] if self.mode in MODES else self.mode
        return markdown_table(vcp_table({label: self.report}))


def _scored(cm: ConfusionMatrix) -> Dict[str, Any]:
    return {"confusion": cm.to_dict(), "report": class_report(cm).to_dict()}


def evaluate_predictions(records: Sequence[Dict[str, Any]], pairs: Sequence[CommentEditPair],
                         quarantined: Sequence[Dict[str, Any]] = ()) -> EvalReport:
    """Score prediction records against corpus labels, with first-stage and per-language views."""
    by_id = {p.pair_id: p for p in pairs}
    finals, initials, golds = [], [], []
    languages: Dict[str, List[Tuple[Label, Label]]] = {}
    for record in records:
        pair = by_id.get(record["pair_id"])
        if pair is None:
            raise UnknownPairId(record["pair_id"])
        if pair.label is None:
            raise MissingLabel(pair.pair_id)
        final = Label(record["final"]["decision"])
        stages = record.get("stage_verdicts") or []
        initial = Label(stages[0]["decision"]) if stages else final
        finals.append(final)
        initials.append(initial)
        golds.append(pair.label)
        if pair.language_tag:
            languages.setdefault(pair.language_tag, []).append((final, pair.label))

    cm = confusion(finals, golds)
    modes = {r.get("mode") for r in records}
    mode = modes.pop() if len(modes) == 1 else "mixed"

    multi_stage = any(len(r.get("stage_verdicts") or []) > 1 for r in records) or mode in (
        Mode.REFLECT_ONLY.value, Mode.RAG_REFLECT.value, Mode.RAG_RULES.value)
    initial_view = flips = None
    if multi_stage:
        initial_view = _scored(confusion(initials, golds))
        transitions = Counter(zip(initials, finals))
        initial_yes = sum(1 for i in initials if i is Label.VALID)
        yes_to_no = transitions[(Label.VALID, Label.INVALID)]
        flips = {
            "initial_yes": initial_yes,
            "yes_to_no": yes_to_no,
            "no_to_yes": transitions[(Label.INVALID, Label.VALID)],
            "share_yes_flipped": yes_to_no / initial_yes if initial_yes else 0.0,
        }

    per_language = {
        lang: _scored(confusion([f for f, _ in rows], [g for _, g in rows]))
        for lang, rows in sorted(languages.items())
    }
    return EvalReport(
        mode=mode,
        confusion=cm,
        report=class_report(cm),
        kappa=cohen_kappa(finals, golds) if finals else None,
        scored=len(finals),
        parse_failures=sum(int(r.get("parse_failures", 0)) for r in records),
        quarantined=[q["pair_id"] for q in quarantined],
        initial=initial_view,
        flips=flips,
        per_language=per_language,
    )


# combined report

def collect_evaluations(run_dir) -> Dict[Mode, Dict[str, Any]]:
    run_dir = Path(run_dir)
    found = {}
    for mode in Mode:
        path = run_dir / mode.value / "eval.json"
        if path.is_file():
            with open(path, "r", encoding="utf-8") as f:
                found[mode] = json.load(f)
    return found


def _reference_table(rows: List[Dict[str, Any]]) -> str:
    return markdown_table(pd.DataFrame(rows), decimals=2)


def build_report(run_dir) -> Tuple[str, Dict[str, Any]]:
    """Markdown and JSON views of every evaluated mode in a run directory."""
    run_dir = Path(run_dir)
    evaluations = collect_evaluations(run_dir)
    apu_path = run_dir / "apu" / "apu_score.json"
    apu = None
    if apu_path.is_file():
        with open(apu_path, "r", encoding="utf-8") as f:
            apu = json.load(f)

    reports = {MODE_LABELS[m]: ClassReport.from_dict(e["report"]) for m, e in evaluations.items()}
    lines = ["# reflect-pipe report", ""]
    data: Dict[str, Any] = {"techniques": {}, "ablation": {}, "prompting": {}, "apu": None,
                            "reference": REFERENCE_RESULTS}

    if reports:
        lines += ["## Valid comment-edit prediction", "", markdown_table(vcp_table(reports)), ""]
        data["techniques"] = {MODE_LABELS[m]: e for m, e in evaluations.items()}
    else:
        lines += ["No evaluated prediction runs found.", ""]

    ablation = {MODE_LABELS[m]: reports[MODE_LABELS[m]]
                for m in (Mode.RAG_ONLY, Mode.REFLECT_ONLY, Mode.RAG_REFLECT) if m in evaluations}
    if ablation:
        lines += ["## Component ablation", "", markdown_table(vcp_table(ablation)), ""]
        data["ablation"] = {k: v.to_dict() for k, v in ablation.items()}

    prompting = {MODE_LABELS[m]: reports[MODE_LABELS[m]]
                 for m in (Mode.ZERO_SHOT, Mode.FEW_SHOT, Mode.FEW_SHOT_COT) if m in evaluations}
    if prompting:
        lines += ["## Prompting strategies", "", markdown_table(vcp_table(prompting)), ""]
        data["prompting"] = {k: v.to_dict() for k, v in prompting.items()}

    flips = {MODE_LABELS[m]: e["flips"] for m, e in evaluations.items() if e.get("flips")}
    if flips:
        lines += ["## Reflection flips", ""]
        for label, f in flips.items():
            lines.append(f"- {label}: {f['yes_to_no']} of {f['initial_yes']} initial YES flipped to NO "
                         f"({f['share_yes_flipped']:.4f}); {f['no_to_yes']} NO flipped to YES")
        lines.append("")

    quarantined = {MODE_LABELS[m]: e["quarantined"] for m, e in evaluations.items() if e.get("quarantined")}
    if quarantined:
        lines += ["## Quarantined pairs", ""]
        for label, ids in quarantined.items():
            lines.append(f"- {label}: {', '.join(ids)}")
        lines.append("")

    if apu is not None:
        data["apu"] = {k: apu[k] for k in ("em_rate", "bleu4", "bleu_variant", "formatting_only", "count")}
        lines += ["## Automatic post update", "",
                  f"- exact match rate: {apu['em_rate']:.4f}",
                  f"- BLEU-4 (add-one, {apu['bleu_variant']}): {apu['bleu4']:.4f}",
                  f"- formatting-only divergences: {apu['formatting_only']} of {apu['count']}", ""]

    ref = REFERENCE_RESULTS
    lines += [
        "## Reference values (not reproduced by this run)", "",
        f"{ref['source']}.", "",
        _reference_table(ref["vcp"]), "",
        _reference_table(ref["ablation"]), "",
        _reference_table(ref["prompting"]), "",
        f"- APU exact match {ref['apu']['em_rate']:.3f}, BLEU-4 {ref['apu']['bleu4']:.2f}",
        f"- share of initial YES flipped by reflection: {ref['reflection_yes_flipped_share']:.2f}",
        "",
    ]
    return "\n".join(lines), data
