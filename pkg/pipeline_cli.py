"""
reflect-pipe command line: ingest, index, interpret, train-lr, predict,
evaluate, apu, report, and `all` to run the phases in sequence.

Every command reads the YAML pipeline config, writes its artifacts under the
output directory and leaves a manifest beside them.
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import markdown
import pandas as pd

from baselines import (
    LRHyper,
    apply_standardizer,
    coefficient_stats,
    feature_matrix,
    features_frame,
    fit_logistic,
    fit_standardizer,
    label_vector,
    load_model,
    save_model,
)
from cache import ContentCache, file_digest
from config import MODES, Mode, PipelineConfig, load_config
from corpus import (
    CommentEditPair,
    CorpusFormat,
    DatasetSplit,
    Label,
    SplitSpec,
    corpus_digest,
    corpus_stats,
    guess_format,
    load_corpus,
    save_corpus,
    split_corpus,
)
from errors import GatewayError, MissingPrerequisite, ReflectPipeError, SingularMatrix
from llm_gateway import extract_code_block
from metrics import score_apu, text_table, vcp_table
from pipeline import (
    MODE_LABELS,
    PredictionContext,
    RunManifest,
    build_embedding_backend,
    build_gateway,
    build_report,
    evaluate_predictions,
    read_jsonl,
    run_predictions,
    write_json,
    write_jsonl,
)
from prompting import render_apu
from retrieval import Retriever, index_pairs, load_index
from rules import InterpretationConfig, default_ruleset, interpret_knowledge_base, load_ruleset, save_ruleset

logger = logging.getLogger(__name__)

DEFAULT_ALL_MODES = ("zero-shot", "tang", "features-lr", "rag-only", "reflect-only", "rag-reflect")


# shared loading helpers

def load_pairs(config: PipelineConfig) -> List[CommentEditPair]:
    fmt = CorpusFormat(config.corpus.format) if config.corpus.format else guess_format(config.corpus.path)
    return load_corpus(config.corpus.path, fmt)


def split_pairs(config: PipelineConfig, pairs: Sequence[CommentEditPair]) -> Tuple[DatasetSplit, str]:
    """Use the per-record split field when the corpus carries one, else seeded ratios."""
    field = config.corpus.split_field
    if field and any(p.extra_value(field) is not None for p in pairs):
        return split_corpus(pairs, SplitSpec(field=field)), f"field:{field}"
    return split_corpus(pairs, SplitSpec(ratios=config.corpus.ratios, seed=config.seed)), "ratios"


def new_manifest(command: str, config: PipelineConfig, pairs: Optional[Sequence[CommentEditPair]] = None
                 ) -> RunManifest:
    return RunManifest(command=command, config_digest=config.digest(),
                       corpus_digest=corpus_digest(pairs) if pairs is not None else None)


def select_exemplars(config: PipelineConfig, pairs: Sequence[CommentEditPair],
                     train: Sequence[CommentEditPair]) -> List[CommentEditPair]:
    if config.corpus.few_shot_ids:
        by_id = {p.pair_id: p for p in pairs}
        missing = [i for i in config.corpus.few_shot_ids if i not in by_id]
        if missing:
            raise MissingPrerequisite("few-shot", f"exemplar pairs {missing}")
        return [by_id[i] for i in config.corpus.few_shot_ids]
    exemplars = []
    for label in (Label.VALID, Label.INVALID):
        first = next((p for p in train if p.label is label), None)
        if first is not None:
            exemplars.append(first)
    return exemplars


def require_file(path: Path, mode: str, artifact: str) -> Path:
    if not Path(path).is_file():
        raise MissingPrerequisite(mode, f"{artifact} at {path}")
    return Path(path)


# commands

async def cmd_ingest(config: PipelineConfig) -> Dict[str, Any]:
    print(f"🚀 Ingesting corpus {config.corpus.path}")
    pairs = load_pairs(config)
    split, how = split_pairs(config, pairs)
    out = config.out / "ingest"
    manifest = new_manifest("ingest", config, pairs)

    files = [save_corpus(getattr(split, name), out / f"{name}.jsonl") for name in ("train", "validation", "test")]
    stats = {
        "split_by": how,
        "sizes": dict(zip(("train", "validation", "test"), split.sizes())),
        "all": corpus_stats(pairs).to_dict(),
        "train": corpus_stats(split.train).to_dict(),
        "validation": corpus_stats(split.validation).to_dict(),
        "test": corpus_stats(split.test).to_dict(),
    }
    files.append(write_json(stats, out / "stats.json"))
    manifest.finish(files, pairs=len(pairs)).save(out)
    print(f"✅ Ingested {len(pairs)} pairs: train/validation/test = {split.sizes()}")
    print(f"📁 {out}/")
    return stats


async def cmd_index(config: PipelineConfig) -> Dict[str, Any]:
    print("🚀 Building retrieval index")
    pairs = load_pairs(config)
    split, _ = split_pairs(config, pairs)
    knowledge_base = split.by_name(config.corpus.index_split)
    backend = build_embedding_backend(config.retrieval)
    index = index_pairs(knowledge_base, backend, ContentCache(config.cache_dir()))

    path = index.save(config.index_path())
    manifest = new_manifest("index", config, pairs)
    manifest.index_digest = file_digest(path)
    manifest.backend_ids = {"embedding": backend.backend_id}
    manifest.finish([path], indexed=len(index), dim=index.dim).save(path.parent)
    print(f"✅ Indexed {len(index)} pairs from the {config.corpus.index_split} split ({backend.backend_id})")
    print(f"📁 {path}")
    return {"indexed": len(index), "dim": index.dim, "path": str(path), "digest": manifest.index_digest}


async def cmd_interpret(config: PipelineConfig, use_default: bool = False) -> Dict[str, Any]:
    """Derive the validation ruleset from the knowledge base, or write the static default."""
    print("🚀 Interpreting knowledge base")
    pairs = load_pairs(config)
    split, _ = split_pairs(config, pairs)
    knowledge_base = split.by_name(config.corpus.index_split)
    manifest = new_manifest("interpret", config, pairs)
    path = config.ruleset_path()

    if use_default:
        ruleset = default_ruleset(config.rules.min_overlap)
    else:
        gateway = build_gateway(config, default_ruleset(config.rules.min_overlap))
        interp = InterpretationConfig(config.rules.sample_size, config.rules.batch_size, config.seed,
                                      config.rules.min_overlap)
        ruleset = await interpret_knowledge_base(knowledge_base, gateway, interp, store_dir=path.parent / "store")
        manifest.backend_ids = {"chat": gateway.backend_id}
        manifest.totals["llm_calls"] = gateway.calls_issued

    save_ruleset(ruleset, path)
    manifest.ruleset_digest = ruleset.digest()
    manifest.finish([path], rules=len(ruleset.rules), provenance=ruleset.provenance.value).save(path.parent)
    print(f"✅ Ruleset with {len(ruleset.rules)} rules ({ruleset.provenance.value})")
    print(f"📁 {path}")
    return {"rules": len(ruleset.rules), "digest": manifest.ruleset_digest, "path": str(path),
            "llm_calls": manifest.totals.get("llm_calls", 0)}


async def cmd_train_lr(config: PipelineConfig) -> Dict[str, Any]:
    print("🚀 Training feature-based logistic regression")
    pairs = load_pairs(config)
    split, _ = split_pairs(config, pairs)
    train = [p for p in split.train if p.label is not None]

    X = feature_matrix(train)
    stats = fit_standardizer(X)
    Z = apply_standardizer(stats, X)
    model = fit_logistic(Z, label_vector(train), LRHyper(config.lr.learning_rate, config.lr.iterations, config.lr.l2))
    model.stats = stats

    path = save_model(model, config.model_path())
    out = path.parent
    try:
        coefficients = coefficient_stats(model, Z).to_frame()
    except SingularMatrix as e:
        logger.warning(f"Standard errors unavailable: {e.message}")
        coefficients = _coefficients_without_se(model)
    coef_path = out / "coefficients.csv"
    coefficients.to_csv(coef_path, index=False, lineterminator="\n")
    features_path = out / "features.csv"
    features_frame(split.train).to_csv(features_path, index=False, lineterminator="\n")

    manifest = new_manifest("train-lr", config, pairs)
    manifest.model_digest = file_digest(path)
    manifest.finish([path, coef_path, features_path], trained_on=len(train),
                    final_loss=model.loss_history[-1] if model.loss_history else None).save(out)
    print(f"✅ Trained on {len(train)} pairs")
    print(f"📁 {out}/")
    return {"trained_on": len(train), "path": str(path), "digest": manifest.model_digest}


def _coefficients_without_se(model):
    rows = [{"feature": n, "beta": float(w), "se": float("nan"), "z": float("nan")}
            for n, w in zip(model.feature_names, model.weights)]
    rows.append({"feature": "(intercept)", "beta": float(model.bias), "se": float("nan"), "z": float("nan")})
    return pd.DataFrame(rows)


async def cmd_predict(config: PipelineConfig, mode: Optional[str] = None) -> Dict[str, Any]:
    """Predict every pair of the evaluation split and write out/<mode>/predictions.jsonl."""
    mode = Mode(mode or config.predict.mode)
    print(f"🚀 Predicting with mode {mode.value}")
    pairs = load_pairs(config)
    split, _ = split_pairs(config, pairs)
    targets = split.by_name(config.corpus.eval_split)
    manifest = new_manifest(f"predict {mode.value}", config, pairs)
    cache = ContentCache(config.cache_dir())

    ctx = PredictionContext(
        mode=mode,
        parse_failure_default=Label(config.predict.parse_failure_default),
        fallback_to_zero_shot=config.predict.fallback_to_zero_shot,
        lr_threshold=config.lr.threshold,
    )
    if mode.uses_ruleset:
        ruleset_path = require_file(config.ruleset_path(), mode.value, "a validation ruleset (run `interpret` first)")
        ctx.ruleset = load_ruleset(ruleset_path)
        manifest.ruleset_digest = ctx.ruleset.digest()
    if mode.uses_retrieval:
        index_path = require_file(config.index_path(), mode.value, "a retrieval index (run `index` first)")
        index = load_index(index_path, pairs)
        backend = build_embedding_backend(config.retrieval)
        ctx.retriever = Retriever(index, backend, cache, config.retrieval.k)
        manifest.index_digest = file_digest(index_path)
        manifest.backend_ids["embedding"] = backend.backend_id
        overlap = bool(set(index.pair_ids) & {p.pair_id for p in targets})
        if config.retrieval.leave_one_out is None:
            ctx.leave_one_out = overlap
            if overlap:
                logger.warning("Indexed and evaluated pairs overlap; excluding each query pair from its own neighbors")
        else:
            ctx.leave_one_out = config.retrieval.leave_one_out
    if mode is Mode.FEATURES_LR:
        model_path = require_file(config.model_path(), mode.value, "a trained model (run `train-lr` first)")
        ctx.lr_model = load_model(model_path)
        manifest.model_digest = file_digest(model_path)
    if mode in (Mode.FEW_SHOT, Mode.FEW_SHOT_COT):
        ctx.exemplars = select_exemplars(config, pairs, split.train)
    if mode.uses_llm:
        ctx.gateway = build_gateway(config, ctx.ruleset or default_ruleset(config.rules.min_overlap), cache)
        manifest.backend_ids["chat"] = ctx.gateway.backend_id

    records, quarantined = await run_predictions(targets, ctx.validate())

    out = config.out / mode.value
    predictions_path = write_jsonl([r.to_dict() for r in records], out / "predictions.jsonl")
    quarantine_path = write_json(quarantined, out / "quarantine.json")
    summary = {
        "mode": mode.value,
        "predictions": len(records),
        "quarantined": len(quarantined),
        "llm_calls": ctx.gateway.calls_issued if ctx.gateway else 0,
        "cache_hits": ctx.gateway.cache_hits if ctx.gateway else 0,
        "retrieval_queries": ctx.retriever.index.query_count if ctx.retriever else 0,
        "parse_failures": sum(r.parse_failures for r in records),
    }
    manifest.finish([predictions_path, quarantine_path], **summary).save(out)
    print(f"✅ {len(records)} predictions, {len(quarantined)} quarantined, {summary['llm_calls']} LLM calls")
    print(f"📁 {predictions_path}")
    return {**summary, "path": str(predictions_path)}


async def cmd_evaluate(config: PipelineConfig, mode: Optional[str] = None,
                       predictions: Optional[str] = None) -> Dict[str, Any]:
    if predictions is None:
        predictions = config.out / Mode(mode or config.predict.mode).value / "predictions.jsonl"
    predictions = require_file(Path(predictions), "evaluate", "a predictions file (run `predict` first)")
    print(f"🚀 Evaluating {predictions}")
    pairs = load_pairs(config)
    records = read_jsonl(predictions)
    quarantine_path = predictions.parent / "quarantine.json"
    quarantined = []
    if quarantine_path.is_file():
        with open(quarantine_path, "r", encoding="utf-8") as f:
            quarantined = json.load(f)

    report = evaluate_predictions(records, pairs, quarantined)
    out = predictions.parent
    eval_path = write_json(report.to_dict(), out / "eval.json")
    label = MODE_LABELS[Mode(report.mode)] if report.mode in MODES else report.mode
    text = "\n".join([
        text_table(vcp_table({label: report.report})),
        "",
        f"scored: {report.scored}  parse failures: {report.parse_failures}  quarantined: {len(report.quarantined)}",
        f"confusion: {report.confusion.to_dict()}",
        "",
    ])
    text_path = out / "eval.txt"
    text_path.write_text(text, encoding="utf-8")

    manifest = new_manifest("evaluate", config, pairs)
    manifest.totals["predictions_digest"] = file_digest(predictions)
    manifest.finish([eval_path, text_path], scored=report.scored).save(out, "eval_manifest.json")
    print(text)
    print(f"📁 {eval_path}")
    return report.to_dict()


async def cmd_apu(config: PipelineConfig, predictions: Optional[str] = None,
                  corpus_bleu: bool = False) -> Dict[str, Any]:
    """Generate updated code for every pair predicted Valid and score it against code_after."""
    if predictions is None:
        predictions = config.out / Mode.RAG_REFLECT.value / "predictions.jsonl"
    predictions = require_file(Path(predictions), "apu", "a predictions file (run `predict` first)")
    print(f"🚀 Automatic post update from {predictions}")
    pairs = load_pairs(config)
    by_id = {p.pair_id: p for p in pairs}
    valid_ids = [r["pair_id"] for r in read_jsonl(predictions) if r["final"]["decision"] == Label.VALID.value]
    targets = [by_id[i] for i in valid_ids if i in by_id]
    if not targets:
        logger.warning("No pairs were predicted Valid; nothing to update")

    gateway = build_gateway(config)

    async def update(pair: CommentEditPair):
        try:
            result = await gateway.complete(render_apu(pair.code_before, pair.comment_text, subject=pair))
            return pair, extract_code_block(result.raw_text), None
        except GatewayError as e:
            logger.error(f"Quarantined pair {pair.pair_id}: {e.message}")
            return pair, None, {"pair_id": pair.pair_id, "error": e.code, "message": e.message}

    outcomes = await asyncio.gather(*(update(p) for p in targets))
    completed = [(p.pair_id, code, p.code_after) for p, code, _ in outcomes if code is not None]
    quarantined = [q for _, _, q in outcomes if q is not None]
    score = score_apu(completed, corpus_bleu=corpus_bleu)

    out = config.out / "apu"
    instances = {i.pair_id: i for i in score.instances}
    rows = [{"pair_id": pid, "completion": code, **instances[pid].to_dict()} for pid, code, _ in completed]
    files = [
        write_json(score.to_dict(), out / "apu_score.json"),
        write_jsonl(rows, out / "completions.jsonl"),
        write_json(quarantined, out / "quarantine.json"),
    ]
    manifest = new_manifest("apu", config, pairs)
    manifest.backend_ids = {"chat": gateway.backend_id}
    manifest.totals["predictions_digest"] = file_digest(predictions)
    manifest.finish(files, updated=len(completed), quarantined=len(quarantined),
                    llm_calls=gateway.calls_issued).save(out)
    print(f"✅ APU on {len(completed)} pairs: exact match {score.em_rate:.4f}, BLEU-4 {score.bleu4:.4f}")
    print(f"📁 {out}/")
    return score.to_dict()


async def cmd_report(run_dir) -> Dict[str, Any]:
    run_dir = Path(run_dir)
    print(f"🚀 Collating report from {run_dir}")
    md, data = build_report(run_dir)
    md_path = run_dir / "report.md"
    md_path.parent.mkdir(parents=True, exist_ok=True)
    md_path.write_text(md + "\n", encoding="utf-8")
    json_path = write_json(data, run_dir / "report.json")
    html_path = run_dir / "report.html"
    html_path.write_text(markdown.markdown(md, extensions=["tables"]) + "\n", encoding="utf-8")
    print(f"✅ Report covers {len(data['techniques'])} techniques")
    print(f"📁 {md_path}")
    return data


async def cmd_all(config: PipelineConfig, modes: Sequence[str] = DEFAULT_ALL_MODES) -> Dict[str, Any]:
    """Run every phase for the given modes, then APU and the combined report."""
    modes = [Mode(m) for m in modes]
    print("🚀 Starting reflect-pipe run")
    print(f"📁 Output directory: {config.out}")
    print("=" * 60)
    results: Dict[str, Any] = {}

    print("\n🔬 PHASE 1: SETUP")
    print("-" * 30)
    results["ingest"] = await cmd_ingest(config)
    if any(m.uses_retrieval for m in modes):
        results["index"] = await cmd_index(config)
    if any(m.uses_ruleset for m in modes):
        results["interpret"] = await cmd_interpret(config)
    if Mode.FEATURES_LR in modes:
        results["train_lr"] = await cmd_train_lr(config)

    print("\n🎯 PHASE 2: PREDICTION AND EVALUATION")
    print("-" * 30)
    for mode in modes:
        results[mode.value] = {"predict": await cmd_predict(config, mode.value),
                               "evaluate": await cmd_evaluate(config, mode.value)}

    print("\n📄 PHASE 3: POST UPDATE AND REPORT")
    print("-" * 40)
    if Mode.RAG_REFLECT in modes:
        results["apu"] = await cmd_apu(config)
    results["report"] = await cmd_report(config.out)

    print("\n" + "=" * 60)
    print("🎉 REFLECT-PIPE RUN COMPLETED!")
    print(f"📁 Report: {config.out}/report.md")
    return results


# entry point

def setup_logging(out: Path, level: str = "INFO") -> None:
    out.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(out / "reflect_pipe.log"),
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML config")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--log-level", default="INFO", help="logging level (default INFO)")

    parser = argparse.ArgumentParser(prog="reflect-pipe",
                                     description="Valid comment-edit prediction and automatic post updating")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load, validate and split the corpus")
    sub.add_parser("index", parents=[common], help="embed the knowledge base into a vector index")
    p = sub.add_parser("interpret", parents=[common], help="derive the validation ruleset")
    p.add_argument("--default", action="store_true", help="write the static default ruleset without LLM calls")
    sub.add_parser("train-lr", parents=[common], help="train the feature-based logistic regression")
    p = sub.add_parser("predict", parents=[common], help="predict the evaluation split")
    p.add_argument("--mode", choices=MODES)
    p = sub.add_parser("evaluate", parents=[common], help="score a predictions file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--predictions", help="predictions JSONL (default: <out>/<mode>/predictions.jsonl)")
    p = sub.add_parser("apu", parents=[common], help="generate and score updated code for Valid predictions")
    p.add_argument("--predictions", help="predictions JSONL (default: <out>/rag-reflect/predictions.jsonl)")
    p.add_argument("--corpus-bleu", action="store_true", help="pool n-gram counts over the corpus")
    p = sub.add_parser("report", parents=[common], help="collate evaluations into report.md/json/html")
    p.add_argument("--run-dir", help="run directory (default: the output directory)")
    p = sub.add_parser("all", parents=[common], help="run every phase")
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(DEFAULT_ALL_MODES))
    return parser


async def dispatch(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    command = args.command
    if command == "report":
        return await cmd_report(args.run_dir or config.out)
    config.validate()
    if command == "ingest":
        return await cmd_ingest(config)
    if command == "index":
        return await cmd_index(config)
    if command == "interpret":
        return await cmd_interpret(config, use_default=args.default)
    if command == "train-lr":
        return await cmd_train_lr(config)
    if command == "predict":
        return await cmd_predict(config, args.mode)
    if command == "evaluate":
        return await cmd_evaluate(config, args.mode, args.predictions)
    if command == "apu":
        return await cmd_apu(config, args.predictions, args.corpus_bleu)
    return await cmd_all(config, args.modes)


async def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.out)
        setup_logging(config.out, args.log_level)
        logger.info(f"reflect-pipe {args.command} (config digest {config.digest()[:12]})")
        await dispatch(args, config)
        return 0
    except ReflectPipeError as e:
        print(f"❌ {args.command} failed: {e.message}")
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2
    except OSError as e:
        print(f"❌ {args.command} failed: {e}")
        print(json.dumps({"error": "io_error", "message": str(e), "details": {"path": e.filename}}),
              file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        print(json.dumps({"error": "internal_error", "message": f"{type(e).__name__}: {e}", "details": {}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
