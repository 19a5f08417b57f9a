"""
Edcurate Pipeline - Stage implementations, run manifests and the local pipeline engine

Every stage reads its upstream artifacts from the work directory and writes its
own artifacts plus a `<stage>.manifest.json` through one ArtifactWriter, so a
failed stage leaves nothing behind.
"""

import os
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Optional, Tuple
import logging

import pandas as pd

from .corpus import (
    filter_multimodal,
    label_by_source,
    load_posts,
    posts_to_jsonl,
    sanitize_dataset,
)
from .dedup import remove_duplicates
from .dsl import ConfigParser, DependencyResolver, STAGE_NAMES, default_stages
from .evaluate import compare_models, curve_areas, curves_frame, ovr_curves
from .fusion import (
    DHashImageEncoder,
    FusionEncoders,
    HashedTextEncoder,
    ScoreTableEncoder,
    encode_dataset,
    head_to_dict,
    load_head,
    predict_scores,
    train_fusion,
    unimodal_predictions,
)
from .prep import apply_split, balance, membership_frame, read_split_csv, split
from .simaudit import apply_removals, audit_labels, index_dataset, load_embeddings
from .trend import (
    ALL_SERIES,
    aggregate_by_series,
    aggregate_monthly,
    apply_schedule,
    class_composition,
    fit_series,
    fits_frame,
    read_predictions,
    restrict_window,
    series_frame,
    source_series_id,
)
from .types import (
    ConfigError,
    DataError,
    Dataset,
    IngestReport,
    Label,
    MonthKey,
    PipelineConfig,
    PipelineResult,
    ReplayReport,
    StageDefinition,
    StageOutcome,
    StageStatus,
)
from .utils import ArtifactWriter, FileUtils, sha256_file

logger = logging.getLogger(__name__)

TOOL_NAME = "edcurate"
TOOL_VERSION = "0.1.0"
RUN_MANIFEST = "run.manifest.json"

# artifact -> stage that writes it
PRODUCERS = {
    "posts.ingested.jsonl": "ingest",
    "ingest_report.json": "ingest",
    "posts.dedup.jsonl": "dedupe",
    "dedup_report.json": "dedupe",
    "flag_report.json": "audit",
    "posts.audited.jsonl": "audit",
    "posts.balanced.jsonl": "balance",
    "splits.csv": "split",
    "fusion_head.json": "train",
    "metrics.json": "eval",
    "roc.csv": "eval",
    "pr.csv": "eval",
    "predictions.csv": "classify",
    "series.csv": "trend",
    "fits.csv": "trend",
    "composition.json": "trend",
}


def manifest_name(stage: str) -> str:
    return f"{stage}.manifest.json"


class StageContext:
    """Paths, tracked inputs and overrides for one stage run"""

    def __init__(self, cfg: PipelineConfig, stage: str, source: Optional[str] = None):
        self.cfg = cfg
        self.stage = stage
        self.source = source
        self.inputs: Dict[str, str] = {}

    def artifact(self, name: str) -> str:
        return os.path.join(self.cfg.workdir, name)

    def track(self, path: str) -> str:
        """Record an input file's digest; missing files are data errors"""
        if not os.path.isfile(path):
            producer = PRODUCERS.get(os.path.basename(path))
            hint = f"; run the '{producer}' stage first" if producer else ""
            raise DataError(f"Input file not found: {path}{hint}")
        self.inputs[path] = sha256_file(path)
        return path

    def upstream(self, name: str) -> str:
        """Primary upstream artifact, replaced by --input when given"""
        return self.track(self.source or self.artifact(name))

    def load(self, name: str) -> Dataset:
        return load_posts(self.upstream(name))


def build_encoders(ctx: StageContext) -> FusionEncoders:
    """Score tables when configured, seeded stub encoders otherwise"""
    inputs = ctx.cfg.inputs
    if inputs.text_scores:
        text = ScoreTableEncoder("text", ctx.track(inputs.text_scores))
    else:
        text = HashedTextEncoder(seed=ctx.cfg.seed)
    if inputs.image_scores:
        image = ScoreTableEncoder("image", ctx.track(inputs.image_scores))
    else:
        image = DHashImageEncoder(seed=ctx.cfg.seed)
    return FusionEncoders(text=text, image=image)


def _splits(ctx: StageContext, primary: str) -> Tuple[Dataset, Dataset, Dataset]:
    d = ctx.load(primary)
    membership = read_split_csv(ctx.track(ctx.artifact("splits.csv")))
    return apply_split(d, membership)


def _head(ctx: StageContext):
    return load_head(ctx.track(ctx.artifact("fusion_head.json")))


# Stages


def run_ingest(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    cfg = ctx.cfg
    path = ctx.source or cfg.inputs.posts
    if not path:
        raise ConfigError("inputs.posts is required for the ingest stage")
    report = IngestReport()
    d = load_posts(ctx.track(path), report=report)
    if cfg.labeling.enabled:
        d = label_by_source(d, cfg.labeling.by_source, cfg.labeling.overwrite)
    d = filter_multimodal(sanitize_dataset(d), report, cfg.workers)
    writer.write_text("posts.ingested.jsonl", posts_to_jsonl(d))
    writer.write_json("ingest_report.json", report.to_dict())
    return report.to_dict()


def run_dedupe(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    cfg = ctx.cfg
    d, report = remove_duplicates(
        ctx.load("posts.ingested.jsonl"),
        cfg.dedup.near_threshold,
        workers=cfg.workers,
        accelerate=cfg.dedup.accelerate,
    )
    writer.write_text("posts.dedup.jsonl", posts_to_jsonl(d))
    writer.write_json("dedup_report.json", report.to_dict())
    return report.to_dict()


def run_audit(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    cfg = ctx.cfg
    d = ctx.load("posts.dedup.jsonl")
    vectors = None
    if cfg.inputs.embeddings:
        vectors = load_embeddings(ctx.track(cfg.inputs.embeddings), len(d))
    index = index_dataset(d, cfg.index_params(), vectors, cfg.workers)
    report = audit_labels(index, cfg.audit.k, cfg.audit.flag_min_disagree)

    removed = 0
    if cfg.inputs.removals:
        ids = FileUtils.read_text(ctx.track(cfg.inputs.removals)).split()
        before = len(d)
        d = apply_removals(d, ids)
        removed = before - len(d)

    writer.write_json("flag_report.json", report.to_dict())
    writer.write_text("posts.audited.jsonl", posts_to_jsonl(d))
    return {"examined": report.examined, "flagged": len(report.flagged), "removed": removed}


def run_balance(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    d = balance(ctx.load("posts.audited.jsonl"), ctx.cfg.seed)
    writer.write_text("posts.balanced.jsonl", posts_to_jsonl(d))
    return {"posts": len(d)}


def run_split(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    parts = split(ctx.load("posts.balanced.jsonl"), ctx.cfg.split_spec())
    writer.write_csv("splits.csv", membership_frame(parts))
    return {name: len(part) for name, part in zip(("train", "val", "test"), parts)}


def run_train(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    train, val, _ = _splits(ctx, "posts.balanced.jsonl")
    encoders = build_encoders(ctx)
    head = train_fusion(train, val, encoders, ctx.cfg.train_config(), ctx.cfg.workers)
    writer.write_json("fusion_head.json", head_to_dict(head, encoders))
    return {
        "epochs_run": head.epochs_run,
        "best_epoch": head.best_epoch,
        "best_val_loss": head.best_val_loss,
    }


def run_eval(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    _, _, test = _splits(ctx, "posts.balanced.jsonl")
    head = _head(ctx)
    batch = encode_dataset(test, build_encoders(ctx), ctx.cfg.workers)
    if batch.codes is None:
        raise DataError("Every test post must be labeled")
    if len(batch) == 0:
        raise DataError("Test split is empty")

    reports = compare_models(unimodal_predictions(batch, head), batch.codes)
    _, probs = predict_scores(batch, head)
    curves = ovr_curves(probs, batch.codes)

    writer.write_json(
        "metrics.json",
        {
            "test_size": len(batch),
            "models": {name: report.to_dict() for name, report in reports.items()},
            "curves": curve_areas(curves),
        },
    )
    writer.write_csv("roc.csv", curves_frame(curves.roc), float_format="%.17g")
    writer.write_csv("pr.csv", curves_frame(curves.pr), float_format="%.17g")
    return {name: round(report.accuracy, 4) for name, report in reports.items()}


def run_classify(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    cfg = ctx.cfg
    path = ctx.source or cfg.inputs.trend_posts
    if not path:
        raise ConfigError("inputs.trend_posts is required for the classify stage")
    d = filter_multimodal(sanitize_dataset(load_posts(ctx.track(path))), workers=cfg.workers)
    if cfg.trend.sample_days:
        d = apply_schedule(d, cfg.seed)

    head = _head(ctx)
    batch = encode_dataset(d, build_encoders(ctx), cfg.workers)
    codes, probs = predict_scores(batch, head)

    frame = pd.DataFrame(
        {
            "id": d.ids(),
            "posted_at": [p.posted_at.strftime("%Y-%m-%dT%H:%M:%SZ") for p in d.posts],
            "source": [p.source for p in d.posts],
            "label": [Label.from_code(int(c)).value for c in codes],
            **{f"p_{label.value}": probs[:, label.code] for label in Label},
        },
        columns=["id", "posted_at", "source", "label", *(f"p_{label.value}" for label in Label)],
    )
    writer.write_csv("predictions.csv", frame, float_format="%.17g")
    return {"classified": len(d)}


def run_trend(ctx: StageContext, writer: ArtifactWriter) -> Dict[str, Any]:
    trend = ctx.cfg.trend
    rows = [
        (source_series_id(source), posted_at, label)
        for source, posted_at, label in read_predictions(ctx.upstream("predictions.csv"))
    ]

    start, end = MonthKey.parse(trend.window_start), MonthKey.parse(trend.window_end)
    linear_from = MonthKey.parse(trend.linear_from)
    all_series = {ALL_SERIES: aggregate_monthly(((t, label) for _, t, label in rows), ALL_SERIES)}
    all_series.update(aggregate_by_series(rows))
    windowed = [restrict_window(s, start, end) for s in all_series.values()]
    fits = [fit_series(s, trend.degree, linear_from) for s in windowed if s.points]

    composition = {ALL_SERIES: class_composition(label for _, _, label in rows)}
    for source in sorted({source for source, _, _ in rows}):
        composition[source] = class_composition(label for s, _, label in rows if s == source)

    writer.write_csv("series.csv", series_frame(windowed), float_format="%.17g")
    writer.write_csv("fits.csv", fits_frame(fits), float_format="%.17g")
    writer.write_json("composition.json", composition)
    return {"series": len(windowed), "fits": len(fits)}


STAGES: Dict[str, Callable[[StageContext, ArtifactWriter], Dict[str, Any]]] = {
    "ingest": run_ingest,
    "dedupe": run_dedupe,
    "audit": run_audit,
    "balance": run_balance,
    "split": run_split,
    "train": run_train,
    "eval": run_eval,
    "classify": run_classify,
    "trend": run_trend,
}


# Manifests


def emit_run_manifest(
    cfg: PipelineConfig,
    stage: str,
    inputs: Dict[str, str],
    outputs: Dict[str, str],
    source: Optional[str] = None,
) -> Dict[str, Any]:
    """Everything needed to reproduce a stage's artifacts"""
    return {
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "command": {"stage": stage, "source": source},
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": dict(sorted(inputs.items())),
        "outputs": dict(sorted(outputs.items())),
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def manifest_core(manifest: Dict[str, Any]) -> Dict[str, Any]:
    """Manifest without its timestamp"""
    return {key: value for key, value in manifest.items() if key != "created_at"}


def run_stage(cfg: PipelineConfig, stage: str, source: Optional[str] = None) -> StageOutcome:
    """Run one stage and commit its artifacts and manifest together"""
    if stage not in STAGES:
        raise ConfigError(f"Unknown stage '{stage}', expected one of: {', '.join(STAGE_NAMES)}")
    logger.info(f"Running stage '{stage}'")
    ctx = StageContext(cfg, stage, source)
    with ArtifactWriter(cfg.workdir) as writer:
        summary = STAGES[stage](ctx, writer)
        outputs = writer.digests()
        writer.write_json(
            manifest_name(stage), emit_run_manifest(cfg, stage, ctx.inputs, outputs, source)
        )
    logger.info(f"Stage '{stage}' wrote {', '.join(sorted(outputs))}")
    return StageOutcome(stage=stage, outputs=outputs, summary=summary)


class PipelineEngine:
    """Runs the configured stage graph in dependency order in this process"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.result: Optional[PipelineResult] = None

    def stage_graph(self) -> Dict[str, StageDefinition]:
        return self.config.stages or default_stages()

    def run(self) -> PipelineResult:
        """Run every stage; on the first failure the rest are skipped and the error re-raised"""
        order = DependencyResolver.execution_order(self.stage_graph())
        name = self.config.name or TOOL_NAME
        logger.info(f"Starting pipeline {name}: {' -> '.join(order)}")

        result = PipelineResult(name=name, status=StageStatus.COMPLETED.value)
        self.result = result
        for position, stage in enumerate(order):
            try:
                result.stages[stage] = run_stage(self.config, stage)
            except (ConfigError, DataError, OSError) as e:
                logger.error(f"Stage {stage} failed: {e}")
                result.stages[stage] = StageOutcome(
                    stage=stage, status=StageStatus.FAILED.value, error=str(e)
                )
                for skipped in order[position + 1:]:
                    result.stages[skipped] = StageOutcome(
                        stage=skipped, status=StageStatus.SKIPPED.value
                    )
                result.status = StageStatus.FAILED.value
                if order[position + 1:]:
                    logger.warning(f"Skipped stages: {', '.join(order[position + 1:])}")
                raise

        self._write_run_manifest(result)
        return result

    def _write_run_manifest(self, result: PipelineResult) -> None:
        outputs: Dict[str, str] = {}
        inputs: Dict[str, str] = {}
        for outcome in result.stages.values():
            outputs.update(outcome.outputs)
            manifest = FileUtils.read_json(os.path.join(self.config.workdir, manifest_name(outcome.stage)))
            # inputs produced inside the run are covered by outputs
            inputs.update(
                (path, digest)
                for path, digest in manifest["inputs"].items()
                if os.path.basename(path) not in PRODUCERS
            )
        with ArtifactWriter(self.config.workdir) as writer:
            writer.write_json(RUN_MANIFEST, emit_run_manifest(self.config, "pipeline", inputs, outputs))


def replay(manifest_path: str) -> ReplayReport:
    """Re-run a recorded stage or pipeline and compare output digests"""
    try:
        manifest = FileUtils.read_json(manifest_path)
        command = manifest["command"]
        cfg = ConfigParser.parse(manifest["config"])
        recorded = manifest["outputs"]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"Cannot read run manifest {manifest_path}: {e}") from None

    report = ReplayReport(stage=command["stage"])
    for path, digest in manifest.get("inputs", {}).items():
        if os.path.basename(path) in PRODUCERS:
            continue
        if not os.path.isfile(path) or sha256_file(path) != digest:
            report.changed_inputs.append(path)
    if report.changed_inputs:
        logger.warning(f"Recorded inputs changed: {report.changed_inputs}")

    if report.stage == "pipeline":
        result = PipelineEngine(cfg).run()
        produced: Dict[str, str] = {}
        for outcome in result.stages.values():
            produced.update(outcome.outputs)
    else:
        produced = run_stage(cfg, report.stage, command.get("source")).outputs

    for name, digest in sorted(recorded.items()):
        if name not in produced:
            report.missing.append(name)
        elif produced[name] == digest:
            report.matched.append(name)
        else:
            report.mismatched.append(name)
    return report
