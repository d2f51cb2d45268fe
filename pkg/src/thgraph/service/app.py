"""FastAPI service wrapping the core package.

Endpoints mirror the CLI subcommands one-to-one and run synchronously; a
training request returns when the run finishes.  Domain errors surface as
HTTP 400 with the underlying message.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..features import FeatureFileError, ManifestError, read_feature_file
from ..graphs import GraphConfig, GraphConfigError, build_graph, clip_rng, dump_graph
from ..losses import LossConfigError
from ..metrics import MetricError
from ..model import CheckpointError, ModelError
from ..synth import SynthSpec, SynthSpecError, describe, generate
from ..tensor import TensorError
from ..training import (
    ConfigError,
    TrainConfig,
    TrainError,
    evaluate,
    parse_config_file,
    train,
)
from ..verification import run_gradcheck
from . import schemas

_DOMAIN_ERRORS = (
    FeatureFileError,
    ManifestError,
    GraphConfigError,
    LossConfigError,
    MetricError,
    CheckpointError,
    ModelError,
    SynthSpecError,
    TensorError,
    ConfigError,
    TrainError,
    ValueError,
)


def create_app() -> FastAPI:
    app = FastAPI(title="thgraph", version=__version__)

    def _guard(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _DOMAIN_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except OSError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        spec_fields = req.model_dump(exclude={"out_dir"})
        result = _guard(lambda: generate(SynthSpec(**spec_fields), req.out_dir))
        return schemas.SynthResponse(
            out_dir=str(result.out_dir),
            train_manifest=str(result.train_manifest),
            eval_manifest=str(result.eval_manifest),
            events_file=str(result.events_file),
            feature_dir=str(result.feature_dir),
            num_train=result.num_train,
            num_eval=result.num_eval,
        )

    @app.post("/describe", response_model=schemas.DescribeResponse)
    def describe_dataset(req: schemas.DescribeRequest):
        summary = _guard(describe, req.manifest, req.num_classes)
        return schemas.DescribeResponse(
            num_clips=summary.num_clips,
            total_labels=summary.total_labels,
            audio_segments=summary.audio_segments,
            video_segments=summary.video_segments,
            class_counts=summary.class_counts,
            duration_histogram_ms=summary.duration_histogram_ms,
            text=summary.format_text(),
        )

    @app.post("/build-graph", response_model=schemas.BuildGraphResponse)
    def build_graph_endpoint(req: schemas.BuildGraphRequest):
        def run():
            cfg = GraphConfig(
                span_audio=req.span_audio,
                span_video=req.span_video,
                span_inter=req.span_inter,
                dilation_audio=req.dilation_audio,
                dilation_video=req.dilation_video,
                tau=req.tau,
                xi_mode=req.xi_mode,
                xi_seed=req.xi_seed,
                xi_clamp_eps=req.xi_clamp_eps,
            )
            audio = read_feature_file(req.audio_path)
            video = read_feature_file(req.video_path)
            clip_id = req.clip_id if req.clip_id is not None else Path(req.audio_path).stem
            rng = clip_rng(req.seed, cfg.xi_seed, clip_id)
            graph = build_graph(audio, video, cfg, rng, req.temporal_mode)
            return graph

        graph = _guard(run)
        return schemas.BuildGraphResponse(
            audio_nodes=graph.p_audio,
            video_nodes=graph.p_video,
            intra_audio_edges=int((graph.a_audio > 0).sum()),
            intra_video_edges=int((graph.a_video > 0).sum()),
            inter_edges=int((graph.a_inter > 0).sum()),
            dump=dump_graph(graph),
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train_endpoint(req: schemas.TrainRequest):
        def run():
            cfg = parse_config_file(req.config_path) if req.config_path else TrainConfig()
            # request-level overrides win over the config file
            overrides = {}
            if req.seed is not None:
                overrides["seed"] = req.seed
            if req.loss_mode is not None:
                overrides["loss_mode"] = req.loss_mode
            if req.temporal_mode is not None:
                overrides["temporal_mode"] = req.temporal_mode
            if overrides:
                cfg = dataclasses.replace(cfg, **overrides)
            return train(req.manifest, cfg, out_dir=req.out_dir, eval_manifest_path=req.eval_manifest)

        result = _guard(run)
        return schemas.TrainResponse(
            checkpoint=str(result.checkpoint_path),
            log_file=str(result.log_path),
            loss_curve=str(result.loss_curve_path),
            eval_curve=str(result.eval_curve_path),
            config_file=str(Path(result.checkpoint_path).parent / "config.txt"),
            num_classes=result.num_classes,
            best_map=result.best_map,
            best_auc=result.best_auc,
            best_iteration=result.best_iteration,
            iterations_run=result.iterations_run,
            stopped_early=result.stopped_early,
        )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_endpoint(req: schemas.EvalRequest):
        result = _guard(evaluate, req.checkpoint, req.manifest, req.out_dir)
        return schemas.EvalResponse(
            map=result.map,
            auc=result.auc,
            ap_per_class=result.report.ap_per_class,
            auc_per_class=result.report.auc_per_class,
            skipped_ap=result.report.skipped_ap,
            skipped_auc=result.report.skipped_auc,
            metrics_file=str(result.metrics_path) if result.metrics_path else None,
            summary_file=str(result.summary_path) if result.summary_path else None,
        )

    @app.post("/gradcheck", response_model=schemas.GradcheckResponse)
    def gradcheck_endpoint(req: schemas.GradcheckRequest):
        report = _guard(run_gradcheck, level=req.level, trials=req.trials, seed=req.seed)
        return schemas.GradcheckResponse(
            op_errors=report.op_errors,
            model_errors=report.model_errors,
            max_error=report.max_error,
            op_tolerance=report.op_tolerance,
            model_tolerance=report.model_tolerance,
            passed=report.passed,
            lines=report.lines(),
        )

    return app


app = create_app()
