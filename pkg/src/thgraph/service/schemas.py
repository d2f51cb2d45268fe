"""Pydantic request/response models for the HTTP surface.

Requests carry filesystem paths plus configuration; the service and its
clients share a filesystem (this is a desk-scale tool, not a remote API).
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthRequest(BaseModel):
    out_dir: str
    num_classes: int = 8
    clips_train: int = 512
    clips_eval: int = 128
    clip_ms: int = 10_000
    audio_seg_ms: int = 960
    video_seg_ms: int = 250
    audio_dim: int = 128
    video_dim: int = 1024
    labels_min: int = 1
    labels_max: int = 3
    noise_sigma_audio: float = 0.1
    noise_sigma_video: float = 0.1
    lag_ms: int = 0
    event_len_ms: int = 2_000
    seed: int = 0


class SynthResponse(BaseModel):
    out_dir: str
    train_manifest: str
    eval_manifest: str
    events_file: str
    feature_dir: str
    num_train: int
    num_eval: int


class DescribeRequest(BaseModel):
    manifest: str
    num_classes: int | None = None


class DescribeResponse(BaseModel):
    num_clips: int
    total_labels: int
    audio_segments: int
    video_segments: int
    class_counts: dict[int, int]
    duration_histogram_ms: dict[int, int]
    text: str


class BuildGraphRequest(BaseModel):
    audio_path: str
    video_path: str
    span_audio: int = 6
    span_video: int = 4
    span_inter: int = 3
    dilation_audio: int = 3
    dilation_video: int = 4
    tau: float = 1.0
    xi_mode: str = "sampled"
    xi_seed: int = 0
    xi_clamp_eps: float = 1e-6
    temporal_mode: str = "gau_haw"
    seed: int = 0
    clip_id: str | None = Field(
        default=None, description="xi stream identifier; defaults to the audio file stem"
    )


class BuildGraphResponse(BaseModel):
    audio_nodes: int
    video_nodes: int
    intra_audio_edges: int
    intra_video_edges: int
    inter_edges: int
    dump: str


class TrainRequest(BaseModel):
    manifest: str
    out_dir: str
    config_path: str | None = None
    eval_manifest: str | None = None
    seed: int | None = None
    loss_mode: str | None = None
    temporal_mode: str | None = None


class TrainResponse(BaseModel):
    checkpoint: str
    log_file: str
    loss_curve: str
    eval_curve: str
    config_file: str
    num_classes: int
    best_map: float | None
    best_auc: float | None
    best_iteration: int | None
    iterations_run: int
    stopped_early: bool


class EvalRequest(BaseModel):
    checkpoint: str
    manifest: str
    out_dir: str | None = None


class EvalResponse(BaseModel):
    map: float | None
    auc: float | None
    ap_per_class: dict[int, float]
    auc_per_class: dict[int, float]
    skipped_ap: list[int]
    skipped_auc: list[int]
    metrics_file: str | None
    summary_file: str | None


class GradcheckRequest(BaseModel):
    level: str = "all"  # ops | model | all
    trials: int = 100
    seed: int = 0


class GradcheckResponse(BaseModel):
    op_errors: dict[str, float]
    model_errors: dict[str, float]
    max_error: float
    op_tolerance: float
    model_tolerance: float
    passed: bool
    lines: list[str]
