"""Deterministic synthetic audio-visual clip generator.

Each clip carries 1..k class labels.  Every label places an event window in
the clip; audio segments overlapping the window receive that class's audio
prototype, video segments overlapping the window shifted by ``lag_ms``
receive the video prototype, and everything is bathed in Gaussian noise.
Prototypes are fixed unit-norm random vectors per class, so classes stay
separable regardless of dimension, and ``lag_ms`` controls how far the video
evidence trails the audio evidence.

All randomness derives from the spec seed; the same spec produces
byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    AUDIO_SEGMENT_MS,
    VIDEO_SEGMENT_MS,
    ENCODER_DIMS,
    FeatureSequence,
    load_manifest,
    read_feature_file,
    write_feature_file,
)


class SynthSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    num_classes: int = 8
    clips_train: int = 512
    clips_eval: int = 128
    clip_ms: int = 10_000
    audio_seg_ms: int = AUDIO_SEGMENT_MS
    video_seg_ms: int = VIDEO_SEGMENT_MS
    audio_dim: int = ENCODER_DIMS["audio"]
    video_dim: int = ENCODER_DIMS["video"]
    labels_min: int = 1
    labels_max: int = 3
    noise_sigma_audio: float = 0.1
    noise_sigma_video: float = 0.1
    lag_ms: int = 0
    event_len_ms: int = 2_000
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise SynthSpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.audio_dim < 1 or self.video_dim < 1:
            raise SynthSpecError("feature dims must be positive")
        if self.clip_ms < self.event_len_ms:
            raise SynthSpecError(
                f"clip_ms {self.clip_ms} shorter than event_len_ms {self.event_len_ms}"
            )
        if self.audio_seg_ms < 1 or self.video_seg_ms < 1:
            raise SynthSpecError("segment durations must be positive")
        if not (1 <= self.labels_min <= self.labels_max <= self.num_classes):
            raise SynthSpecError(
                f"labels range [{self.labels_min}, {self.labels_max}] invalid for {self.num_classes} classes"
            )
        if self.noise_sigma_audio < 0 or self.noise_sigma_video < 0:
            raise SynthSpecError("noise sigmas must be non-negative")
        if self.lag_ms < 0:
            raise SynthSpecError("lag_ms must be non-negative")


@dataclass
class EventRecord:
    clip_id: str
    label: int
    audio_start_ms: int
    audio_end_ms: int
    video_start_ms: int
    video_end_ms: int


@dataclass
class SynthResult:
    out_dir: Path
    train_manifest: Path
    eval_manifest: Path
    events_file: Path
    feature_dir: Path
    num_train: int
    num_eval: int


def class_prototypes(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm per-class prototype vectors, (C, audio_dim) and (C, video_dim)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0])))
    audio = rng.standard_normal((spec.num_classes, spec.audio_dim))
    video = rng.standard_normal((spec.num_classes, spec.video_dim))
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    video /= np.linalg.norm(video, axis=1, keepdims=True)
    return audio.astype(np.float32), video.astype(np.float32)


def _segment_intervals(clip_ms: int, seg_ms: int) -> np.ndarray:
    count = clip_ms // seg_ms
    starts = np.arange(count, dtype=np.uint32) * seg_ms
    return np.stack([starts, starts + seg_ms], axis=1)


def _overlap_mask(intervals: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    starts = intervals[:, 0].astype(np.int64)
    ends = intervals[:, 1].astype(np.int64)
    return (starts < window[1]) & (window[0] < ends)


def _synth_clip(
    spec: SynthSpec,
    clip_id: str,
    rng: np.random.Generator,
    protos_audio: np.ndarray,
    protos_video: np.ndarray,
) -> tuple[FeatureSequence, FeatureSequence, list[int], list[EventRecord]]:
    k = int(rng.integers(spec.labels_min, spec.labels_max + 1))
    labels = sorted(int(c) for c in rng.choice(spec.num_classes, size=k, replace=False))

    audio_iv = _segment_intervals(spec.clip_ms, spec.audio_seg_ms)
    video_iv = _segment_intervals(spec.clip_ms, spec.video_seg_ms)
    audio = rng.standard_normal((len(audio_iv), spec.audio_dim)) * spec.noise_sigma_audio
    video = rng.standard_normal((len(video_iv), spec.video_dim)) * spec.noise_sigma_video

    events = []
    for label in labels:
        start = int(rng.integers(0, spec.clip_ms - spec.event_len_ms + 1))
        end = start + spec.event_len_ms
        v_start, v_end = start + spec.lag_ms, end + spec.lag_ms
        audio[_overlap_mask(audio_iv, (start, end))] += protos_audio[label]
        video[_overlap_mask(video_iv, (v_start, v_end))] += protos_video[label]
        events.append(EventRecord(clip_id, label, start, end, v_start, v_end))

    audio_seq = FeatureSequence(
        "audio", audio_iv, audio.astype(np.float32),
        encoder_shaped=spec.audio_dim == ENCODER_DIMS["audio"],
    )
    video_seq = FeatureSequence(
        "video", video_iv, video.astype(np.float32),
        encoder_shaped=spec.video_dim == ENCODER_DIMS["video"],
    )
    return audio_seq, video_seq, labels, events


def generate(spec: SynthSpec, out_dir) -> SynthResult:
    """Write feature files, train/eval manifests, and an event sidecar."""
    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    protos_audio, protos_video = class_prototypes(spec)

    all_events: list[EventRecord] = []
    manifests = {}
    for split_idx, (split, count) in enumerate((("train", spec.clips_train), ("eval", spec.clips_eval)), start=1):
        lines = []
        for n in range(count):
            clip_id = f"{split}_{n:05d}"
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, split_idx, n])))
            audio_seq, video_seq, labels, events = _synth_clip(spec, clip_id, rng, protos_audio, protos_video)
            audio_rel = f"features/{clip_id}.audio.thgf"
            video_rel = f"features/{clip_id}.video.thgf"
            write_feature_file(audio_seq, out_dir / audio_rel)
            write_feature_file(video_seq, out_dir / video_rel)
            lines.append(f"{clip_id}\t{audio_rel}\t{video_rel}\t{','.join(map(str, labels))}")
            all_events.extend(events)
        manifest_path = out_dir / f"{split}.tsv"
        manifest_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        manifests[split] = manifest_path

    events_file = out_dir / "events.tsv"
    with open(events_file, "w", encoding="utf-8") as fh:
        fh.write("clip_id\tlabel\taudio_start_ms\taudio_end_ms\tvideo_start_ms\tvideo_end_ms\n")
        for ev in all_events:
            fh.write(
                f"{ev.clip_id}\t{ev.label}\t{ev.audio_start_ms}\t{ev.audio_end_ms}"
                f"\t{ev.video_start_ms}\t{ev.video_end_ms}\n"
            )

    return SynthResult(
        out_dir=out_dir,
        train_manifest=manifests["train"],
        eval_manifest=manifests["eval"],
        events_file=events_file,
        feature_dir=feature_dir,
        num_train=spec.clips_train,
        num_eval=spec.clips_eval,
    )


@dataclass
class DatasetSummary:
    num_clips: int = 0
    num_classes: int = 0
    class_counts: dict[int, int] = field(default_factory=dict)
    total_labels: int = 0
    audio_segments: int = 0
    video_segments: int = 0
    duration_histogram_ms: dict[int, int] = field(default_factory=dict)

    def format_text(self) -> str:
        lines = [
            f"clips {self.num_clips}",
            f"labels_total {self.total_labels}",
            f"audio_segments {self.audio_segments}",
            f"video_segments {self.video_segments}",
        ]
        for c in sorted(self.class_counts):
            lines.append(f"class {c} count {self.class_counts[c]}")
        for dur in sorted(self.duration_histogram_ms):
            lines.append(f"duration_ms {dur} clips {self.duration_histogram_ms[dur]}")
        return "\n".join(lines) + "\n"


def describe(manifest_path, num_classes: int | None = None) -> DatasetSummary:
    """Summarize a manifest: class counts, segment totals, duration histogram."""
    manifest_path = Path(manifest_path)
    if num_classes is None:
        # discover the label range with a permissive first pass
        num_classes = 1
        for raw in manifest_path.read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) == 4 and parts[3].strip():
                for token in parts[3].split(","):
                    try:
                        num_classes = max(num_classes, int(token) + 1)
                    except ValueError:
                        pass
    records = load_manifest(manifest_path, num_classes)
    summary = DatasetSummary(num_clips=len(records), num_classes=num_classes)
    for record in records:
        for label in record.labels:
            summary.class_counts[label] = summary.class_counts.get(label, 0) + 1
            summary.total_labels += 1
        audio = read_feature_file(record.audio_path)
        video = read_feature_file(record.video_path)
        summary.audio_segments += audio.segments
        summary.video_segments += video.segments
        duration = max(audio.max_end_ms, video.max_end_ms)
        summary.duration_histogram_ms[duration] = summary.duration_histogram_ms.get(duration, 0) + 1
    return summary
