"""Feature-file I/O and the learnable input projections.

Segment embeddings for one clip and one modality travel in the THGF binary
container (little-endian):

    magic   "THGF"            4 bytes
    version u16               currently 1
    modality u8               0 = audio, 1 = video
    flags   u8                bit0: encoder-shaped (audio dim 128 / video 1024)
    num_segments u32          must be >= 1
    dim     u32
    intervals                 num_segments x (start_ms u32, end_ms u32)
    values  float32[]         num_segments x dim, row-major

The clip manifest is UTF-8 text, one clip per line, tab-separated:
``clip_id <TAB> audio_path <TAB> video_path <TAB> comma-separated labels``.
Relative feature paths resolve against the manifest's directory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, ShapeError, add, matmul

MAGIC = b"THGF"
VERSION = 1

MODALITY_CODES = {"audio": 0, "video": 1}
MODALITY_NAMES = {v: k for k, v in MODALITY_CODES.items()}

ENCODER_DIMS = {"audio": 128, "video": 1024}

# default segmenting when synthesizing clips
AUDIO_SEGMENT_MS = 960
VIDEO_SEGMENT_MS = 250


class FeatureFileError(Exception):
    """Malformed or inconsistent feature file.  ``reason`` is machine-readable."""

    def __init__(self, reason: str, detail: str, path=None):
        self.reason = reason
        self.path = path
        loc = f" [{path}]" if path else ""
        super().__init__(f"{reason}: {detail}{loc}")


class ManifestError(Exception):
    """Malformed manifest line or inconsistent record set."""

    def __init__(self, detail: str, line_no: int | None = None, path=None):
        self.line_no = line_no
        self.path = path
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f":{line_no}]" if line_no is not None else "]")
        super().__init__(f"{detail}{loc}")


@dataclass
class FeatureSequence:
    """One modality's segment embeddings for a clip, with per-segment times."""

    modality: str
    intervals: np.ndarray  # (P, 2) uint32 (start_ms, end_ms)
    values: np.ndarray  # (P, dim) float32
    encoder_shaped: bool = False

    def __post_init__(self):
        self.intervals = np.asarray(self.intervals, dtype=np.uint32)
        self.values = np.asarray(self.values, dtype=np.float32)
        self.validate()

    @property
    def segments(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def max_end_ms(self) -> int:
        return int(self.intervals[:, 1].max())

    @property
    def max_interval_ms(self) -> int:
        return int((self.intervals[:, 1] - self.intervals[:, 0]).max())

    def centers_ms(self) -> np.ndarray:
        return self.intervals.astype(np.float64).mean(axis=1)

    def validate(self):
        if self.modality not in MODALITY_CODES:
            raise FeatureFileError("bad_modality", f"unknown modality {self.modality!r}")
        if self.values.ndim != 2 or self.intervals.ndim != 2 or self.intervals.shape[1] != 2:
            raise FeatureFileError("bad_shape", "values must be (P, dim), intervals (P, 2)")
        if self.values.shape[0] != self.intervals.shape[0]:
            raise FeatureFileError(
                "bad_shape",
                f"{self.values.shape[0]} value rows vs {self.intervals.shape[0]} intervals",
            )
        if self.segments == 0:
            raise FeatureFileError("empty_sequence", "sequence has no segments")
        starts = self.intervals[:, 0].astype(np.int64)
        ends = self.intervals[:, 1].astype(np.int64)
        if np.any(ends <= starts):
            bad = int(np.argmax(ends <= starts))
            raise FeatureFileError(
                "bad_intervals", f"segment {bad} has end_ms <= start_ms ({ends[bad]} <= {starts[bad]})"
            )
        if np.any(starts[1:] < starts[:-1]):
            raise FeatureFileError("bad_intervals", "intervals not sorted by start_ms")
        if np.any(starts[1:] < ends[:-1]):
            bad = int(np.argmax(starts[1:] < ends[:-1]))
            raise FeatureFileError(
                "bad_intervals", f"segments {bad} and {bad + 1} overlap in time"
            )
        if self.encoder_shaped and self.dim != ENCODER_DIMS[self.modality]:
            raise FeatureFileError(
                "bad_dim",
                f"encoder-shaped {self.modality} must have dim {ENCODER_DIMS[self.modality]}, got {self.dim}",
            )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureSequence)
            and self.modality == other.modality
            and self.encoder_shaped == other.encoder_shaped
            and np.array_equal(self.intervals, other.intervals)
            and np.array_equal(self.values, other.values)
        )


_HEADER = struct.Struct("<4sHBBII")


def write_feature_file(seq: FeatureSequence, path) -> None:
    seq.validate()
    path = Path(path)
    flags = 1 if seq.encoder_shaped else 0
    header = _HEADER.pack(MAGIC, VERSION, MODALITY_CODES[seq.modality], flags, seq.segments, seq.dim)
    intervals = np.ascontiguousarray(seq.intervals, dtype="<u4").tobytes()
    values = np.ascontiguousarray(seq.values, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(intervals)
            fh.write(values)
    except OSError as exc:
        raise FeatureFileError("io_error", str(exc), path) from exc


def read_feature_file(path) -> FeatureSequence:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError("io_error", str(exc), path) from exc

    if len(blob) < _HEADER.size:
        raise FeatureFileError("truncated", f"file is {len(blob)} bytes, header needs {_HEADER.size}", path)
    magic, version, modality_code, flags, num_segments, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FeatureFileError("bad_magic", f"expected {MAGIC!r}, found {magic!r}", path)
    if version != VERSION:
        raise FeatureFileError("bad_version", f"unsupported version {version}", path)
    if modality_code not in MODALITY_NAMES:
        raise FeatureFileError("bad_modality", f"unknown modality code {modality_code}", path)
    if num_segments == 0:
        raise FeatureFileError("empty_sequence", "sequence has no segments", path)

    intervals_bytes = num_segments * 8
    values_bytes = num_segments * dim * 4
    expected = _HEADER.size + intervals_bytes + values_bytes
    if len(blob) < expected:
        raise FeatureFileError("truncated", f"file is {len(blob)} bytes, need {expected}", path)
    if len(blob) > expected:
        raise FeatureFileError("trailing_bytes", f"file is {len(blob)} bytes, expected {expected}", path)

    intervals = np.frombuffer(blob, dtype="<u4", count=num_segments * 2, offset=_HEADER.size)
    intervals = intervals.reshape(num_segments, 2).astype(np.uint32)
    values = np.frombuffer(blob, dtype="<f4", count=num_segments * dim, offset=_HEADER.size + intervals_bytes)
    values = values.reshape(num_segments, dim).astype(np.float32)

    try:
        return FeatureSequence(
            modality=MODALITY_NAMES[modality_code],
            intervals=intervals,
            values=values,
            encoder_shaped=bool(flags & 1),
        )
    except FeatureFileError as exc:
        raise FeatureFileError(exc.reason, exc.args[0], path) from None


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    audio_path: Path
    video_path: Path
    labels: frozenset[int]


def load_manifest(path, num_classes: int) -> list[ClipRecord]:
    path = Path(path)
    base = path.parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(str(exc), path=path) from exc

    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"expected 4 tab-separated fields, got {len(parts)}", line_no, path)
        clip_id, audio_rel, video_rel, label_field = parts
        if not clip_id:
            raise ManifestError("empty clip_id", line_no, path)
        if clip_id in seen:
            raise ManifestError(f"duplicate clip_id {clip_id!r}", line_no, path)
        seen.add(clip_id)
        labels: set[int] = set()
        if label_field.strip():
            for token in label_field.split(","):
                try:
                    idx = int(token)
                except ValueError:
                    raise ManifestError(f"bad label {token!r}", line_no, path) from None
                if idx < 0 or idx >= num_classes:
                    raise ManifestError(
                        f"label {idx} out of range for {num_classes} classes", line_no, path
                    )
                labels.add(idx)
        records.append(
            ClipRecord(
                clip_id=clip_id,
                audio_path=(base / audio_rel) if not Path(audio_rel).is_absolute() else Path(audio_rel),
                video_path=(base / video_rel) if not Path(video_rel).is_absolute() else Path(video_rel),
                labels=frozenset(labels),
            )
        )
    return records


def load_clip_features(record: ClipRecord) -> tuple[FeatureSequence, FeatureSequence]:
    """Read both modality files for a clip and check duration coherence.

    The two modalities must describe the same clip: their last segment ends
    may differ by at most one segment length (the longer of the two).
    """
    audio = read_feature_file(record.audio_path)
    video = read_feature_file(record.video_path)
    if audio.modality != "audio":
        raise FeatureFileError("bad_modality", f"{record.audio_path} is not an audio file")
    if video.modality != "video":
        raise FeatureFileError("bad_modality", f"{record.video_path} is not a video file")
    tolerance = max(audio.max_interval_ms, video.max_interval_ms)
    if abs(audio.max_end_ms - video.max_end_ms) > tolerance:
        raise FeatureFileError(
            "duration_mismatch",
            f"clip {record.clip_id!r}: audio ends at {audio.max_end_ms} ms, "
            f"video at {video.max_end_ms} ms (allowed gap {tolerance} ms)",
        )
    return audio, video


@dataclass
class ProjectionParams:
    """Per-modality linear maps aligning inputs to the shared width d."""

    w_audio: Tensor  # (audio_dim, d)
    b_audio: Tensor  # (1, d)
    w_video: Tensor  # (1024- or synthetic-dim, d)
    b_video: Tensor  # (1, d)

    @property
    def d(self) -> int:
        return self.w_audio.shape[1]

    def for_modality(self, modality: str) -> tuple[Tensor, Tensor]:
        if modality == "audio":
            return self.w_audio, self.b_audio
        if modality == "video":
            return self.w_video, self.b_video
        raise ValueError(f"unknown modality {modality!r}")


def project(seq: FeatureSequence, params: ProjectionParams) -> Tensor:
    """Map a feature sequence to the shared embedding width: row i -> x_i W + b.

    Differentiable in W and b; the raw feature matrix enters as a constant.
    """
    w, b = params.for_modality(seq.modality)
    if seq.dim != w.shape[0]:
        raise ShapeError(
            "project", [seq.values.shape, w.shape],
            f"{seq.modality} feature dim {seq.dim} does not match projection input {w.shape[0]}",
        )
    x = Tensor(seq.values.astype(w.dtype))
    return add(matmul(x, w), b)
