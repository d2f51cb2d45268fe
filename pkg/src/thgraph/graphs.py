"""Per-clip temporal heterogeneous graph construction.

Audio and video segments become two node sets.  Intra-modal edges connect
segments within ``span`` index steps whose offset is a multiple of
``dilation`` (plus a self-loop); their weight decays with squared index
distance over the neighborhood width (Gaussian).  Inter-modal edges connect
time-overlapping audio/video segments, capped at the ``span_inter`` video
nodes nearest in center time per audio node; their weight follows a Hawkes
recency rule: a sigmoid of a random excitation term plus how close the video
index sits to the newest incident audio index, smoothed by ``tau``.

Edges are directed; a row of an adjacency matrix belongs to the destination
(aggregating) node, and weights use that destination's neighborhood bounds.
Row-normalized copies are stored alongside the raw weights because the GNN
aggregates with rows as convex-ish combinations.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSequence

TEMPORAL_MODES = ("gau_haw", "both_haw", "both_gau")


class GraphConfigError(ValueError):
    pass


@dataclass
class GraphConfig:
    span_audio: int = 6
    span_video: int = 4
    span_inter: int = 3
    dilation_audio: int = 3
    dilation_video: int = 4
    tau: float = 1.0
    xi_mode: str = "sampled"  # "sampled" draws xi per edge; "fixed" pins xi=0.5
    xi_seed: int = 0
    xi_clamp_eps: float = 1e-6

    def __post_init__(self):
        for name in ("span_audio", "span_video", "span_inter", "dilation_audio", "dilation_video"):
            if getattr(self, name) < 1:
                raise GraphConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.tau <= 0:
            raise GraphConfigError(f"tau must be positive, got {self.tau}")
        if self.xi_mode not in ("sampled", "fixed"):
            raise GraphConfigError(f"xi_mode must be 'sampled' or 'fixed', got {self.xi_mode!r}")
        if not (0 < self.xi_clamp_eps < 0.5):
            raise GraphConfigError(f"xi_clamp_eps must be in (0, 0.5), got {self.xi_clamp_eps}")


@dataclass
class TemporalHeteroGraph:
    """Weighted adjacencies for one clip, raw and row-normalized.

    ``a_audio``/``a_video`` are (P_m, P_m) intra-modal matrices; ``a_inter``
    is (P_a, P_v), audio rows aggregating video columns.
    """

    p_audio: int
    p_video: int
    a_audio: np.ndarray
    a_video: np.ndarray
    a_inter: np.ndarray
    a_audio_norm: np.ndarray = field(init=False)
    a_video_norm: np.ndarray = field(init=False)
    a_inter_norm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.a_audio_norm = row_normalize(self.a_audio)
        self.a_video_norm = row_normalize(self.a_video)
        self.a_inter_norm = row_normalize(self.a_inter)


def intra_neighbors(i: int, count: int, span: int, dilation: int) -> list[int]:
    """Indices j with |i - j| <= span, |i - j| divisible by dilation, plus i itself."""
    if not 0 <= i < count:
        raise GraphConfigError(f"node index {i} out of range for {count} segments")
    neighbors = {i}
    for offset in range(dilation, span + 1, dilation):
        if i - offset >= 0:
            neighbors.add(i - offset)
        if i + offset < count:
            neighbors.add(i + offset)
    return sorted(neighbors)


def gaussian_weight(i: int, j: int, p_min: int, p_max: int) -> float:
    """exp(-(i-j)^2 / (2 * width^2)) with width = p_max - p_min + 1; in (0, 1]."""
    width = p_max - p_min + 1
    delta = float(i - j)
    return math.exp(-(delta * delta) / (2.0 * width * width))


def hawkes_weight(p_v_i: int, p_a_max: int, p_a_min: int, xi: float, tau: float) -> float:
    """sigmoid(log(xi)/log(1-xi) + (p_a_max - p_v_i + 1)/(p_a_max - p_a_min + 1)) / tau.

    ``xi`` must already be clamped away from {0, 1}; the ratio term shrinks
    as the video index grows, so later video nodes receive strictly smaller
    weights for a fixed xi and audio bounds.
    """
    if tau <= 0:
        raise GraphConfigError(f"tau must be positive, got {tau}")
    if p_a_min > p_a_max:
        raise GraphConfigError(f"audio index bounds inverted: [{p_a_min}, {p_a_max}]")
    excitation = math.log(xi) / math.log(1.0 - xi)
    recency = (p_a_max - p_v_i + 1.0) / (p_a_max - p_a_min + 1.0)
    z = excitation + recency
    if z >= 0:
        sig = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        sig = e / (1.0 + e)
    return sig / tau


def _clamp_xi(xi: float, eps: float) -> float:
    return min(max(xi, eps), 1.0 - eps)


def inter_edges(
    audio_intervals: np.ndarray, video_intervals: np.ndarray, span_inter: int
) -> list[tuple[int, int]]:
    """(audio, video) pairs whose intervals overlap, capped per audio node.

    Each audio node keeps at most ``span_inter`` overlapping video nodes,
    preferring the nearest segment centers and, on ties, the earlier video
    index.
    """
    audio_intervals = np.asarray(audio_intervals, dtype=np.int64)
    video_intervals = np.asarray(video_intervals, dtype=np.int64)
    a_centers = audio_intervals.mean(axis=1)
    v_centers = video_intervals.mean(axis=1)
    edges: list[tuple[int, int]] = []
    for i in range(audio_intervals.shape[0]):
        a_start, a_end = audio_intervals[i]
        overlapping = [
            j
            for j in range(video_intervals.shape[0])
            if min(a_end, video_intervals[j][1]) - max(a_start, video_intervals[j][0]) > 0
        ]
        overlapping.sort(key=lambda j: (abs(v_centers[j] - a_centers[i]), j))
        edges.extend((i, j) for j in sorted(overlapping[:span_inter]))
    return edges


def row_normalize(a: np.ndarray) -> np.ndarray:
    """Divide each nonzero row by its sum; all-zero rows pass through."""
    a = np.asarray(a, dtype=np.float64)
    sums = a.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0, sums, 1.0)
    return a / safe


def _intra_adjacency(
    count: int, span: int, dilation: int, mode: str, cfg: GraphConfig, rng
) -> np.ndarray:
    a = np.zeros((count, count), dtype=np.float64)
    for i in range(count):
        nb = intra_neighbors(i, count, span, dilation)
        p_min, p_max = nb[0], nb[-1]
        for j in nb:
            if j == i:
                a[i, j] = 1.0  # self-loops always carry weight 1
            elif mode == "hawkes":
                xi = _draw_xi(cfg, rng)
                a[i, j] = hawkes_weight(j, p_max, p_min, xi, cfg.tau)
            else:
                a[i, j] = gaussian_weight(i, j, p_min, p_max)
    return a


def _draw_xi(cfg: GraphConfig, rng) -> float:
    if cfg.xi_mode == "fixed":
        return 0.5
    return _clamp_xi(float(rng.random()), cfg.xi_clamp_eps)


def build_graph(
    audio_seq: FeatureSequence,
    video_seq: FeatureSequence,
    cfg: GraphConfig,
    rng: np.random.Generator | None = None,
    temporal_mode: str = "gau_haw",
) -> TemporalHeteroGraph:
    """Construct the weighted graph for one clip.

    ``temporal_mode`` selects the weighting scheme per edge family:
      - ``gau_haw``  Gaussian intra, Hawkes inter (default)
      - ``both_haw`` Hawkes everywhere (intra uses each destination's own
        neighborhood bounds as the index bounds)
      - ``both_gau`` Gaussian everywhere (inter uses the incident-audio
        index bounds of each video node)
    Edge topology never changes with the mode; only weights do.  Randomness
    (the xi excitation draw) comes solely from ``rng``, drawn once per edge
    in a fixed order: intra-audio, intra-video, then inter edges sorted by
    (audio, video) index.
    """
    if temporal_mode not in TEMPORAL_MODES:
        raise GraphConfigError(f"unknown temporal_mode {temporal_mode!r}; expected one of {TEMPORAL_MODES}")
    if audio_seq.segments == 0 or video_seq.segments == 0:
        raise GraphConfigError("cannot build a graph over an empty modality")
    if rng is None:
        rng = np.random.default_rng(cfg.xi_seed)

    intra_mode = "hawkes" if temporal_mode == "both_haw" else "gaussian"
    inter_mode = "gaussian" if temporal_mode == "both_gau" else "hawkes"

    p_a, p_v = audio_seq.segments, video_seq.segments
    a_audio = _intra_adjacency(p_a, cfg.span_audio, cfg.dilation_audio, intra_mode, cfg, rng)
    a_video = _intra_adjacency(p_v, cfg.span_video, cfg.dilation_video, intra_mode, cfg, rng)

    edges = inter_edges(audio_seq.intervals, video_seq.intervals, cfg.span_inter)
    incident_audio: dict[int, list[int]] = {}
    for i, j in edges:
        incident_audio.setdefault(j, []).append(i)

    a_inter = np.zeros((p_a, p_v), dtype=np.float64)
    for i, j in sorted(edges):
        s = incident_audio[j]
        p_a_min, p_a_max = min(s), max(s)
        if inter_mode == "hawkes":
            xi = _draw_xi(cfg, rng)
            a_inter[i, j] = hawkes_weight(j, p_a_max, p_a_min, xi, cfg.tau)
        else:
            a_inter[i, j] = gaussian_weight(i, j, p_a_min, p_a_max)

    return TemporalHeteroGraph(p_audio=p_a, p_video=p_v, a_audio=a_audio, a_video=a_video, a_inter=a_inter)


def clip_rng(global_seed: int, xi_seed: int, clip_id: str) -> np.random.Generator:
    """Deterministic per-clip generator derived from both seeds and the clip id."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([global_seed, xi_seed, zlib.crc32(clip_id.encode("utf-8"))]))
    )


def dump_graph(graph: TemporalHeteroGraph) -> str:
    """Line-oriented edge dump: ``<family> <dst> <src> <raw> <normalized>``.

    Weights carry 9 significant digits; ordering is deterministic, so dumps
    are usable as golden files.
    """
    lines = [f"# audio_nodes={graph.p_audio} video_nodes={graph.p_video}"]
    for family, raw, norm in (
        ("audio", graph.a_audio, graph.a_audio_norm),
        ("video", graph.a_video, graph.a_video_norm),
        ("inter", graph.a_inter, graph.a_inter_norm),
    ):
        rows, cols = raw.shape
        for i in range(rows):
            for j in range(cols):
                if raw[i, j] > 0.0:
                    lines.append(f"{family} {i} {j} {raw[i, j]:.9g} {norm[i, j]:.9g}")
    return "\n".join(lines) + "\n"
