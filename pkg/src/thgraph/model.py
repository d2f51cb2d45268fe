"""The audio-visual graph network and its parameter container.

Per clip: both modalities are projected to width ``d``, run through separate
stacks of graph layers ``x -> relu(A_norm @ x @ W)``, then video node states
are transferred into audio nodes by a single-head additive attention over the
inter-modal edges (biased by the log of the normalized edge weight, with a
residual connection).  Attention pooling turns node states into one vector
per clip: the fused audio pool feeds the classifier, while the pre-fusion
audio and video pools serve as the clip's two contrastive embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .features import FeatureSequence, ProjectionParams, project
from .graphs import TemporalHeteroGraph
from .tensor import Tensor

# large negative logit that exp() maps to exactly 0 under the softmax shift
_NEG_MASK = -1e30

CHECKPOINT_MAGIC = b"THGM"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    d: int = 128
    hidden: int = 512
    layers: int = 4
    audio_dim: int = 128
    video_dim: int = 1024

    def __post_init__(self):
        for name in ("num_classes", "d", "hidden", "layers", "audio_dim", "video_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class GatParams:
    w_query: Tensor  # (h, h)
    w_key: Tensor  # (h, h)
    w_value: Tensor  # (h, h)
    attn: Tensor  # (2h, 1)


@dataclass
class PoolParams:
    w: Tensor  # (h, h)
    score: Tensor  # (h, 1)


@dataclass
class ClipInput:
    graph: TemporalHeteroGraph
    audio: FeatureSequence
    video: FeatureSequence


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, C)
    audio_embed: Tensor  # (B, h), pre-fusion audio pool
    video_embed: Tensor  # (B, h), video pool


def _glorot(rng: np.random.Generator, shape: tuple[int, int], dtype) -> np.ndarray:
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class AvGraphModel:
    """All learnable parameters, addressable by stable names."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6D6F64])))
        c, d, h = config, config.d, config.hidden

        def param(shape, zero=False):
            data = np.zeros(shape, dtype=self.dtype) if zero else _glorot(rng, shape, self.dtype)
            return Tensor(data, requires_grad=True)

        self._params: dict[str, Tensor] = {}
        p = self._params
        p["proj.w_audio"] = param((c.audio_dim, d))
        p["proj.b_audio"] = param((1, d), zero=True)
        p["proj.w_video"] = param((c.video_dim, d))
        p["proj.b_video"] = param((1, d), zero=True)
        for stack in ("gnn_audio", "gnn_video"):
            for layer in range(c.layers):
                in_dim = d if layer == 0 else h
                p[f"{stack}.{layer}.w"] = param((in_dim, h))
        p["gat.w_query"] = param((h, h))
        p["gat.w_key"] = param((h, h))
        p["gat.w_value"] = param((h, h))
        p["gat.attn"] = param((2 * h, 1))
        p["pool_audio.w"] = param((h, h))
        p["pool_audio.score"] = param((h, 1))
        p["pool_video.w"] = param((h, h))
        p["pool_video.score"] = param((h, 1))
        p["classifier.w"] = param((h, c.num_classes))
        p["classifier.b"] = param((1, c.num_classes), zero=True)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def replace_parameters(self, new: dict[str, Tensor]) -> None:
        if set(new) != set(self._params):
            missing = set(self._params) ^ set(new)
            raise ModelError(f"parameter name mismatch: {sorted(missing)}")
        for name, t in new.items():
            if t.shape != self._params[name].shape:
                raise ModelError(f"{name}: shape {t.shape} != {self._params[name].shape}")
            t.requires_grad = True
            self._params[name] = t

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = set(self._params) ^ set(arrays)
            raise CheckpointError(f"checkpoint parameter mismatch: {sorted(missing)}")
        replacement = {}
        for name, arr in arrays.items():
            if tuple(arr.shape) != self._params[name].shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {tuple(arr.shape)} != model shape {self._params[name].shape}"
                )
            replacement[name] = Tensor(arr.astype(self.dtype), requires_grad=True)
        self._params.update(replacement)

    @property
    def projection(self) -> ProjectionParams:
        p = self._params
        return ProjectionParams(p["proj.w_audio"], p["proj.b_audio"], p["proj.w_video"], p["proj.b_video"])

    @property
    def gat(self) -> GatParams:
        p = self._params
        return GatParams(p["gat.w_query"], p["gat.w_key"], p["gat.w_value"], p["gat.attn"])

    @property
    def pool_audio(self) -> PoolParams:
        return PoolParams(self._params["pool_audio.w"], self._params["pool_audio.score"])

    @property
    def pool_video(self) -> PoolParams:
        return PoolParams(self._params["pool_video.w"], self._params["pool_video.score"])

    @property
    def classifier(self) -> tuple[Tensor, Tensor]:
        return self._params["classifier.w"], self._params["classifier.b"]

    def gnn_stack(self, modality: str) -> list[Tensor]:
        return [self._params[f"gnn_{modality}.{layer}.w"] for layer in range(self.config.layers)]

    def param_count(self) -> int:
        return count_parameters(self._params)


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def gnn_layer(x: Tensor, a_norm: Tensor, weight: Tensor, activation: str = "relu") -> Tensor:
    """One graph layer: activation(A_norm @ x @ W)."""
    z = T.matmul(T.matmul(a_norm, x), weight)
    if activation == "relu":
        return T.relu(z)
    if activation == "none":
        return z
    raise ModelError(f"unknown activation {activation!r}")


def gat_av(
    x_audio: Tensor,
    x_video: Tensor,
    a_inter_norm: np.ndarray,
    params: GatParams,
    return_attention: bool = False,
):
    """Transfer video node states into audio nodes along inter-modal edges.

    Attention logits are additive (split attention vector over query/key
    halves) plus the log of the normalized edge weight, so the temporal
    weighting survives inside the learned attention.  Softmax runs per audio
    node over its incident video nodes only; audio nodes without inter edges
    pass through unchanged.  Output is x_audio + sum_j alpha_ij * (x_video_j W_v).
    """
    p_a, p_v = a_inter_norm.shape
    dtype = x_audio.dtype
    has_edges = a_inter_norm > 0
    row_has_edge = has_edges.any(axis=1)
    if not row_has_edge.any():
        return (x_audio, None) if return_attention else x_audio

    h = params.w_query.shape[1]
    q = T.matmul(x_audio, params.w_query)
    k = T.matmul(x_video, params.w_key)
    v = T.matmul(x_video, params.w_value)
    a_q = T.slice_rows(params.attn, 0, h)
    a_k = T.slice_rows(params.attn, h, 2 * h)

    u = T.matmul(q, a_q)  # (P_a, 1)
    w = T.matmul(k, a_k)  # (P_v, 1)
    ones_row = Tensor(np.ones((1, p_v), dtype=dtype))
    ones_col = Tensor(np.ones((p_a, 1), dtype=dtype))
    logits = T.leaky_relu(T.add(T.matmul(u, ones_row), T.matmul(ones_col, T.transpose(w))))

    bias = np.full((p_a, p_v), _NEG_MASK, dtype=dtype)
    bias[has_edges] = np.log(a_inter_norm[has_edges])
    alpha = T.softmax_rows(T.add(logits, Tensor(bias)))

    context = T.matmul(alpha, v)
    row_mask = np.repeat(row_has_edge.astype(dtype)[:, None], h, axis=1)
    context = T.mul_elementwise(context, Tensor(row_mask))
    out = T.add(x_audio, context)
    if return_attention:
        attn = np.where(row_has_edge[:, None], alpha.data, 0.0)
        return out, attn
    return out


def attention_pool(x: Tensor, params: PoolParams) -> Tensor:
    """Learned convex combination of rows: softmax(w_score . tanh(x W)) weights."""
    if x.shape[0] < 1:
        raise ModelError("attention_pool requires at least one row")
    scores = T.matmul(T.tanh(T.matmul(x, params.w)), params.score)  # (N, 1)
    alpha = T.softmax_rows(T.transpose(scores))  # (1, N)
    return T.matmul(alpha, x)  # (1, h)


def model_forward(model: AvGraphModel, clips: Sequence[ClipInput]) -> ForwardOutput:
    """Run the full network over a batch; clips are processed independently."""
    if not clips:
        raise ModelError("model_forward requires a non-empty batch")
    proj = model.projection
    audio_stack = model.gnn_stack("audio")
    video_stack = model.gnn_stack("video")
    cls_rows, audio_rows, video_rows = [], [], []
    for clip in clips:
        a_bar = Tensor(clip.graph.a_audio_norm.astype(model.dtype))
        v_bar = Tensor(clip.graph.a_video_norm.astype(model.dtype))
        x_a = project(clip.audio, proj)
        x_v = project(clip.video, proj)
        for w in audio_stack:
            x_a = gnn_layer(x_a, a_bar, w)
        for w in video_stack:
            x_v = gnn_layer(x_v, v_bar, w)
        fused = gat_av(x_a, x_v, clip.graph.a_inter_norm, model.gat)
        cls_rows.append(attention_pool(fused, model.pool_audio))
        audio_rows.append(attention_pool(x_a, model.pool_audio))
        video_rows.append(attention_pool(x_v, model.pool_video))
    pooled = T.concat_rows(*cls_rows)
    cls_w, cls_b = model.classifier
    logits = T.add(T.matmul(pooled, cls_w), cls_b)
    return ForwardOutput(
        logits=logits,
        audio_embed=T.concat_rows(*audio_rows),
        video_embed=T.concat_rows(*video_rows),
    )


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(path, config_echo: dict[str, str], params: dict[str, Tensor]) -> None:
    """Versioned binary: config echo plus named float32 little-endian tensors."""
    path = Path(path)
    echo_text = "".join(f"{k}={v}\n" for k, v in config_echo.items())
    echo_bytes = echo_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(echo_bytes)))
        fh.write(echo_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            shape = t.shape
            fh.write(struct.pack("<B", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (echo_len,) = struct.unpack("<I", take(4))
    echo_text = bytes(take(echo_len)).decode("utf-8")
    config: dict[str, str] = {}
    for line in echo_text.splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(n_items * 4), dtype="<f4").reshape(shape).copy()
        params[name] = data
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return config, params
