"""Finite-difference verification suites.

Two levels: per-op checks sweep every registered tensor op against central
differences on random small inputs; the end-to-end check differentiates the
full network plus joint loss on a two-clip micro-batch and compares every
parameter group.  Inputs for kinked ops (relu, leaky_relu, clip) are sampled
away from their non-differentiable points, and cosine inputs away from zero
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import FeatureSequence
from .graphs import GraphConfig, build_graph
from .losses import LossConfig, contrastive_loss, focal_loss, total_loss
from .model import AvGraphModel, ClipInput, ModelConfig, model_forward
from .tensor import Tape, Tensor, backward, grad_check, relative_error

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5


def _away_from(rng, shape, exclude=0.0, margin=0.1, spread=1.0):
    """Random values at least ``margin`` away from ``exclude``."""
    x = rng.uniform(margin, margin + spread, size=shape)
    signs = rng.choice([-1.0, 1.0], size=shape)
    return exclude + x * signs


def _op_trial(name: str, rng: np.random.Generator, step: float) -> float:
    """Gradcheck one op on one random input set; returns max relative error."""
    worst = 0.0

    def check(f, x):
        nonlocal worst
        worst = max(worst, grad_check(f, Tensor(x), step))

    if name == "matmul":
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((3, 2))
        check(lambda t: T.sum_all(T.matmul(t, Tensor(b))), a)
        check(lambda t: T.sum_all(T.matmul(Tensor(a), t)), b)
    elif name in ("add", "sub"):
        op = T.add if name == "add" else T.sub
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 3))
        bias = rng.standard_normal((1, 3))
        check(lambda t: T.sum_all(op(t, Tensor(b))), a)
        check(lambda t: T.sum_all(op(Tensor(a), t)), b)
        check(lambda t: T.sum_all(op(Tensor(a), t)), bias)  # row-bias broadcast
    elif name == "mul_elementwise":
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 3))
        check(lambda t: T.sum_all(T.mul_elementwise(t, Tensor(b))), a)
        check(lambda t: T.sum_all(T.mul_elementwise(Tensor(a), t)), b)
    elif name == "scale":
        factor = float(rng.uniform(-2.0, 2.0))
        check(lambda t: T.sum_all(T.scale(t, factor)), rng.standard_normal((2, 3)))
    elif name in ("relu", "leaky_relu"):
        op = T.relu if name == "relu" else T.leaky_relu
        x = _away_from(rng, (2, 3), exclude=0.0, margin=0.05)
        check(lambda t: T.sum_all(op(t)), x)
    elif name == "sigmoid":
        check(lambda t: T.sum_all(T.sigmoid(t)), rng.uniform(-3, 3, size=(2, 3)))
    elif name == "tanh":
        check(lambda t: T.sum_all(T.tanh(t)), rng.uniform(-3, 3, size=(2, 3)))
    elif name == "exp":
        check(lambda t: T.sum_all(T.exp(t)), rng.uniform(-3, 3, size=(2, 3)))
    elif name == "log":
        check(lambda t: T.sum_all(T.log(t)), rng.uniform(0.1, 3.0, size=(2, 3)))
    elif name == "sum":
        check(lambda t: T.sum_all(t), rng.standard_normal((2, 3)))
    elif name == "mean":
        check(lambda t: T.mean_all(t), rng.standard_normal((2, 3)))
    elif name == "softmax_rows":
        w = rng.standard_normal((4, 1))
        check(lambda t: T.sum_all(T.matmul(T.softmax_rows(t), Tensor(w))), rng.standard_normal((2, 4)))
    elif name == "logsumexp_rows":
        check(lambda t: T.sum_all(T.logsumexp_rows(t)), rng.standard_normal((2, 4)))
    elif name == "concat_rows":
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((1, 3))
        w = rng.standard_normal((3, 1))
        check(lambda t: T.sum_all(T.matmul(T.concat_rows(t, Tensor(b)), Tensor(w))), a)
        check(lambda t: T.sum_all(T.matmul(T.concat_rows(Tensor(a), t), Tensor(w))), b)
    elif name == "transpose":
        w = rng.standard_normal((2, 1))
        check(lambda t: T.sum_all(T.matmul(T.transpose(t), Tensor(w))), rng.standard_normal((2, 3)))
    elif name == "slice_rows":
        w = rng.standard_normal((3, 1))
        check(lambda t: T.sum_all(T.matmul(T.slice_rows(t, 1, 3), Tensor(w))), rng.standard_normal((4, 3)))
    elif name == "clip":
        x = _away_from(rng, (2, 3), exclude=0.0, margin=0.05, spread=0.3)
        check(lambda t: T.sum_all(T.clip(t, -0.5, 0.5)), x)  # inputs inside the clamp window
    elif name == "cosine_similarity":
        u = _away_from(rng, (4,), exclude=0.0, margin=0.2)
        v = _away_from(rng, (4,), exclude=0.0, margin=0.2)
        check(lambda t: T.cosine_similarity(t, Tensor(v)), u)
        check(lambda t: T.cosine_similarity(Tensor(u), t), v)
    else:  # pragma: no cover - keeps the registry and this suite in sync
        raise KeyError(f"no gradcheck recipe for op {name!r}")
    return worst


def _name_seed(name: str) -> int:
    return int.from_bytes(name.encode("utf-8")[:8].ljust(8, b"\0"), "little") & 0x7FFFFFFF


def op_gradcheck_suite(trials: int = 100, step: float = DEFAULT_STEP, seed: int = 0) -> dict[str, float]:
    """Max relative error per op over ``trials`` random inputs each."""
    results: dict[str, float] = {}
    for name in T.OPS:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _name_seed(name)])))
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, _op_trial(name, rng, step))
        results[name] = worst
    return results


# ---------------------------------------------------------------------------
# end-to-end model check
# ---------------------------------------------------------------------------


def _random_sequence(rng, modality: str, segments: int, seg_ms: int, dim: int) -> FeatureSequence:
    starts = np.arange(segments, dtype=np.uint32) * seg_ms
    intervals = np.stack([starts, starts + seg_ms], axis=1)
    values = rng.standard_normal((segments, dim)).astype(np.float32)
    return FeatureSequence(modality, intervals, values)


@dataclass
class MicroBatchSpec:
    """Two-clip configuration small enough for exhaustive differentiation."""

    clips: int = 2
    p_audio: int = 4
    p_video: int = 6
    audio_dim: int = 6
    video_dim: int = 9
    d: int = 5
    hidden: int = 8
    layers: int = 4
    num_classes: int = 3
    seed: int = 0


def build_micro_batch(spec: MicroBatchSpec = MicroBatchSpec()):
    """Deterministic (model, clip inputs, labels, loss config) fixture."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0xB17])))
    clip_len = spec.p_audio * 960
    video_seg = clip_len // spec.p_video
    graph_cfg = GraphConfig(xi_seed=spec.seed)
    clips = []
    labels = np.zeros((spec.clips, spec.num_classes))
    for i in range(spec.clips):
        audio = _random_sequence(rng, "audio", spec.p_audio, 960, spec.audio_dim)
        video = _random_sequence(rng, "video", spec.p_video, video_seg, spec.video_dim)
        graph = build_graph(audio, video, graph_cfg, np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([spec.seed, 7, i]))))
        clips.append(ClipInput(graph, audio, video))
        labels[i, rng.integers(0, spec.num_classes)] = 1.0
    model_cfg = ModelConfig(
        num_classes=spec.num_classes, d=spec.d, hidden=spec.hidden, layers=spec.layers,
        audio_dim=spec.audio_dim, video_dim=spec.video_dim,
    )
    model = AvGraphModel(model_cfg, seed=spec.seed, dtype=np.float64)
    return model, clips, labels, LossConfig()


def joint_loss(model: AvGraphModel, clips, labels, loss_cfg: LossConfig) -> Tensor:
    out = model_forward(model, clips)
    fl = focal_loss(out.logits, labels, loss_cfg.focal_gamma, loss_cfg.focal_alpha)
    cl = contrastive_loss(out.audio_embed, out.video_embed, loss_cfg.temperature)
    return total_loss(fl, cl, loss_cfg)


def model_gradcheck(
    spec: MicroBatchSpec = MicroBatchSpec(), step: float = DEFAULT_STEP
) -> dict[str, float]:
    """Max relative error per parameter group for the full forward + loss."""
    model, clips, labels, loss_cfg = build_micro_batch(spec)
    params = model.parameters()

    with Tape() as tape:
        loss = joint_loss(model, clips, labels, loss_cfg)
    grad_map = backward(tape, loss, leaves=list(params.values()))
    analytic = {name: grad_map[t].data for name, t in params.items()}

    errors: dict[str, float] = {}
    for name, p in params.items():
        data = p.data
        numeric = np.zeros_like(data)
        flat = data.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(joint_loss(model, clips, labels, loss_cfg).data)
            flat[i] = orig - step
            f_minus = float(joint_loss(model, clips, labels, loss_cfg).data)
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * step)
        errors[name] = relative_error(analytic[name], numeric)
    return errors


@dataclass
class GradcheckReport:
    op_errors: dict[str, float] = field(default_factory=dict)
    model_errors: dict[str, float] = field(default_factory=dict)
    op_tolerance: float = OP_TOLERANCE
    model_tolerance: float = MODEL_TOLERANCE

    @property
    def max_op_error(self) -> float | None:
        return max(self.op_errors.values()) if self.op_errors else None

    @property
    def max_model_error(self) -> float | None:
        return max(self.model_errors.values()) if self.model_errors else None

    @property
    def max_error(self) -> float:
        candidates = [v for v in (self.max_op_error, self.max_model_error) if v is not None]
        return max(candidates) if candidates else float("nan")

    @property
    def passed(self) -> bool:
        ops_ok = all(v < self.op_tolerance for v in self.op_errors.values())
        model_ok = all(v < self.model_tolerance for v in self.model_errors.values())
        return ops_ok and model_ok and (bool(self.op_errors) or bool(self.model_errors))

    def lines(self) -> list[str]:
        out = []
        for name in sorted(self.op_errors):
            out.append(f"op {name} max_rel_error={self.op_errors[name]:.3e} tol={self.op_tolerance:.0e}")
        for name in sorted(self.model_errors):
            out.append(f"param {name} max_rel_error={self.model_errors[name]:.3e} tol={self.model_tolerance:.0e}")
        out.append(f"max_relative_error={self.max_error:.3e}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def run_gradcheck(level: str = "all", trials: int = 100, seed: int = 0) -> GradcheckReport:
    if level not in ("ops", "model", "all"):
        raise ValueError(f"level must be ops|model|all, got {level!r}")
    report = GradcheckReport()
    if level in ("ops", "all"):
        report.op_errors = op_gradcheck_suite(trials=trials, seed=seed)
    if level in ("model", "all"):
        report.model_errors = model_gradcheck(MicroBatchSpec(seed=seed))
    return report
