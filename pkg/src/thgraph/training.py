"""Batched training with Adam, early stopping on validation mAP, and
deterministic seeding end to end.

The run configuration is one flat key=value text file mirroring the config
dataclass fields (graph and loss fields included); unknown keys are rejected
so typos fail loudly.  The training log is line-oriented:

    iter=<n> fl=<v> cl=<v> total=<v>
    eval_iter=<n> map=<v> auc=<v>

with ``#`` lines carrying run metadata (timestamps).  Loss/metric values are
printed with a fixed format so two identical runs produce identical logs.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSequence, ClipRecord, load_clip_features, load_manifest
from .graphs import GraphConfig, TEMPORAL_MODES, build_graph, clip_rng
from .losses import LossConfig, contrastive_loss, focal_loss, total_loss
from .metrics import RankingReport, ranking_report
from .model import (
    AvGraphModel,
    ClipInput,
    ModelConfig,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .tensor import Tape, Tensor, backward, sigmoid

LOSS_MODES = ("fl_cl", "fl_only", "ce_only")
PRECISIONS = {"f64": np.float64, "f32": np.float32}

_VALUE_FMT = "{:.12e}"


class ConfigError(ValueError):
    pass


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.005
    max_iterations: int = 5000
    batch_size: int = 32
    early_stop_patience: int = 10
    eval_every: int = 100
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 512
    d: int = 128
    layers: int = 4
    loss_mode: str = "fl_cl"
    temporal_mode: str = "gau_haw"
    num_classes: int = 0  # 0 means "infer from the manifest"
    precision: str = "f64"
    val_fraction: float = 0.2
    single_thread: bool = False
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    graph_cfg: GraphConfig = field(default_factory=GraphConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}")
        if self.loss_mode == "fl_cl" and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when loss_mode=fl_cl (contrastive loss needs negatives)")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if not (0 < self.val_fraction < 1):
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")


# flat config surface: TrainConfig scalars + nested LossConfig/GraphConfig fields
_SCALAR_FIELDS = {
    f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name not in ("loss_cfg", "graph_cfg")
}
_LOSS_FIELDS = {f.name: f.type for f in dataclasses.fields(LossConfig)}
_GRAPH_FIELDS = {f.name: f.type for f in dataclasses.fields(GraphConfig)}


def _parse_typed(key: str, value: str, type_name: str):
    value = value.strip()
    if type_name == "int":
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {value!r}") from None
    if type_name == "float":
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {value!r}") from None
    if type_name == "bool":
        low = value.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    return value  # str


def config_from_pairs(pairs: dict[str, str]) -> TrainConfig:
    scalars, loss_kw, graph_kw = {}, {}, {}
    for key, value in pairs.items():
        if key in _SCALAR_FIELDS:
            scalars[key] = _parse_typed(key, value, _SCALAR_FIELDS[key])
        elif key in _LOSS_FIELDS:
            loss_kw[key] = _parse_typed(key, value, _LOSS_FIELDS[key])
        elif key in _GRAPH_FIELDS:
            graph_kw[key] = _parse_typed(key, value, _GRAPH_FIELDS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return TrainConfig(loss_cfg=LossConfig(**loss_kw), graph_cfg=GraphConfig(**graph_kw), **scalars)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_file(path) -> TrainConfig:
    """Flat key=value file; blank lines and ``#`` comments (full-line or
    trailing) allowed."""
    path = Path(path)
    pairs: dict[str, str] = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return config_from_pairs(pairs)


def config_to_pairs(cfg: TrainConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for name in _SCALAR_FIELDS:
        value = getattr(cfg, name)
        out[name] = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
    for name in _LOSS_FIELDS:
        out[name] = repr(getattr(cfg.loss_cfg, name))
    for name in _GRAPH_FIELDS:
        value = getattr(cfg.graph_cfg, name)
        out[name] = repr(value) if isinstance(value, float) else str(value)
    return out


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(config_to_pairs(cfg).items()))


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------


@dataclass
class IterEvent:
    iteration: int
    fl: float
    cl: float
    total: float
    wall_time: float


@dataclass
class EvalEvent:
    iteration: int
    map: float
    auc: float
    wall_time: float


class TrainLog:
    def __init__(self):
        self.iter_events: list[IterEvent] = []
        self.eval_events: list[EvalEvent] = []
        self.started_at: float = time.time()
        self.finished_at: float | None = None

    def record_iter(self, iteration: int, fl: float, cl: float, total: float):
        self.iter_events.append(IterEvent(iteration, fl, cl, total, time.time()))

    def record_eval(self, iteration: int, map_value: float, auc_value: float):
        self.eval_events.append(EvalEvent(iteration, map_value, auc_value, time.time()))

    def lines(self) -> list[str]:
        """Event lines in iteration order (eval lines follow their iteration)."""
        out = []
        eval_idx = 0
        for ev in self.iter_events:
            out.append(
                f"iter={ev.iteration} fl={_VALUE_FMT.format(ev.fl)} "
                f"cl={_VALUE_FMT.format(ev.cl)} total={_VALUE_FMT.format(ev.total)}"
            )
            while eval_idx < len(self.eval_events) and self.eval_events[eval_idx].iteration <= ev.iteration:
                ee = self.eval_events[eval_idx]
                out.append(
                    f"eval_iter={ee.iteration} map={_VALUE_FMT.format(ee.map)} auc={_VALUE_FMT.format(ee.auc)}"
                )
                eval_idx += 1
        for ee in self.eval_events[eval_idx:]:
            out.append(f"eval_iter={ee.iteration} map={_VALUE_FMT.format(ee.map)} auc={_VALUE_FMT.format(ee.auc)}")
        return out

    def text(self) -> str:
        header = [f"# started_unix={self.started_at:.3f}"]
        footer = [f"# finished_unix={self.finished_at:.3f}"] if self.finished_at else []
        return "\n".join(header + self.lines() + footer) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.text(), encoding="utf-8")

    def write_curves(self, out_dir) -> tuple[Path, Path]:
        """Plot-ready TSVs: loss components per iteration, metrics per eval."""
        out_dir = Path(out_dir)
        loss_path = out_dir / "loss_curve.tsv"
        eval_path = out_dir / "eval_curve.tsv"
        with open(loss_path, "w", encoding="utf-8") as fh:
            fh.write("iteration\tfl\tcl\ttotal\n")
            for ev in self.iter_events:
                fh.write(f"{ev.iteration}\t{ev.fl:.12e}\t{ev.cl:.12e}\t{ev.total:.12e}\n")
        with open(eval_path, "w", encoding="utf-8") as fh:
            fh.write("iteration\tmap\tauc\n")
            for ee in self.eval_events:
                fh.write(f"{ee.iteration}\t{ee.map:.12e}\t{ee.auc:.12e}\n")
        return loss_path, eval_path


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def zeros(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(
            step=0,
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.step + 1
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if g.shape != p.shape:
            raise TrainError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = Tensor((p.data - lr * update).astype(p.dtype), requires_grad=True)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class LoadedClip:
    record: ClipRecord
    audio: FeatureSequence
    video: FeatureSequence
    graph: object
    label_vec: np.ndarray


def infer_num_classes(*manifest_paths) -> int:
    highest = -1
    for path in manifest_paths:
        if path is None:
            continue
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) == 4 and parts[3].strip():
                for token in parts[3].split(","):
                    try:
                        highest = max(highest, int(token))
                    except ValueError:
                        pass
    if highest < 0:
        raise ConfigError("cannot infer num_classes: no labels found in manifest(s)")
    return highest + 1


def load_dataset(
    records: list[ClipRecord],
    num_classes: int,
    graph_cfg: GraphConfig,
    temporal_mode: str,
    seed: int,
) -> list[LoadedClip]:
    """Read features and build each clip's graph once (xi is drawn here)."""
    clips = []
    for record in records:
        audio, video = load_clip_features(record)
        rng = clip_rng(seed, graph_cfg.xi_seed, record.clip_id)
        graph = build_graph(audio, video, graph_cfg, rng, temporal_mode)
        label_vec = np.zeros(num_classes, dtype=np.float64)
        for label in record.labels:
            label_vec[label] = 1.0
        clips.append(LoadedClip(record, audio, video, graph, label_vec))
    return clips


def _check_feature_dims(clips: list[LoadedClip]) -> tuple[int, int]:
    audio_dims = {c.audio.dim for c in clips}
    video_dims = {c.video.dim for c in clips}
    if len(audio_dims) != 1 or len(video_dims) != 1:
        raise TrainError(f"inconsistent feature dims: audio {sorted(audio_dims)}, video {sorted(video_dims)}")
    return audio_dims.pop(), video_dims.pop()


def _score_clips(model: AvGraphModel, clips: list[LoadedClip], chunk: int = 64) -> np.ndarray:
    """Forward-only class probabilities, (len(clips), C)."""
    rows = []
    for start in range(0, len(clips), chunk):
        batch = clips[start:start + chunk]
        out = model_forward(model, [ClipInput(c.graph, c.audio, c.video) for c in batch])
        rows.append(sigmoid(out.logits).data)
    return np.concatenate(rows, axis=0)


def score_report(model: AvGraphModel, clips: list[LoadedClip]) -> RankingReport:
    scores = _score_clips(model, clips)
    labels = np.stack([c.label_vec for c in clips]).astype(np.int64)
    return ranking_report(scores, labels)


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    num_classes: int
    best_params: dict[str, np.ndarray]
    best_map: float | None
    best_auc: float | None
    best_iteration: int | None
    iterations_run: int
    stopped_early: bool
    log: TrainLog
    checkpoint_path: Path | None = None
    log_path: Path | None = None
    loss_curve_path: Path | None = None
    eval_curve_path: Path | None = None


def _effective_focal(cfg: TrainConfig) -> tuple[float, float]:
    # ce_only ablation arm: plain binary cross-entropy
    if cfg.loss_mode == "ce_only":
        return 0.0, 1.0
    return cfg.loss_cfg.focal_gamma, cfg.loss_cfg.focal_alpha


def _config_echo(cfg: TrainConfig, num_classes: int, audio_dim: int, video_dim: int) -> dict[str, str]:
    pairs = config_to_pairs(cfg)
    pairs["num_classes"] = str(num_classes)
    pairs["audio_dim"] = str(audio_dim)
    pairs["video_dim"] = str(video_dim)
    return dict(sorted(pairs.items()))


def config_from_echo(echo: dict[str, str]) -> tuple[TrainConfig, int, int]:
    extras = dict(echo)
    audio_dim = int(extras.pop("audio_dim"))
    video_dim = int(extras.pop("video_dim"))
    cfg = config_from_pairs(extras)
    return cfg, audio_dim, video_dim


def train(
    manifest_path,
    cfg: TrainConfig,
    out_dir=None,
    eval_manifest_path=None,
) -> TrainResult:
    """Run the training loop; returns the best-validation-mAP parameters.

    Validation is the explicit eval manifest when given, otherwise a seeded
    ``val_fraction`` split of the training manifest.  Evaluation happens
    every ``eval_every`` iterations; training stops at ``max_iterations`` or
    once ``early_stop_patience`` evaluations pass without mAP improvement.
    """
    if cfg.single_thread:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:  # pragma: no cover - dependency is declared
            threadpool_limits = None
        if threadpool_limits is not None:
            with threadpool_limits(limits=1):
                return _train_inner(manifest_path, cfg, out_dir, eval_manifest_path)
    return _train_inner(manifest_path, cfg, out_dir, eval_manifest_path)


def _train_inner(manifest_path, cfg, out_dir, eval_manifest_path) -> TrainResult:
    num_classes = cfg.num_classes or infer_num_classes(manifest_path, eval_manifest_path)
    records = load_manifest(manifest_path, num_classes)
    if not records:
        raise TrainError(f"manifest {manifest_path} has no clips")

    if eval_manifest_path is not None:
        train_records = records
        val_records = load_manifest(eval_manifest_path, num_classes)
    else:
        split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
        order = split_rng.permutation(len(records))
        n_val = max(1, int(round(cfg.val_fraction * len(records))))
        if len(records) - n_val < 1:
            raise TrainError(f"manifest too small to split: {len(records)} clips, {n_val} for validation")
        val_records = [records[i] for i in order[:n_val]]
        train_records = [records[i] for i in order[n_val:]]
    if not val_records:
        raise TrainError("validation split is empty")

    train_clips = load_dataset(train_records, num_classes, cfg.graph_cfg, cfg.temporal_mode, cfg.seed)
    val_clips = load_dataset(val_records, num_classes, cfg.graph_cfg, cfg.temporal_mode, cfg.seed)
    audio_dim, video_dim = _check_feature_dims(train_clips + val_clips)

    model_cfg = ModelConfig(
        num_classes=num_classes, d=cfg.d, hidden=cfg.hidden, layers=cfg.layers,
        audio_dim=audio_dim, video_dim=video_dim,
    )
    model = AvGraphModel(model_cfg, seed=cfg.seed, dtype=PRECISIONS[cfg.precision])
    state = AdamState.zeros(model.parameters())
    gamma, alpha = _effective_focal(cfg)
    use_cl = cfg.loss_mode == "fl_cl"

    batch_size = min(cfg.batch_size, len(train_clips))
    if use_cl and batch_size < 2:
        raise TrainError("contrastive loss requires at least 2 training clips per batch")
    batches_per_epoch = len(train_clips) // batch_size

    log = TrainLog()
    batch_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 2])))
    best_params: dict[str, np.ndarray] | None = None
    best_map: float | None = None
    best_auc: float | None = None
    best_iteration: int | None = None
    evals_since_best = 0
    stopped_early = False
    iteration = 0

    while iteration < cfg.max_iterations and not stopped_early:
        order = batch_rng.permutation(len(train_clips))
        for b in range(batches_per_epoch):
            if iteration >= cfg.max_iterations or stopped_early:
                break
            iteration += 1
            batch = [train_clips[i] for i in order[b * batch_size:(b + 1) * batch_size]]
            labels = np.stack([c.label_vec for c in batch])

            params = model.parameters()
            with Tape() as tape:
                out = model_forward(model, [ClipInput(c.graph, c.audio, c.video) for c in batch])
                loss_fl = focal_loss(out.logits, labels, gamma, alpha)
                loss_cl = (
                    contrastive_loss(out.audio_embed, out.video_embed, cfg.loss_cfg.temperature)
                    if use_cl else None
                )
                loss = total_loss(loss_fl, loss_cl, cfg.loss_cfg)
            grad_map = backward(tape, loss, leaves=list(params.values()))
            grads = {name: grad_map[t] for name, t in params.items()}

            new_params, state = adam_step(
                params, grads, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
            )
            model.replace_parameters(new_params)

            cl_value = float(loss_cl.data) if loss_cl is not None else 0.0
            log.record_iter(iteration, float(loss_fl.data), cl_value, float(loss.data))

            if iteration % cfg.eval_every == 0:
                report = score_report(model, val_clips)
                map_value = report.map if report.map is not None else float("nan")
                auc_value = report.auc if report.auc is not None else float("nan")
                log.record_eval(iteration, map_value, auc_value)
                if best_map is None or (report.map is not None and report.map > best_map):
                    best_map = map_value
                    best_auc = auc_value
                    best_iteration = iteration
                    best_params = {k: np.array(t.data, copy=True) for k, t in model.parameters().items()}
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                    if evals_since_best >= cfg.early_stop_patience:
                        stopped_early = True

    if best_params is None:
        # no evaluation ever ran: keep the latest (possibly initial) parameters
        best_params = {k: np.array(t.data, copy=True) for k, t in model.parameters().items()}

    log.finished_at = time.time()
    result = TrainResult(
        config=cfg,
        num_classes=num_classes,
        best_params=best_params,
        best_map=best_map,
        best_auc=best_auc,
        best_iteration=best_iteration,
        iterations_run=iteration,
        stopped_early=stopped_early,
        log=log,
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        echo = _config_echo(cfg, num_classes, audio_dim, video_dim)
        checkpoint_path = out_dir / "model.ckpt"
        best_tensors = {k: Tensor(v, requires_grad=True) for k, v in best_params.items()}
        save_checkpoint(checkpoint_path, echo, best_tensors)
        log_path = out_dir / "train.log"
        log.write(log_path)
        loss_curve, eval_curve = log.write_curves(out_dir)
        (out_dir / "config.txt").write_text(
            "".join(f"{k}={v}\n" for k, v in echo.items()), encoding="utf-8"
        )
        result.checkpoint_path = checkpoint_path
        result.log_path = log_path
        result.loss_curve_path = loss_curve
        result.eval_curve_path = eval_curve

    return result


@dataclass
class EvalResult:
    map: float | None
    auc: float | None
    report: RankingReport
    metrics_path: Path | None = None
    summary_path: Path | None = None


def evaluate(checkpoint_path, manifest_path, out_dir=None) -> EvalResult:
    """Forward-only metrics for a checkpoint over a manifest.

    The checkpoint's config echo fixes the model dimensions, the graph
    weighting scheme, and the xi seeding, so evaluation is a pure function of
    (checkpoint, manifest).
    """
    echo, arrays = load_checkpoint(checkpoint_path)
    try:
        cfg, audio_dim, video_dim = config_from_echo(echo)
    except (KeyError, ConfigError) as exc:
        raise ConfigError(f"checkpoint {checkpoint_path} has an unusable config echo: {exc}") from exc
    if cfg.num_classes < 1:
        raise ConfigError("checkpoint config echo lacks a resolved num_classes")

    model_cfg = ModelConfig(
        num_classes=cfg.num_classes, d=cfg.d, hidden=cfg.hidden, layers=cfg.layers,
        audio_dim=audio_dim, video_dim=video_dim,
    )
    model = AvGraphModel(model_cfg, seed=cfg.seed, dtype=PRECISIONS[cfg.precision])
    model.load_arrays(arrays)

    records = load_manifest(manifest_path, cfg.num_classes)
    if not records:
        raise TrainError(f"manifest {manifest_path} has no clips")
    clips = load_dataset(records, cfg.num_classes, cfg.graph_cfg, cfg.temporal_mode, cfg.seed)
    data_audio_dim, data_video_dim = _check_feature_dims(clips)
    if (data_audio_dim, data_video_dim) != (audio_dim, video_dim):
        raise ConfigError(
            f"feature dims ({data_audio_dim}, {data_video_dim}) do not match "
            f"checkpoint dims ({audio_dim}, {video_dim})"
        )

    report = score_report(model, clips)
    result = EvalResult(map=report.map, auc=report.auc, report=report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.txt"
        summary_path = out_dir / "metrics.kv"
        metrics_path.write_text("\n".join(report.summary_lines()) + "\n", encoding="utf-8")
        summary_path.write_text("\n".join(report.keyvalue_lines()) + "\n", encoding="utf-8")
        result.metrics_path = metrics_path
        result.summary_path = summary_path
    return result
