"""Acceptance gate: one test per criterion, each printing a PASS line with
its measured numbers (run with ``pytest tests/test_acceptance.py -v -s``).

Criteria 5-7 train real models and take minutes; they are marked ``slow``
(deselect with ``-m "not slow"`` during development).
"""

import itertools
import math
import time

import numpy as np
import pytest

from thgraph.features import FeatureSequence, read_feature_file, write_feature_file
from thgraph.graphs import (
    GraphConfig,
    gaussian_weight,
    hawkes_weight,
    inter_edges,
    intra_neighbors,
)
from thgraph.losses import LossConfig
from thgraph.metrics import average_precision, roc_auc
from thgraph.model import AvGraphModel, ModelConfig
from thgraph.synth import SynthSpec, generate
from thgraph.training import TrainConfig, TrainResult, train
from thgraph.verification import MicroBatchSpec, model_gradcheck, op_gradcheck_suite

from test_metrics import oracle_auc, oracle_average_precision


def _report(criterion: int, detail: str):
    print(f"\nPASS criterion {criterion}: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: weight-formula oracles
# ---------------------------------------------------------------------------


def test_criterion_1_formula_oracles():
    started = time.monotonic()
    rng = np.random.default_rng(1001)
    worst_gauss = 0.0
    worst_hawkes = 0.0
    for _ in range(1000):
        p_min = int(rng.integers(0, 30))
        p_max = p_min + int(rng.integers(0, 30))
        i = int(rng.integers(p_min, p_max + 1))
        j = int(rng.integers(p_min, p_max + 1))
        width = p_max - p_min + 1
        expected = math.exp(-((i - j) ** 2) / (2.0 * width * width))
        worst_gauss = max(worst_gauss, abs(gaussian_weight(i, j, p_min, p_max) - expected))

        p_v = int(rng.integers(0, 60))
        xi = float(rng.uniform(1e-6, 1.0 - 1e-6))
        tau = float(rng.uniform(0.2, 5.0))
        z = math.log(xi) / math.log(1.0 - xi) + (p_max - p_v + 1.0) / (p_max - p_min + 1.0)
        expected = (1.0 / (1.0 + math.exp(-z))) / tau if z >= 0 else (math.exp(z) / (1.0 + math.exp(z))) / tau
        worst_hawkes = max(worst_hawkes, abs(hawkes_weight(p_v, p_max, p_min, xi, tau) - expected))
    elapsed = time.monotonic() - started
    assert worst_gauss < 1e-12, worst_gauss
    assert worst_hawkes < 1e-12, worst_hawkes
    assert elapsed < 1.0, f"took {elapsed:.2f}s (budget 1s)"
    _report(1, f"gaussian err {worst_gauss:.2e}, hawkes err {worst_hawkes:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: graph-structure oracle
# ---------------------------------------------------------------------------


def test_criterion_2_graph_structure_oracle():
    started = time.monotonic()
    checked = 0
    for count in range(1, 21):
        for span in range(1, 9):
            for dilation in range(1, 9):
                for i in range(count):
                    brute = [
                        j for j in range(count)
                        if j == i or (abs(i - j) <= span and abs(i - j) % dilation == 0)
                    ]
                    assert intra_neighbors(i, count, span, dilation) == brute
                    checked += 1

    rng = np.random.default_rng(1002)
    for _ in range(200):
        n_a = int(rng.integers(1, 12))
        n_v = int(rng.integers(1, 45))
        seg_a = int(rng.integers(50, 1500))
        seg_v = int(rng.integers(20, 700))
        offset = int(rng.integers(0, 4000))
        audio = np.stack([np.arange(n_a) * seg_a, np.arange(n_a) * seg_a + seg_a], axis=1)
        video = np.stack([np.arange(n_v) * seg_v, np.arange(n_v) * seg_v + seg_v], axis=1) + offset
        span_inter = int(rng.integers(1, 6))
        for i, j in inter_edges(audio, video, span_inter):
            lo = max(audio[i][0], video[j][0])
            hi = min(audio[i][1], video[j][1])
            assert hi - lo > 0, "edge without interval overlap"
    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"took {elapsed:.2f}s (budget 10s)"
    _report(2, f"{checked} intra neighborhoods vs brute force, 200 inter configs, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: gradient suite
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_suite():
    started = time.monotonic()
    op_errors = op_gradcheck_suite(trials=100, seed=31)
    worst_op = max(op_errors.values())
    assert worst_op < 1e-6, {k: v for k, v in op_errors.items() if v >= 1e-6}

    # fixed micro-batch fixture; its seed keeps every relu pre-activation away
    # from the kink so central differences stay meaningful
    model_errors = model_gradcheck(MicroBatchSpec())
    worst_param = max(model_errors.values())
    assert worst_param < 1e-4, {k: v for k, v in model_errors.items() if v >= 1e-4}
    elapsed = time.monotonic() - started
    assert elapsed < 120.0, f"took {elapsed:.1f}s (budget 120s)"
    _report(3, f"per-op max {worst_op:.2e} (<1e-6), end-to-end max {worst_param:.2e} (<1e-4), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 4: metric oracles
# ---------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    started = time.monotonic()
    rng = np.random.default_rng(1004)
    instances = 0

    def check(scores, labels):
        nonlocal instances
        labels = list(labels)
        if sum(labels) >= 1:
            got = average_precision(np.asarray(scores), np.asarray(labels))
            want = oracle_average_precision(list(scores), labels)
            assert abs(got - want) < 1e-12
        if 0 < sum(labels) < len(labels):
            got = roc_auc(np.asarray(scores), np.asarray(labels))
            want = oracle_auc(list(scores), labels)
            assert abs(got - want) < 1e-12
        instances += 1

    # exhaustive per-class label patterns up to M=8 (single class)
    for m in range(1, 9):
        smooth = rng.standard_normal(m)
        tied = rng.choice([0.25, 0.75], size=m)
        for pattern in itertools.product([0, 1], repeat=m):
            check(smooth, pattern)
            check(tied, pattern)

    # exhaustive joint patterns for C in {2, 3} up to M=4
    for c in (2, 3):
        for m in range(1, 5):
            scores = rng.standard_normal((m, c))
            for joint in itertools.product([0, 1], repeat=m * c):
                labels = np.array(joint).reshape(m, c)
                for col in range(c):
                    check(scores[:, col], labels[:, col])

    # 50 random larger instances
    for _ in range(50):
        m = int(rng.integers(10, 60))
        scores = rng.choice(np.linspace(0, 1, 7), size=m)  # coarse grid forces ties
        labels = (rng.random(m) > 0.5).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        if labels.sum() == m:
            labels[-1] = 0
        check(scores, labels)

    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"took {elapsed:.1f}s (budget 10s)"
    _report(4, f"{instances} oracle comparisons within 1e-12, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criteria 5-7: end-to-end training (slow)
# ---------------------------------------------------------------------------

# The lagged/noisy dataset shared by criteria 6 and 7.  Audio features are
# deliberately low-dimensional so the eight class prototypes crowd and audio
# alone cannot separate them, which makes the video pathway (and therefore
# the inter-modal edge weighting under comparison) genuinely load-bearing.
_ABLATION_SEEDS = (1, 2, 3)


def _ablation_spec() -> SynthSpec:
    return SynthSpec(
        num_classes=8, clips_train=256, clips_eval=96, labels_min=1, labels_max=2,
        audio_dim=4, video_dim=512, noise_sigma_audio=0.3, noise_sigma_video=0.3,
        lag_ms=1000, seed=1106,
    )


def _run_config(loss_mode: str, temporal_mode: str, seed: int) -> TrainConfig:
    return TrainConfig(
        max_iterations=800, batch_size=32, eval_every=100, early_stop_patience=100,
        seed=seed, hidden=64, d=64, num_classes=8, precision="f32", lr=0.005,
        loss_mode=loss_mode, temporal_mode=temporal_mode,
        loss_cfg=LossConfig(), graph_cfg=GraphConfig(),
    )


@pytest.fixture(scope="session")
def lagged_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("lagged_data")
    return generate(_ablation_spec(), root)


@pytest.fixture(scope="session")
def ablation_runs(lagged_dataset, tmp_path_factory):
    """Lazily trained, cached ablation arms keyed by (loss, temporal, seed)."""
    out_root = tmp_path_factory.mktemp("ablation_runs")
    cache: dict[tuple, TrainResult] = {}

    def get(loss_mode: str, temporal_mode: str, seed: int) -> TrainResult:
        key = (loss_mode, temporal_mode, seed)
        if key not in cache:
            out_dir = out_root / f"{loss_mode}_{temporal_mode}_seed{seed}"
            cache[key] = train(
                lagged_dataset.train_manifest,
                _run_config(loss_mode, temporal_mode, seed),
                out_dir=out_dir,
                eval_manifest_path=lagged_dataset.eval_manifest,
            )
        return cache[key]

    return get


def _final_map(result: TrainResult) -> float:
    return result.log.eval_events[-1].map


@pytest.mark.slow
def test_criterion_5_end_to_end_learning(tmp_path):
    started = time.monotonic()
    data = generate(SynthSpec(seed=505), tmp_path / "default_data")  # spec defaults, noise 0.1, lag 0
    cfg = TrainConfig(
        max_iterations=2000, batch_size=32, eval_every=50, early_stop_patience=8,
        seed=1, hidden=64, d=64, num_classes=8, precision="f32", lr=0.005,
        loss_mode="fl_cl", temporal_mode="gau_haw",
        loss_cfg=LossConfig(), graph_cfg=GraphConfig(),
    )
    result = train(data.train_manifest, cfg, eval_manifest_path=data.eval_manifest)
    elapsed = time.monotonic() - started
    assert result.iterations_run <= 2000
    assert result.best_map is not None and result.best_map >= 0.90, result.best_map
    assert elapsed < 300.0, f"took {elapsed:.0f}s (budget 300s)"
    _report(5, f"eval mAP {result.best_map:.4f} (>= 0.90) after {result.iterations_run} iterations, "
               f"{elapsed:.0f}s wall")


@pytest.mark.slow
def test_criterion_6_temporal_weighting_direction(ablation_runs):
    started = time.monotonic()
    means = {}
    for mode in ("gau_haw", "both_haw", "both_gau"):
        finals = [_final_map(ablation_runs("fl_only", mode, seed)) for seed in _ABLATION_SEEDS]
        means[mode] = float(np.mean(finals))
    elapsed = time.monotonic() - started
    detail = ", ".join(f"{mode} {means[mode]:.4f}" for mode in ("gau_haw", "both_haw", "both_gau"))
    assert means["gau_haw"] >= means["both_gau"], detail
    assert elapsed < 1800.0, f"took {elapsed:.0f}s (budget 30 min)"
    _report(6, f"mean eval mAP over seeds {_ABLATION_SEEDS}: {detail}; "
               f"hard gate gau_haw >= both_gau holds, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_7_loss_mode_direction(ablation_runs):
    # Every loss arm is trained with identical data/seeds/protocol; the run
    # directories contain loss_curve.tsv and eval_curve.tsv for plotting.
    means = {}
    for loss_mode in ("fl_cl", "fl_only", "ce_only"):
        finals = []
        for seed in _ABLATION_SEEDS:
            result = ablation_runs(loss_mode, "gau_haw", seed)
            finals.append(_final_map(result))
            for curve in (result.loss_curve_path, result.eval_curve_path):
                assert curve is not None and curve.exists()
                assert len(curve.read_text().splitlines()) > 2, f"curve file {curve} too short"
        means[loss_mode] = float(np.mean(finals))
    detail = ", ".join(f"{mode} {means[mode]:.4f}" for mode in ("fl_cl", "fl_only", "ce_only"))
    print(f"\ncriterion 7 measured means over seeds {_ABLATION_SEEDS}: {detail}")
    # Hard gate as stated.  On this synthetic generator the clip-matching
    # contrastive task has no cross-modal instance signal to solve, so its
    # gradient pressure never anneals and the joint objective trails the
    # focal-only arm; see the curve files for the full trajectories.
    assert means["fl_cl"] >= means["fl_only"], (
        f"loss-mode ordering did not reproduce: {detail} "
        f"(fl_cl >= fl_only required; curves emitted for all three arms)"
    )
    _report(7, f"mean final eval mAP: {detail}; fl_cl >= fl_only holds; curves emitted")


# ---------------------------------------------------------------------------
# criterion 8: determinism
# ---------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    data = generate(
        SynthSpec(num_classes=4, clips_train=24, clips_eval=12, clip_ms=4000,
                  audio_dim=16, video_dim=24, event_len_ms=1500, noise_sigma_audio=0.1,
                  noise_sigma_video=0.1, seed=88),
        tmp_path / "data",
    )
    cfg = TrainConfig(
        max_iterations=30, batch_size=8, eval_every=10, early_stop_patience=10,
        seed=88, hidden=16, d=16, layers=2, num_classes=4, precision="f32",
        single_thread=True, loss_cfg=LossConfig(), graph_cfg=GraphConfig(),
    )
    r1 = train(data.train_manifest, cfg, eval_manifest_path=data.eval_manifest)
    r2 = train(data.train_manifest, cfg, eval_manifest_path=data.eval_manifest)
    lines1, lines2 = r1.log.lines(), r2.log.lines()
    assert lines1 == lines2, "training logs differ between identical runs"

    # feature file round trip is bit-exact
    rng = np.random.default_rng(89)
    starts = np.arange(7, dtype=np.uint32) * 960
    seq = FeatureSequence(
        "audio", np.stack([starts, starts + 960], axis=1),
        rng.standard_normal((7, 128)).astype(np.float32), encoder_shaped=True,
    )
    path = tmp_path / "rt.thgf"
    write_feature_file(seq, path)
    first = path.read_bytes()
    got = read_feature_file(path)
    assert got == seq
    write_feature_file(got, path)
    assert path.read_bytes() == first, "round-tripped file differs byte-wise"
    _report(8, f"{len(lines1)} identical log lines across runs; THGF round trip byte-exact")


# ---------------------------------------------------------------------------
# criterion 9: parameter-count sanity
# ---------------------------------------------------------------------------


def test_criterion_9_parameter_count():
    model = AvGraphModel(ModelConfig(num_classes=33), seed=0, dtype=np.float32)
    count = model.param_count()
    assert 2_400_000 <= count <= 9_600_000, count
    _report(9, f"default config (d=128, h=512, L=4, C=33) has {count:,} parameters in [2.4M, 9.6M]")
