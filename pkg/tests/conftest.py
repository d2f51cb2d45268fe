import warnings

import numpy as np
import pytest

# starlette 1.3 warns about the installed httpx major; irrelevant to these tests
warnings.filterwarnings("ignore", message=".*httpx.*", module="starlette.*")

from thgraph.features import FeatureSequence
from thgraph.losses import LossConfig
from thgraph.graphs import GraphConfig
from thgraph.synth import SynthSpec, generate
from thgraph.training import TrainConfig


def make_sequence(modality, segments, dim, seg_ms=None, seed=0, start_ms=0):
    """Random feature sequence on a regular segment grid."""
    if seg_ms is None:
        seg_ms = 960 if modality == "audio" else 250
    rng = np.random.default_rng(seed)
    starts = start_ms + np.arange(segments, dtype=np.uint32) * seg_ms
    intervals = np.stack([starts, starts + seg_ms], axis=1)
    values = rng.standard_normal((segments, dim)).astype(np.float32)
    return FeatureSequence(modality, intervals, values)


def tiny_train_config(**overrides):
    """Small, fast training configuration for unit tests."""
    defaults = dict(
        max_iterations=20,
        batch_size=4,
        eval_every=10,
        early_stop_patience=5,
        seed=0,
        hidden=8,
        d=8,
        layers=2,
        precision="f32",
        loss_cfg=LossConfig(),
        graph_cfg=GraphConfig(),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic dataset shared across unit tests (read-only)."""
    root = tmp_path_factory.mktemp("tiny_data")
    spec = SynthSpec(
        num_classes=4,
        clips_train=24,
        clips_eval=12,
        clip_ms=4000,
        audio_dim=16,
        video_dim=24,
        labels_min=1,
        labels_max=2,
        noise_sigma_audio=0.1,
        noise_sigma_video=0.1,
        event_len_ms=1500,
        seed=5,
    )
    return generate(spec, root)
