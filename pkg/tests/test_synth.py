import hashlib
from pathlib import Path

import numpy as np
import pytest

from thgraph.features import load_manifest, read_feature_file
from thgraph.metrics import mean_average_precision
from thgraph.synth import (
    DatasetSummary,
    SynthSpec,
    SynthSpecError,
    class_prototypes,
    describe,
    generate,
)


def _dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestSpecValidation:
    def test_event_longer_than_clip_rejected(self):
        with pytest.raises(SynthSpecError):
            SynthSpec(clip_ms=1000, event_len_ms=2000)

    def test_bad_label_range_rejected(self):
        with pytest.raises(SynthSpecError):
            SynthSpec(num_classes=4, labels_min=2, labels_max=1)
        with pytest.raises(SynthSpecError):
            SynthSpec(num_classes=4, labels_max=5)

    def test_defaults_valid(self):
        spec = SynthSpec()
        assert spec.num_classes == 8
        assert spec.clips_train == 512 and spec.clips_eval == 128
        assert spec.audio_seg_ms == 960 and spec.video_seg_ms == 250


class TestGenerate:
    def _small_spec(self, **kw):
        base = dict(num_classes=3, clips_train=6, clips_eval=4, clip_ms=4000,
                    audio_dim=8, video_dim=12, event_len_ms=1500, seed=21)
        base.update(kw)
        return SynthSpec(**base)

    def test_same_spec_same_seed_byte_identical(self, tmp_path):
        spec = self._small_spec()
        generate(spec, tmp_path / "a")
        generate(spec, tmp_path / "b")
        assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        generate(self._small_spec(), tmp_path / "a")
        generate(self._small_spec(seed=22), tmp_path / "b")
        assert _dir_digest(tmp_path / "a") != _dir_digest(tmp_path / "b")

    def test_manifests_loadable_and_sized(self, tmp_path):
        spec = self._small_spec()
        result = generate(spec, tmp_path / "d")
        train = load_manifest(result.train_manifest, spec.num_classes)
        evals = load_manifest(result.eval_manifest, spec.num_classes)
        assert len(train) == 6 and len(evals) == 4
        for rec in train + evals:
            audio = read_feature_file(rec.audio_path)
            video = read_feature_file(rec.video_path)
            assert audio.dim == 8 and video.dim == 12
            assert 1 <= len(rec.labels) <= 3

    def test_lag_shifts_video_event_intervals(self, tmp_path):
        spec = self._small_spec(lag_ms=1000)
        result = generate(spec, tmp_path / "d")
        lines = result.events_file.read_text().splitlines()
        assert lines[0].startswith("clip_id\t")
        assert len(lines) > 1
        for line in lines[1:]:
            _, _, a_start, a_end, v_start, v_end = line.split("\t")
            assert int(v_start) - int(a_start) == 1000
            assert int(v_end) - int(a_end) == 1000

    def test_lagged_video_content_matches_shifted_window(self, tmp_path):
        # noiseless, one label: video prototype occupies exactly the segments
        # overlapping the lag-shifted window
        spec = self._small_spec(noise_sigma_audio=0.0, noise_sigma_video=0.0,
                                labels_min=1, labels_max=1, lag_ms=1000)
        result = generate(spec, tmp_path / "d")
        protos_audio, protos_video = class_prototypes(spec)
        records = load_manifest(result.train_manifest, spec.num_classes)
        events = {}
        for line in result.events_file.read_text().splitlines()[1:]:
            clip_id, label, a0, a1, v0, v1 = line.split("\t")
            events[clip_id] = (int(label), int(v0), int(v1))
        for rec in records:
            label, v0, v1 = events[rec.clip_id]
            video = read_feature_file(rec.video_path)
            for k in range(video.segments):
                s, e = (int(x) for x in video.intervals[k])
                inside = min(e, v1) - max(s, v0) > 0
                norm = float(np.linalg.norm(video.values[k]))
                if inside:
                    np.testing.assert_allclose(video.values[k], protos_video[label], atol=1e-6)
                else:
                    assert norm == 0.0

    def test_noiseless_nearest_prototype_classifier_perfect(self, tmp_path):
        spec = self._small_spec(num_classes=4, clips_train=24, clips_eval=8,
                                noise_sigma_audio=0.0, noise_sigma_video=0.0,
                                labels_min=1, labels_max=1)
        result = generate(spec, tmp_path / "d")
        protos_audio, _ = class_prototypes(spec)
        records = load_manifest(result.train_manifest, spec.num_classes)
        scores = np.zeros((len(records), spec.num_classes))
        labels = np.zeros_like(scores, dtype=np.int64)
        for i, rec in enumerate(records):
            audio = read_feature_file(rec.audio_path)
            values = audio.values.astype(np.float64)
            norms = np.maximum(np.linalg.norm(values, axis=1, keepdims=True), 1e-12)
            sims = (values / norms) @ protos_audio.T  # cos since prototypes are unit norm
            scores[i] = sims.max(axis=0)
            for c in rec.labels:
                labels[i, c] = 1
        assert mean_average_precision(scores, labels) == 1.0

    def test_segment_counts_for_default_grid(self, tmp_path):
        spec = SynthSpec(num_classes=2, clips_train=2, clips_eval=1, labels_max=2, seed=3)
        result = generate(spec, tmp_path / "d")
        rec = load_manifest(result.train_manifest, 2)[0]
        audio = read_feature_file(rec.audio_path)
        video = read_feature_file(rec.video_path)
        assert audio.segments == 10  # floor(10000 / 960)
        assert video.segments == 40  # floor(10000 / 250)
        assert audio.encoder_shaped and video.encoder_shaped

    def test_label_balance_within_half_of_expectation(self, tmp_path):
        spec = SynthSpec(num_classes=8, clips_train=512, clips_eval=1, clip_ms=2000,
                         audio_dim=4, video_dim=4, event_len_ms=1000,
                         audio_seg_ms=500, video_seg_ms=250, seed=17)
        result = generate(spec, tmp_path / "d")
        summary = describe(result.train_manifest, num_classes=8)
        expectation = summary.total_labels / 8
        for c in range(8):
            count = summary.class_counts.get(c, 0)
            assert 0.5 * expectation <= count <= 1.5 * expectation, (c, count, expectation)


class TestDescribe:
    def test_counts_sum(self, tmp_path):
        spec = SynthSpec(num_classes=3, clips_train=12, clips_eval=2, clip_ms=3000,
                         audio_dim=6, video_dim=6, labels_min=1, labels_max=1,
                         event_len_ms=1000, seed=9)
        result = generate(spec, tmp_path / "d")
        summary = describe(result.train_manifest)
        assert summary.num_clips == 12
        assert sum(summary.class_counts.values()) == 12
        assert summary.total_labels == 12
        assert summary.audio_segments == 12 * 3  # 3000/960 -> 3 per clip
        assert summary.video_segments == 12 * 12
        assert summary.duration_histogram_ms == {3000: 12}

    def test_empty_manifest_all_zero(self, tmp_path):
        empty = tmp_path / "empty.tsv"
        empty.write_text("", encoding="utf-8")
        summary = describe(empty, num_classes=4)
        assert summary == DatasetSummary(num_clips=0, num_classes=4)

    def test_format_text(self, tmp_path):
        spec = SynthSpec(num_classes=2, clips_train=2, clips_eval=1, clip_ms=2000,
                         audio_dim=4, video_dim=4, labels_max=1, event_len_ms=800,
                         audio_seg_ms=500, video_seg_ms=250, seed=1)
        result = generate(spec, tmp_path / "d")
        text = describe(result.train_manifest).format_text()
        assert text.startswith("clips 2\n")
        assert "audio_segments" in text and "duration_ms" in text
