import numpy as np
import pytest

from echograph.datasets import (
    load_annotated_cases,
    load_clip_dataset,
    load_frame_dataset,
    resample_cycle_indices,
)
from echograph.errors import ConfigError
from echograph.syndata import generate_dataset, read_video


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(
        out, 4, seed=3, image_size=(32, 32), cycle_len=16, n_cycles=2,
        ratios=(0.5, 0.25, 0.25),
    )
    return out


class TestCaseGrouping:
    def test_groups_by_case(self, data_dir):
        cases = load_annotated_cases(data_dir)
        assert len(cases) == 4
        case = cases["case000000"]
        assert case.frame_count == 32
        assert case.ed_indices == (0, 16)
        assert case.es_indices == (8, 24)
        assert 0.2 <= case.ef <= 0.8
        assert case.points.shape == (32, 42, 2)

    def test_split_sizes(self, data_dir):
        cases = load_annotated_cases(data_dir).values()
        counts = {s: sum(1 for c in cases if c.split == s) for s in ("train", "val", "test")}
        assert counts == {"train": 2, "val": 1, "test": 1}


class TestFrameDataset:
    def test_images_and_keypoints_align(self, data_dir):
        samples = load_frame_dataset(data_dir, "train")
        assert len(samples) == 2 * 32
        assert samples.images.shape == (64, 32, 32)
        assert samples.keypoints.shape == (64, 42, 2)
        cases = sorted(
            (c for c in load_annotated_cases(data_dir).values() if c.split == "train"),
            key=lambda c: c.case_id,
        )
        video = read_video(data_dir / "videos" / f"{cases[0].case_id}.egvd")
        np.testing.assert_array_equal(samples.images[5], video[5])
        np.testing.assert_array_equal(samples.keypoints[5], cases[0].points[5])

    def test_limit(self, data_dir):
        samples = load_frame_dataset(data_dir, "train", limit=8)
        assert len(samples) == 8

    def test_empty_split_rejected(self, data_dir):
        with pytest.raises(ConfigError):
            load_frame_dataset(data_dir, "holdout")

    def test_missing_directory_raises_oserror(self, data_dir):
        with pytest.raises(OSError):
            load_frame_dataset(data_dir / "missing", "train")


class TestResample:
    def test_endpoints_pinned(self):
        for ed, es, f in ((0, 16, 16), (3, 9, 16), (0, 31, 4)):
            idx = resample_cycle_indices(ed, es, f)
            assert len(idx) == f
            assert idx[0] == ed and idx[-1] == es
            assert np.all(np.diff(idx) >= 0)

    def test_uniform_when_lengths_match(self):
        np.testing.assert_array_equal(resample_cycle_indices(4, 7, 4), [4, 5, 6, 7])

    def test_backward_cycle_rejected(self):
        with pytest.raises(ConfigError):
            resample_cycle_indices(5, 5, 8)
        with pytest.raises(ConfigError):
            resample_cycle_indices(0, 10, 1)


class TestClipDataset:
    def test_known_mode_one_clip_per_cycle(self, data_dir):
        samples = load_clip_dataset(data_dir, "train", clip_len=16)
        assert len(samples) == 2 * 2
        assert samples.clips.shape == (4, 16, 32, 32)
        assert samples.keypoints.shape == (4, 2, 42, 2)
        assert samples.ed_indices is None
        cases = sorted(
            (c for c in load_annotated_cases(data_dir).values() if c.split == "train"),
            key=lambda c: c.case_id,
        )
        video = read_video(data_dir / "videos" / f"{cases[0].case_id}.egvd")
        np.testing.assert_array_equal(samples.clips[0][0], video[0])
        np.testing.assert_array_equal(samples.clips[0][-1], video[8])
        np.testing.assert_array_equal(samples.keypoints[0][0], cases[0].points[0])
        np.testing.assert_array_equal(samples.keypoints[0][1], cases[0].points[8])
        assert samples.efs[0] == cases[0].ef

    def test_window_mode_labels_inside_window(self, data_dir):
        samples = load_clip_dataset(data_dir, "train", clip_len=16, labeled_frames=True)
        assert samples.ed_indices is not None
        assert len(samples) >= 4
        assert np.all(samples.ed_indices >= 0) and np.all(samples.ed_indices < 16)
        assert np.all(samples.es_indices > samples.ed_indices)
        cases = sorted(
            (c for c in load_annotated_cases(data_dir).values() if c.split == "train"),
            key=lambda c: c.case_id,
        )
        video = read_video(data_dir / "videos" / f"{cases[0].case_id}.egvd")
        np.testing.assert_array_equal(
            samples.clips[0][samples.ed_indices[0]], video[0]
        )
        np.testing.assert_array_equal(
            samples.clips[0][samples.es_indices[0]], video[8]
        )

    def test_window_mode_deterministic(self, data_dir):
        a = load_clip_dataset(data_dir, "train", clip_len=16, labeled_frames=True, seed=1)
        b = load_clip_dataset(data_dir, "train", clip_len=16, labeled_frames=True, seed=1)
        np.testing.assert_array_equal(a.clips, b.clips)
        np.testing.assert_array_equal(a.ed_indices, b.ed_indices)

    def test_unfittable_cycles_rejected(self, data_dir):
        with pytest.raises(ConfigError):
            load_clip_dataset(data_dir, "train", clip_len=8, labeled_frames=True)
