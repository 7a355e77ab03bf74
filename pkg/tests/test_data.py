import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoforecast import data, features as ft
from egoforecast.errors import DegenerateDataError, FormatError, InvalidSampleError, UsageError


def walker(T, dx=0.0, x0=400.0, half=20.0, vid="v", valid_all=True):
    """Tracklet whose hips sit +-half px around a mid-hip moving dx px/frame."""
    kp = np.zeros((T, 18, 2))
    x = x0 + dx * np.arange(T)
    kp[:, :, 0] = x[:, None]
    kp[:, :, 1] = 300.0
    kp[:, ft.L_HIP, 0] = x + half
    kp[:, ft.R_HIP, 0] = x - half
    kp[:, ft.NECK, 1] = 240.0
    valid = np.ones((T, 18), dtype=bool) if valid_all else np.zeros((T, 18), dtype=bool)
    valid[:, [ft.L_HIP, ft.R_HIP, ft.NECK]] = True
    return data.Tracklet(vid, 0, kp, valid, ego_rot=np.repeat(np.eye(3)[None], T, 0),
                         ego_trans=np.zeros((T, 3)))


# --- windows ----------------------------------------------------------------

@pytest.mark.parametrize("T, expect", [(20, 1), (25, 6), (19, 0)])
def test_sliding_window_counts(T, expect):
    assert len(data.sliding_window(walker(T), 10, 10)) == expect


def test_stationary_person_zero_targets():
    s = data.build_sample(walker(20), 9, 10, 10)
    assert not s.x_out.any()
    assert not s.e_in.any()


def test_moving_person_offsets():
    s = data.build_sample(walker(20, dx=5.0), 9, 10, 10)
    assert s.x_out[0].tolist() == [5.0 * k for k in range(1, 11)]
    assert not s.x_out[1:].any()


def test_short_window_invalid():
    with pytest.raises(InvalidSampleError):
        data.build_sample(walker(19), 9, 10, 10)


def test_gap_is_skipped():
    tk = walker(22)
    tk.valid[1, ft.NECK] = False
    starts = [s.t0 for s in data.sliding_window(tk, 10, 10)]
    assert starts == [11] and len(data.sliding_window(walker(22), 10, 10)) == 3


def test_anchor_reconstruction():
    tk = walker(30, dx=3.25)
    for s in data.sliding_window(tk, 10, 10):
        xs, _ = ft.location_scale_sequence(tk.keypoints, tk.valid)
        t = s.t0 - tk.start_frame
        assert np.array_equal(s.future_absolute().T, xs[t + 1:t + 11])
        assert np.array_equal(s.x_in.T, xs[t - 9:t + 1])


# --- direction rule ---------------------------------------------------------

def direction_window(hip_dist, toward_frames, T=10):
    kp = np.zeros((T, 18, 2))
    valid = np.zeros((T, 18), dtype=bool)
    valid[:, [ft.L_HIP, ft.R_HIP, ft.NECK]] = True
    s = 50.0
    for t in range(T):
        sign = 1.0 if t < toward_frames else -1.0
        kp[t, ft.L_HIP] = (300 + sign * hip_dist * s / 2, 400)
        kp[t, ft.R_HIP] = (300 - sign * hip_dist * s / 2, 400)
        kp[t, ft.NECK] = (300, 400 - s)
    return kp, valid


@pytest.mark.parametrize("dist, toward, label", [
    (0.1, 10, "Across"), (0.24, 0, "Across"),
    (0.5, 10, "Toward"), (0.5, 8, "Toward"),
    (0.5, 0, "Away"), (0.5, 2, "Away"),
    (0.5, 5, "Other"), (0.3, 3, "Other"),
])
def test_direction_rule(dist, toward, label):
    assert data.categorize_direction(*direction_window(dist, toward)) == label


def test_direction_scale_invariant():
    kp, valid = direction_window(0.4, 9)
    assert data.categorize_direction(kp * 3.0, valid) == data.categorize_direction(kp, valid)


def test_direction_no_valid_frames():
    kp, valid = direction_window(0.5, 10)
    with pytest.raises(InvalidSampleError):
        data.categorize_direction(kp, np.zeros_like(valid))


def test_mirrored_coordinates_without_relabel_flip_toward_to_away():
    kp, valid = direction_window(0.5, 10)
    mirrored = kp.copy()
    mirrored[..., 0] = 1280.0 - mirrored[..., 0]
    assert data.categorize_direction(kp, valid) == "Toward"
    assert data.categorize_direction(mirrored, valid) == "Away"
    # with the anatomical left/right swap a person walking toward the camera stays Toward
    assert data.categorize_direction(mirrored[:, ft.MIRROR_INDEX], valid[:, ft.MIRROR_INDEX]) == "Toward"


# --- hflip --------------------------------------------------------------------

@pytest.fixture(scope="module")
def curved_samples():
    from egoforecast import synthgen

    return synthgen.generate_suite("curved_ego", seed=2, n_samples=120).samples


def _same(a, b):
    return all(np.array_equal(getattr(a, f), getattr(b, f))
               for f in ("x_in", "e_in", "p_in", "x_out", "anchor")) and a.direction == b.direction


def test_hflip_involution(curved_samples):
    for i in range(len(curved_samples)):
        s = curved_samples[i]
        assert _same(data.hflip(data.hflip(s)), s)


def test_hflip_negates_motion():
    s = data.build_sample(walker(20, dx=5.0), 9, 10, 10)
    f = data.hflip(s)
    assert f.x_out[0].tolist() == [-5.0 * k for k in range(1, 11)]
    assert np.array_equal(f.x_in[0], 1280.0 - s.x_in[0])
    assert np.array_equal(f.x_out[1:], s.x_out[1:])


def test_hflip_ego_signs(curved_samples):
    s = curved_samples[0]
    f = data.hflip(s)
    assert np.array_equal(f.e_in[[0, 1, 3]], -s.e_in[[0, 1, 3]])
    assert np.array_equal(f.e_in[[2, 4, 5]], s.e_in[[2, 4, 5]])


def test_hflip_preserves_constvel_fde(curved_samples):
    from egoforecast import bench

    for i in range(0, len(curved_samples), 7):
        s = curved_samples[i]
        f = data.hflip(s)
        # in offset space the flip only negates, so the error is bit-identical
        d = bench.const_vel(s).offsets[:2, -1] - s.x_out[:2, -1]
        df = bench.const_vel(f).offsets[:2, -1] - f.x_out[:2, -1]
        assert np.hypot(*d) == np.hypot(*df)
        gt = s.anchor[:2] + s.x_out[:2, -1]
        gt_f = f.anchor[:2] + f.x_out[:2, -1]
        a = bench.fde(bench.const_vel(s).final_location, gt)
        b = bench.fde(bench.const_vel(f).final_location, gt_f)
        assert abs(a - b) <= 1e-9 * max(1.0, a)


def test_batch_flip_matches_single(curved_samples):
    ss = curved_samples
    ss.norm = data.compute_norm_stats(ss)
    idx = np.arange(6)
    flips = np.array([True, False, True, True, False, False])
    x_in, e_in, p_in, x_out = data.batch_arrays(ss, idx, flips)
    for j in idx:
        s = data.hflip(ss[j]) if flips[j] else ss[j]
        assert np.allclose(x_in[j], ss.norm.normalize_in(s.x_in), atol=1e-12)
        assert np.array_equal(e_in[j], s.e_in) and np.array_equal(p_in[j], s.p_in)


# --- normalization ------------------------------------------------------------

def test_norm_known_stats():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((400, 3, 10))
    z = (z - z.mean(axis=(0, 2), keepdims=True)) / z.std(axis=(0, 2), keepdims=True)
    stats = data.compute_norm_stats(5 + 2 * z, 1 + 3 * z)
    assert np.allclose(stats.in_mean, 5, atol=1e-9) and np.allclose(stats.in_std, 2, atol=1e-9)
    assert np.allclose(stats.out_mean, 1, atol=1e-9) and np.allclose(stats.out_std, 3, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_norm_round_trip(seed):
    rng = np.random.default_rng(seed)
    x_in = rng.uniform(0, 1280, (20, 3, 10))
    x_out = rng.normal(0, 40, (20, 3, 10))
    stats = data.compute_norm_stats(x_in, x_out)
    assert np.abs(stats.denormalize_in(stats.normalize_in(x_in[0])) - x_in[0]).max() <= 1e-12
    assert np.abs(stats.denormalize_out(stats.normalize_out(x_out[0])) - x_out[0]).max() <= 1e-12


def test_norm_degenerate_channel():
    x = np.ones((5, 3, 10))
    with pytest.raises(DegenerateDataError):
        data.compute_norm_stats(x, np.random.default_rng(0).standard_normal((5, 3, 10)))


def test_norm_dict_round_trip():
    stats = data.compute_norm_stats(np.random.default_rng(1).standard_normal((5, 3, 4)),
                                    np.random.default_rng(2).standard_normal((5, 3, 4)))
    back = data.NormStats.from_dict(stats.to_dict())
    assert all(np.array_equal(getattr(stats, k), getattr(back, k))
               for k in ("in_mean", "in_std", "out_mean", "out_std"))


# --- folds ------------------------------------------------------------------

def test_five_videos_five_folds():
    split = data.kfold_split({f"v{i}": 10 + i for i in range(5)}, 5, seed=0)
    assert sorted(split.assignment.values()) == [0, 1, 2, 3, 4]


def test_split_deterministic_and_seed_dependent():
    videos = {f"v{i}": 7 for i in range(30)}
    a, b = data.kfold_split(videos, 5, 3), data.kfold_split(videos, 5, 3)
    assert a.assignment == b.assignment
    assert a.assignment != data.kfold_split(videos, 5, 4).assignment


def test_split_balanced():
    split = data.kfold_split({f"v{i}": 12 for i in range(50)}, 5, seed=1)
    sizes = np.bincount(list(split.assignment.values())) * 12
    assert (sizes.max() - sizes.min()) / sizes.mean() <= 0.2


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=5, max_size=40), st.integers(0, 1000))
def test_split_partitions_videos(counts, seed):
    videos = {f"v{i}": c for i, c in enumerate(counts)}
    split = data.kfold_split(videos, 5, seed)
    tests = [set(split.test_videos(f)) for f in range(5)]
    assert set().union(*tests) == set(videos)
    assert sum(len(t) for t in tests) == len(videos)
    for f in range(5):
        assert not set(split.train_videos(f)) & tests[f]


def test_too_few_videos():
    with pytest.raises(UsageError):
        data.kfold_split({"a": 1, "b": 2}, 5)


# --- files --------------------------------------------------------------------

def test_tracklet_jsonl_round_trip(tmp_path):
    tks = [walker(21, dx=1.5, vid="a"), walker(20, vid="b")]
    path = tmp_path / "t.jsonl"
    data.write_tracklets(path, tks)
    back = data.read_tracklets(path)
    for a, b in zip(tks, back):
        assert a.video_id == b.video_id and np.array_equal(a.keypoints, b.keypoints)
        assert np.array_equal(a.valid, b.valid) and np.array_equal(a.ego_rot, b.ego_rot)


def test_tracklet_jsonl_error_has_line(tmp_path):
    path = tmp_path / "t.jsonl"
    data.write_tracklets(path, [walker(20)])
    with open(path, "a") as fh:
        fh.write('{"video_id": "x", "frames": []}\n')
    with pytest.raises(FormatError, match=":2:"):
        data.read_tracklets(path)


def test_sample_cache_round_trip(tmp_path, curved_samples):
    ss = curved_samples.subset(np.arange(40))
    ss.folds = data.kfold_split(ss.video_ids, 2, 0).assignment
    path = tmp_path / "c.egs"
    data.save_sample_cache(path, ss)
    back = data.load_sample_cache(path)
    for f in ("x_in", "e_in", "p_in", "x_out", "anchors", "t0s"):
        assert np.array_equal(getattr(ss, f), getattr(back, f))
    assert back.video_ids == ss.video_ids and back.folds == ss.folds
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        data.load_sample_cache(path)
