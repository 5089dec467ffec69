import gzip
import struct

import numpy as np
import pytest

from refrpca import urpc
from refrpca.datagen import (
    SCALE_GUARD,
    DataGenConfig,
    VideoDataset,
    bounce_track,
    compose_sample,
    gen_low_rank_background,
    gen_moving_mnist,
    gen_moving_sprites,
    generate_dataset,
    generate_sample,
    ingest_mnist_idx,
    load_dataset,
    read_idx,
    sample_hash,
    sample_seed,
    save_dataset,
    write_idx,
)
from refrpca.errors import FormatError, IdxCountError, IdxMagicError, IdxTruncatedError, ParameterError, ShapeError

SMALL = DataGenConfig(h=16, w=16, m=10, r=3, n_train=6, n_val=3, n_test=3, seed=0)


class TestBackground:
    def test_rank_zero(self):
        assert not gen_low_rank_background(10, 4, 0, 0).any()

    def test_rank_bound(self):
        L = gen_low_rank_background(64, 20, 5, 1)
        s = np.linalg.svd(L, compute_uv=False)
        assert s[5] / s[0] < 1e-12 and s[4] / s[0] > 1e-6

    def test_reproducible_and_statistics(self):
        a = gen_low_rank_background(500, 40, 5, 7)
        np.testing.assert_array_equal(a, gen_low_rank_background(500, 40, 5, 7))
        assert abs(a.mean()) < 0.1 * np.sqrt(5)
        assert a.var() == pytest.approx(5.0, rel=0.1)

    def test_rank_too_large(self):
        with pytest.raises(ParameterError):
            gen_low_rank_background(4, 3, 4, 0)


def centroid(frame):
    ys, xs = np.nonzero(frame)
    w = frame[ys, xs]
    return np.array([np.sum(ys * w), np.sum(xs * w)]) / np.sum(w)


class TestSprites:
    def test_single_frame(self):
        v = gen_moving_sprites(16, 16, 1, 0)
        assert v.shape == (256, 1) and np.count_nonzero(v) > 0

    @pytest.mark.parametrize("seed", range(20))
    def test_frame_bounds(self, seed):
        h, w, m = 32, 32, 20
        v = gen_moving_sprites(h, w, m, seed)
        counts = np.count_nonzero(v, axis=0)
        assert np.all(counts >= 1) and np.all(counts <= 0.25 * h * w)
        assert v.min() == 0.0 and v.max() <= 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_centroid_follows_velocity(self, seed):
        h, w, m = 24, 20, 15
        v, tracks = gen_moving_sprites(h, w, m, seed, n_sprites=1, return_tracks=True)
        tr = tracks[0]
        sh, sw = tr["mask"].shape
        frames = v.T.reshape(m, h, w)
        for t in range(m - 1):
            step = centroid(frames[t + 1]) - centroid(frames[t])
            for axis, key, vkey, limit in ((0, "y", "vy", h - sh), (1, "x", "vx", w - sw)):
                free = 0 <= tr[key][t] + tr[vkey][t] <= limit
                if free:
                    assert abs(step[axis] - tr[vkey][t]) <= 0.5

    def test_reproducible(self):
        np.testing.assert_array_equal(gen_moving_sprites(16, 16, 5, 3), gen_moving_sprites(16, 16, 5, 3))


def replay(start, velocity, limit, m):
    """Independent trajectory oracle: walk one step at a time and mirror at walls."""
    out, p, v = [], start, velocity
    for _ in range(m):
        out.append(p)
        for _ in range(abs(v)):
            p += 1 if v > 0 else -1
            if p < 0 or p > limit:
                v = -v
                p += 2 if p < 0 else -2
        # velocity sign flips are already applied inside the unit-step walk
    return out


@pytest.mark.parametrize("start, velocity, limit", [(0, 2, 5), (5, -3, 5), (2, 1, 2), (3, 3, 10), (1, -2, 7)])
def test_bounce_track_replay(start, velocity, limit):
    pos, vel = bounce_track(start, velocity, limit, 30)
    assert pos.tolist() == replay(start, velocity, limit, 30)
    assert np.all((pos >= 0) & (pos <= limit))
    for t in range(29):
        hit = not 0 <= pos[t] + vel[t] <= limit
        assert vel[t + 1] == (-vel[t] if hit else vel[t])


class TestMnistVideo:
    @pytest.fixture
    def digits(self):
        rng = np.random.default_rng(0)
        d = np.zeros((5, 28, 28), dtype=np.uint8)
        d[:, 6:22, 10:18] = rng.integers(1, 256, size=(5, 16, 8))
        return d

    def test_static_and_range(self, digits):
        v = gen_moving_mnist(digits, 32, 32, 1, 0)
        assert v.shape == (1024, 1)
        v = gen_moving_mnist(digits, 32, 32, 20, 1)
        assert v.min() >= 0.0 and v.max() <= 1.0 and np.count_nonzero(v) > 0

    def test_frames_rebuild_from_tracks(self, digits):
        from scipy.ndimage import zoom

        h = w = 32
        v, tracks = gen_moving_mnist(digits, h, w, 12, 5, return_tracks=True)
        # replay the two digit picks from the same generator stream
        rng = np.random.default_rng(5)
        imgs = []
        for _ in range(2):
            img = digits[int(rng.integers(len(digits)))] / 255.0
            imgs.append(np.clip(zoom(img, 14 / 28, order=1), 0, 1))
            vy = vx = 0
            while vy == 0 and vx == 0:
                vy, vx = (int(x) for x in rng.integers(-3, 4, size=2))
            rng.integers(0, h - 14 + 1)
            rng.integers(0, w - 14 + 1)
        frames = v.T.reshape(12, h, w)
        for t in range(12):
            canvas = np.zeros((h, w))
            for img, tr in zip(imgs, tracks):
                patch = canvas[tr["y"][t] : tr["y"][t] + 14, tr["x"][t] : tr["x"][t] + 14]
                np.maximum(patch, img, out=patch)
            np.testing.assert_allclose(frames[t], canvas, atol=1e-15)
        for tr in tracks:
            assert tr["y"].tolist() == replay(int(tr["y"][0]), int(tr["vy"][0]), h - 14, 12)

    def test_needs_digits(self):
        with pytest.raises(ShapeError):
            gen_moving_mnist(np.zeros((0, 28, 28)), 32, 32, 5, 0)


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


class TestIdx:
    def test_crafted_fixture(self, tmp_path):
        pixels = [(7 * i) % 256 for i in range(2 * 28 * 28)]
        (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 28, 28), pixels))
        (tmp_path / "lbl").write_bytes(idx_bytes(0x801, (2,), [4, 9]))
        images, labels = ingest_mnist_idx(tmp_path / "img", tmp_path / "lbl")
        assert images.shape == (2, 28, 28) and images.dtype == np.uint8
        assert images[1, 0, 0] == pixels[784] and images[0, 27, 27] == pixels[783]
        np.testing.assert_array_equal(images.ravel(), pixels)
        assert labels.tolist() == [4, 9]

    def test_truncated(self, tmp_path):
        (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 28, 28), [0] * 1000))
        with pytest.raises(IdxTruncatedError):
            read_idx(tmp_path / "img", 0x803)
        (tmp_path / "short").write_bytes(b"\x00\x00")
        with pytest.raises(IdxTruncatedError):
            read_idx(tmp_path / "short", 0x803)

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "lbl").write_bytes(idx_bytes(0x801, (2,), [1, 2]))
        with pytest.raises(IdxMagicError, match="expected 0x00000803, found 0x00000801"):
            read_idx(tmp_path / "lbl", 0x803)

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 28, 28), [0] * 1568))
        (tmp_path / "lbl").write_bytes(idx_bytes(0x801, (3,), [1, 2, 3]))
        with pytest.raises(IdxCountError):
            ingest_mnist_idx(tmp_path / "img", tmp_path / "lbl")

    def test_gzip_and_writer_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
        write_idx(tmp_path / "a", arr)
        with open(tmp_path / "a", "rb") as f, gzip.open(tmp_path / "a.gz", "wb") as g:
            g.write(f.read())
        np.testing.assert_array_equal(read_idx(tmp_path / "a.gz", 0x803), arr)
        assert (tmp_path / "a").read_bytes()[:4] == b"\x00\x00\x08\x03"


class TestCompose:
    def test_identity_case(self):
        S = np.zeros((4, 2))
        S[0, 0], S[1, 1] = 1.0, 0.4
        s = compose_sample(S, np.zeros_like(S), 2, 2)
        assert s.scale == 1.0 and s.offset == 0.0
        np.testing.assert_array_equal(s.M.data, S)
        np.testing.assert_array_equal(s.S.data, S)

    def test_range_and_additivity(self):
        rng = np.random.default_rng(1)
        L = gen_low_rank_background(64, 8, 2, rng)
        S = gen_moving_sprites(8, 8, 8, rng)
        s = compose_sample(S, L, 8, 8)
        assert np.max(np.abs(s.M.data - s.L.data - s.S.data)) <= 1e-12
        assert s.M.data.min() >= -1e-12 and s.M.data.max() <= 1 + 1e-12
        assert s.M.data.min() == pytest.approx(0.0, abs=1e-15) and s.M.data.max() == pytest.approx(1.0)
        np.testing.assert_allclose(s.L.data * s.scale + s.offset, L, atol=1e-12)

    def test_degenerate_constant(self):
        s = compose_sample(np.zeros((4, 3)), np.full((4, 3), 2.5), 2, 2)
        assert s.scale == SCALE_GUARD
        assert not s.M.data.any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compose_sample(np.zeros((4, 2)), np.zeros((4, 3)))


@pytest.fixture(scope="module")
def splits():
    return generate_dataset(SMALL)


class TestDataset:
    def test_counts_and_geometry(self, splits):
        assert {k: len(v) for k, v in splits.items()} == {"train": 6, "val": 3, "test": 3}
        assert splits["train"].geometry == (16, 16, 10)

    def test_invariants(self, splits):
        for ds in splits.values():
            assert np.max(np.abs(ds.M - ds.L - ds.S)) <= 1e-12
            assert ds.M.min() >= -1e-12 and ds.M.max() <= 1 + 1e-12
            s = np.linalg.svd(ds.L, compute_uv=False)
            assert np.all(s[:, SMALL.r + 1] / s[:, 0] < 1e-10)
            assert np.all(ds.S >= 0)

    def test_disjoint_splits(self, splits):
        seeds = {(split, i): tuple(sample_seed(0, split, i).generate_state(4)) for split in splits for i in range(6)}
        assert len(set(seeds.values())) == len(seeds)
        hashes = {sample_hash(ds.sample(i)) for ds in splits.values() for i in range(len(ds))}
        assert len(hashes) == 12

    def test_frozen_hashes(self):
        assert sample_hash(generate_sample(SMALL, "train", 0)) == (
            "854f9e40489714edcf16458211eb68cfe4f383bfb3962b0db44bbf9f8850bb02"
        )
        assert sample_hash(generate_sample(SMALL, "val", 3)) == (
            "3046f2a09c040bc6b0e955c21e523cfbf5f0e2536be4e9e9074883630b6d203a"
        )

    def test_sample_matches_dataset(self, splits):
        s = generate_sample(SMALL, "val", 2)
        np.testing.assert_array_equal(s.M.data, splits["val"].M[2])
        assert s.scale == splits["val"].scales[2]

    def test_save_load_bit_exact(self, splits, tmp_path):
        save_dataset(tmp_path / "d.urpc", splits, SMALL)
        loaded, manifest = load_dataset(tmp_path / "d.urpc")
        assert manifest["normalization"] == "per-sequence" and manifest["seed"] == 0
        assert manifest["counts"] == {"train": 6, "val": 3, "test": 3}
        for name, ds in splits.items():
            for attr in ("M", "L", "S", "scales", "offsets"):
                assert getattr(loaded[name], attr).tobytes() == getattr(ds, attr).tobytes()

    def test_manifest_count_mismatch(self, splits, tmp_path):
        path = tmp_path / "d.urpc"
        save_dataset(path, splits, SMALL)
        header, tensors = urpc.load_container(path)
        header["counts"]["val"] = 5
        del header["tensors"]
        urpc.save_container(path, header, tensors)
        with pytest.raises(FormatError, match="val"):
            load_dataset(path)

    def test_mnist_source(self, tmp_path):
        digits = np.random.default_rng(0).integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
        write_idx(tmp_path / "img", digits)
        write_idx(tmp_path / "lbl", np.arange(4, dtype=np.uint8))
        cfg = DataGenConfig(h=16, w=16, m=4, r=2, n_train=2, n_val=1, n_test=1, source="mnist",
                            mnist_images=str(tmp_path / "img"), mnist_labels=str(tmp_path / "lbl"))
        splits = generate_dataset(cfg)
        assert len(splits["train"]) == 2
        with pytest.raises(ParameterError):
            generate_dataset(DataGenConfig(source="mnist", n_train=1, n_val=1, n_test=1))

    def test_subset(self, splits):
        sub = splits["train"].subset([1, 3])
        assert isinstance(sub, VideoDataset) and len(sub) == 2
        np.testing.assert_array_equal(sub.M[1], splits["train"].M[3])


def test_config_validation():
    for bad in (dict(r=21), dict(n_train=-1), dict(source="video"), dict(h=0)):
        with pytest.raises(ParameterError):
            DataGenConfig(**bad)
