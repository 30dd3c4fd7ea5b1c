import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import nearest_centroid_accuracy
from spikegrid.data import (HsiCube, LabelMap, SplitSpec, Standardizer, encode_direct,
                            extract_patch, extract_patches, fit_pca, generate_synthetic, prepare,
                            read_cube, read_labels, stratified_split, write_cube, write_labels)
from spikegrid.errors import DataError, NonFiniteError, ShapeError


class TestFiles:
    def test_round_trip(self, tmp_path, rng):
        cube = HsiCube(rng.standard_normal((3, 4, 5)))
        labels = LabelMap(rng.integers(0, 4, (3, 4)), 3)
        write_cube(tmp_path / "a.hsic", cube)
        write_labels(tmp_path / "a.hsil", labels)
        np.testing.assert_array_equal(read_cube(tmp_path / "a.hsic").values, cube.values)
        back = read_labels(tmp_path / "a.hsil")
        np.testing.assert_array_equal(back.labels, labels.labels)
        assert back.num_classes == 3

    def test_band_fastest_layout(self, tmp_path):
        values = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
        write_cube(tmp_path / "c.hsic", HsiCube(values))
        raw = (tmp_path / "c.hsic").read_bytes()
        assert raw[:4] == b"HSIC" and len(raw) == 18 + 12 * 4
        np.testing.assert_array_equal(np.frombuffer(raw[18:], "<f4"), np.arange(12))

    @pytest.mark.parametrize("mangle", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + b"\x09\x00" + b[6:],
        lambda b: b[:-4],
        lambda b: b[:9],
    ])
    def test_corrupt_cube(self, tmp_path, mangle):
        write_cube(tmp_path / "c.hsic", HsiCube(np.zeros((2, 2, 2))))
        (tmp_path / "c.hsic").write_bytes(mangle((tmp_path / "c.hsic").read_bytes()))
        with pytest.raises(DataError):
            read_cube(tmp_path / "c.hsic")

    def test_corrupt_labels(self, tmp_path):
        write_labels(tmp_path / "l.hsil", LabelMap(np.ones((2, 2)), 1))
        (tmp_path / "l.hsil").write_bytes((tmp_path / "l.hsil").read_bytes()[:-1])
        with pytest.raises(DataError):
            read_labels(tmp_path / "l.hsil")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_cube(tmp_path / "absent.hsic")
        with pytest.raises(DataError):
            read_labels(tmp_path / "absent.hsil")

    def test_validation(self):
        with pytest.raises(NonFiniteError):
            HsiCube(np.full((2, 2, 2), np.nan))
        with pytest.raises(ShapeError):
            HsiCube(np.zeros((2, 2)))
        with pytest.raises(DataError):
            LabelMap(np.array([[0, 4]]), 3)


class TestPca:
    def test_full_basis_explains_everything(self, rng):
        cube = HsiCube(rng.standard_normal((10, 10, 6)))
        assert abs(fit_pca(cube, 6).explained_variance_ratio() - 1.0) < 1e-9

    def test_rank_one_cube(self, rng):
        b1 = rng.standard_normal((12, 12))
        cube = HsiCube(np.stack([b1, 2 * b1], axis=-1))
        assert fit_pca(cube, 1).explained_variance_ratio() >= 0.999

    def test_orthonormal_and_signed(self, rng):
        cube = HsiCube(rng.standard_normal((8, 8, 7)) @ rng.standard_normal((7, 7)))
        pca = fit_pca(cube, 4)
        np.testing.assert_allclose(pca.components.T @ pca.components, np.eye(4), atol=1e-4)
        for j in range(4):
            col = pca.components[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_matches_lapack_subspace(self, rng):
        x = rng.standard_normal((9, 9, 5)) @ rng.standard_normal((5, 5))
        pca = fit_pca(HsiCube(x), 2)
        flat = x.reshape(-1, 5) - x.reshape(-1, 5).mean(0)
        _, vecs = np.linalg.eigh(np.cov(flat.T))
        ref = vecs[:, ::-1][:, :2]
        np.testing.assert_allclose(np.abs(pca.components.T @ ref), np.eye(2), atol=1e-6)

    @given(st.integers(0, 2 ** 31))
    def test_reconstruction_error_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        cube = HsiCube(rng.standard_normal((6, 6, 5)) @ rng.standard_normal((5, 5)))
        errs = []
        for n in range(1, 6):
            pca = fit_pca(cube, n)
            rec = pca.inverse_transform(pca.transform(cube.values))
            errs.append(float(np.sum((rec - cube.values) ** 2)))
        assert all(b <= a + 1e-3 * max(1.0, a) for a, b in zip(errs, errs[1:]))

    def test_bad_n_keep(self, rng):
        with pytest.raises(ShapeError):
            fit_pca(HsiCube(rng.standard_normal((3, 3, 4))), 5)


class TestPatches:
    def test_centre(self, rng):
        img = rng.standard_normal((10, 12, 3)).astype(np.float32)
        p = extract_patch(img, 4, 7, 5)
        assert p.shape == (3, 5, 5)
        np.testing.assert_array_equal(p[:, 2, 2], img[4, 7])

    def test_corner_mirrors_about_the_border(self):
        img = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        p = extract_patch(img, 0, 0, 5)[0]
        mirrored = [2, 1, 0, 1, 2]  # reflection without repeating the border pixel
        np.testing.assert_array_equal(p, img[np.ix_(mirrored, mirrored)][..., 0])

    @pytest.mark.parametrize("s", [9, 11, 13, 15, 17])
    def test_sweep_sizes(self, rng, s):
        img = rng.standard_normal((20, 20, 2)).astype(np.float32)
        assert extract_patch(img, 0, 19, s).shape == (2, s, s)

    def test_batch_matches_single(self, rng):
        img = rng.standard_normal((6, 6, 2)).astype(np.float32)
        coords = np.array([[0, 0], [5, 3], [2, 2]])
        batch = extract_patches(img, coords, 5)
        for i, (r, c) in enumerate(coords):
            np.testing.assert_array_equal(batch[i], extract_patch(img, r, c, 5))

    def test_errors(self, rng):
        img = np.zeros((4, 4, 1), np.float32)
        with pytest.raises(ShapeError):
            extract_patch(img, 0, 0, 4)
        with pytest.raises(ShapeError):
            extract_patch(img, 4, 0, 3)


class TestSplit:
    def test_count_mode(self):
        labels = LabelMap(np.ones((50, 100), int), 1)
        train, test = stratified_split(labels, SplitSpec("count", 200, seed=1))
        assert (len(train), len(test)) == (200, 4800)

    def test_fraction_mode(self):
        labels = LabelMap(np.ones((10, 10), int), 1)
        train, test = stratified_split(labels, SplitSpec("fraction", 0.8))
        assert (len(train), len(test)) == (80, 20)

    def test_fraction_rounds_half_up(self):
        assert SplitSpec("fraction", 0.5).train_count(5) == 3

    def test_count_leaves_a_test_pixel(self):
        assert SplitSpec("count", 10).train_count(4) == 3

    @given(st.integers(0, 2 ** 31), st.integers(1, 30))
    def test_disjoint_labeled_deterministic(self, seed, n):
        rng = np.random.default_rng(seed)
        lab = rng.integers(0, 4, (12, 12))
        lab[0, :3] = [1, 2, 3]  # every class present
        labels = LabelMap(lab, 3)
        spec = SplitSpec("count", n, seed)
        train, test = stratified_split(labels, spec)
        a = {tuple(c) for c in train}
        b = {tuple(c) for c in test}
        assert not a & b
        assert all(lab[r, c] > 0 for r, c in a | b)
        assert len(a | b) == np.count_nonzero(lab)
        for k in (1, 2, 3):
            size = np.count_nonzero(lab == k)
            assert sum(lab[r, c] == k for r, c in a) == min(n, size - 1)
        again = stratified_split(labels, spec)
        np.testing.assert_array_equal(train, again[0])
        np.testing.assert_array_equal(test, again[1])

    def test_empty_class(self):
        with pytest.raises(DataError):
            stratified_split(LabelMap(np.ones((3, 3), int), 2), SplitSpec("count", 1))

    @pytest.mark.parametrize("mode,value", [("count", 0), ("count", 2.5), ("fraction", 1.0),
                                            ("fraction", 0.0)])
    def test_invalid_spec(self, mode, value):
        with pytest.raises(DataError):
            SplitSpec(mode, value)


class TestEncoding:
    def test_replicates(self, rng):
        patch = rng.standard_normal((3, 5, 5)).astype(np.float32)
        train = encode_direct(patch, 10)
        assert train.shape == (10, 3, 5, 5)
        for t in range(10):
            np.testing.assert_array_equal(train[t], patch)
        assert not train.flags.writeable

    @pytest.mark.parametrize("t", [10, 20, 30, 40])
    def test_sweep_lengths(self, t):
        assert encode_direct(np.zeros((1, 1, 1)), t).shape[0] == t

    def test_invalid(self):
        with pytest.raises(ShapeError):
            encode_direct(np.zeros((1, 1, 1)), 0)


class TestSynthetic:
    def test_deterministic_and_labeled(self):
        a, la = generate_synthetic(seed=3)
        b, lb = generate_synthetic(seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(la.labels, lb.labels)
        assert a.values.shape == (32, 32, 20) and np.all(la.labels > 0)
        assert sorted(np.unique(la.labels)) == [1, 2, 3, 4]

    def test_noise_free_is_separable(self):
        cube, labels = generate_synthetic(noise_sigma=0.0, seed=1)
        flat = cube.values.reshape(-1, 20)
        for k in range(1, 5):
            rows = flat[labels.labels.ravel() == k]
            assert np.all(rows == rows[0])

    def test_nearest_centroid_sanity(self):
        cube, labels = generate_synthetic(4, 32, 32, 20, 1.0, 0.1, seed=0)
        train, _ = stratified_split(labels, SplitSpec("count", 50, 0))
        mask = np.zeros(labels.labels.shape, bool)
        mask[train[:, 0], train[:, 1]] = True
        assert nearest_centroid_accuracy(cube.values, labels.labels, mask) >= 0.99

    def test_invalid(self):
        with pytest.raises(DataError):
            generate_synthetic(class_separation=0.0)


class TestPrepare:
    def test_train_only_standardisation(self):
        cube, labels = generate_synthetic(seed=2)
        data = prepare(cube, labels, SplitSpec("count", 20, 2), 5, 9)
        tr = data.reduced[data.train_coords[:, 0], data.train_coords[:, 1]]
        te = data.reduced[data.test_coords[:, 0], data.test_coords[:, 1]]
        np.testing.assert_allclose(tr.mean(0), 0, atol=1e-5)
        np.testing.assert_allclose(tr.std(0), 1, atol=1e-4)
        assert np.abs(te.mean(0)).max() > 1e-3
        assert data.patches(data.train_coords[:3]).shape == (3, 5, 9, 9)
        assert set(data.targets(data.test_coords)) <= {1, 2, 3, 4}

    def test_standardizer_guards_constant_components(self):
        s = Standardizer.fit(np.ones((2, 2, 3)), np.array([[0, 0], [1, 1]]))
        assert np.all(s.std == 1.0)

    def test_shape_mismatch(self):
        cube, _ = generate_synthetic(seed=0)
        with pytest.raises(DataError):
            prepare(cube, LabelMap(np.ones((4, 4), int), 1), SplitSpec("count", 1), 5, 9)
