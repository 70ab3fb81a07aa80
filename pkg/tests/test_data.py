import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from famr import io
from famr.data import Dataset, ForgetSpec, draw_like, gen_blobs, gen_styled, generate, split_forget


def nearest_centroid_accuracy(X, y):
    cents = np.array([X[y == c].mean(0) for c in np.unique(y)])
    pred = np.argmin(((X[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    return float(np.mean(pred == y))


def least_squares_probe_accuracy(X, tags):
    """One-vs-rest linear probe fitted by least squares on one-hot targets."""
    Xb = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(tags.max() + 1)[tags]
    W = np.linalg.lstsq(Xb, Y, rcond=None)[0]
    return float(np.mean((Xb @ W).argmax(1) == tags))


class TestBlobs:
    def test_counts(self):
        d = gen_blobs(3, 10, 2, 0.05, 1)
        assert len(d) == 30
        assert np.bincount(d.labels).tolist() == [10, 10, 10]
        assert d.dim == 2

    def test_bit_identical(self):
        a, b = gen_blobs(4, 7, 5, 0.2, 3), gen_blobs(4, 7, 5, 0.2, 3)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.digest() == b.digest()
        assert gen_blobs(4, 7, 5, 0.2, 4).digest() != a.digest()

    @pytest.mark.parametrize("C,d", [(3, 2), (5, 10), (6, 3)])
    def test_separable_at_small_spread(self, C, d):
        data = gen_blobs(C, 30, d, 0.05, 1)
        assert nearest_centroid_accuracy(data.inputs, data.labels) >= 0.99

    @pytest.mark.parametrize("C,d", [(3, 2), (5, 10), (7, 3)])
    def test_means_on_unit_sphere(self, C, d):
        data = gen_blobs(C, 1, d, 0.0, 2)
        np.testing.assert_allclose(np.linalg.norm(data.inputs, axis=1), 1.0, atol=1e-12)
        assert len({tuple(np.round(r, 9)) for r in data.inputs}) == C

    @pytest.mark.parametrize("args", [(1, 5, 2, 0.1, 0), (3, 0, 2, 0.1, 0), (3, 5, 1, 0.1, 0), (3, 5, 2, -1, 0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            gen_blobs(*args)

    def test_noise_seed_keeps_centres(self):
        a = gen_blobs(3, 500, 4, 0.1, 0)
        b = gen_blobs(3, 500, 4, 0.1, 0, noise_seed=9)
        assert a.inputs.tobytes() != b.inputs.tobytes()
        for c in range(3):
            assert np.linalg.norm(a.inputs[a.labels == c].mean(0) - b.inputs[b.labels == c].mean(0)) < 0.05


class TestStyled:
    def test_balanced_tags(self):
        d = gen_styled(3, 10, 4, 3, 2, 0)
        for c in range(3):
            assert np.bincount(d.style_tags[d.labels == c]).tolist() == [5, 5]

    def test_zero_style_degenerates_to_blobs(self):
        d = gen_styled(3, 10, 4, 3, 2, 0, spread=0.1, style_scale=0)
        b = gen_blobs(3, 10, 4, 0.1, 0)
        np.testing.assert_array_equal(d.inputs[:, :4], b.inputs)
        assert not np.any(d.inputs[:, 4:])

    def test_style_is_linearly_decodable(self):
        d = gen_styled(4, 60, 6, 4, 3, 0, spread=0.2)
        assert least_squares_probe_accuracy(d.inputs[:, 6:], d.style_tags) >= 0.95

    def test_label_style_uncorrelated(self):
        d = gen_styled(4, 12, 3, 2, 3, 1)
        assert abs(np.corrcoef(d.labels, d.style_tags)[0, 1]) < 1e-12

    @pytest.mark.parametrize("kw", [dict(styles=1), dict(d_style=1)])
    def test_invalid(self, kw):
        args = dict(C=2, per_class=4, d_content=2, d_style=2, styles=2, seed=0)
        args.update(kw)
        with pytest.raises(ValueError):
            gen_styled(**args)

    def test_generate_dispatch(self):
        assert generate("blobs", C=2, per_class=3, d=2, spread=0.1, seed=0).digest() == \
            gen_blobs(2, 3, 2, 0.1, 0).digest()
        with pytest.raises(ValueError, match="unknown generator"):
            generate("moons")


class TestDataset:
    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 3], 3)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.inf, 0.0]]), [0], 2)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), [0, 1], 2)

    def test_draw_like(self):
        d = gen_blobs(3, 20, 4, 0.2, 0)
        a, b = draw_like(d, 50, 1), draw_like(d, 50, 1)
        assert a.shape == (50, 4) and a.tobytes() == b.tobytes()
        assert not np.array_equal(a, draw_like(d, 50, 2))

    @pytest.mark.parametrize("styled", [False, True])
    def test_text_round_trip(self, tmp_path, styled):
        d = gen_styled(2, 4, 3, 2, 2, 5) if styled else gen_blobs(3, 4, 2, 0.3, 5)
        io.write_dataset(tmp_path / "d.csv", d)
        back = io.read_dataset(tmp_path / "d.csv")
        assert back.digest() == d.digest()
        assert back.generator == d.generator and back.seed == d.seed
        assert (tmp_path / "d.csv").read_text().startswith("# ")


class TestSplit:
    @pytest.fixture
    def data(self):
        return gen_styled(3, 6, 2, 2, 2, 0)

    def test_class(self, data):
        f, r = split_forget(data, ForgetSpec("class", class_id=2))
        assert np.all(f.labels == 2) and len(f) == 6
        assert not np.any(r.labels == 2)

    def test_samples(self, data):
        f, _ = split_forget(data, ForgetSpec("samples", sample_indices=[0, 5]))
        np.testing.assert_array_equal(f.inputs, data.inputs[[0, 5]])

    def test_style(self, data):
        f, _ = split_forget(data, ForgetSpec("style", style_tag=1))
        assert len(set(f.labels.tolist())) > 1
        assert set(f.style_tags.tolist()) == {1}

    @pytest.mark.parametrize("spec", [
        ForgetSpec("samples", sample_indices=[]),
        ForgetSpec("samples", sample_indices=list(range(18))),
        ForgetSpec("class", class_id=7),
        ForgetSpec("samples", sample_indices=[99]),
    ])
    def test_empty_full_or_out_of_range(self, data, spec):
        with pytest.raises(ValueError):
            split_forget(data, spec)

    def test_style_needs_tags(self):
        with pytest.raises(ValueError):
            split_forget(gen_blobs(2, 3, 2, 0.1, 0), ForgetSpec("style", style_tag=0))

    @pytest.mark.parametrize("kw", [dict(kind="class"), dict(kind="class", class_id=1, style_tag=0),
                                    dict(kind="everything", class_id=1)])
    def test_spec_fields_match_kind(self, kw):
        with pytest.raises(ValueError):
            ForgetSpec(**kw)

    @settings(max_examples=40, deadline=None)
    @given(st.sets(st.integers(0, 17), min_size=1, max_size=17))
    def test_partition(self, idx):
        data = gen_styled(3, 6, 2, 2, 2, 0)
        f, r = split_forget(data, ForgetSpec("samples", sample_indices=sorted(idx)))
        assert len(f) + len(r) == len(data)
        rows = {tuple(x) for x in f.inputs} | {tuple(x) for x in r.inputs}
        assert len(rows) == len(data)
        # order preserved within each part
        mask = np.zeros(len(data), bool)
        mask[sorted(idx)] = True
        np.testing.assert_array_equal(f.inputs, data.inputs[mask])
        np.testing.assert_array_equal(r.inputs, data.inputs[~mask])
