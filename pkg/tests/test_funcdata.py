import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from fjmpls.funcdata import (DatasetError, DimensionError, FjmDataset, FunctionalGrid,
                             FunctionOnGrid, ImageMatrix, SubjectData, functional_matvec,
                             inner_product, l2_norm, load_dataset, read_function, write_dataset,
                             write_function)


def _subject(sid, times=(0.1, 0.5), T=1.0, event=True, r=1, pz=1, pw=1):
    times = np.asarray(times, dtype=float)
    q = np.ones((len(times), 1)) if r == 1 else np.column_stack([np.ones(len(times)), times])
    return SubjectData(sid, times, np.arange(len(times), dtype=float) + 0.25, np.full(pz, 0.3),
                       np.full(pw, -1.5), q, T, event)


class TestGrid:
    def test_default_cell_measure_integrates_one_to_one(self):
        g = FunctionalGrid((3, 5))
        assert g.d == 15
        assert inner_product(FunctionOnGrid(g, np.ones(15)), FunctionOnGrid(g, np.ones(15))) == \
            pytest.approx(1.0)

    @pytest.mark.parametrize("dims", [(), (0, 3), (-1,)])
    def test_rejects_bad_dims(self, dims):
        with pytest.raises(ValueError):
            FunctionalGrid(dims)

    def test_rejects_nonpositive_cell(self):
        with pytest.raises(ValueError):
            FunctionalGrid((2,), cell_measure=0.0)


class TestInnerProduct:
    def test_constant_function(self):
        g = FunctionalGrid((2, 2), cell_measure=1.0)
        one = FunctionOnGrid(g, np.ones(4))
        assert inner_product(one, one) == 4.0

    def test_disjoint_supports(self):
        g = FunctionalGrid((2, 2))
        f = FunctionOnGrid(g, np.array([1.0, 1.0, 0.0, 0.0]))
        assert inner_product(f, FunctionOnGrid(g, 1.0 - f.values)) == 0.0

    def test_hand_value(self):
        g = FunctionalGrid((3,), cell_measure=0.5)
        f = FunctionOnGrid(g, np.array([1.0, 2.0, 3.0]))
        h = FunctionOnGrid(g, np.array([4.0, 5.0, 6.0]))
        assert inner_product(f, h) == 16.0

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            inner_product(FunctionOnGrid(FunctionalGrid((2,)), np.ones(2)),
                          FunctionOnGrid(FunctionalGrid((1, 2)), np.ones(2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 10_000))
    def test_symmetric_bilinear_positive(self, d, seed):
        rng = np.random.default_rng(seed)
        g = FunctionalGrid((d,))
        f, h, k = (FunctionOnGrid(g, rng.normal(size=d)) for _ in range(3))
        a, b = rng.normal(size=2)
        assert inner_product(f, h) == pytest.approx(inner_product(h, f))
        assert inner_product(f * a + h * b, k) == pytest.approx(
            a * inner_product(f, k) + b * inner_product(h, k), abs=1e-10)
        assert inner_product(f, f) > 0
        assert inner_product(f * 0.0, f * 0.0) == 0.0

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            FunctionOnGrid(FunctionalGrid((2,)), np.array([1.0, np.nan]))


class TestMatvec:
    def test_delta_image(self):
        g = FunctionalGrid((4,))
        X = ImageMatrix(g, np.array([[0.0, 0.0, 1.0, 0.0]]))
        f = FunctionOnGrid(g, np.array([3.0, -1.0, 7.0, 2.0]))
        assert_allclose(functional_matvec(X, f), [g.cell_measure * 7.0])

    def test_zero_function(self):
        g = FunctionalGrid((5,))
        X = ImageMatrix(g, np.random.default_rng(0).normal(size=(3, 5)))
        assert_array_equal(functional_matvec(X, FunctionOnGrid.zeros(g)), np.zeros(3))

    def test_row_sums(self):
        g = FunctionalGrid((3,), cell_measure=1.0)
        M = np.array([[1.0, 2.0, 3.0], [4.0, 0.0, -1.0], [2.0, 2.0, 2.0]])
        assert_allclose(functional_matvec(ImageMatrix(g, M), FunctionOnGrid(g, np.ones(3))),
                        M.sum(axis=1))

    def test_matches_loop(self):
        rng = np.random.default_rng(1)
        g = FunctionalGrid((6, 7))
        X = ImageMatrix(g, rng.normal(size=(9, 42)))
        f = FunctionOnGrid(g, rng.normal(size=42))
        loop = [inner_product(X.row(i), f) for i in range(9)]
        assert_allclose(functional_matvec(X, f), loop, rtol=1e-12)

    def test_l2_norm(self):
        g = FunctionalGrid((4,), cell_measure=0.25)
        assert l2_norm(FunctionOnGrid(g, np.full(4, 2.0))) == pytest.approx(2.0)


class TestSubjectData:
    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            _subject("a", times=(0.5, 0.5))

    def test_times_within_follow_up(self):
        with pytest.raises(ValueError):
            _subject("a", times=(0.1, 1.5), T=1.0)

    def test_needs_a_visit(self):
        with pytest.raises(ValueError):
            _subject("a", times=())

    def test_random_slope_design_checked(self):
        s = _subject("a", r=2)
        assert s.q_design.shape == (2, 2)
        with pytest.raises(ValueError):
            SubjectData("b", np.array([0.1, 0.2]), np.zeros(2), np.zeros(1), np.zeros(1),
                        np.array([[1.0, 0.5], [1.0, 0.2]]), 1.0, False)


def _dataset(n=3, dims=(2, 3), seed=0, r=1):
    rng = np.random.default_rng(seed)
    g = FunctionalGrid(dims)
    subs = tuple(_subject(f"s{i}", times=np.sort(rng.uniform(0, 0.9, 2 + i % 2)),
                          T=float(rng.uniform(0.95, 2.0)), event=bool(i % 2), r=r)
                 for i in range(n))
    return FjmDataset(ImageMatrix(g, rng.normal(size=(n, g.d)) / 3.0), subs)


class TestRoundTrip:
    def test_bit_identical(self, tmp_path):
        data = _dataset(n=4, r=2)
        write_dataset(data, tmp_path / "d.yaml")
        back = load_dataset(tmp_path / "d.yaml")
        assert back.images.values.tobytes() == data.images.values.tobytes()
        assert back.grid.dims == data.grid.dims
        for a, b in zip(data.subjects, back.subjects):
            assert a.id == b.id
            assert a.survival_time == b.survival_time
            assert a.event == b.event
            for field in ("times", "y", "z", "omega", "q_design"):
                assert getattr(a, field).tobytes() == getattr(b, field).tobytes()

    def test_two_subject_fixture(self, tmp_path):
        data = _dataset(n=2)
        write_dataset(data, tmp_path / "m.yaml")
        back = load_dataset(tmp_path / "m.yaml")
        assert back.images.values.shape == (2, 6)
        assert len(back.subjects) == 2

    def test_payload_size_mismatch(self, tmp_path):
        data = _dataset(n=1, dims=(2, 2))
        write_dataset(data, tmp_path / "m.yaml")
        (tmp_path / "m.images.f64").write_bytes(np.arange(5, dtype="<f8").tobytes())
        with pytest.raises(DatasetError, match="payload"):
            load_dataset(tmp_path / "m.yaml")

    def test_missing_file_named(self, tmp_path):
        data = _dataset()
        write_dataset(data, tmp_path / "m.yaml")
        (tmp_path / "m.survival.csv").unlink()
        with pytest.raises(DatasetError, match="m.survival.csv"):
            load_dataset(tmp_path / "m.yaml")

    def test_id_mismatch_named(self, tmp_path):
        data = _dataset()
        write_dataset(data, tmp_path / "m.yaml")
        path = tmp_path / "m.survival.csv"
        path.write_text(path.read_text().replace("s1,", "zz,"))
        with pytest.raises(DatasetError, match="zz|s1"):
            load_dataset(tmp_path / "m.yaml")

    def test_f32_payload_upcast(self, tmp_path):
        data = _dataset(n=2)
        write_dataset(data, tmp_path / "m.yaml")
        header = json.loads((tmp_path / "m.header.json").read_text())
        header["dtype"] = "f32"
        (tmp_path / "m.header.json").write_text(json.dumps(header))
        (tmp_path / "m.images.f64").write_bytes(data.images.values.astype("<f4").tobytes())
        back = load_dataset(tmp_path / "m.yaml")
        assert back.images.values.dtype == np.float64
        assert_allclose(back.images.values, data.images.values.astype(np.float32))

    def test_time_varying_z_rejected(self, tmp_path):
        data = _dataset(n=2)
        write_dataset(data, tmp_path / "m.yaml")
        path = tmp_path / "m.longitudinal.csv"
        lines = path.read_text().splitlines()
        lines[1] = lines[1].rsplit(",", 1)[0] + ",9.0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="time-varying|vary"):
            load_dataset(tmp_path / "m.yaml")

    def test_manifest_keys(self, tmp_path):
        write_dataset(_dataset(), tmp_path / "m.yaml")
        manifest = yaml.safe_load((tmp_path / "m.yaml").read_text())
        assert set(manifest) == {"image_header", "image_payload", "longitudinal", "survival"}

    def test_empty_longitudinal_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            _subject("x", times=())

    def test_function_sidecar_round_trip(self, tmp_path):
        g = FunctionalGrid((3, 4))
        f = FunctionOnGrid(g, np.random.default_rng(5).normal(size=12))
        write_function(f, tmp_path / "b.json")
        back = read_function(tmp_path / "b.json")
        assert back.values.tobytes() == f.values.tobytes()
        assert back.grid.dims == (3, 4)
