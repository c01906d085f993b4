import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_panel
from gfic.errors import (
    DuplicateCell,
    MissingColumn,
    NonNumericValue,
    RankDeficientControls,
    TooFewPeriods,
    UnbalancedPanel,
)
from gfic.panel import PanelDataset, first_difference, load_panel, panel_to_csv, project_out_controls, save_panel

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def write_csv(tmp_path, text, name="p.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


RECT = "id,time,y,x\n1,1,0.1,1\n1,2,0.2,2\n1,3,0.3,3\n2,1,1.1,4\n2,2,1.2,5\n2,3,1.3,6\n"


class TestLoad:
    def test_complete_rectangle(self, tmp_path):
        p = load_panel(write_csv(tmp_path, RECT))
        assert (p.n, p.T) == (2, 3)
        assert p.times == (1, 2, 3)
        np.testing.assert_array_equal(p.x, [[1, 2, 3], [4, 5, 6]])

    def test_rows_sorted_by_id_then_time(self, tmp_path):
        lines = RECT.strip().split("\n")
        shuffled = "\n".join([lines[0], *reversed(lines[1:])]) + "\n"
        assert load_panel(write_csv(tmp_path, shuffled)).equals(load_panel(write_csv(tmp_path, RECT, "b.csv")))

    def test_missing_period(self, tmp_path):
        text = "\n".join(RECT.strip().split("\n")[:-1]) + "\n"
        with pytest.raises(UnbalancedPanel, match="id 2"):
            load_panel(write_csv(tmp_path, text))

    def test_duplicate_cell(self, tmp_path):
        with pytest.raises(DuplicateCell):
            load_panel(write_csv(tmp_path, RECT + "2,3,9,9\n"))

    def test_non_numeric(self, tmp_path):
        with pytest.raises(NonNumericValue, match="'y'"):
            load_panel(write_csv(tmp_path, RECT.replace("1.2,5", "abc,5")))

    def test_empty_value(self, tmp_path):
        with pytest.raises(NonNumericValue):
            load_panel(write_csv(tmp_path, RECT.replace("1.2,5", ",5")))

    def test_missing_column(self, tmp_path):
        with pytest.raises(MissingColumn):
            load_panel(write_csv(tmp_path, RECT.replace("id,time,y,x", "id,time,y,z")))

    def test_schema_mapping_and_controls(self, tmp_path):
        text = "state,year,sales,price,inc\n" + "".join(
            f"{s},{t},{s + t},{s * t},{t}\n" for s in (1, 2) for t in (1990, 1991)
        )
        p = load_panel(write_csv(tmp_path, text), {"id": "state", "time": "year", "y": "sales", "x": "price"})
        assert p.control_names == ("inc",)
        assert p.times == (1990, 1991)

    def test_period_gap_rejected(self, tmp_path):
        with pytest.raises(UnbalancedPanel, match="gaps"):
            load_panel(write_csv(tmp_path, "id,time,y,x\n1,1,0,0\n1,2,0,0\n1,4,0,0\n"))

    def test_arrays_are_read_only(self, rng):
        p = random_panel(rng)
        with pytest.raises(ValueError):
            p.y[0, 0] = 1.0

    def test_window_inclusive(self, rng):
        p = random_panel(rng, T=6)
        w = p.window(2, 4)
        assert w.times == (2, 3, 4)
        np.testing.assert_array_equal(w.y, p.y[:, 1:4])


class TestFirstDifference:
    def test_arithmetic(self):
        d = first_difference(PanelDataset.from_arrays([[1.0, 3.0, 6.0]], [[0.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(d.dy, [[2.0, 3.0]])

    def test_constant_series(self):
        d = first_difference(PanelDataset.from_arrays(np.full((2, 4), 7.0), np.zeros((2, 4))))
        assert not d.dy.any()

    def test_loop_oracle(self, rng):
        p = random_panel(rng, n=3, T=4)
        d = first_difference(p)
        for i in range(3):
            for t in range(1, 4):
                assert d.dy[i, t - 1] == p.y[i, t] - p.y[i, t - 1]
                assert d.dx[i, t - 1] == p.x[i, t] - p.x[i, t - 1]

    def test_too_few_periods(self):
        with pytest.raises(TooFewPeriods):
            first_difference(PanelDataset.from_arrays([[1.0]], [[1.0]]))

    def test_lag_view_marker(self, rng):
        d = first_difference(random_panel(rng, n=2, T=5))
        vals, first = d.lag_dy(2)
        assert first == 4
        # column j holds period j + 2; defined iff t - 2 >= 2
        assert np.isnan(vals[:, :2]).all()
        np.testing.assert_array_equal(vals[:, 2:], d.dy[:, :2])

    @given(arrays(float, st.tuples(st.integers(1, 4), st.integers(2, 7)), elements=st.integers(-1000, 1000).map(float)))
    def test_telescoping(self, y):
        d = first_difference(PanelDataset.from_arrays(y, np.zeros_like(y)))
        np.testing.assert_array_equal(d.dy.sum(axis=1), y[:, -1] - y[:, 0])


class TestProjectControls:
    def test_zero_controls_leave_values(self, rng):
        p = PanelDataset.from_arrays(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), controls=np.zeros((4, 3, 2)))
        q = project_out_controls(p)
        np.testing.assert_array_equal(q.y, p.y)
        np.testing.assert_array_equal(q.x, p.x)
        assert q.n_controls == 0

    def test_perfect_fit(self, rng):
        C = rng.normal(size=(5, 6, 2))
        x = C @ np.array([1.5, -0.3])
        q = project_out_controls(PanelDataset.from_arrays(rng.normal(size=(5, 6)), x, controls=C))
        assert np.abs(q.x).max() < 1e-10

    def test_orthogonal_residuals(self, rng):
        p = random_panel(rng, n=5, T=6, controls=2)
        q = project_out_controls(p)
        C = p.controls.reshape(30, 2)
        # normal-equation oracle: residuals equal y - C (C'C)^{-1} C'y
        coef = np.linalg.solve(C.T @ C, C.T @ p.y.ravel())
        np.testing.assert_allclose(q.y.ravel(), p.y.ravel() - C @ coef, atol=1e-12)
        assert np.abs(C.T @ q.y.ravel()).max() < 1e-10
        assert np.abs(C.T @ q.x.ravel()).max() < 1e-10

    def test_after_differencing_with_dummies(self, rng):
        p = random_panel(rng, n=8, T=6, controls=2)
        q = project_out_controls(p, period_dummies=True, after_differencing=True)
        dC = np.diff(p.controls, axis=1).reshape(-1, 2)
        D = np.tile(np.eye(5), (8, 1))
        for v in (np.diff(q.y, axis=1).ravel(), np.diff(q.x, axis=1).ravel()):
            assert np.abs(dC.T @ v).max() < 1e-10
            assert np.abs(D.T @ v).max() < 1e-10

    def test_collinear_controls(self, rng):
        c = rng.normal(size=(4, 3, 1))
        p = PanelDataset.from_arrays(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), controls=np.concatenate([c, 2 * c], axis=2))
        with pytest.raises(RankDeficientControls):
            project_out_controls(p)

    def test_requires_controls(self, rng):
        with pytest.raises(MissingColumn):
            project_out_controls(random_panel(rng))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 3))
    def test_residuals_orthogonal_property(self, seed, T, c):
        r = np.random.default_rng(seed)
        p = random_panel(r, n=10, T=T, controls=c)
        q = project_out_controls(p)
        C = p.controls.reshape(-1, c)
        assert np.abs(C.T @ q.y.ravel()).max() < 1e-10


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path, rng):
        p = random_panel(rng, n=4, T=3, controls=2)
        save_panel(p, tmp_path / "p.csv")
        assert load_panel(tmp_path / "p.csv").equals(p)

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(1, 5).flatmap(
            lambda n: st.integers(1, 5).flatmap(
                lambda T: st.tuples(
                    arrays(float, (n, T), elements=finite),
                    arrays(float, (n, T), elements=finite),
                    st.integers(-50, 2000),
                )
            )
        )
    )
    def test_round_trip_property(self, tmp_path_factory, data):
        y, x, t0 = data
        p = PanelDataset.from_arrays(y, x, times=range(t0, t0 + y.shape[1]))
        path = tmp_path_factory.mktemp("rt") / "p.csv"
        save_panel(p, path)
        assert load_panel(path).equals(p)
        assert panel_to_csv(load_panel(path)) == panel_to_csv(p)
