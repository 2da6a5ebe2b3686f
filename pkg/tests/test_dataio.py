"""CSV ingestion, standardization and spatial helpers."""
import math

import numpy as np
import pytest

from r2d2prior.cli import bundled_data_path
from r2d2prior.dataio import (
    CsvSchema,
    Dataset,
    exp_correlation,
    load_csv,
    spatial_distances,
)
from r2d2prior.errors import (
    DegenerateColumn,
    MissingColumn,
    MissingValue,
    NonNumeric,
    SingularCorrelationWarning,
)


def write_csv(path, text):
    path.write_text(text)
    return str(path)


class TestLoadCsv:
    def test_three_row_standardization(self, tmp_path):
        f = write_csv(tmp_path / "toy.csv", "y,x1\n1,10\n2,20\n3,30\n")
        ds = load_csv(f, CsvSchema(response="y", covariates=("x1",)))
        assert abs(ds.X[:, 0].mean()) < 1e-10
        assert ds.X[:, 0].std(ddof=1) == pytest.approx(1.0, abs=1e-8)
        np.testing.assert_array_equal(ds.y, [1.0, 2.0, 3.0])

    def test_missing_column(self, tmp_path):
        f = write_csv(tmp_path / "t.csv", "y,x1\n1,2\n")
        with pytest.raises(MissingColumn):
            load_csv(f, CsvSchema(response="y", covariates=("x2",)))

    def test_non_numeric(self, tmp_path):
        f = write_csv(tmp_path / "t.csv", "y,x1\n1,2\n2,oops\n")
        with pytest.raises(NonNumeric, match="row 3"):
            load_csv(f, CsvSchema(response="y", covariates=("x1",)))

    def test_missing_value_reports_position(self, tmp_path):
        f = write_csv(tmp_path / "t.csv", "y,x1\n1,2\n,3\n")
        with pytest.raises(MissingValue, match="row 3.*'y'"):
            load_csv(f, CsvSchema(response="y", covariates=("x1",)))

    def test_degenerate_column(self, tmp_path):
        f = write_csv(tmp_path / "t.csv", "y,x1\n1,7\n2,7\n3,7\n")
        with pytest.raises(DegenerateColumn):
            load_csv(f, CsvSchema(response="y", covariates=("x1",)))

    def test_group_label_map_sorted(self, tmp_path):
        f = write_csv(tmp_path / "t.csv", "y,g\n1,zeta\n2,alpha\n3,zeta\n")
        ds = load_csv(f, CsvSchema(response="y", groups=("g",)))
        assert ds.label_maps[0] == ("alpha", "zeta")
        np.testing.assert_array_equal(ds.groups[:, 0], [1, 0, 1])

    def test_offsets_centered_logs(self, tmp_path):
        f = write_csv(tmp_path / "t.csv", "y,n\n1,10\n2,100\n3,1000\n")
        ds = load_csv(f, CsvSchema(response="y", offset="n"))
        assert ds.offsets.mean() == pytest.approx(0.0, abs=1e-12)
        assert ds.offset_log_variance == pytest.approx(np.var(np.log([10, 100, 1000]), ddof=1))

    def test_gambia_format(self):
        schema = CsvSchema(response="pos",
                           covariates=("age", "netuse", "treated", "green", "phc"),
                           groups=("x",), coords=("x", "y"))
        ds = load_csv(bundled_data_path("gambia_synthetic"), schema)
        assert ds.n == 2035 and ds.p == 5
        assert len(ds.label_maps[0]) == 65
        assert ds.coords.shape == (65, 2)
        assert np.max(np.abs(ds.X.mean(axis=0))) < 1e-10
        assert np.max(np.abs(ds.X.var(axis=0, ddof=1) - 1)) < 1e-8
        # the fixture is calibrated so g(ybar) = -0.59
        ybar = ds.y.mean()
        assert math.log(ybar / (1 - ybar)) == pytest.approx(-0.59, abs=0.005)

    def test_tiny_fixture(self):
        schema = CsvSchema(response="pos", covariates=("age", "netuse"),
                           groups=("x",), coords=("x", "y"))
        ds = load_csv(bundled_data_path("tiny_spatial"), schema)
        assert ds.n == 30 and len(ds.label_maps[0]) == 6

    def test_round_trip(self, tmp_path):
        schema = CsvSchema(response="pos", covariates=("age", "netuse"),
                           groups=("x",), coords=("x", "y"))
        ds = load_csv(bundled_data_path("tiny_spatial"), schema)
        out = tmp_path / "round.csv"
        ds.to_csv(out)
        back = load_csv(out, CsvSchema(response="y",
                                       covariates=("age", "netuse"), groups=("x",)))
        # stored values are post-standardization; a second load recenters a
        # zero-mean unit-variance column to itself
        np.testing.assert_allclose(back.X, ds.X, atol=1e-12)
        np.testing.assert_array_equal(back.groups, ds.groups)
        np.testing.assert_allclose(back.y, ds.y, atol=1e-12)


class TestSpatial:
    def test_distances(self):
        coords = np.array([[0.0, 0.0], [3.0, 4.0]])
        np.testing.assert_allclose(spatial_distances(coords),
                                   [[0, 5], [5, 0]])

    def test_exp_correlation_definition(self):
        d = np.array([[0.0, 2.0], [2.0, 0.0]])
        C = exp_correlation(d, rho=2.0)
        assert C[0, 1] == pytest.approx(math.exp(-1.0))
        assert C[0, 0] == 1.0

    def test_limits(self):
        d = spatial_distances(np.array([[0, 0], [1, 1], [5, 2.0]]))
        near_one = exp_correlation(d, rho=1e9)
        np.testing.assert_allclose(near_one, 1.0, atol=1e-8)
        near_eye = exp_correlation(d, rho=1e-9)
        np.testing.assert_allclose(near_eye, np.eye(3), atol=1e-12)

    def test_identical_sites_flagged(self):
        d = spatial_distances(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.warns(SingularCorrelationWarning):
            C = exp_correlation(d, rho=1.0)
        np.testing.assert_allclose(C, 1.0)


def test_dataset_defaults():
    ds = Dataset(y=[1.0, 2.0], X=np.zeros((2, 0)), groups=np.zeros((2, 0)))
    assert ds.n == 2 and ds.p == 0
    assert ds.x_scale.shape == (0,)
