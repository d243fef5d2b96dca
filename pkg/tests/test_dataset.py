import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialfh.dataset import (DataError, SurveyDataset, Transform, read_data_csv, read_truth_csv,
                               write_data_csv, write_truth_csv)
from spatialfh.lattice import LatticeError


def _csv(rows, p=1):
    head = "area_id,outcome,estimate,moe_or_var,var_flag," + ",".join(f"covariate_{k + 1}" for k in range(p))
    return head + "\n" + "\n".join(rows) + "\n"


def test_read_moe_and_var_rows(path3):
    text = _csv(["A,inc,10,1.645,moe,1.5", "B,inc,20,0.04,var,2.5", "C,inc,5,3.29,moe,3.5",
                 "A,pov,1,0.1,var,0", "B,pov,2,0.1,var,0", "C,pov,3,0.1,var,0"])
    ds = read_data_csv(text, path3)
    assert ds.outcomes == ["inc", "pov"]
    np.testing.assert_allclose(ds.y[:, 0], np.log(100 * np.array([10, 20, 5])))
    np.testing.assert_allclose(ds.sampling_cov[:, 0, 0], [0.01, 0.04, 0.16])
    np.testing.assert_array_equal(ds.X[0], [[1, 1.5], [1, 2.5], [1, 3.5]])
    assert ds.covariate_names == ["intercept", "covariate_1"]


def test_identity_transform_moe(path3):
    text = _csv(["A,y,1,1.645,moe,0", "B,y,2,3.29,moe,0", "C,y,3,0.5,var,0"])
    ds = read_data_csv(text, path3, Transform("none"))
    np.testing.assert_allclose(ds.sampling_cov[:, 0, 0], [1.0, 4.0, 0.5])


@pytest.mark.parametrize("rows,match", [
    (["A,y,1,1,var,0", "B,y,1,1,var,0"], "missing"),
    (["A,y,1,1,var,0", "A,y,1,1,var,0", "B,y,1,1,var,0", "C,y,1,1,var,0"], "duplicate"),
    (["A,y,1,1,sd,0", "B,y,1,1,var,0", "C,y,1,1,var,0"], "var_flag"),
    (["A,y,x,1,var,0", "B,y,1,1,var,0", "C,y,1,1,var,0"], "non-numeric"),
    (["A,y,1,1,var", "B,y,1,1,var,0", "C,y,1,1,var,0"], "fields"),
    (["A,y,-1,1,var,0", "B,y,1,1,var,0", "C,y,1,1,var,0"], "positive"),
    (["A,y,1,0,var,0", "B,y,1,1,var,0", "C,y,1,1,var,0"], "positive definite"),
])
def test_bad_rows(path3, rows, match):
    with pytest.raises(DataError, match=match):
        read_data_csv(_csv(rows), path3)


def test_bad_header_and_unknown_area(path3):
    with pytest.raises(DataError, match="header"):
        read_data_csv("area,outcome,estimate,moe_or_var,var_flag\n", path3)
    with pytest.raises(LatticeError):
        read_data_csv(_csv(["Z,y,1,1,var,0"]), path3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_write_read_roundtrip(seed):
    from spatialfh.lattice import grid_lattice

    adj = grid_lattice(2, 3)
    rng = np.random.default_rng(seed)
    X = [np.column_stack([np.ones(6), rng.normal(size=(6, 2))])] * 2
    ds = SurveyDataset(adj, rng.normal(size=(6, 2)), rng.uniform(0.01, 1, size=(6, 2)), X)
    back = read_data_csv(write_data_csv(ds), adj, Transform("none"))
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.sampling_cov, ds.sampling_cov)
    np.testing.assert_array_equal(back.X[1], ds.X[1])


def test_truth_roundtrip(path3):
    theta = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    text = write_truth_csv(theta, path3.ids, ["a", "b"])
    np.testing.assert_array_equal(read_truth_csv(text, path3, ["a", "b"], Transform("none")), theta)
    np.testing.assert_allclose(read_truth_csv(text, path3, ["a", "b"]), np.log(100 * theta))
    with pytest.raises(DataError, match="missing"):
        read_truth_csv("\n".join(text.splitlines()[:-1]), path3, ["a", "b"], Transform("none"))
    with pytest.raises(DataError, match="unknown outcome"):
        read_truth_csv(text, path3, ["a"], Transform("none"))


def test_dataset_validation(path3):
    with pytest.raises(DataError, match="areas"):
        SurveyDataset(path3, np.zeros((2, 1)), np.ones((2, 1)), [np.ones((2, 1))])
    with pytest.raises(DataError, match="non-finite"):
        SurveyDataset(path3, np.array([0, np.nan, 0]), np.ones((3, 1)), [np.ones((3, 1))])
    with pytest.raises(DataError, match="design"):
        SurveyDataset(path3, np.zeros(3), np.ones((3, 1)), [np.ones((3, 0))])
    ds = SurveyDataset(path3, np.zeros(3), np.ones(3)[:, None], [np.ones(3)])
    assert ds.m == 1 and ds.X[0].shape == (3, 1) and ds.outcomes == ["1"]


def test_drop_names_isolated_area(path3):
    ds = SurveyDataset(path3, np.zeros(3), np.ones((3, 1)), [np.ones(3)])
    assert ds.drop(0).ids == ("B", "C")
    with pytest.raises(LatticeError, match="'B'"):
        ds.drop(1)
