import numpy as np
import pytest
from scipy import stats

from calikit import data as D
from calikit import kernels as K
from calikit import metrics as M


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_small_numeric_csv(tmp_path):
    p = _write(tmp_path, "a,b,y\n1,2.5,0.1\n-3,4,0.2\n5,6e-1,0.3\n")
    ds = D.load_csv(p, "y", "regression")
    np.testing.assert_array_equal(ds.features, [[1, 2.5], [-3, 4], [5, 0.6]])
    np.testing.assert_array_equal(ds.labels, [0.1, 0.2, 0.3])
    assert ds.columns == ["a", "b"] and ds.dropped_rows == 0


def test_categories_are_one_hot_in_lexicographic_order(tmp_path):
    p = _write(tmp_path, "c,y\nb,1\na,2\nb,3\n")
    ds = D.load_csv(p, "y", "regression")
    assert ds.columns == ["c=a", "c=b"]
    np.testing.assert_array_equal(ds.features, [[0, 1], [1, 0], [0, 1]])


def test_unparseable_row_is_dropped(tmp_path):
    p = _write(tmp_path, "a,c,b\n1,foo,2\n1,foo,NaN\n3,bar,4\n")
    ds = D.load_csv(p, "a", "regression")
    assert len(ds) == 2 and ds.dropped_rows == 1


def test_csv_errors(tmp_path):
    p = _write(tmp_path, "a,b\n1,2\n")
    with pytest.raises(KeyError, match="target"):
        D.load_csv(p, "y", "regression")
    with pytest.raises(ValueError, match="no usable rows|not numeric"):
        D.load_csv(_write(tmp_path, "a,y\n1,nan\n", "nan.csv"), "y", "regression")
    rows = "".join(f"{i},c{i}\n" for i in range(1001))
    with pytest.raises(ValueError, match="1000"):
        D.load_csv(_write(tmp_path, "a,y\n" + rows, "many.csv"), "y", "classification")


def test_classification_labels_are_contiguous(tmp_path):
    p = _write(tmp_path, "a,y\n1,cat\n2,dog\n3,cat\n4,ant\n")
    ds = D.load_csv(p, "y", "classification")
    assert ds.classes == ["ant", "cat", "dog"]
    np.testing.assert_array_equal(ds.labels, [1, 2, 1, 0])


def test_split_sizes_and_determinism():
    ds = D.synth_heteroscedastic(100, 0)
    tr, va, te = D.split_indices(10, 3)
    assert (len(tr), len(va), len(te)) == (7, 1, 2)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(10))
    a = D.split(ds, 4)
    b = D.split(ds, 4)
    for u, v in zip(a, b):
        assert u.features.tobytes() == v.features.tobytes()
    perms = {tuple(D.split_indices(100, s)[0]) for s in range(5)}
    assert len(perms) == 5
    with pytest.raises(ValueError):
        D.split_indices(9, 0)


def test_standardizer_statistics():
    ds = D.synth_heteroscedastic(1000, 1)
    ds.features[:, 3] = 7.0
    tr, va, _ = D.split(ds, 0)
    std = D.Standardizer.fit(tr)
    z = std.x(tr.features)
    np.testing.assert_allclose(z[:, :3].mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(z[:, :3].std(axis=0), 1, atol=1e-6)
    assert std.x_std[3] == 1.0
    np.testing.assert_allclose(std.x_inverse(std.x(va.features)), va.features, atol=1e-12)
    assert np.mean(std.y(tr.labels)) == pytest.approx(0, abs=1e-9)


def test_heteroscedastic_truth_is_calibrated():
    ds = D.synth_heteroscedastic(10_000, 0)
    truth = ds.truth(ds.features)
    pit = truth.cdf(ds.labels)
    assert stats.kstest(pit, "uniform").statistic < 0.02
    assert M.qce(truth, ds.labels) < 0.01
    assert M.dce(truth, ds.labels, float(np.median(ds.labels))) < 0.01


def test_classification_truth_and_priors():
    n = 10_000
    ds = D.synth_classification(n, 4, 0)
    assert M.ece(ds.truth(ds.features), ds.labels) < 0.01
    freq = np.bincount(ds.labels, minlength=4) / n
    assert np.all(np.abs(freq - D.class_priors(4)) < 2 / np.sqrt(n))
    with pytest.raises(ValueError):
        D.synth_classification(100, 11, 0)


def test_geo_truth_has_small_local_error():
    ds = D.synth_geo(10_000, 0)
    std = D.Standardizer.fit(ds)
    phi = std.x(ds.features)[:, :2]
    g = np.linspace(-1.2, 1.2, 5)
    queries = np.array([[a, b] for a in g for b in g])
    _, totals = M.lce(ds.truth(ds.features), ds.labels, phi, queries, K.RBF(0.3))
    assert totals.shape == (25,) and np.all(totals < 0.005)


def test_generators_are_bitwise_reproducible():
    for make in (lambda: D.synth_heteroscedastic(500, 9), lambda: D.synth_geo(500, 9),
                 lambda: D.synth_classification(500, 3, 9)):
        a, b = make(), make()
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
    assert D.synth_heteroscedastic(500, 1).labels.tobytes() != D.synth_heteroscedastic(500, 2).labels.tobytes()


def test_streams_are_independent():
    a = D.make_rng(0, "split").standard_normal(4)
    b = D.make_rng(0, "init").standard_normal(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, D.make_rng(0, "split").standard_normal(4))
