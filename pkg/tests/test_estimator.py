import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from daffnet import synthdata
from daffnet.errors import ContractViolation
from daffnet.estimator import DAFFNetRegistration
from daffnet.validation import check_labels, check_pairs


def make_xy(n=2):
    samples = [synthdata.gen_pair(s) for s in range(n)]
    X = np.stack([[s.moving.volume, s.fixed.volume] for s in samples])
    y = np.stack([[s.moving.labels, s.fixed.labels] for s in samples])
    return X, y


def test_params_round_trip():
    est = DAFFNetRegistration(variant="CcSReg", iterations=5, lambda_fuse=2.0)
    p = est.get_params()
    assert p["variant"] == "CcSReg" and p["iterations"] == 5 and p["lambda_fuse"] == 2.0
    assert clone(est).get_params() == p
    est.set_params(iterations=7)
    assert est.iterations == 7


def test_not_fitted():
    X, _ = make_xy(1)
    with pytest.raises(NotFittedError):
        DAFFNetRegistration().transform(X)


def test_fit_transform_predict_score():
    X, y = make_xy(2)
    est = DAFFNetRegistration(variant="AuxReg", iterations=1).fit(X, y)
    fields = est.transform(X)
    assert fields.shape == (2, 3, 32, 32, 32)
    warped = est.predict(X)
    assert warped.shape == (2, 32, 32, 32)
    assert 0 <= est.score(X, y) <= 100
    assert len(est.history_) == 1


def test_label_variant_requires_y():
    X, _ = make_xy(1)
    with pytest.raises(ValueError, match="label"):
        DAFFNetRegistration(variant="DAFFNet").fit(X)


def test_validation_helpers():
    with pytest.raises(ContractViolation):
        check_pairs(np.zeros((1, 3, 32, 32, 32)))
    with pytest.raises(ContractViolation):
        check_pairs(np.zeros((1, 2, 20, 32, 32)))
    bad = np.zeros((1, 2, 32, 32, 32))
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ContractViolation):
        check_pairs(bad)
    X = check_pairs(np.zeros((1, 2, 32, 32, 32)))
    assert X.dtype == np.float32
    with pytest.raises(ContractViolation):
        check_labels(np.full(X.shape, 5), X, 4)
    with pytest.raises(ContractViolation):
        check_labels(np.full(X.shape, 0.5), X, 4)
    assert check_labels(np.ones(X.shape), X, 4).dtype == np.int64
