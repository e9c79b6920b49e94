import pytest

from finedrop.errors import ValidationError
from finedrop.stats import five_number_summary, normalized_entropy, quantile_linear, sign_test_p


def test_quartiles_of_one_to_four():
    vals = [1.0, 2.0, 3.0, 4.0]
    assert quantile_linear(vals, 0.25) == pytest.approx(1.75)
    assert quantile_linear(vals, 0.5) == pytest.approx(2.5)
    assert quantile_linear(vals, 0.75) == pytest.approx(3.25)


def test_five_number_summary_endpoints():
    s = five_number_summary([4.0, 1.0, 3.0, 2.0])
    assert s["min"] == 1.0 and s["max"] == 4.0 and s["median"] == 2.5


def test_quantile_rejects_bad_q_and_empty():
    with pytest.raises(ValidationError):
        quantile_linear([1.0], 1.5)
    with pytest.raises(ValidationError):
        quantile_linear([], 0.5)


def test_normalized_entropy_bounds():
    assert normalized_entropy([1.0, 1.0, 1.0, 1.0]) == pytest.approx(1.0)
    assert normalized_entropy([1.0, 0.0, 0.0, 0.0]) == pytest.approx(0.0)
    mixed = normalized_entropy([4.0, 1.0, 1.0])
    assert 0.0 < mixed < 1.0


def test_sign_test_matches_binomial_tail():
    # P(X >= 9), X ~ Binomial(10, 1/2): (C(10,9) + C(10,10)) / 2^10
    assert sign_test_p(9, 10) == pytest.approx((10 + 1) / 1024)
    assert sign_test_p(10, 10) == pytest.approx(1 / 1024)
    assert sign_test_p(0, 10) == pytest.approx(1.0)


def test_sign_test_validates():
    with pytest.raises(ValidationError):
        sign_test_p(5, 0)
    with pytest.raises(ValidationError):
        sign_test_p(11, 10)
