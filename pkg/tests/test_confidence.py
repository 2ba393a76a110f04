import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from deer.confidence import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    DEFAULT_N_PROMPTS,
    ConfidenceDomainError,
    TrialAnswer,
    calibrate,
    confidence_arithmetic,
    confidence_geomean,
    decide_exit,
)

probs = st.lists(st.floats(1e-4, 1.0), min_size=1, max_size=16)


def test_defaults():
    assert (DEFAULT_LAMBDA, DEFAULT_ALPHA, DEFAULT_N_PROMPTS) == (0.95, 1.0, 4)


def test_geomean_hand_case():
    assert confidence_geomean([0.5, 0.98]) == pytest.approx(0.7, abs=1e-12)


def test_single_token_is_identity():
    assert confidence_geomean([0.37]) == 0.37


@given(probs)
def test_geomean_properties(ps):
    g = confidence_geomean(ps)
    assert min(ps) <= g <= max(ps)
    assert g <= confidence_arithmetic(ps) + 1e-12
    assert g == pytest.approx(math.prod(ps) ** (1 / len(ps)), abs=1e-9)


def test_long_answer_does_not_underflow():
    assert confidence_geomean([1e-3] * 500) == pytest.approx(1e-3)


@pytest.mark.parametrize("bad", [[], [0.0], [1.2], [-0.1]])
def test_geomean_domain(bad):
    with pytest.raises(ConfidenceDomainError):
        confidence_geomean(bad)


def test_unparsed_trial_scores_zero():
    t = TrialAnswer.score("", [], inducer_id=0)
    assert t.confidence == 0.0 and not decide_exit(t.confidence).exit


def test_calibrate_hand_cases():
    c = calibrate([1.0, 0.8], 1.0)
    assert (c.c_avg, c.c_cali) == pytest.approx((0.9, 0.8))
    assert c.c_mad == pytest.approx(0.1)
    c = calibrate([1.0, 0.8, 0.9, 0.9], 1.0)
    assert (c.c_avg, c.c_mad, c.c_cali) == pytest.approx((0.9, 0.05, 0.85))


def test_calibrate_zero_deviation():
    c = calibrate([0.97] * 4, 3.0)
    assert c.c_mad == 0 and c.c_cali == c.c_avg == pytest.approx(0.97)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0, 5))
def test_calibrate_bounded_by_mean(cs, alpha):
    c = calibrate(cs, alpha)
    assert c.c_cali <= c.c_avg + 1e-15


def test_calibrate_domain():
    with pytest.raises(ConfidenceDomainError):
        calibrate([])
    with pytest.raises(ConfidenceDomainError):
        calibrate([0.5], -1)
    with pytest.raises(ConfidenceDomainError):
        calibrate([1.5])


def test_exit_is_strict():
    assert not decide_exit(0.95, 0.95).exit
    assert decide_exit(math.nextafter(0.95, 1), 0.95).exit


@pytest.mark.parametrize("lam", [0.0, 1.0, -0.1])
def test_lambda_domain(lam):
    with pytest.raises(ConfidenceDomainError):
        decide_exit(0.5, lam)


def test_random_monotone_in_lambda():
    rng = random.Random(3)
    for _ in range(1000):
        s, a, b = rng.random(), rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99)
        lo, hi = sorted((a, b))
        assert decide_exit(s, lo).exit or not decide_exit(s, hi).exit
