import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenrate import autograd as ag
from tokenrate.autograd import ShapeError, Tensor
from tokenrate.proxy import (
    RateParam,
    alpha,
    attention_mask,
    candidate_rates,
    combine_masks,
    hard_mask,
    is_prefix,
    kept_count,
    masked_softmax,
    probs,
    token_mask,
    token_probs,
)

from conftest import central_diff, rel_err


def onehot(n, j):
    """1-based index ``j`` as in the candidate numbering C_j = (j-1)/N."""
    v = np.zeros(n)
    v[j - 1] = 1.0
    return v


def pi_oracle(rho: np.ndarray) -> np.ndarray:
    """Token-level removal probabilities written out term by term."""
    n = len(rho)
    out = np.zeros(n)
    for k in range(2, n + 1):
        out[k - 1] = sum(rho[i - 1] for i in range(n + 2 - k, n + 1))
    return out


# --- probabilities and expected rate ----------------------------------------------


def test_uniform_logits():
    np.testing.assert_allclose(probs(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_large_logit_limit():
    logits = np.zeros(5)
    logits[2] = 60.0
    np.testing.assert_allclose(probs(Tensor(logits)).data, onehot(5, 3), atol=1e-20)


def test_two_logits():
    np.testing.assert_allclose(probs(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])


def test_candidates():
    np.testing.assert_array_equal(candidate_rates(4), [0, 0.25, 0.5, 0.75])


def test_alpha_examples():
    assert alpha(Tensor(onehot(6, 1))).item() == 0.0
    for j in range(1, 7):
        assert alpha(Tensor(onehot(6, j))).item() == (j - 1) / 6
    assert alpha(Tensor([0.25] * 4)).item() == pytest.approx(0.375, abs=1e-15)


def test_alpha_gradient_matches_fd(rng):
    for _ in range(20):
        z = rng.normal(size=7)
        t = Tensor(z, requires_grad=True)
        alpha(probs(t)).backward()
        num = central_diff(lambda v: alpha(probs(Tensor(v))).item(), z)
        assert rel_err(t.grad, num) <= 1e-6


# --- token-level probabilities and masks ------------------------------------------------


def test_token_probs_onehot():
    n = 6
    for j in range(1, n + 1):
        pi = token_probs(Tensor(onehot(n, j))).data
        expect = [1.0 if k >= n + 2 - j else 0.0 for k in range(1, n + 1)]
        np.testing.assert_array_equal(pi, expect)


def test_token_probs_example():
    np.testing.assert_allclose(token_probs(Tensor([0.5, 0.25, 0.25])).data, [0, 0.25, 0.5])


def test_token_probs_last_entry(rng):
    rho = rng.dirichlet(np.ones(9))
    assert token_probs(Tensor(rho)).data[-1] == pytest.approx(1 - rho[0], abs=1e-15)


def test_token_probs_matches_oracle(rng):
    for _ in range(50):
        rho = rng.dirichlet(np.ones(8))
        np.testing.assert_allclose(token_probs(Tensor(rho)).data, pi_oracle(rho), atol=1e-15)


def test_mask_threshold_example():
    m = token_mask(Tensor([0.0, 0.25, 0.5]), Tensor(0.25))
    np.testing.assert_array_equal(m.data, [1, 0, 0])


def test_mask_alpha_zero_keeps_all():
    np.testing.assert_array_equal(hard_mask(np.array([0.0, 0.0, 0.3]), 0.0), [1, 1, 1])


def test_onehot_kept_count():
    n = 11
    for j in range(1, n + 1):
        rho = Tensor(onehot(n, j))
        m = token_mask(token_probs(rho), alpha(rho))
        assert kept_count(m.data) == n - j + 1


def test_mask_gradient_is_minus_one_per_pi():
    # the mask marks kept tokens, so its soft surrogate is 1 - pi
    pi = Tensor([0.0, 0.2, 0.6], requires_grad=True)
    c = np.array([1.0, 2.0, 3.0])
    ag.sum_(token_mask(pi, Tensor(0.5)) * Tensor(c)).backward()
    np.testing.assert_array_equal(pi.grad, -c)


def test_combine_masks():
    ones = Tensor(np.ones(3))
    np.testing.assert_array_equal(combine_masks(ones, ones, ones).data, [1, 1, 1])
    prev = Tensor([1.0, 0.0, 1.0])
    np.testing.assert_array_equal(combine_masks(prev, ones, ones).data[1], 0)
    out = combine_masks(Tensor([1.0, 1, 0]), Tensor([1.0, 0, 1]), Tensor([1.0, 1, 1]))
    np.testing.assert_array_equal(out.data, [1, 0, 0])
    with pytest.raises(ShapeError):
        combine_masks(Tensor([1.0, 1]), Tensor([1.0, 1, 1]))


def test_attention_mask_examples():
    np.testing.assert_array_equal(attention_mask(Tensor(np.ones(3))).data, np.ones((3, 3)))
    np.testing.assert_array_equal(attention_mask(Tensor([1.0, 0.0])).data, [[1, 0], [1, 1]])
    m = attention_mask(Tensor([1.0, 0.0, 0.0, 1.0])).data
    np.testing.assert_array_equal(np.diag(m), np.ones(4))


def test_masked_softmax_examples(rng):
    s = rng.normal(size=(4, 4))
    np.testing.assert_allclose(
        masked_softmax(Tensor(s), Tensor(np.ones((4, 4)))).data, ag.softmax(Tensor(s)).data, atol=1e-15
    )
    out = masked_softmax(Tensor(np.zeros((3, 3))), attention_mask(Tensor([1.0, 1.0, 0.0]))).data
    np.testing.assert_allclose(out[0], [0.5, 0.5, 0.0])
    # the dropped token still attends to the kept tokens and itself
    assert out[2].sum() == pytest.approx(1.0)
    assert out[2, 2] > 0


# --- RateParam ------------------------------------------------------------------------


def test_rate_param_uniform_init():
    rp = RateParam(5)
    np.testing.assert_allclose(rp.rho().data, [0.2] * 5)
    assert rp.name == "prune.0"
    with pytest.raises(ValueError):
        RateParam(5, role="shuffle")
    with pytest.raises(ShapeError):
        RateParam(5, logits=Tensor(np.zeros(4)))


def test_rate_param_hard_and_expected():
    logits = np.full(10, -50.0)
    logits[3] = 50.0
    rp = RateParam(10, logits=Tensor(logits, requires_grad=True))
    assert rp.hard_kept() == 7
    assert rp.expected_kept() == pytest.approx(7.0)


# --- properties ---------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_simplex_draws(n, seed):
    rho = np.random.default_rng(seed).dirichlet(np.full(n, 0.3))
    t = Tensor(rho)
    pi = token_probs(t).data
    assert pi[0] == 0.0
    assert np.all(np.diff(pi) >= -1e-15)
    m = token_mask(token_probs(t), alpha(t)).data
    assert m[0] == 1.0
    assert is_prefix(m)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=2, max_size=30))
def test_probs_on_simplex(logits):
    rho = probs(Tensor(logits)).data
    assert np.all(rho >= 0)
    assert rho.sum() == pytest.approx(1.0, abs=1e-12)
    a = alpha(Tensor(rho)).item()
    assert 0.0 <= a <= (len(logits) - 1) / len(logits) + 1e-12
