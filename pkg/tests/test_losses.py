import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from todcl.losses import (
    LossWeights,
    contrastive_loss,
    generation_loss,
    groupwise_loss,
    pointwise_loss,
    positive_indices,
    total_loss,
    variant_loss,
)

from . import oracles


def batch(rng, n, d):
    return rng.normal(size=(n, d)), rng.normal(size=(n, d))


def test_pointwise_identity_pair_value():
    # N=2, contexts and states both the identity, T=0.5
    eye = np.eye(2)
    # denominator per row: e^0 (other context) + e^2 (own state) + e^0 (other state)
    expected = math.log(2 + math.exp(2.0)) - 2.0
    assert pointwise_loss(eye, eye, 0.5) == pytest.approx(expected, abs=1e-10)
    assert pointwise_loss(eye, eye, 0.5) == pytest.approx(0.2395447662, abs=1e-9)


def test_groupwise_identity_pair_value():
    eye = np.eye(2)
    assert groupwise_loss(eye, eye, 0.5) == pytest.approx(math.log(2 + math.e**2), abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_matches_scalar_oracles(seed):
    rng = np.random.default_rng(seed)
    C, S = batch(rng, 5, 7)
    pos = positive_indices(5)
    assert pointwise_loss(C, S, 0.3) == pytest.approx(oracles.pointwise(C.tolist(), S.tolist(), 0.3), abs=1e-10)
    assert groupwise_loss(C, S, 0.3, pos) == pytest.approx(
        oracles.groupwise(C.tolist(), S.tolist(), 0.3, pos.tolist()), abs=1e-10
    )
    assert variant_loss(C, S) == pytest.approx(oracles.variant(C.tolist(), S.tolist()), abs=1e-12)


def test_single_pair_pointwise_is_zero():
    rng = np.random.default_rng(0)
    C, S = batch(rng, 1, 4)
    assert pointwise_loss(C, S, 0.1) == 0.0


def test_groupwise_needs_two_rows():
    with pytest.raises(ValueError):
        groupwise_loss(np.ones((1, 3)), np.ones((1, 3)), 0.5)
    with pytest.raises(ValueError):
        positive_indices(1)


def test_zero_norm_row_rejected():
    C = np.array([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="zero-norm"):
        pointwise_loss(C, np.ones((2, 2)), 0.5)


def test_bad_positive_rejected():
    C, S = batch(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        groupwise_loss(C, S, 0.5, positives=[0, 2, 1])


def test_large_temperature_limit():
    C, S = batch(np.random.default_rng(3), 4, 6)
    assert pointwise_loss(C, S, 1e9) == pytest.approx(math.log(7), abs=1e-6)


def test_random_positive_rule_never_self():
    rng = np.random.default_rng(0)
    for n in (2, 3, 8):
        for _ in range(50):
            pos = positive_indices(n, "random", rng)
            assert np.all(pos != np.arange(n)) and np.all((0 <= pos) & (pos < n))


def test_variant_bounds():
    C = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert variant_loss(C, C) == pytest.approx(0.0, abs=1e-12)
    assert variant_loss(C, -C) == pytest.approx(2.0)


def test_generation_loss_matches_softmax_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 5))
    targets = np.array([1, 4, 0])
    assert generation_loss(logits, targets, pad_id=-1) == pytest.approx(
        oracles.token_nll(logits.tolist(), targets.tolist(), -1), abs=1e-12
    )


def test_generation_loss_ignores_padding():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 6))
    full = generation_loss(logits[:2], np.array([3, 2]), pad_id=0)
    padded = generation_loss(logits, np.array([3, 2, 0, 0]), pad_id=0)
    assert padded == pytest.approx(full, abs=1e-12)
    with pytest.raises(ValueError):
        generation_loss(logits, np.zeros(4, dtype=int), pad_id=0)


def test_torch_path_matches_autograd_reference():
    torch.manual_seed(0)
    C = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    S = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    T = 0.5
    loss = pointwise_loss(C, S, T)
    loss.backward()
    gC, gS = C.grad.clone(), S.grad.clone()

    C2, S2 = C.detach().clone().requires_grad_(), S.detach().clone().requires_grad_()
    u, v = torch.nn.functional.normalize(C2, dim=1), torch.nn.functional.normalize(S2, dim=1)
    cc = (u @ u.T) / T
    cs = (u @ v.T) / T
    cc = cc.masked_fill(torch.eye(5, dtype=torch.bool), float("-inf"))
    ref = (torch.logsumexp(torch.cat([cc, cs], 1), 1) - cs.diagonal()).mean()
    ref.backward()
    assert float(loss.detach()) == pytest.approx(float(ref.detach()), abs=1e-12)
    assert torch.allclose(gC, C2.grad, atol=1e-10) and torch.allclose(gS, S2.grad, atol=1e-10)


def test_float32_inputs_keep_dtype():
    C = torch.randn(4, 3, requires_grad=True)
    loss = groupwise_loss(C, torch.randn(4, 3), 0.5)
    assert loss.dtype == torch.float32
    loss.backward()
    assert C.grad.dtype == torch.float32


def test_dispatch_and_total():
    C, S = batch(np.random.default_rng(0), 4, 3)
    assert contrastive_loss("mars_p", C, S, 0.1) == pointwise_loss(C, S, 0.1)
    assert contrastive_loss("mars_g", C, S, 0.5) == groupwise_loss(C, S, 0.5)
    assert contrastive_loss("mars_variant", C, S, 0.5) == variant_loss(C, S)
    with pytest.raises(ValueError):
        contrastive_loss("baseline", C, S, 0.1)
    w = LossWeights(1.0, 0.1, "mars_g")
    assert total_loss(1.0, 2.0, 3.0, 4.0, w) == pytest.approx(1.0 + 3.0 + 2.0 + 0.4)
    assert total_loss(1.0, 2.0, 3.0, 4.0, LossWeights(mode="baseline")) == 3.0
    with pytest.raises(ValueError):
        LossWeights(mode="other")
    with pytest.raises(ValueError):
        LossWeights(lambda_dst=-1)


vectors = st.integers(min_value=2, max_value=6).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(min_value=0, max_value=10_000))
)


@settings(max_examples=60, deadline=None)
@given(vectors, st.floats(min_value=0.05, max_value=5.0), st.floats(min_value=0.1, max_value=50.0))
def test_rescaling_invariance(nseed, T, scale):
    n, seed = nseed
    C, S = batch(np.random.default_rng(seed), n, 4)
    rows = np.random.default_rng(seed + 1).uniform(0.1, 10, size=(n, 1))
    assert pointwise_loss(C * rows, S * scale, T) == pytest.approx(pointwise_loss(C, S, T), abs=1e-9)
    assert groupwise_loss(C * scale, S * rows, T) == pytest.approx(groupwise_loss(C, S, T), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(vectors, st.floats(min_value=0.05, max_value=5.0))
def test_losses_nonnegative_and_bounded_below(nseed, T):
    n, seed = nseed
    C, S = batch(np.random.default_rng(seed), n, 4)
    # every numerator term also sits in the denominator, so the loss is positive
    assert pointwise_loss(C, S, T) > 0
    assert groupwise_loss(C, S, T) > 0
    assert 0 <= variant_loss(C, S) <= 2


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=10_000))
def test_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    C, S = batch(rng, n, 3)
    perm = rng.permutation(n)
    assert pointwise_loss(C[perm], S[perm], 0.2) == pytest.approx(pointwise_loss(C, S, 0.2), abs=1e-10)
