import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tavce.correlation import (
    car_loss,
    covariance,
    flat_cosine,
    make_triplet_indices,
    negative_candidates,
    tavc_objective,
    tavc_triplet_loss,
)
from tavce.errors import ShapeError
from tavce.rng import SeededRng
from tavce.tensor import Tensor


def _cases(seed, n=100):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        d = int(rng.integers(2, 7))
        yield rng, d


def test_covariance_worked_example():
    out = covariance(Tensor([1.0, -1.0]), Tensor([2.0, 0.0])).data
    np.testing.assert_array_equal(out, [[1.0, -1.0], [-1.0, 1.0]])


def test_covariance_of_constant_is_zero():
    v = Tensor(np.full(5, 3.25))
    w = Tensor(np.arange(5.0))
    assert not covariance(v, w).data.any()
    assert not covariance(w, v).data.any()


def test_covariance_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        covariance(Tensor([1.0]), Tensor([2.0]))
    with pytest.raises(ShapeError):
        covariance(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_covariance_matches_oracle():
    for rng, d in _cases(0):
        x, y = rng.normal(size=d), rng.normal(size=d)
        np.testing.assert_allclose(covariance(Tensor(x), Tensor(y)).data, oracles.covariance(x, y), rtol=0, atol=1e-12)


def test_flat_cosine_matches_oracle():
    for rng, d in _cases(1):
        a, b = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        assert abs(flat_cosine(Tensor(a), Tensor(b)).value.item() - oracles.flat_cosine(a, b)) <= 1e-12


def test_triplet_and_objective_match_oracle():
    for rng, d in _cases(2):
        n = int(rng.integers(1, 5))
        batch = [tuple(rng.normal(size=(d, d)) for _ in range(3)) for _ in range(n)]
        single = tavc_triplet_loss(*(Tensor(m) for m in batch[0])).item()
        assert abs(single - oracles.triplet(*batch[0])) <= 1e-12
        got = tavc_objective([tuple(Tensor(m) for m in t) for t in batch]).item()
        assert abs(got - oracles.objective(batch)) <= 1e-12


def test_car_loss_matches_oracle():
    for rng, d in _cases(3):
        n = int(rng.integers(1, 5))
        pairs = [tuple(rng.normal(size=(d, d)) for _ in range(2)) for _ in range(n)]
        got = car_loss([tuple(Tensor(m) for m in p) for p in pairs]).item()
        assert abs(got - oracles.car(pairs)) <= 1e-12


def test_cosine_examples():
    c = Tensor(SeededRng(0).normal((4, 4)))
    assert flat_cosine(c, c).value.item() == pytest.approx(1.0, abs=1e-15)
    assert flat_cosine(c, -c).value.item() == pytest.approx(-1.0, abs=1e-15)
    cos = flat_cosine(Tensor(np.zeros((4, 4))), c)
    assert cos.value.item() == 0.0 and cos.degenerate_count == 1


def test_triplet_anchors():
    c = Tensor(SeededRng(1).normal((3, 3)))
    assert tavc_triplet_loss(c, c, -c).item() == 0.0
    assert tavc_triplet_loss(c, c, c).item() == 2.0
    other = Tensor(SeededRng(2).normal((3, 3)))
    assert tavc_triplet_loss(c, other, other).item() == 2.0
    e1 = Tensor(np.diag([1.0, 0.0]))
    e2 = Tensor(np.diag([0.0, 1.0]))
    assert tavc_triplet_loss(e1, e2, e2).item() == 2.0


def test_objective_sums():
    c = [Tensor(m) for m in SeededRng(4).normal((3, 3, 3))]
    assert tavc_objective([(c[0], c[0], -c[0])]).item() == 0.0
    one = tavc_objective([tuple(c)]).item()
    assert tavc_objective([tuple(c), tuple(c)]).item() == pytest.approx(2 * one, abs=1e-15)


def test_car_anchors():
    c = Tensor(SeededRng(5).normal((3, 3)))
    assert car_loss([(c, c), (c, c)]).item() == pytest.approx(0.0, abs=1e-15)
    assert car_loss([(c, -c)]).item() == pytest.approx(2.0, abs=1e-15)
    e1 = Tensor(np.diag([1.0, 0.0]))
    e2 = Tensor(np.diag([0.0, 1.0]))
    assert car_loss([(e1, e2), (e2, e1)]).item() == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 6), st.floats(0.1, 10))
def test_cosine_bounded_and_scale_invariant(seed, d, k):
    rng = SeededRng(seed)
    a, b = Tensor(rng.normal((d, d))), Tensor(rng.normal((d, d)))
    v = flat_cosine(a, b).value.item()
    assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12
    assert flat_cosine(a * k, b).value.item() == pytest.approx(v, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 6))
def test_triplet_loss_in_range(seed, d):
    rng = SeededRng(seed)
    m = [Tensor(rng.normal((d, d))) for _ in range(3)]
    assert 0.0 <= tavc_triplet_loss(*m).item() <= 4.0 + 1e-12


def test_make_triplet_indices_constraints():
    idx = make_triplet_indices(32, 2, SeededRng(0))
    assert len(idx) == 31
    for t in idx:
        assert 1 <= t.i < 32
        assert abs(t.j - t.i) > 2 and t.j != t.i - 1
        assert t.pos == (t.i - 1, t.i)


def test_make_triplet_indices_errors_and_determinism():
    with pytest.raises(ValueError):
        make_triplet_indices(6, 2, SeededRng(0))
    a = make_triplet_indices(32, 2, SeededRng(9))
    b = make_triplet_indices(32, 2, SeededRng(9))
    assert a == b


@pytest.mark.parametrize("T_len,tau", [(32, 2), (12, 1), (20, 4)])
def test_negative_window_counts(T_len, tau):
    for i in range(1, T_len):
        cands = negative_candidates(T_len, i, tau)
        window = range(max(0, i - tau), min(T_len, i + tau + 1))
        assert len(cands) == T_len - len(window)
        assert not set(cands) & set(window)
