import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from pode.errors import InvalidPriorError
from pode.prior import IbmPrior, assemble_prior, ibm_transition, slot_scales, unit_transition


def test_p2_unit_matrices_by_hand():
    tp = ibm_transition(2, 1.0, 1.0)
    np.testing.assert_array_equal(tp.Q, [[1.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(tp.R, [[1 / 3, 1 / 2], [1 / 2, 1.0]], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(tp.c, [0.0, 0.0])


def test_p1_is_brownian_motion():
    tp = ibm_transition(1, 2.0, 0.5)
    np.testing.assert_allclose(tp.Q, [[1.0]])
    np.testing.assert_allclose(tp.R, [[4.0 * 0.5]])


def _continuous(p, sigma, dt):
    """Van Loan: discretize dX = F X dt + L dB by a matrix exponential."""
    F = np.diag(np.ones(p - 1), 1)
    L = np.zeros((p, 1))
    L[-1, 0] = sigma
    M = np.block([[-F, L @ L.T], [np.zeros((p, p)), F.T]]) * dt
    E = expm(M)
    Q = E[p:, p:].T
    return Q, Q @ E[:p, p:]


@pytest.mark.parametrize("p", [1, 2, 3, 4])
@pytest.mark.parametrize("dt", [0.01, 0.3, 1.0])
def test_matches_van_loan(p, dt):
    tp = ibm_transition(p, 1.7, dt)
    Q, R = _continuous(p, 1.7, dt)
    np.testing.assert_allclose(tp.Q, Q, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(tp.R, R, rtol=1e-9, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(p=st.sampled_from([2, 3, 4]), dt=st.sampled_from([0.01, 0.1, 1.0]),
       sigma=st.floats(0.1, 10.0))
def test_semigroup(p, dt, sigma):
    one = ibm_transition(p, sigma, dt)
    two = ibm_transition(p, sigma, 2 * dt)
    np.testing.assert_allclose(one.Q @ one.Q, two.Q, rtol=1e-12, atol=1e-12)
    comp = one.Q @ one.R @ one.Q.T + one.R
    np.testing.assert_allclose(comp, two.R, rtol=1e-12, atol=1e-12 * np.abs(two.R).max())


@given(p=st.integers(1, 5), dt=st.floats(1e-3, 2.0), sigma=st.floats(1e-2, 1e2))
def test_noise_is_positive_definite(p, dt, sigma):
    R = ibm_transition(p, sigma, dt).R
    np.testing.assert_allclose(R, R.T)
    assert np.all(np.linalg.eigvalsh(R / sigma**2) > -1e-14)


def test_zero_step_is_identity():
    tp = ibm_transition(3, 1.0, 0.0)
    np.testing.assert_array_equal(tp.Q, np.eye(3))
    np.testing.assert_array_equal(tp.R, np.zeros((3, 3)))


def test_block_assembly_and_slot_scales():
    prior = IbmPrior((2, 3), (1.0, 2.0))
    tp = assemble_prior(prior, 0.1)
    assert tp.Q.shape == (5, 5)
    np.testing.assert_allclose(tp.R[2:, 2:], ibm_transition(3, 2.0, 0.1).R)
    assert np.all(tp.R[:2, 2:] == 0)
    Q, R = unit_transition(prior.orders, 0.1)
    s = slot_scales(prior.orders, np.asarray(prior.scales))
    np.testing.assert_allclose(R * np.outer(s, s), tp.R)
    np.testing.assert_allclose(Q, tp.Q)


@pytest.mark.parametrize("orders,scales", [((2,), (0.0,)), ((0,), (1.0,)), ((2, 2), (1.0,)), ((), ())])
def test_invalid_prior(orders, scales):
    with pytest.raises(InvalidPriorError):
        IbmPrior(orders, scales)


def test_invalid_transition_args():
    with pytest.raises(InvalidPriorError):
        ibm_transition(2, -1.0, 0.1)
    with pytest.raises(InvalidPriorError):
        ibm_transition(2, 1.0, -0.1)
