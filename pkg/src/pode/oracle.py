r"""
Exact joint-Gaussian computations for small linear models.

For a linear-Gaussian chain

.. math::

    X_0 \sim N(m_0, P_0), \quad X_n = Q_n X_{n-1} + c_n + \epsilon_n, \quad
    Z_n = W_n X_n + a_n + \eta_n, \quad Y_i = D_i X_{n(i)} + \nu_i,

every quantity is an affine function of the independent noises, so the joint
law of all blocks is available in closed form.  Conditioning is done by a
direct Schur complement, independently of the recursions in
:mod:`pode.kalman`.  Dimensions are capped at ``MAX_DIM`` to keep the dense
algebra cheap.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from pode.errors import ConfigError, SingularMatrixError
from pode.kalman import JITTER, LOG_2PI

MAX_DIM = 200


@dataclass
class JointGaussian:
    """Stacked mean and covariance with named blocks.

    ``blocks[name][k]`` is the index array of the ``k``-th member of a block
    family (``"X"``, ``"Z"``, ``"Y"``).
    """

    mean: np.ndarray
    cov: np.ndarray
    blocks: dict = field(default_factory=dict)

    def index(self, name, members=None):
        fam = self.blocks[name]
        if members is None:
            members = range(len(fam))
        parts = [fam[k] for k in members]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)

    def marginal(self, idx):
        return self.mean[idx], self.cov[np.ix_(idx, idx)]


def build_joint(init_mean, init_cov, trans, obs, meas=None) -> JointGaussian:
    """Joint law of ``(X_0..X_N, Z_0..Z_N, Y_0..Y_M)``.

    Parameters
    ----------
    init_mean, init_cov : array
        Law of ``X_0``.
    trans : list of (Q, c, R)
        Transitions into steps ``1..N``.
    obs : list of (W, a, V) or None
        Observation of each step ``0..N``; ``None`` skips the step.
    meas : list of (n, D, Omega), optional
        Extra observations ``Y_i = D X_n + noise``.
    """
    meas = meas or []
    n_x = len(init_mean)
    N = len(trans)
    if len(obs) != N + 1:
        raise ConfigError("need one observation entry per step 0..N")
    z_dims = [0 if o is None else len(o[1]) for o in obs]
    y_dims = [len(D) for _, D, _ in meas]
    total = n_x * (N + 1) + sum(z_dims) + sum(y_dims)
    if total > MAX_DIM:
        raise ConfigError(f"oracle dimension {total} exceeds the guard of {MAX_DIM}")

    # every variable is  mean + G @ u  with independent noise blocks u
    noise_covs = [np.asarray(init_cov, float)]
    noise_covs += [np.asarray(R, float) for _, _, R in trans]
    noise_covs += [np.asarray(o[2], float) for o in obs if o is not None]
    noise_covs += [np.asarray(Om, float) for _, _, Om in meas]
    n_u = sum(S.shape[0] for S in noise_covs)
    S = sla.block_diag(*noise_covs) if noise_covs else np.zeros((0, 0))

    rows_m, rows_G = [], []
    offset = 0

    def noise_block(k):
        G = np.zeros((k, n_u))
        G[:, offset : offset + k] = np.eye(k)
        return G

    m = np.asarray(init_mean, float)
    G = noise_block(n_x)
    offset += n_x
    xs = [(m, G)]
    for Q, c, R in trans:
        Q = np.asarray(Q, float)
        m = Q @ m + np.asarray(c, float)
        G = Q @ G + noise_block(n_x)
        offset += n_x
        xs.append((m, G))
    zs = []
    for n, o in enumerate(obs):
        if o is None:
            zs.append(None)
            continue
        W, a, V = (np.asarray(v, float) for v in o)
        k = len(a)
        zs.append((W @ xs[n][0] + a, W @ xs[n][1] + noise_block(k)))
        offset += k
    ys = []
    for n, D, Om in meas:
        D = np.asarray(D, float)
        k = D.shape[0]
        ys.append((D @ xs[n][0], D @ xs[n][1] + noise_block(k)))
        offset += k

    blocks = {"X": [], "Z": [], "Y": []}
    pos = 0
    for name, fam in (("X", xs), ("Z", zs), ("Y", ys)):
        for item in fam:
            k = 0 if item is None else len(item[0])
            blocks[name].append(np.arange(pos, pos + k))
            if item is not None:
                rows_m.append(item[0])
                rows_G.append(item[1])
            pos += k
    mean = np.concatenate(rows_m)
    Gall = np.vstack(rows_G)
    cov = Gall @ S @ Gall.T
    return JointGaussian(mean, 0.5 * (cov + cov.T), blocks)


def _chol(S):
    try:
        return sla.cholesky(S, lower=True)
    except np.linalg.LinAlgError:
        k = S.shape[0]
        try:
            return sla.cholesky(S + JITTER * abs(np.trace(S)) / k * np.eye(k), lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("oracle conditioning covariance is singular") from exc


def gaussian_logpdf(x, mean, cov) -> float:
    x = np.asarray(x, float)
    if x.size == 0:
        return 0.0
    L = _chol(np.asarray(cov, float))
    w = sla.solve_triangular(L, x - mean, lower=True)
    return float(-0.5 * (w @ w + 2 * np.sum(np.log(np.diag(L))) + x.size * LOG_2PI))


def condition(joint: JointGaussian, cond_idx, cond_val):
    """Mean and covariance of the whole vector given ``x[cond_idx] = cond_val``."""
    cond_idx = np.asarray(cond_idx, dtype=int)
    if cond_idx.size == 0:
        return joint.mean.copy(), joint.cov.copy()
    m_c, S_cc = joint.marginal(cond_idx)
    L = _chol(S_cc)
    S_xc = joint.cov[:, cond_idx]
    K = sla.cho_solve((L, True), S_xc.T).T
    mean = joint.mean + K @ (np.asarray(cond_val, float) - m_c)
    cov = joint.cov - K @ S_xc.T
    return mean, 0.5 * (cov + cov.T)


def conditional_loglik(joint: JointGaussian, target_idx, target_val, cond_idx=(),
                       cond_val=()) -> float:
    r"""Exact :math:`\\log p(x_T = y \\mid x_C = c)` by Schur complements."""
    target_idx = np.asarray(target_idx, dtype=int)
    mean, cov = condition(joint, cond_idx, cond_val)
    return gaussian_logpdf(target_val, mean[target_idx], cov[np.ix_(target_idx, target_idx)])


def marginal_loglik(joint: JointGaussian, idx, val) -> float:
    idx = np.asarray(idx, dtype=int)
    m, S = joint.marginal(idx)
    return gaussian_logpdf(val, m, S)


# --- linear ODEs ---------------------------------------------------------------


def linear_ode_joint(M, k, x0, slots, sigma, dt, N, meas=()):
    r"""Joint law for the probabilistic solver on :math:`\dot x = M x + k`.

    The first-order system is lifted onto an IBM prior with ``slots[j]``
    slots per variable.  ``Z_0`` is omitted since the initial state is known
    exactly.  ``meas`` holds ``(n, D, Omega[, y])`` with ``D`` acting on the
    natural state ``x``.

    Returns the joint and the padded initial mean.
    """
    from pode.prior import slot_scales, unit_transition

    M = np.asarray(M, float)
    k = np.asarray(k, float)
    x0 = np.asarray(x0, float)
    d = len(x0)
    slots = tuple(slots)
    n = sum(slots)
    W = np.zeros((d, n))
    lift = np.zeros((n, d))
    start = 0
    for j, p in enumerate(slots):
        W[j, start + 1] = 1.0
        lift[start, j] = 1.0
        start += p
    v = lift @ x0 + W.T @ (M @ x0 + k)
    Q, R = unit_transition(slots, dt)
    s = slot_scales(slots, np.asarray(sigma, float))
    R = R * np.outer(s, s)
    H = W - M @ lift.T
    trans = [(Q, np.zeros(n), R)] * N
    obs = [None] + [(H, -k, np.zeros((d, d)))] * N
    lifted = [(i, np.asarray(D, float) @ lift.T, Om) for i, D, Om, *_ in meas]
    return build_joint(v, np.zeros((n, n)), trans, obs, lifted), v


def linear_ode_loglik(M, k, x0, slots, sigma, dt, N, meas) -> float:
    r"""Exact :math:`\log p(Y \mid Z_{1:N} = 0)`; ``meas`` holds ``(n, D, Omega, y)``."""
    joint, _ = linear_ode_joint(M, k, x0, slots, sigma, dt, N, meas)
    z_idx = joint.index("Z")
    y_idx = joint.index("Y")
    y_val = np.concatenate([np.atleast_1d(np.asarray(m[3], float)) for m in meas] or [[]])
    return conditional_loglik(joint, y_idx, y_val, z_idx, np.zeros(len(z_idx)))
