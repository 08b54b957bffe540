import numpy as np
import pytest

from ecrp import ModelParams, demo_params, synth_generate


@pytest.fixture
def flat_params():
    """One age group, two genders, K = 1, no trend: handy for exact checks."""
    return ModelParams(
        alpha=np.array([[-3.0, -2.8]]),
        beta=np.zeros((1, 2)),
        zeta=np.zeros((1, 2)),
        eta=np.full((1, 2), 1.0 / 150.0),
        u=np.zeros((1, 2, 2)),
        v=np.zeros((1, 2, 2)),
        phi=np.zeros(2),
        psi=np.full(2, 1.0 / 150.0),
        sigma2=np.array([0.04]),
    )


@pytest.fixture
def small_dataset():
    params = demo_params(n_ages=3, K=2, t0=2000.0, seed=3, sigma2=[0.02, 0.05])
    years = np.arange(2000, 2015)
    return synth_generate(params, np.full((3, 2), 50_000.0), years, seed=11), params


def make_params(
    alpha,
    beta=None,
    K=0,
    n_ages=None,
    zeta=0.0,
    eta=1.0 / 150.0,
    u=None,
    v=None,
    phi=0.0,
    psi=1.0 / 150.0,
    sigma2=None,
    gamma=None,
    t0=None,
):
    """Build ModelParams from compact scalar/array specs."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    if alpha.shape[1] != 2:
        alpha = np.repeat(alpha.reshape(-1, 1), 2, axis=1)
    A1 = n_ages or alpha.shape[0]
    if alpha.shape[0] != A1:
        alpha = np.broadcast_to(alpha, (A1, 2)).copy()

    def grid(val):
        return np.broadcast_to(np.asarray(val, dtype=float), (A1, 2)).copy()

    K1 = K + 1
    u_arr = np.zeros((A1, 2, K1)) if u is None else np.broadcast_to(u, (A1, 2, K1)).copy()
    v_arr = np.zeros((A1, 2, K1)) if v is None else np.broadcast_to(v, (A1, 2, K1)).copy()
    return ModelParams(
        alpha=alpha,
        beta=grid(0.0 if beta is None else beta),
        zeta=grid(zeta),
        eta=grid(eta),
        u=u_arr,
        v=v_arr,
        phi=np.broadcast_to(np.asarray(phi, dtype=float), (K1,)).copy(),
        psi=np.broadcast_to(np.asarray(psi, dtype=float), (K1,)).copy(),
        sigma2=np.zeros(K) if sigma2 is None else np.atleast_1d(np.asarray(sigma2, dtype=float)),
        gamma=gamma or {},
        t0=t0,
    )
