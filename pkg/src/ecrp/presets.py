"""Plausible demo parameter sets for synthetic data runs and tests."""

from __future__ import annotations

import numpy as np

from .trendfam import ModelParams

__all__ = ["demo_params"]


def demo_params(
    n_ages: int = 5,
    K: int = 2,
    t0: float | None = None,
    seed: int | None = None,
    sigma2=None,
) -> ModelParams:
    """A smooth, mildly trended parameter set.

    Rate intercepts rise with age, trends improve mortality, and cause
    weights drift slowly.  With a seed, small reproducible perturbations are
    added so the set is not exactly collinear.
    """
    ages = np.arange(n_ages, dtype=float)
    alpha = np.stack([-5.0 + 0.35 * ages, -4.8 + 0.35 * ages], axis=1)
    beta = np.full((n_ages, 2), -0.02)
    beta[:, 1] = -0.015
    zeta = np.zeros((n_ages, 2))
    eta = np.full((n_ages, 2), 1.0 / 150.0)

    K1 = K + 1
    u = np.zeros((n_ages, 2, K1))
    v = np.zeros((n_ages, 2, K1))
    for k in range(1, K1):
        u[:, :, k] = 0.3 - 0.15 * k + 0.02 * ages[:, None]
        v[:, :, k] = 0.01 * (-1) ** k
    phi = np.zeros(K1)
    psi = np.full(K1, 1.0 / 150.0)
    if sigma2 is None:
        sigma2 = 0.02 + 0.02 * np.arange(K, dtype=float)
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))

    if seed is not None:
        rng = np.random.default_rng(seed)
        alpha = alpha + rng.normal(0.0, 0.05, alpha.shape)
        beta = beta + rng.normal(0.0, 0.003, beta.shape)
        u[:, :, 1:] += rng.normal(0.0, 0.05, (n_ages, 2, K))
        v[:, :, 1:] += rng.normal(0.0, 0.005, (n_ages, 2, K))

    return ModelParams(
        alpha=alpha, beta=beta, zeta=zeta, eta=eta,
        u=u, v=v, phi=phi, psi=psi, sigma2=sigma2, t0=t0,
    ).canonicalized()
