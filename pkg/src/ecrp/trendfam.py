"""Laplace link, arctan trend reduction and the parameter families for
central death rates and cause-of-death weights.

All evaluation functions are pure and vectorised over calendar years.
Gender axes are always ordered ``("f", "m")``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

GENDERS = ("f", "m")

__all__ = [
    "GENDERS",
    "ModelParams",
    "laplace_cdf",
    "laplace_icdf",
    "trend_reduction",
    "normalized_trend",
    "central_death_rate",
    "cause_weights",
    "death_probability",
]


def laplace_cdf(x):
    """Distribution function of the Laplace law with mean zero and variance two.

    ``F(x) = 1/2 + sign(x) (1 - exp(-|x|)) / 2``; strictly increasing with
    range (0, 1).
    """
    x = np.asarray(x, dtype=float)
    out = 0.5 + 0.5 * np.sign(x) * (1.0 - np.exp(-np.abs(x)))
    return out if out.ndim else float(out)

def laplace_icdf(p):
    """Inverse of :func:`laplace_cdf` on (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("probability must lie strictly inside (0, 1)")
    out = np.where(p >= 0.5, -np.log(2.0 * (1.0 - p)), np.log(2.0 * p))
    return out if out.ndim else float(out)

def trend_reduction(t, zeta, eta):
    """Arctan time transform ``arctan(eta (t - zeta)) / eta``.

    Roughly linear in ``t`` for small ``eta`` and bounded by
    ``+- pi / (2 eta)``, which caps long-run drift.
    """
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0.0):
        raise ValueError("eta must be strictly positive")
    t = np.asarray(t, dtype=float)
    out = np.arctan(eta * (t - zeta)) / eta
    return out if out.ndim else float(out)

def normalized_trend(t, zeta, eta, t0):
    """Trend transform rescaled so that the value at ``t0`` is 0 and the
    one-year step ending at ``t0`` has unit length."""
    base = trend_reduction(t0, zeta, eta)
    step = base - trend_reduction(t0 - 1.0, zeta, eta)
    if np.any(np.asarray(step) == 0.0):
        raise ValueError("degenerate normalization: trend is flat at t0")
    out = (trend_reduction(t, zeta, eta) - base) / step
    return out


@dataclass(frozen=True)
class ModelParams:
    """Parameter set of the additive mortality model.

    Arrays are indexed ``[age, gender]`` (genders ordered f, m) and, where a
    cause axis exists, ``[age, gender, cause]`` with cause 0 idiosyncratic.

    Attributes
    ----------
    alpha, beta : ndarray, shape (A+1, 2)
        Intercept and trend slope of central death rates.
    zeta, eta : ndarray, shape (A+1, 2)
        Location and speed of trend reduction for rates; ``eta > 0``.
    u, v : ndarray, shape (A+1, 2, K+1)
        Intercept and trend slope of cause weights.
    phi, psi : ndarray, shape (K+1,)
        Location and speed of trend reduction for weights; ``psi > 0``.
    sigma2 : ndarray, shape (K,)
        Risk-factor variances for causes 1..K (cause 0 has none).
    gamma : dict[int, float]
        Cohort effect keyed by birth year ``t - a``; missing years mean 0.
    t0 : float or None
        Normalization year.  When set, families use the normalized trend;
        when None, the raw arctan transform is used (long-run limits then
        take the closed forms ``alpha + beta pi / (2 eta)``).
    """

    alpha: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    sigma2: np.ndarray
    gamma: dict = field(default_factory=dict)
    t0: float | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "zeta", "eta", "u", "v", "phi", "psi", "sigma2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        A1, G = self.alpha.shape
        if G != 2:
            raise ValueError("gender axis must have length 2 (f, m)")
        for name in ("beta", "zeta", "eta"):
            if getattr(self, name).shape != (A1, G):
                raise ValueError(f"{name} must have shape {(A1, G)}")
        if self.u.ndim != 3 or self.u.shape[:2] != (A1, G):
            raise ValueError("u must have shape (A+1, 2, K+1)")
        K1 = self.u.shape[2]
        if self.v.shape != (A1, G, K1):
            raise ValueError("v must match u's shape")
        if self.phi.shape != (K1,) or self.psi.shape != (K1,):
            raise ValueError("phi and psi must have one entry per cause")
        if self.sigma2.shape != (K1 - 1,):
            raise ValueError("sigma2 must have one entry per non-idiosyncratic cause")
        if np.any(self.eta <= 0.0) or np.any(self.psi <= 0.0):
            raise ValueError("eta and psi must be strictly positive")
        if np.any(self.sigma2 < 0.0):
            raise ValueError("sigma2 must be non-negative")

    @property
    def n_ages(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_causes(self) -> int:
        """Number of causes including the idiosyncratic one (K+1)."""
        return self.u.shape[2]

    @property
    def K(self) -> int:
        return self.n_causes - 1

    def gamma_at(self, birth_year) -> np.ndarray:
        by = np.atleast_1d(np.asarray(birth_year, dtype=int))
        return np.array([self.gamma.get(int(b), 0.0) for b in by])

    def canonicalized(self) -> "ModelParams":
        """Shift ``u`` and ``v`` so the idiosyncratic entries vanish.

        Weights are invariant under a constant per-(a, g) shift when the
        shifted causes share phi and psi, so the convention
        ``u[..., 0] = v[..., 0] = 0`` removes the flat direction.
        """
        u = self.u - self.u[:, :, :1]
        v = self.v - self.v[:, :, :1]
        return replace(self, u=u, v=v)

    def to_dict(self) -> dict:
        out = {
            name: getattr(self, name).tolist()
            for name in ("alpha", "beta", "zeta", "eta", "u", "v", "phi", "psi", "sigma2")
        }
        out["gamma"] = {str(k): float(v) for k, v in sorted(self.gamma.items())}
        out["t0"] = self.t0
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        gamma = {int(k): float(v) for k, v in d.get("gamma", {}).items()}
        return cls(
            alpha=np.asarray(d["alpha"]),
            beta=np.asarray(d["beta"]),
            zeta=np.asarray(d["zeta"]),
            eta=np.asarray(d["eta"]),
            u=np.asarray(d["u"]),
            v=np.asarray(d["v"]),
            phi=np.asarray(d["phi"]),
            psi=np.asarray(d["psi"]),
            sigma2=np.asarray(d["sigma2"]),
            gamma=gamma,
            t0=d.get("t0"),
        )

    def rate_trend(self, years) -> np.ndarray:
        """Trend value per (age, gender, year), normalized when t0 is set."""
        years = np.asarray(years, dtype=float)
        z = self.zeta[..., None]
        e = self.eta[..., None]
        if self.t0 is None:
            return trend_reduction(years, z, e)
        return normalized_trend(years, z, e, self.t0)

    def weight_trend(self, years) -> np.ndarray:
        """Trend value per (cause, year), normalized when t0 is set."""
        years = np.asarray(years, dtype=float)
        p = self.phi[:, None]
        s = self.psi[:, None]
        if self.t0 is None:
            return trend_reduction(years, p, s)
        return normalized_trend(years, p, s, self.t0)


_TINY = np.finfo(float).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


def central_death_rate(params: ModelParams, years) -> np.ndarray:
    """Central death rates ``m[a, g, t]`` on the (age, gender, year) grid.

    Laplace link applied to ``alpha + beta * trend + cohort effect``; values
    lie strictly inside (0, 1) (clamped away from the boundary where the
    link underflows).
    """
    years = np.atleast_1d(np.asarray(years, dtype=float))
    x = params.alpha[..., None] + params.beta[..., None] * params.rate_trend(years)
    if params.gamma:
        ages = np.arange(params.n_ages)
        birth = np.rint(years[None, :] - ages[:, None]).astype(int)
        coh = np.array(
            [[params.gamma.get(int(b), 0.0) for b in row] for row in birth]
        )
        x = x + coh[:, None, :]
    return np.clip(laplace_cdf(x), _TINY, _BELOW_ONE)

def cause_weights(params: ModelParams, years) -> np.ndarray:
    """Cause weights ``w[a, g, k, t]``: softmax of ``u + v * trend`` over k.

    Computed with a max shift before exponentiation; the softmax is invariant
    under that shift, so each weight vector sums to one exactly.
    """
    years = np.atleast_1d(np.asarray(years, dtype=float))
    trend = params.weight_trend(years)  # (K+1, T)
    score = params.u[..., None] + params.v[..., None] * trend[None, None, :, :]
    score = score - score.max(axis=2, keepdims=True)
    ex = np.exp(score)
    return np.maximum(ex / ex.sum(axis=2, keepdims=True), _TINY)

def death_probability(params: ModelParams, years) -> np.ndarray:
    """One-year death probabilities ``q = 1 - exp(-m)`` on the rate grid."""
    return 1.0 - np.exp(-central_death_rate(params, years))
