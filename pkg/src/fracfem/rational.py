"""Rational approximation of the map lambda -> lambda**(-s).

The approximation is the trapezoidal discretization of the integral
representation

    lambda**(-s) = (2 sin(pi s) / pi) * int_R exp(2 s y) / (1 + exp(2 y) lambda) dy

with step size ``kappa``, truncated to indices l = -M..N.  Each index l
contributes a weight

    w_l = (2 sin(pi s) kappa / pi) * exp(2 s l kappa)

and a diffusion coefficient

    c_l = exp(2 l kappa),

so that  Q(lambda) = sum_l w_l / (1 + c_l lambda)  approximates
lambda**(-s) uniformly on [lambda0, inf) with a certified error bound
(see :func:`epsilon_bound`).
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RationalScheme",
    "build_scheme",
    "truncated_scheme",
    "evaluate_q",
    "epsilon_bound",
    "choose_kappa",
]

# exp() overflows near 709 and underflows to subnormals near -709; beyond
# that the positivity invariants of the scheme cannot hold in float64.
_MAX_EXPONENT = 700.0

# Fixed search interval for choose_kappa.
_KAPPA_MIN = 0.02
_KAPPA_MAX = 1.0
_BISECT_ITERS = 50


@dataclass(frozen=True)
class RationalScheme:
    """Coefficients of the rational sum for one fractional power.

    Immutable after construction; safe to share across threads.

    Attributes:
        s: fractional power, in (0, 1).
        kappa: quadrature fineness parameter, > 0.
        m_neg: number of negative indices M (l runs over -M..N).
        n_pos: number of positive indices N.
        lambda0: certified lower bound of the operator spectrum.
        weights: w_l for l = -M..N, ascending l.
        diffusion: c_l for l = -M..N, ascending l.
    """

    s: float
    kappa: float
    m_neg: int
    n_pos: int
    lambda0: float
    weights: np.ndarray = field(repr=False)
    diffusion: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.weights.setflags(write=False)
        self.diffusion.setflags(write=False)

    @property
    def num_terms(self):
        return self.m_neg + self.n_pos + 1

    @property
    def indices(self):
        """Quadrature indices l = -M..N, ascending."""
        return np.arange(-self.m_neg, self.n_pos + 1)


def _validate_parameters(s, kappa, lambda0):
    if not 0.0 < s < 1.0:
        raise ValueError(f"fractional power s must lie in (0, 1), got {s}")
    if kappa <= 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if lambda0 <= 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")


def term_counts(s, kappa):
    """Index truncation bounds (M, N) = (ceil(pi^2/(4 s kappa^2)), ceil(pi^2/(4 (1-s) kappa^2)))."""
    M = int(np.ceil(np.pi**2 / (4.0 * s * kappa**2)))
    N = int(np.ceil(np.pi**2 / (4.0 * (1.0 - s) * kappa**2)))
    return M, N


def _make_scheme(s, kappa, lambda0, m_neg, n_pos):
    ls = np.arange(-m_neg, n_pos + 1, dtype=np.float64)
    max_exp = 2.0 * kappa * max(m_neg, n_pos)
    if max_exp > _MAX_EXPONENT:
        raise ValueError(
            f"coefficient exponent 2*kappa*max(M,N) = {max_exp:.1f} exceeds the "
            f"float64-safe limit {_MAX_EXPONENT:.0f}; increase kappa"
        )
    weights = (2.0 * np.sin(np.pi * s) * kappa / np.pi) * np.exp(2.0 * s * kappa * ls)
    diffusion = np.exp(2.0 * kappa * ls)
    return RationalScheme(
        s=float(s),
        kappa=float(kappa),
        m_neg=int(m_neg),
        n_pos=int(n_pos),
        lambda0=float(lambda0),
        weights=weights,
        diffusion=diffusion,
    )


def build_scheme(s, kappa, lambda0=1.0):
    """Build the rational scheme with the truncation bounds tied to kappa.

    Raises ValueError if s is not in (0, 1), kappa <= 0, lambda0 <= 0, or
    the coefficient exponents would leave the float64 range.
    """
    _validate_parameters(s, kappa, lambda0)
    M, N = term_counts(s, kappa)
    return _make_scheme(s, kappa, lambda0, M, N)


def truncated_scheme(s, kappa, m_neg, n_pos, lambda0=1.0):
    """Build a scheme with explicit index bounds instead of the certified ones.

    Useful for cheap smoke runs; such a scheme carries no accuracy guarantee.
    """
    _validate_parameters(s, kappa, lambda0)
    if m_neg < 0 or n_pos < 0:
        raise ValueError("m_neg and n_pos must be nonnegative")
    return _make_scheme(s, kappa, lambda0, m_neg, n_pos)


def evaluate_q(scheme, lam):
    """Evaluate Q(lam) = sum_l w_l / (1 + c_l lam), ascending l.

    ``lam`` may be a scalar or an array; every entry must be >= lambda0,
    where the scheme's error bound is certified.
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr < scheme.lambda0):
        raise ValueError(
            f"evaluation point below lambda0={scheme.lambda0}; bound not certified there"
        )
    terms = scheme.weights / (1.0 + np.multiply.outer(lam_arr, scheme.diffusion))
    # Ascending-l summation gives a fixed order, hence bitwise reproducibility.
    acc = np.zeros_like(lam_arr, dtype=np.float64)
    for i in range(scheme.num_terms):
        acc = acc + terms[..., i]
    return acc if acc.ndim else float(acc)


def epsilon_bound(s, kappa, lambda0=1.0):
    """Certified uniform bound on |lambda**(-s) - Q(lambda)| for lambda >= lambda0."""
    _validate_parameters(s, kappa, lambda0)
    decay = np.exp(-np.pi**2 / (2.0 * kappa))
    prefactor = 2.0 * np.sin(np.pi * s) / np.pi
    bracket = 1.0 / (2.0 * s) + 1.0 / (2.0 * (1.0 - s) * lambda0)
    geometric = 1.0 / (1.0 - decay) + 1.0
    return float(prefactor * bracket * geometric * decay)


def choose_kappa(s, lambda0, f_norm, tol):
    """Largest kappa in [0.02, 1.0] with epsilon_bound(s, kappa, lambda0) * f_norm <= tol.

    Bisection on the (numerically monotone) bound, 50 iterations.  The
    returned kappa always satisfies the inequality.  Raises ValueError if
    even the finest kappa misses the tolerance.
    """
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")
    if f_norm < 0.0:
        raise ValueError(f"f_norm must be nonnegative, got {f_norm}")

    def ok(kappa):
        return epsilon_bound(s, kappa, lambda0) * f_norm <= tol

    if ok(_KAPPA_MAX):
        return _KAPPA_MAX
    if not ok(_KAPPA_MIN):
        raise ValueError(
            f"rational tolerance {tol} unreachable: bound at kappa={_KAPPA_MIN} is "
            f"{epsilon_bound(s, _KAPPA_MIN, lambda0) * f_norm:.3e}"
        )
    lo, hi = _KAPPA_MIN, _KAPPA_MAX  # lo always satisfies the bound
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo
