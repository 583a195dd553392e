"""Nearest-neighbor bond potentials for particle chains.

Each potential carries its bond energy and the first three derivatives.
The derivative cascade is what the force law, the bracket formulas and the
degeneracy classification consume:

    energy(y)           bond energy for bond length y
    tension(y)          d/dy energy, enters the force on each particle
    stiffness(y)        d/dy tension, enters second-order brackets
    stiffness_slope(y)  d/dy stiffness, enters third-order brackets

``lower_bound`` and ``grows`` are declared claims about the energy profile
(energy(y) >= -lower_bound everywhere; energy(y) -> +inf as y -> +inf).
They are validated only where a computation actually depends on them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial

__all__ = [
    "Potential",
    "toda",
    "harmonic",
    "quartic",
    "shifted_odd",
    "polynomial",
    "check_derivative_consistency",
]


@dataclass(frozen=True)
class Potential:
    """A twice (here: three times) differentiable bond potential."""

    kind: str
    energy: Callable[[np.ndarray], np.ndarray]
    tension: Callable[[np.ndarray], np.ndarray]
    stiffness: Callable[[np.ndarray], np.ndarray]
    stiffness_slope: Callable[[np.ndarray], np.ndarray]
    # Declared B >= 0 with energy(y) >= -B for all y; None means unbounded below.
    lower_bound: Optional[float]
    # Declared growth claim: energy(y) -> +inf as y -> +inf.
    grows: bool
    params: dict = field(default_factory=dict)

    def __repr__(self) -> str:  # params may hold arrays; keep repr short
        return f"Potential(kind={self.kind!r}, params={self.params!r})"


def toda() -> Potential:
    """Exponential bond energy exp(2 y); tension 2 exp(2 y)."""
    return Potential(
        kind="toda",
        energy=lambda y: np.exp(2.0 * np.asarray(y, dtype=float)),
        tension=lambda y: 2.0 * np.exp(2.0 * np.asarray(y, dtype=float)),
        stiffness=lambda y: 4.0 * np.exp(2.0 * np.asarray(y, dtype=float)),
        stiffness_slope=lambda y: 8.0 * np.exp(2.0 * np.asarray(y, dtype=float)),
        lower_bound=0.0,
        grows=True,
    )


def _poly_lower_bound(p: Polynomial) -> Optional[float]:
    """Declared bound for a polynomial energy: -min over critical points, or None."""
    coef = p.coef
    deg = len(coef) - 1
    while deg > 0 and coef[deg] == 0.0:
        deg -= 1
    if deg == 0:
        return max(0.0, -float(coef[0]))
    if deg % 2 != 0 or coef[deg] <= 0.0:
        return None
    crit = p.deriv().roots()
    real = np.real(crit[np.abs(np.imag(crit)) < 1e-9])
    values = p(real) if real.size else np.array([p(0.0)])
    return max(0.0, -float(np.min(values)))


def _poly_grows(p: Polynomial) -> bool:
    coef = p.coef
    deg = len(coef) - 1
    while deg > 0 and coef[deg] == 0.0:
        deg -= 1
    return deg >= 1 and coef[deg] > 0.0


def _from_energy_poly(p: Polynomial, kind: str, params: dict,
                      lower_bound: Optional[float] = None,
                      grows: Optional[bool] = None) -> Potential:
    d1, d2, d3 = p.deriv(1), p.deriv(2), p.deriv(3)
    params = dict(params)
    # Descending tension coefficients, consumed by the exact bracket engine.
    params["tension_coeffs_desc"] = tuple(float(c) for c in d1.coef[::-1])
    params.setdefault("shift", 0.0)
    return Potential(
        kind=kind,
        energy=lambda y, _p=p: _p(np.asarray(y, dtype=float)),
        tension=lambda y, _d=d1: _d(np.asarray(y, dtype=float)),
        stiffness=lambda y, _d=d2: _d(np.asarray(y, dtype=float)),
        stiffness_slope=lambda y, _d=d3: _d(np.asarray(y, dtype=float)),
        lower_bound=_poly_lower_bound(p) if lower_bound is None else lower_bound,
        grows=_poly_grows(p) if grows is None else grows,
        params=params,
    )


def harmonic() -> Potential:
    """Quadratic bond energy y^2 / 2 (unit spring constant)."""
    return _from_energy_poly(Polynomial([0.0, 0.0, 0.5]), "harmonic", {})


def quartic() -> Potential:
    """Quartic bond energy y^4 / 4."""
    return _from_energy_poly(Polynomial([0.0, 0.0, 0.0, 0.0, 0.25]), "quartic", {})


def polynomial(coeffs: Sequence[float],
               lower_bound: Optional[float] = None,
               grows: Optional[bool] = None) -> Potential:
    """Polynomial bond energy sum_k coeffs[k] y^k (ascending order).

    lower_bound/grows default to values derived from the leading coefficient;
    pass them explicitly to override the declaration.
    """
    coeffs = [float(c) for c in coeffs]
    if not coeffs or not all(math.isfinite(c) for c in coeffs):
        raise ValueError("polynomial coefficients must be finite and non-empty")
    return _from_energy_poly(Polynomial(coeffs), "polynomial",
                             {"coeffs": tuple(coeffs)}, lower_bound, grows)


def shifted_odd(odd_coeffs: Sequence[float], shift: float,
                offset: float = 0.0) -> Potential:
    """Tension of the form F(y - shift) + offset with F an odd polynomial.

    Args:
        odd_coeffs: ascending coefficients of F; every even-degree entry
            (including the constant) must be exactly zero, otherwise F is
            not odd and a ValueError is raised.
        shift: center of symmetry of the tension.
        offset: constant added to the tension. Irrelevant for periodic
            dynamics (forces are tension differences) but not for open
            chains, where edge particles feel a single bond.
    """
    odd_coeffs = [float(c) for c in odd_coeffs]
    if not odd_coeffs:
        raise ValueError("empty coefficient list for the odd tension part")
    for k, c in enumerate(odd_coeffs):
        if k % 2 == 0 and c != 0.0:
            raise ValueError(
                f"tension part is not odd: coefficient of degree {k} is {c!r}")
    f_poly = Polynomial(odd_coeffs)
    # Energy in s = y - shift: primitive of F (even, fixed to 0 at 0) plus offset*s.
    g_poly = f_poly.integ()
    e_poly = g_poly + Polynomial([0.0, offset])
    d1, d2, d3 = e_poly.deriv(1), e_poly.deriv(2), e_poly.deriv(3)
    b = float(shift)
    params = {
        "odd_coeffs": tuple(odd_coeffs),
        "shift": b,
        "offset": float(offset),
        "tension_coeffs_desc": tuple(float(c) for c in d1.coef[::-1]),
    }
    return Potential(
        kind="shifted-odd",
        energy=lambda y, _p=e_poly: _p(np.asarray(y, dtype=float) - b),
        tension=lambda y, _p=d1: _p(np.asarray(y, dtype=float) - b),
        stiffness=lambda y, _p=d2: _p(np.asarray(y, dtype=float) - b),
        stiffness_slope=lambda y, _p=d3: _p(np.asarray(y, dtype=float) - b),
        lower_bound=_poly_lower_bound(e_poly),
        grows=_poly_grows(e_poly),
        params=params,
    )


def check_derivative_consistency(pot: Potential, lo: float = -5.0,
                                 hi: float = 5.0, num: int = 100) -> float:
    """Max relative deviation between each derivative and a central difference
    of the one above it, over ``num`` sample points in [lo, hi]."""
    y = np.linspace(lo, hi, num)
    h = 1e-4 * (1.0 + np.abs(y))
    worst = 0.0
    pairs = [
        (pot.energy, pot.tension),
        (pot.tension, pot.stiffness),
        (pot.stiffness, pot.stiffness_slope),
    ]
    for f, df in pairs:
        fd = (f(y + h) - f(y - h)) / (2.0 * h)
        exact = df(y)
        scale = np.maximum(np.abs(exact), 1e-9 * (1.0 + np.max(np.abs(exact))))
        worst = max(worst, float(np.max(np.abs(fd - exact) / scale)))
    return worst
