"""Particle chains on a line with nearest-neighbor bonds and forced sites.

State layout throughout the package: x = (q_1..q_n, p_1..p_n) as one float64
vector of length 2n. Sites are numbered 1..n in configs and reports; indices
are 0-based internally. On a periodic chain the bonds are q_k - q_{k+1} with
the wrap bond q_n - q_1; an open chain has the n-1 interior bonds only. For
n = 2 periodic both bonds exist (q_1 - q_2 and q_2 - q_1), i.e. the pair
interacts through a doubled bond.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .potentials import Potential

__all__ = [
    "LatticeConfig",
    "LatticeSystem",
    "State",
    "feedback_decouple",
    "TOPOLOGIES",
]

TOPOLOGIES = ("periodic", "open")


@dataclass(frozen=True)
class LatticeConfig:
    """Chain size, wrap topology and the set of forced sites (1-based)."""

    n: int
    topology: str = "periodic"
    control_sites: Tuple[int, ...] = (1,)

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n!r}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        sites = tuple(int(s) for s in self.control_sites)
        if len(sites) == 0:
            raise ValueError("at least one control site is required")
        if len(set(sites)) != len(sites):
            raise ValueError(f"control sites must be distinct, got {sites}")
        if any(s < 1 or s > self.n for s in sites):
            raise ValueError(f"control sites must lie in 1..{self.n}, got {sites}")
        object.__setattr__(self, "control_sites", tuple(sorted(sites)))


def _as_coord_array(v, name: str) -> np.ndarray:
    a = np.array(v, dtype=float, copy=True).reshape(-1)
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite, got {a!r}")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class State:
    """Positions and momenta; immutable, always finite float64."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _as_coord_array(self.q, "q"))
        object.__setattr__(self, "p", _as_coord_array(self.p, "p"))
        if self.q.shape != self.p.shape:
            raise ValueError(
                f"q and p must have the same length, got {self.q.size} and {self.p.size}")

    @property
    def n(self) -> int:
        return self.q.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "State":
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size % 2 != 0:
            raise ValueError(f"state vector length must be even, got {x.size}")
        n = x.size // 2
        return cls(q=x[:n], p=x[n:])

    @property
    def momentum_total(self) -> float:
        return float(np.sum(self.p))

    @property
    def coordinate_sum(self) -> float:
        return float(np.sum(self.q))


@dataclass(frozen=True)
class LatticeSystem:
    """A chain (config) equipped with a bond potential and forced sites."""

    config: LatticeConfig
    potential: Potential

    # ---- geometry -----------------------------------------------------

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def periodic(self) -> bool:
        return self.config.topology == "periodic"

    @property
    def control_indices(self) -> Tuple[int, ...]:
        return tuple(s - 1 for s in self.config.control_sites)

    def bonds(self, q: np.ndarray) -> np.ndarray:
        """Bond lengths q_k - q_{k+1}; n of them with wrap, else n-1."""
        q = np.asarray(q, dtype=float)
        if self.periodic:
            return q - np.roll(q, -1)
        return q[:-1] - q[1:]

    # ---- dynamics ------------------------------------------------------

    def forces(self, q: np.ndarray) -> np.ndarray:
        """dp/dt from the bonds: tension(left bond) - tension(right bond)."""
        t = self.potential.tension(self.bonds(q))
        if self.periodic:
            return np.roll(t, 1) - t
        out = np.zeros(self.n)
        out[:-1] -= t
        out[1:] += t
        return out

    def force_jacobian(self, q: np.ndarray) -> np.ndarray:
        """d(forces)/dq, a (cyclically) tridiagonal matrix built from stiffness."""
        q = np.asarray(q, dtype=float)
        n = self.n
        c = self.potential.stiffness(self.bonds(q))
        m = np.zeros((n, n))
        nb = n if self.periodic else n - 1
        for j in range(nb):
            k = (j + 1) % n
            # bond j couples particles j and j+1
            m[j, j] -= c[j]
            m[j, k] += c[j]
            m[k, k] -= c[j]
            m[k, j] += c[j]
        return m

    def hamiltonian(self, state: State) -> float:
        self._check(state)
        kin = 0.5 * float(np.dot(state.p, state.p))
        return kin + float(np.sum(self.potential.energy(self.bonds(state.q))))

    def hamiltonian_many(self, states: np.ndarray) -> np.ndarray:
        """Energies for a (k, 2n) array of stacked state vectors."""
        states = np.asarray(states, dtype=float)
        n = self.n
        q, p = states[:, :n], states[:, n:]
        if self.periodic:
            bonds = q - np.roll(q, -1, axis=1)
        else:
            bonds = q[:, :-1] - q[:, 1:]
        return 0.5 * np.sum(p * p, axis=1) + np.sum(self.potential.energy(bonds), axis=1)

    def drift(self, state: State) -> np.ndarray:
        """Uncontrolled tangent vector (dq/dt, dp/dt) at the state."""
        self._check(state)
        return np.concatenate([state.p, self.forces(state.q)])

    def drift_vector(self, x: np.ndarray) -> np.ndarray:
        """Same as drift() on a raw length-2n vector (used by bracket code)."""
        x = np.asarray(x, dtype=float)
        n = self.n
        return np.concatenate([x[n:], self.forces(x[:n])])

    def control_field(self, site: int) -> np.ndarray:
        """Constant tangent vector of the forcing at a site: unit momentum bump."""
        if site not in self.config.control_sites:
            raise ValueError(f"site {site} is not a control site {self.config.control_sites}")
        e = np.zeros(2 * self.n)
        e[self.n + site - 1] = 1.0
        return e

    def control_matrix(self) -> np.ndarray:
        """(2n, m) matrix whose columns are the control fields, config order."""
        return np.stack([self.control_field(s) for s in self.config.control_sites], axis=1)

    def _check(self, state: State) -> None:
        if state.n != self.n:
            raise ValueError(f"state has {state.n} particles, system has {self.n}")


def feedback_decouple(sys: LatticeSystem, state: State, u: float, v: float):
    """Map first/last-site controls of a periodic chain to open-chain controls.

    Returns (u_open, v_open) such that forcing the open chain (same potential,
    wrap bond removed) with u_open at site 1 and v_open at site n reproduces
    the periodic controlled dynamics at this state exactly: the wrap tension
    is absorbed into the controls.
    """
    if not sys.periodic:
        raise ValueError("feedback_decouple expects a periodic system")
    if sys.config.control_sites != (1, sys.n):
        raise ValueError(
            f"feedback_decouple needs control sites (1, {sys.n}), got {sys.config.control_sites}")
    wrap = float(sys.potential.tension(state.q[-1] - state.q[0]))
    return u + wrap, v - wrap
