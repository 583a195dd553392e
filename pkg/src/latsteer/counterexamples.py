"""Degenerate trimer systems with invariant planes.

Two constructions, both with tension odd about a shift b. The periodic
trimer (forced at site 1) keeps the affine plane {q3 - q2 = 2b, p3 = p2}
invariant under every control provided the odd part vanishes at -3b. The
open trimer (forced at the middle site) keeps {q3 - q1 = -2b, p3 = p1}
invariant with no extra condition. In both cases the confined orbit is
4-dimensional, so these systems are the witnesses that accessibility can
fail for non-generic bond energies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import ControlSignal, IntegratorPolicy, controlled_flow, free_flow_trajectory
from .potentials import shifted_odd
from .system import LatticeConfig, LatticeSystem, State

__all__ = [
    "Plane",
    "build_periodic_degenerate_trimer",
    "build_nonperiodic_trimer",
    "invariant_plane_residual",
]


@dataclass(frozen=True, eq=False)
class Plane:
    """Affine plane given by independent constraints rows @ x = offsets."""

    rows: np.ndarray      # (m, 2n)
    offsets: np.ndarray   # (m,)
    label: str

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        offsets = np.asarray(self.offsets, dtype=float).ravel()
        if rows.shape[0] != offsets.shape[0]:
            raise ValueError("one offset per constraint row is required")
        sv = np.linalg.svd(rows, compute_uv=False)
        if sv.size == 0 or sv[-1] <= 1e-12 * sv[0]:
            raise ValueError("plane constraints must be linearly independent")
        rows.flags.writeable = False
        offsets.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "offsets", offsets)

    @property
    def codimension(self) -> int:
        return self.rows.shape[0]

    def residual(self, state: State | np.ndarray) -> float:
        x = state.vector() if isinstance(state, State) else np.asarray(state, dtype=float)
        return float(np.max(np.abs(self.rows @ x - self.offsets)))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "offsets": self.offsets.tolist(),
            "rows": self.rows.tolist(),
        }


def _trimer_plane(i: int, j: int, q_offset: float, label: str) -> Plane:
    # constraints q_j - q_i = q_offset and p_j - p_i = 0, 0-based sites
    rows = np.zeros((2, 6))
    rows[0, j] = 1.0
    rows[0, i] = -1.0
    rows[1, 3 + j] = 1.0
    rows[1, 3 + i] = -1.0
    return Plane(rows=rows, offsets=np.array([q_offset, 0.0]), label=label)


def build_periodic_degenerate_trimer(
    odd_coeffs: Sequence[float], shift: float, offset: float = 0.0
) -> tuple[LatticeSystem, Plane]:
    """Periodic 3-chain forced at site 1 whose tension is odd about the
    shift. Requires the odd part to vanish at -3*shift (within 1e-10),
    otherwise the candidate plane is not actually invariant.
    """
    pot = shifted_odd(odd_coeffs, shift, offset=offset)
    fval = float(np.polynomial.Polynomial(
        np.asarray(odd_coeffs, dtype=float))(-3.0 * shift))
    if abs(fval) > 1e-10:
        raise ValueError(
            "odd part must vanish at -3*shift for the plane to be invariant "
            f"(got {fval:.3e})"
        )
    sys = LatticeSystem(LatticeConfig(n=3, topology="periodic", control_sites=(1,)), pot)
    plane = _trimer_plane(
        1, 2, 2.0 * shift, f"periodic-trimer-plane(shift={shift:g})"
    )
    return sys, plane


def build_nonperiodic_trimer(
    odd_coeffs: Sequence[float], shift: float
) -> tuple[LatticeSystem, Plane]:
    """Open 3-chain forced at the middle site with tension odd about the
    shift; the outer particles mirror each other across the plane
    q3 - q1 = -2*shift, p3 = p1.
    """
    pot = shifted_odd(odd_coeffs, shift, offset=0.0)
    sys = LatticeSystem(LatticeConfig(n=3, topology="open", control_sites=(2,)), pot)
    plane = _trimer_plane(
        0, 2, -2.0 * shift, f"open-trimer-plane(shift={shift:g})"
    )
    return sys, plane


def invariant_plane_residual(
    sys: LatticeSystem,
    plane: Plane,
    x0: State,
    signal: ControlSignal | None,
    T: float,
    policy: IntegratorPolicy | None = None,
) -> float:
    """Max plane-membership residual along the controlled trajectory from
    x0 over [0, T]. x0 must start on the plane (residual < 1e-12).
    """
    start_res = plane.residual(x0)
    if start_res >= 1e-12:
        raise ValueError(
            f"initial state is off the plane (residual {start_res:.3e})"
        )
    if not (T > 0.0):
        raise ValueError("T must be positive")
    worst = start_res
    t_used = 0.0
    state = x0
    if signal is not None and signal.horizon > 0.0:
        traj = controlled_flow(sys, state, signal, policy)
        vals = traj.states @ plane.rows.T - plane.offsets
        worst = max(worst, float(np.max(np.abs(vals))))
        state = traj.final_state()
        t_used = signal.horizon
    if T > t_used + 1e-12:
        traj = free_flow_trajectory(sys, state, T - t_used, policy)
        vals = traj.states @ plane.rows.T - plane.offsets
        worst = max(worst, float(np.max(np.abs(vals))))
    return worst
