"""Energy-slice compactness bounds and conservation reporting.

On the slice {total momentum 0 + P0, sum of coordinates Q} the sublevel
set {H <= c} is compact: each bond energy is at most c + (n-1)B when the
energy is bounded below by -B, so each bond difference is at most the
inverse image b of that level, and telescoping against the coordinate
sum pins every q_j into an interval of width b*n centred structure
around Q/n. The momentum part lies in the ball of squared radius c + B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dynamics import Trajectory
from .potentials import Potential
from .system import LatticeConfig, LatticeSystem

__all__ = [
    "EnergyBox",
    "CompactnessReport",
    "ConservationReport",
    "lebesgue_bound",
    "verify_compactness",
    "conservation_report",
]


@dataclass(frozen=True)
class EnergyBox:
    n: int
    c: float
    B: float
    empty: bool
    bond_bound: float | None
    momentum_bound: float | None

    def interval(self, Q: float) -> tuple[float, float]:
        """Coordinate interval containing every q_j on the slice sum q = Q."""
        if self.empty:
            raise ValueError("empty energy set has no coordinate box")
        b = self.bond_bound
        centre = Q / self.n
        return (centre - b * (self.n + 1) / 2.0, centre + b * (self.n - 1) / 2.0)

    @property
    def width(self) -> float:
        if self.empty:
            return 0.0
        return self.bond_bound * self.n

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "bond_bound": self.bond_bound,
            "c": self.c,
            "empty": self.empty,
            "momentum_bound": self.momentum_bound,
            "n": self.n,
        }


def lebesgue_bound(
    pot: Potential, c: float, n: int, B: float | None = None
) -> EnergyBox:
    """Bond and momentum bounds for {H <= c} on the zero-momentum slice.

    B is the declared lower-bound magnitude (energy >= -B); by default it
    is taken from the potential. The bond bound solves
    energy(b) = c + (n-1)B by doubling bracket plus 80 bisections, using
    the declared growth of the energy on the right.
    """
    if not isinstance(n, int) or n < 2:
        raise ValueError("n must be an integer >= 2")
    if B is None:
        if pot.lower_bound is None:
            raise ValueError(
                "potential declares no lower bound; pass B explicitly"
            )
        B = max(0.0, -float(pot.lower_bound))
    if B < 0.0:
        raise ValueError("B must be >= 0 (energy bounded below by -B)")
    if not pot.grows:
        raise ValueError("energy growth not declared; bond bound may not exist")

    target = c + (n - 1) * B
    if c + B < 0.0:
        return EnergyBox(n=n, c=c, B=B, empty=True, bond_bound=None, momentum_bound=None)

    # minimal slice energy is n bonds at the energy infimum (periodic chain)
    if pot.lower_bound is not None and c < n * float(pot.lower_bound):
        return EnergyBox(n=n, c=c, B=B, empty=True, bond_bound=None, momentum_bound=None)

    # left end of the bisection bracket: some y with energy(y) <= target
    lo = None
    probe = 0.0
    stepdown = 1.0
    for _ in range(240):
        if float(pot.energy(probe)) <= target:
            lo = probe
            break
        probe -= stepdown
        stepdown *= 2.0
    if lo is None:
        return EnergyBox(n=n, c=c, B=B, empty=True, bond_bound=None, momentum_bound=None)

    hi = max(lo + 1.0, 1.0)
    for _ in range(240):
        if float(pot.energy(hi)) > target:
            break
        hi = lo + 2.0 * (hi - lo)
    else:
        raise ValueError("energy never exceeded the target level; growth flag wrong?")

    a, b = lo, hi
    for _ in range(80):
        mid = 0.5 * (a + b)
        if float(pot.energy(mid)) <= target:
            a = mid
        else:
            b = mid
    return EnergyBox(
        n=n,
        c=c,
        B=B,
        empty=False,
        bond_bound=a,
        momentum_bound=math.sqrt(c + B),
    )


@dataclass(frozen=True)
class CompactnessReport:
    box: EnergyBox
    Q: float
    attempts: int
    accepted: int
    violations: int
    acceptance_rate: float
    starved: bool
    samples: np.ndarray | None = None  # bulk data, kept out of to_dict

    def to_dict(self) -> dict:
        return {
            "Q": self.Q,
            "acceptance_rate": self.acceptance_rate,
            "accepted": self.accepted,
            "attempts": self.attempts,
            "box": self.box.to_dict(),
            "starved": self.starved,
            "violations": self.violations,
        }


def verify_compactness(
    pot: Potential,
    c: float,
    Q: float,
    n: int,
    num_samples: int = 10_000,
    seed: int = 0,
    inflate: float = 1.5,
    B: float | None = None,
    keep_samples: int = 0,
) -> CompactnessReport:
    """Monte-Carlo check of the box: rejection-sample states on the slice
    {sum p = 0, sum q = Q, H <= c} from a coordinate box inflated by the
    given factor, and count samples that land outside the proved bounds.
    Starvation (acceptance below 1e-6) is reported, not raised.
    keep_samples > 0 retains that many accepted states on the report.
    """
    box = lebesgue_bound(pot, c, n, B=B)
    if box.empty:
        return CompactnessReport(
            box=box, Q=Q, attempts=0, accepted=0, violations=0,
            acceptance_rate=0.0, starved=False,
        )
    sys = LatticeSystem(LatticeConfig(n=n, topology="periodic"), pot)
    rng = np.random.default_rng(seed)
    lo, hi = box.interval(Q)
    centre = 0.5 * (lo + hi)
    halfwidth = 0.5 * (hi - lo) * inflate
    radius = box.momentum_bound

    # orthonormal basis of the zero-sum momentum subspace
    basis = linalg.null_space(np.ones((1, n)))

    accepted = 0
    violations = 0
    attempts = 0
    batch = 4096
    slack = 1e-12
    kept_rows: list[np.ndarray] = []
    while accepted < num_samples and attempts < 1000 * num_samples:
        k = min(batch, 1000 * num_samples - attempts)
        attempts += k
        q = rng.uniform(centre - halfwidth, centre + halfwidth, size=(k, n - 1))
        qn = Q - q.sum(axis=1)
        qs = np.column_stack([q, qn])
        # uniform in the (n-1)-ball of the zero-sum momentum subspace
        z = rng.normal(size=(k, n - 1))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = radius * rng.uniform(size=k) ** (1.0 / (n - 1))
        ps = (z * r[:, None]) @ basis.T
        states = np.column_stack([qs, ps])
        H = sys.hamiltonian_many(states)
        keep = H <= c
        if not np.any(keep):
            continue
        kept_q = qs[keep]
        kept_p = ps[keep]
        take = min(int(np.sum(keep)), num_samples - accepted)
        kept_q = kept_q[:take]
        kept_p = kept_p[:take]
        accepted += take
        if keep_samples > 0 and len(kept_rows) < keep_samples:
            room = keep_samples - len(kept_rows)
            kept_rows.extend(np.column_stack([kept_q, kept_p])[:room])
        in_box = np.all(
            (kept_q >= lo - slack) & (kept_q <= hi + slack), axis=1
        )
        in_ball = (
            np.linalg.norm(kept_p, axis=1) <= radius * (1.0 + 1e-12) + slack
        )
        violations += int(np.sum(~(in_box & in_ball)))
    rate = accepted / attempts if attempts else 0.0
    return CompactnessReport(
        box=box,
        Q=Q,
        attempts=attempts,
        accepted=accepted,
        violations=violations,
        acceptance_rate=rate,
        starved=bool(attempts > 0 and rate < 1e-6),
        samples=np.array(kept_rows) if kept_rows else None,
    )


@dataclass(frozen=True)
class ConservationReport:
    horizon: float
    energy_initial: float
    energy_drift: float
    energy_drift_rate: float
    momentum_defect: float

    def to_dict(self) -> dict:
        return {
            "energy_drift": self.energy_drift,
            "energy_drift_rate": self.energy_drift_rate,
            "energy_initial": self.energy_initial,
            "horizon": self.horizon,
            "momentum_defect": self.momentum_defect,
        }


def conservation_report(traj: Trajectory, sys: LatticeSystem) -> ConservationReport:
    """Worst-case energy drift and momentum-bookkeeping defect over the
    trajectory samples. The momentum defect compares the change in total
    momentum against the running control integral plus any recorded
    instantaneous bumps; for a free trajectory it is just |P - P0|.
    """
    if len(traj) == 0:
        raise ValueError("trajectory has no samples")
    states = traj.states
    n = states.shape[1] // 2
    H = sys.hamiltonian_many(states)
    dH = np.abs(H - H[0])
    energy_drift = float(np.max(dH))

    P = states[:, n:].sum(axis=1)
    injected = traj.control_integral.sum(axis=1)
    jumps = traj.meta.get("jump_running")
    if jumps is not None:
        injected = injected + np.asarray(jumps, dtype=float)
    defect = float(np.max(np.abs(P - P[0] - (injected - injected[0]))))

    horizon = float(traj.times[-1] - traj.times[0])
    rate = energy_drift / horizon if horizon > 0.0 else 0.0
    return ConservationReport(
        horizon=horizon,
        energy_initial=float(H[0]),
        energy_drift=energy_drift,
        energy_drift_rate=rate,
        momentum_defect=defect,
    )
