"""Fixed-step symplectic time stepping with piecewise-constant forcing.

The kick-drift-kick update conserves energy to O(step^2) on free segments and
moves total momentum by exactly step * u per step under constant forcing u
(interior forces telescope to zero for both topologies). A constant control
is itself Hamiltonian (tilted bond energy), so the same update covers forced
segments without losing the symplectic structure.

Reverse-time integration exists only as ``reverse_flow_oracle`` and is meant
for test comparisons; steering pipelines are built from forward flows only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .system import LatticeSystem, State

__all__ = [
    "DEFAULT_STEP",
    "IntegratorPolicy",
    "ControlSignal",
    "Trajectory",
    "NumericalFailure",
    "free_flow",
    "free_flow_trajectory",
    "controlled_flow",
    "reverse_flow_oracle",
    "reference_endpoint",
]

DEFAULT_STEP = 1e-3
DEFAULT_STRIDE = 10


class NumericalFailure(RuntimeError):
    """Integration produced non-finite values (overflow, NaN)."""


@dataclass(frozen=True)
class IntegratorPolicy:
    """Fixed-step policy. ``clamp`` bounds admissible |u|; None = unbounded."""

    step: float = DEFAULT_STEP
    sample_stride: int = DEFAULT_STRIDE
    clamp: Optional[float] = None
    method: str = "verlet"

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ValueError(f"step must be positive and finite, got {self.step!r}")
        if not (isinstance(self.sample_stride, int) and self.sample_stride >= 1):
            raise ValueError(f"sample_stride must be a positive integer, got {self.sample_stride!r}")
        if self.method != "verlet":
            raise ValueError(f"unknown integrator method {self.method!r}")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError(f"clamp must be positive or None, got {self.clamp!r}")


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant control per forced site.

    ``segments[i]`` belongs to ``sites[i]`` and is a tuple of (duration, value)
    pairs with positive durations. All sites must cover the same horizon.
    """

    sites: Tuple[int, ...]
    segments: Tuple[Tuple[Tuple[float, float], ...], ...]

    def __post_init__(self):
        if len(self.sites) == 0 or len(self.sites) != len(self.segments):
            raise ValueError("sites and segments must align and be non-empty")
        if len(set(self.sites)) != len(self.sites):
            raise ValueError(f"duplicate sites in control signal: {self.sites}")
        horizons = []
        for site, segs in zip(self.sites, self.segments):
            if len(segs) == 0:
                raise ValueError(f"site {site} has no segments")
            for d, v in segs:
                if not (d > 0 and math.isfinite(d)):
                    raise ValueError(f"segment durations must be positive and finite, got {d!r}")
                if not math.isfinite(v):
                    raise ValueError(f"segment values must be finite, got {v!r}")
            horizons.append(math.fsum(d for d, _ in segs))
        if max(horizons) - min(horizons) > 1e-12 * (1.0 + max(horizons)):
            raise ValueError(f"sites cover different horizons: {horizons}")
        object.__setattr__(self, "segments",
                           tuple(tuple((float(d), float(v)) for d, v in segs)
                                 for segs in self.segments))
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))

    @classmethod
    def from_segments(cls, per_site: Dict[int, Sequence[Tuple[float, float]]]) -> "ControlSignal":
        sites = tuple(sorted(per_site))
        return cls(sites=sites, segments=tuple(tuple(per_site[s]) for s in sites))

    @classmethod
    def constant(cls, value: float, duration: float, site: int = 1) -> "ControlSignal":
        return cls(sites=(site,), segments=(((duration, value),),))

    @property
    def horizon(self) -> float:
        return math.fsum(d for d, _ in self.segments[0])

    @property
    def max_abs(self) -> float:
        return max(abs(v) for segs in self.segments for _, v in segs)

    def value_at(self, t: float, site: int) -> float:
        """Right-continuous value at time t (final segment value at the horizon)."""
        segs = self.segments[self.sites.index(site)]
        acc = 0.0
        for d, v in segs:
            acc += d
            if t < acc:
                return v
        return segs[-1][1]

    def merged(self) -> List[Tuple[float, np.ndarray]]:
        """Refine all sites onto common boundaries: list of (duration, values)."""
        horizon = self.horizon
        cuts = {0.0, horizon}
        for segs in self.segments:
            acc = 0.0
            for d, _ in segs[:-1]:
                acc += d
                cuts.add(acc)
        ts = sorted(cuts)
        # cluster numerically identical boundaries
        merged_ts = [ts[0]]
        for t in ts[1:]:
            if t - merged_ts[-1] > 1e-12 * (1.0 + horizon):
                merged_ts.append(t)
        out = []
        for t0, t1 in zip(merged_ts[:-1], merged_ts[1:]):
            mid = 0.5 * (t0 + t1)
            vals = np.array([self.value_at(mid, s) for s in self.sites])
            out.append((t1 - t0, vals))
        return out


@dataclass(frozen=True)
class Trajectory:
    """Sampled controlled evolution.

    controls[k] is the value applied on [times[k], times[k+1]) (right-
    continuous); control_integral[k] is the exact running integral of the
    control at each sample, one column per site in ``sites`` order.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    control_integral: np.ndarray
    sites: Tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.times.size

    def final_state(self) -> State:
        return State.from_vector(self.states[-1])

    def state_at(self, k: int) -> State:
        return State.from_vector(self.states[k])


class _Runner:
    """Composable leg/jump integrator shared by flows and plan execution."""

    def __init__(self, sys: LatticeSystem, state: State, policy: IntegratorPolicy,
                 record: bool = True):
        sys._check(state)
        self.sys = sys
        self.policy = policy
        self.q = state.q.copy()
        self.p = state.p.copy()
        self.t = 0.0
        self.idx = np.array(sys.control_indices, dtype=int)
        self.m = self.idx.size
        self.record = record
        self.jump_total = np.zeros(self.m)
        self._jump_sum = 0.0
        self._cum = np.zeros(self.m)
        if record:
            self.times = [0.0]
            self.states = [np.concatenate([self.q, self.p])]
            self.controls = [np.zeros(self.m)]
            self.integrals = [np.zeros(self.m)]
            self.jumps = [0.0]

    def jump(self, amounts: np.ndarray) -> None:
        """Instantaneous momentum change at the control sites (idealized shift).

        Replaces the state of the current sample in place: the jump costs no
        time, so sample times stay strictly increasing.
        """
        self.p[self.idx] += amounts
        self.jump_total += amounts
        self._jump_sum += float(np.sum(amounts))
        if self.record:
            self.states[-1] = np.concatenate([self.q, self.p])
            self.jumps[-1] = self._jump_sum

    def leg(self, duration: float, u_row: Optional[np.ndarray] = None,
            step: Optional[float] = None, reverse: bool = False) -> None:
        if duration < 0 or not math.isfinite(duration):
            raise ValueError(f"leg duration must be >= 0 and finite, got {duration!r}")
        if duration == 0.0:
            return
        h0 = self.policy.step if step is None else step
        ns = max(1, int(math.ceil(duration / h0 - 1e-12)))
        h = duration / ns
        if reverse:
            h = -h
        u_force = None
        u_vals = np.zeros(self.m)
        if u_row is not None:
            u_vals = np.asarray(u_row, dtype=float)
            if np.any(u_vals != 0.0):
                u_force = np.zeros(self.sys.n)
                u_force[self.idx] = u_vals
        if self.record:
            self.controls[-1] = u_vals.copy()
        stride = self.policy.sample_stride
        t0, cum0 = self.t, self._cum.copy()
        q, p = self.q, self.p
        forces = self.sys.forces
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            f = forces(q)
            if u_force is not None:
                f = f + u_force
            for k in range(1, ns + 1):
                p = p + (0.5 * h) * f
                q = q + h * p
                f = forces(q)
                if u_force is not None:
                    f = f + u_force
                p = p + (0.5 * h) * f
                if self.record and (k % stride == 0 or k == ns):
                    tk = t0 + duration if k == ns else t0 + k * abs(h)
                    self.times.append(tk)
                    self.states.append(np.concatenate([q, p]))
                    self.controls.append(u_vals.copy())
                    self.integrals.append(cum0 + u_vals * (k * abs(h)))
                    self.jumps.append(self._jump_sum)
        self.q, self.p = q, p
        self.t = t0 + duration
        self._cum = cum0 + u_vals * duration
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise NumericalFailure(
                f"integration diverged (non-finite state after t={self.t:.6g})")

    def endpoint(self) -> State:
        return State(q=self.q, p=self.p)

    def trajectory(self) -> Trajectory:
        if not self.record:
            raise RuntimeError("runner was created without recording")
        return Trajectory(
            times=np.array(self.times),
            states=np.array(self.states),
            controls=np.array(self.controls),
            control_integral=np.array(self.integrals),
            sites=self.sys.config.control_sites,
            meta={"jump_running": np.array(self.jumps),
                  "jump_total": self._jump_sum,
                  "method": self.policy.method, "step": self.policy.step,
                  "sample_stride": self.policy.sample_stride},
        )


def _policy(policy: Optional[IntegratorPolicy]) -> IntegratorPolicy:
    return IntegratorPolicy() if policy is None else policy


def free_flow(sys: LatticeSystem, state: State, t: float,
              policy: Optional[IntegratorPolicy] = None) -> State:
    """Endpoint of the uncontrolled flow for time t >= 0. t = 0 is the identity."""
    if t < 0:
        raise ValueError(f"free_flow requires t >= 0, got {t!r} (reverse flow is quarantined)")
    if t == 0.0:
        return state
    r = _Runner(sys, state, _policy(policy), record=False)
    r.leg(t)
    return r.endpoint()


def free_flow_trajectory(sys: LatticeSystem, state: State, t: float,
                         policy: Optional[IntegratorPolicy] = None) -> Trajectory:
    """Sampled uncontrolled flow over [0, t]."""
    if t <= 0:
        raise ValueError(f"trajectory horizon must be positive, got {t!r}")
    r = _Runner(sys, state, _policy(policy), record=True)
    r.leg(t)
    return r.trajectory()


def controlled_flow(sys: LatticeSystem, state: State, signal: ControlSignal,
                    policy: Optional[IntegratorPolicy] = None) -> Trajectory:
    """Integrate with a piecewise-constant control signal applied at its sites."""
    pol = _policy(policy)
    extra = set(signal.sites) - set(sys.config.control_sites)
    if extra:
        raise ValueError(f"signal drives sites {sorted(extra)} that are not control sites")
    if pol.clamp is not None and signal.max_abs > pol.clamp:
        raise ValueError(
            f"control magnitude {signal.max_abs:g} exceeds the clamp {pol.clamp:g}")
    site_pos = {s: i for i, s in enumerate(sys.config.control_sites)}
    r = _Runner(sys, state, pol, record=True)
    for duration, vals in signal.merged():
        row = np.zeros(len(sys.config.control_sites))
        for s, v in zip(signal.sites, vals):
            row[site_pos[s]] = v
        r.leg(duration, u_row=row)
    return r.trajectory()


def reverse_flow_oracle(sys: LatticeSystem, state: State, t: float,
                        policy: Optional[IntegratorPolicy] = None) -> State:
    """Endpoint of the time-reversed free flow (test oracle).

    Quarantined: steering pipelines must not call this; it exists to verify
    forward-only reverse approximations in tests.
    """
    if t < 0:
        raise ValueError(f"reverse_flow_oracle requires t >= 0, got {t!r}")
    if t == 0.0:
        return state
    r = _Runner(sys, state, _policy(policy), record=False)
    r.leg(t, reverse=True)
    return r.endpoint()


def reference_endpoint(sys: LatticeSystem, state: State, t: float,
                       signal: Optional[ControlSignal] = None,
                       rtol: float = 1e-10, atol: float = 1e-12) -> State:
    """High-order adaptive endpoint (DOP853), the cross-check reference."""
    from scipy.integrate import solve_ivp

    if t < 0:
        raise ValueError("reference_endpoint requires t >= 0")
    n = sys.n
    legs: List[Tuple[float, Optional[np.ndarray]]] = []
    if signal is None:
        legs.append((t, None))
    else:
        if abs(signal.horizon - t) > 1e-9 * (1.0 + abs(t)):
            raise ValueError(f"signal horizon {signal.horizon} does not match t={t}")
        site_pos = {s: i for i, s in enumerate(signal.sites)}
        for duration, vals in signal.merged():
            force = np.zeros(n)
            for s in signal.sites:
                force[s - 1] = vals[site_pos[s]]
            legs.append((duration, force))
    x = state.vector()
    for duration, force in legs:
        if duration == 0.0:
            continue

        def rhs(_t, y, force=force):
            dq = y[n:]
            dp = sys.forces(y[:n])
            if force is not None:
                dp = dp + force
            return np.concatenate([dq, dp])

        sol = solve_ivp(rhs, (0.0, duration), x, method="DOP853",
                        rtol=rtol, atol=atol, dense_output=False)
        if not sol.success:
            raise NumericalFailure(f"reference integration failed: {sol.message}")
        x = sol.y[:, -1]
    return State.from_vector(x)
