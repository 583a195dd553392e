"""Lie-bracket machinery for chain systems.

Two independent bracket routes live here. ``numeric_bracket`` estimates
[X, Y] by central differencing and works for any pair of vector-field
handles; it is the oracle. The accessibility machinery (``lie_rank``,
``spanning_chain``, ``accessibility_family``) instead evaluates brackets
exactly, exploiting the chain structure of the drift: every iterated
bracket of the drift and a momentum bump has components that are finite
sums of terms

    coeff * prod_i (d^{m_i} Phi)(bond_{j_i}) * prod_l p_{k_l}

and that class is closed under differentiation and multiplication, so
brackets can be formed once per system and then evaluated at any state
to machine precision. Rank decisions are made by singular-value
thresholding on the evaluated family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .dynamics import NumericalFailure
from .potentials import Potential
from .system import LatticeSystem, State

__all__ = [
    "VectorFieldHandle",
    "BracketVector",
    "RankReport",
    "DegeneracyReport",
    "drift_handle",
    "control_handle",
    "bracket_handle",
    "numeric_bracket",
    "closed_form_bracket_family",
    "spanning_chain",
    "accessibility_family",
    "lie_rank",
    "genericity_determinant",
    "degeneracy_scan",
    "kalman_rank",
    "energy_derivative",
]

SVD_RELATIVE_TOL = 1e-8


# ---------------------------------------------------------------------------
# vector-field handles and the finite-difference oracle

@dataclass(frozen=True)
class VectorFieldHandle:
    """A labelled state -> tangent-vector evaluator."""

    evaluator: Callable[[State], np.ndarray]
    label: str

    def __call__(self, state: State) -> np.ndarray:
        return np.asarray(self.evaluator(state), dtype=float)


class BracketVector(NamedTuple):
    label: str
    vector: np.ndarray


def drift_handle(sys: LatticeSystem) -> VectorFieldHandle:
    return VectorFieldHandle(lambda st: sys.drift_vector(st.vector()), "f")


def control_handle(sys: LatticeSystem, site: int) -> VectorFieldHandle:
    vec = sys.control_field(site)
    label = "g" if len(sys.config.control_sites) == 1 else f"g{site}"
    return VectorFieldHandle(lambda st, _v=vec: _v.copy(), label)


def numeric_bracket(
    X: VectorFieldHandle,
    Y: VectorFieldHandle,
    x: State,
    h: float | None = None,
) -> np.ndarray:
    """Central-difference estimate of [X, Y](x) = DY.X - DX.Y.

    The default step is 1e-4 * (1 + |x|). Differencing is directional and
    normalized, so a large field value does not push the stencil far from x.
    """
    xv = x.vector()
    if h is None:
        h = 1e-4 * (1.0 + float(np.linalg.norm(xv)))
    if not (h > 0.0):
        raise ValueError("differencing step h must be positive")

    def directional(F: VectorFieldHandle, direction: np.ndarray) -> np.ndarray:
        nv = float(np.linalg.norm(direction))
        if nv == 0.0:
            return np.zeros_like(xv)
        unit = direction / nv
        plus = F(State.from_vector(xv + h * unit))
        minus = F(State.from_vector(xv - h * unit))
        return nv * (plus - minus) / (2.0 * h)

    u = X(x)
    v = Y(x)
    out = directional(Y, u) - directional(X, v)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure(
            f"non-finite values while differencing [{X.label},{Y.label}]"
        )
    return out


def bracket_handle(
    X: VectorFieldHandle, Y: VectorFieldHandle, h: float | None = None
) -> VectorFieldHandle:
    """Handle for [X, Y] that re-differences at each evaluation point."""
    return VectorFieldHandle(
        lambda st: numeric_bracket(X, Y, st, h), f"[{X.label},{Y.label}]"
    )


# ---------------------------------------------------------------------------
# derivatives of the bond energy beyond the stored cascade

def energy_derivative(pot: Potential, order: int) -> Callable[[float], float]:
    """Callable for the order-th derivative of the bond energy (order >= 1)."""
    if not isinstance(order, int) or order < 1:
        raise ValueError("derivative order must be an integer >= 1")
    if order == 1:
        return pot.tension
    if order == 2:
        return pot.stiffness
    if order == 3:
        return pot.stiffness_slope
    if pot.kind == "toda":
        scale = 2.0 ** order
        return lambda y, _s=scale: _s * np.exp(2.0 * y)
    desc = pot.params.get("tension_coeffs_desc")
    if desc is None:
        raise ValueError(
            f"cannot form order-{order} derivatives for potential kind "
            f"{pot.kind!r}: no polynomial data available"
        )
    shift = float(pot.params.get("shift", 0.0))
    coeffs = np.asarray(desc, dtype=float)
    for _ in range(order - 1):
        coeffs = np.polyder(coeffs)
    if coeffs.size == 0:
        coeffs = np.zeros(1)
    return lambda y, _c=coeffs, _b=shift: np.polyval(_c, y - _b)


# ---------------------------------------------------------------------------
# exact structured-term fields
#
# Term key: (bond_factors, momentum_factors) with
#   bond_factors    sorted tuple of (bond index, energy-derivative order)
#   momentum_factors sorted tuple of 0-based particle indices
# An expression is {term: coefficient}; a field maps component index
# (0..n-1 the q block, n..2n-1 the p block) to an expression.

_UNIT_TERM = ((), ())


def _bond_endpoints(sys: LatticeSystem, j: int) -> tuple[int, int]:
    # bond j is q_a - q_b
    if sys.periodic:
        return j, (j + 1) % sys.n
    return j, j + 1


def _num_bonds(sys: LatticeSystem) -> int:
    return sys.n if sys.periodic else sys.n - 1


def _drift_field(sys: LatticeSystem) -> dict:
    n = sys.n
    field: dict[int, dict] = {}
    for k in range(n):
        field[k] = {((), (k,)): 1.0}
    for k in range(n):
        expr: dict = {}
        for j in range(_num_bonds(sys)):
            a, b = _bond_endpoints(sys, j)
            # tension on bond j pulls particle a back and particle b forward
            if b == k:
                key = (((j, 1),), ())
                expr[key] = expr.get(key, 0.0) + 1.0
            if a == k:
                key = (((j, 1),), ())
                expr[key] = expr.get(key, 0.0) - 1.0
        expr = {t: c for t, c in expr.items() if c != 0.0}
        if expr:
            field[n + k] = expr
    return field


def _control_field_sym(sys: LatticeSystem, site0: int) -> dict:
    return {sys.n + site0: {_UNIT_TERM: 1.0}}


def _diff_expr(sys: LatticeSystem, expr: dict, coord: int) -> dict:
    n = sys.n
    out: dict = {}
    if coord < n:
        for (bonds, moms), c in expr.items():
            for i, (j, m) in enumerate(bonds):
                a, b = _bond_endpoints(sys, j)
                sign = 1.0 if coord == a else (-1.0 if coord == b else 0.0)
                if sign == 0.0:
                    continue
                bumped = list(bonds)
                bumped[i] = (j, m + 1)
                key = (tuple(sorted(bumped)), moms)
                out[key] = out.get(key, 0.0) + c * sign
    else:
        r = coord - n
        for (bonds, moms), c in expr.items():
            cnt = moms.count(r)
            if cnt == 0:
                continue
            reduced = list(moms)
            reduced.remove(r)
            key = (bonds, tuple(reduced))
            out[key] = out.get(key, 0.0) + c * cnt
    return {t: c for t, c in out.items() if c != 0.0}


def _mul_expr(e1: dict, e2: dict) -> dict:
    out: dict = {}
    for (b1, m1), c1 in e1.items():
        for (b2, m2), c2 in e2.items():
            key = (tuple(sorted(b1 + b2)), tuple(sorted(m1 + m2)))
            out[key] = out.get(key, 0.0) + c1 * c2
    return {t: c for t, c in out.items() if c != 0.0}


def _accum(field: dict, comp: int, expr: dict, sign: float = 1.0) -> None:
    if not expr:
        return
    dest = field.setdefault(comp, {})
    for t, c in expr.items():
        dest[t] = dest.get(t, 0.0) + sign * c


def _bracket_sym(sys: LatticeSystem, X: dict, Y: dict) -> dict:
    """Exact bracket [X, Y] = DY.X - DX.Y on structured-term fields."""
    dim = 2 * sys.n
    Z: dict[int, dict] = {}
    for r in range(dim):
        Xr = X.get(r)
        if Xr:
            for comp, e in Y.items():
                d = _diff_expr(sys, e, r)
                if d:
                    _accum(Z, comp, _mul_expr(Xr, d))
        Yr = Y.get(r)
        if Yr:
            for comp, e in X.items():
                d = _diff_expr(sys, e, r)
                if d:
                    _accum(Z, comp, _mul_expr(Yr, d), sign=-1.0)
    return {
        comp: clean
        for comp, expr in Z.items()
        if (clean := {t: c for t, c in expr.items() if c != 0.0})
    }


class _DerivTable:
    """Per-state cache of bond values and energy-derivative evaluations."""

    def __init__(self, sys: LatticeSystem, x: np.ndarray):
        self.sys = sys
        self.q = x[: sys.n]
        self.p = x[sys.n :]
        self.bonds = sys.bonds(self.q)
        self._vals: dict[tuple[int, int], float] = {}
        self._fns: dict[int, Callable] = {}

    def value(self, j: int, m: int) -> float:
        key = (j, m)
        got = self._vals.get(key)
        if got is None:
            fn = self._fns.get(m)
            if fn is None:
                fn = energy_derivative(self.sys.potential, m)
                self._fns[m] = fn
            got = float(fn(self.bonds[j]))
            self._vals[key] = got
        return got


def _eval_field(sys: LatticeSystem, field: dict, table: _DerivTable) -> np.ndarray:
    out = np.zeros(2 * sys.n)
    p = table.p
    for comp, expr in field.items():
        tot = 0.0
        for (bonds, moms), c in expr.items():
            v = c
            for j, m in bonds:
                v *= table.value(j, m)
            for k in moms:
                v *= p[k]
            tot += v
        out[comp] = tot
    return out


# ---------------------------------------------------------------------------
# family generation

_FAMILY_CACHE: dict[tuple[int, int], tuple[LatticeSystem, list]] = {}
_FRONTIER_CAP = 24
_PROBE_SEED = 20240816


def _probe_states(sys: LatticeSystem) -> np.ndarray:
    rng = np.random.default_rng(_PROBE_SEED)
    return rng.normal(0.0, 0.5, size=(4, 2 * sys.n))


def _build_family(sys: LatticeSystem, depth: int) -> list[tuple[str, dict]]:
    probes = _probe_states(sys)
    tables = [_DerivTable(sys, x) for x in probes]

    def stacked(field: dict) -> np.ndarray:
        return np.concatenate([_eval_field(sys, field, t) for t in tables])

    gens = [("f", _drift_field(sys))]
    family: list[tuple[str, dict]] = []
    frontier: list[tuple[str, dict]] = []
    single = len(sys.config.control_sites) == 1
    for site in sys.config.control_sites:
        label = "g" if single else f"g{site}"
        gfield = _control_field_sym(sys, site - 1)
        gens.append((label, gfield))
        family.append((label, gfield))
        frontier.append((label, gfield))

    drift_scale = max(float(np.max(np.abs(stacked(gens[0][1])))), 1.0)
    ztol = 1e-10 * drift_scale
    spans = [stacked(fld) for _, fld in family]

    for _ in range(depth):
        candidates = []
        for glabel, G in gens:
            for flabel, F in frontier:
                Z = _bracket_sym(sys, G, F)
                if not Z:
                    continue
                vals = stacked(Z)
                mag = float(np.max(np.abs(vals)))
                if mag < ztol:
                    continue
                candidates.append((f"[{glabel},{flabel}]", Z, vals))
        if not candidates:
            break
        if len(candidates) > _FRONTIER_CAP:
            # keep the candidates least explained by the family so far
            basis = np.linalg.qr(np.column_stack(spans))[0] if spans else None
            scored = []
            for label, Z, vals in candidates:
                if basis is None:
                    novelty = 1.0
                else:
                    resid = vals - basis @ (basis.T @ vals)
                    novelty = float(np.linalg.norm(resid)) / (
                        float(np.linalg.norm(vals)) + 1e-300
                    )
                scored.append((novelty, label, Z, vals))
            scored.sort(key=lambda item: -item[0])
            candidates = [(l, z, v) for _, l, z, v in scored[:_FRONTIER_CAP]]
        frontier = []
        for label, Z, vals in candidates:
            family.append((label, Z))
            frontier.append((label, Z))
            spans.append(vals)
    return family


def _family_for(sys: LatticeSystem, depth: int) -> list[tuple[str, dict]]:
    key = (id(sys), depth)
    hit = _FAMILY_CACHE.get(key)
    if hit is not None and hit[0] is sys:
        return hit[1]
    fam = _build_family(sys, depth)
    if len(_FAMILY_CACHE) > 32:
        _FAMILY_CACHE.clear()
    _FAMILY_CACHE[key] = (sys, fam)
    return fam


def accessibility_family(
    sys: LatticeSystem, depth: int | None = None
) -> list[VectorFieldHandle]:
    """Bracket fields generated from the control bumps by repeated
    bracketing with the drift and the bumps themselves, to the given depth
    (default 2n). Fields that vanish identically on probe states are pruned.
    """
    if depth is None:
        depth = 2 * sys.n
    if not isinstance(depth, int) or depth < 1:
        raise ValueError("depth must be an integer >= 1")
    handles = []
    for label, field in _family_for(sys, depth):
        def _make(fld):
            return lambda st: _eval_field(sys, fld, _DerivTable(sys, st.vector()))
        handles.append(VectorFieldHandle(_make(field), label))
    return handles


# ---------------------------------------------------------------------------
# rank reports

@dataclass(frozen=True, eq=False)
class RankReport:
    point: State
    family: tuple[str, ...]
    singular_values: tuple[float, ...]
    rank: int
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "family": list(self.family),
            "point": {"q": self.point.q.tolist(), "p": self.point.p.tolist()},
            "rank": self.rank,
            "singular_values": list(self.singular_values),
            "tolerance": self.tolerance,
        }


def lie_rank(
    x: State,
    sys: LatticeSystem,
    depth: int | None = None,
    tol: float = SVD_RELATIVE_TOL,
) -> RankReport:
    """Accessibility rank at x: the family of iterated brackets is evaluated
    exactly and ranked by singular values above tol * sigma_max.

    Each field contributes a direction only, so rows are normalized to unit
    length before the SVD; deep brackets otherwise carry exponentially large
    magnitudes that would swamp sigma_max and hide genuine directions.
    """
    if depth is None:
        depth = 2 * sys.n
    if x.n != sys.n:
        raise ValueError(f"state has {x.n} particles, system has {sys.n}")
    fam = _family_for(sys, depth)
    table = _DerivTable(sys, x.vector())
    rows = np.array([_eval_field(sys, fld, table) for _, fld in fam])
    norms = np.linalg.norm(rows, axis=1)
    rows = rows / np.where(norms > 0.0, norms, 1.0)[:, None]
    sv = np.linalg.svd(rows, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sv > tol * sv[0]))
    return RankReport(
        point=x,
        family=tuple(label for label, _ in fam),
        singular_values=tuple(float(s) for s in sv),
        rank=rank,
        tolerance=tol,
    )


# ---------------------------------------------------------------------------
# hand closed forms and the spanning chain

def closed_form_bracket_family(x: State, sys: LatticeSystem) -> list[BracketVector]:
    """The first bracket triple at x, from the hand-derived closed forms.

    Requires a periodic chain forced at site 1. Returns [f,g] = -d/dq1,
    the second bracket a*(dp2-dp1) + d*(dpn-dp1) with a, d the stiffnesses
    of the two bonds at site 1, and their mutual bracket
    a'*(dp2-dp1) - d'*(dpn-dp1) built from the stiffness slopes.
    """
    if not sys.periodic:
        raise ValueError("closed-form family requires a periodic chain")
    if sys.control_indices != (0,):
        raise ValueError("closed-form family requires the force at site 1")
    n = sys.n
    if x.n != n:
        raise ValueError(f"state has {x.n} particles, system has {n}")
    bonds = sys.bonds(x.q)
    a = float(sys.potential.stiffness(bonds[0]))
    d = float(sys.potential.stiffness(bonds[n - 1]))
    ap = float(sys.potential.stiffness_slope(bonds[0]))
    dp = float(sys.potential.stiffness_slope(bonds[n - 1]))

    v1 = np.zeros(2 * n)
    v1[0] = -1.0

    v2 = np.zeros(2 * n)
    v2[n + 1] += a
    v2[n] -= a
    v2[n + (n - 1)] += d
    v2[n] -= d

    v3 = np.zeros(2 * n)
    v3[n + 1] += ap
    v3[n] -= ap
    v3[n + (n - 1)] -= dp
    v3[n] += dp

    return [
        BracketVector("ad f g", v1),
        BracketVector("ad2 f g", v2),
        BracketVector("[ad2 f g, ad f g]", v3),
    ]


def spanning_chain(x: State, sys: LatticeSystem, depth: int) -> list[BracketVector]:
    """Inductive bracket chain at x: f, g, ad f g, the neighbour momentum
    differences at the forced site, and their repeated brackets with f up
    to the requested depth. Brackets are exact (structured-term algebra).
    """
    if not isinstance(depth, int) or depth < 1:
        raise ValueError("depth must be an integer >= 1")
    if x.n != sys.n:
        raise ValueError(f"state has {x.n} particles, system has {sys.n}")
    n = sys.n
    s = sys.control_indices[0]
    table = _DerivTable(sys, x.vector())
    f_sym = _drift_field(sys)
    g_sym = _control_field_sym(sys, s)

    out = [
        BracketVector("f", _eval_field(sys, f_sym, table)),
        BracketVector("g", _eval_field(sys, g_sym, table)),
        BracketVector("ad f g", _eval_field(sys, _bracket_sym(sys, f_sym, g_sym), table)),
    ]

    if sys.periodic:
        neighbours = [(s + 1) % n, (s - 1) % n]
    else:
        neighbours = [k for k in (s + 1, s - 1) if 0 <= k < n]
    for nb in neighbours:
        label = f"e_p{nb + 1}-e_p{s + 1}"
        field = {n + nb: {_UNIT_TERM: 1.0}, n + s: {_UNIT_TERM: -1.0}}
        out.append(BracketVector(label, _eval_field(sys, field, table)))
        for _ in range(depth):
            field = _bracket_sym(sys, field, f_sym)
            label = f"[{label},f]"
            out.append(BracketVector(label, _eval_field(sys, field, table)))
    return out


# ---------------------------------------------------------------------------
# genericity and degeneracy of the bond energy

def genericity_determinant(pot: Potential, a: float, d: float) -> float:
    """Determinant of the 2x2 coefficient block formed by the second and
    third brackets at site 1, with bond values a = q1-q2 and d = qn-q1.
    Nonzero means those brackets span both neighbour momentum directions.
    """
    sa = float(pot.stiffness(a))
    sd = float(pot.stiffness(d))
    ra = float(pot.stiffness_slope(a))
    rd = float(pot.stiffness_slope(d))
    return -(sa * rd + sd * ra)


@dataclass(frozen=True)
class DegeneracyReport:
    classification: str  # "generic" | "even-shift" | "odd-shift"
    shift: float
    sign: int
    residual: float

    def to_dict(self) -> dict:
        return {
            "classification": self.classification,
            "residual": self.residual,
            "shift": self.shift,
            "sign": self.sign,
        }


DEGENERACY_RESIDUAL_TOL = 1e-8


def degeneracy_scan(
    pot: Potential,
    lo: float = -10.0,
    hi: float = 10.0,
    num: int = 401,
) -> DegeneracyReport:
    """Search for a centre b and sign c in {+1,-1} making the stiffness
    satisfy stiffness(b+t) = c * stiffness(b-t). The best centre is found
    by a coarse scan over [lo, hi] refined by golden section; the fit
    residual is root-mean-square, normalized by the stiffness scale.
    Classification is generic when the best residual is >= 1e-8.
    """
    if not (lo < hi):
        raise ValueError("scan interval must satisfy lo < hi")
    if lo > -5.0 or hi < 5.0:
        raise ValueError("scan interval must cover [-5, 5]")
    if num < 201:
        raise ValueError("scan grid needs at least 201 points")

    half = 0.5 * (hi - lo)
    ts = np.linspace(0.0, half, max(num // 2 + 1, 101))

    def residual(b: float, c: float) -> float:
        up = np.asarray(pot.stiffness(b + ts), dtype=float)
        dn = np.asarray(pot.stiffness(b - ts), dtype=float)
        den = float(np.mean(up * up + dn * dn)) / 2.0
        if den < 1e-300:
            return 0.0
        return math.sqrt(float(np.mean((up - c * dn) ** 2)) / (2.0 * den))

    bs = np.linspace(lo, hi, num)
    best: tuple[float, float, float] | None = None  # (residual, b, c)
    for c in (1.0, -1.0):
        res = np.array([residual(b, c) for b in bs])
        passing = bs[res < DEGENERACY_RESIDUAL_TOL]
        if passing.size >= max(4, num // 4):
            # plateau: symmetry holds about every centre; take the smallest
            b_pick = float(passing[np.argmin(np.abs(passing))])
            if residual(0.0, c) < DEGENERACY_RESIDUAL_TOL:
                b_pick = 0.0
            cand = (residual(b_pick, c), b_pick, c)
        else:
            k = int(np.argmin(res))
            lo_b = bs[max(k - 1, 0)]
            hi_b = bs[min(k + 1, num - 1)]
            b_ref = _golden_min(lambda b: residual(b, c), lo_b, hi_b)
            if abs(b_ref) < 1e-9 and residual(0.0, c) <= residual(b_ref, c) + 1e-15:
                b_ref = 0.0
            cand = (residual(b_ref, c), float(b_ref), c)
        if best is None or cand[0] < best[0] - 1e-15 or (
            abs(cand[0] - best[0]) <= 1e-15 and cand[2] > best[2]
        ):
            best = cand

    res_best, b_best, c_best = best
    if res_best < DEGENERACY_RESIDUAL_TOL:
        classification = "even-shift" if c_best > 0 else "odd-shift"
    else:
        classification = "generic"
    return DegeneracyReport(
        classification=classification,
        shift=b_best,
        sign=int(c_best),
        residual=res_best,
    )


def _golden_min(fn: Callable[[float], float], lo: float, hi: float) -> float:
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv * (b - a)
    d = a + inv * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(120):
        if b - a < 1e-13 * (1.0 + abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# linear-force oracle

def kalman_rank(sys: LatticeSystem, site: int = 1) -> int:
    """Controllability-matrix rank of the linearized pair (A, B) for a
    constant-stiffness (linear-force) chain, forced at the given site.
    Raises if the potential's force is not linear.
    """
    n = sys.n
    if not isinstance(site, int) or not (1 <= site <= n):
        raise ValueError(f"site must be an integer in 1..{n}")
    probes = np.array([-2.3, -0.7, 0.0, 1.1, 2.9])
    ks = np.asarray(sys.potential.stiffness(probes), dtype=float)
    k = float(np.mean(ks))
    slope = np.asarray(sys.potential.stiffness_slope(probes), dtype=float)
    tol = 1e-9 * (1.0 + abs(k))
    if np.max(np.abs(ks - k)) > tol or np.max(np.abs(slope)) > tol:
        raise ValueError("potential force is not linear: stiffness must be constant")

    M = sys.force_jacobian(np.zeros(n))
    dim = 2 * n
    A = np.zeros((dim, dim))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = M
    B = np.zeros(dim)
    B[n + site - 1] = 1.0

    cols = [B]
    for _ in range(dim - 1):
        cols.append(A @ cols[-1])
    sv = np.linalg.svd(np.column_stack(cols), compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > SVD_RELATIVE_TOL * sv[0]))
