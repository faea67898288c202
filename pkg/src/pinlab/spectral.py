"""Spectral data of the pinned Laplacian H = Delta + beta delta_0.

The whole point-spectrum story of H reduces to the scalar function

    I(lam) = (2 pi)^{-d} int_{T^d} dphi / (lam + Phi(phi)),

the diagonal free resolvent (lattice Green function at the origin).  I is
strictly decreasing and convex on (0, inf), finite at 0 exactly when the
walk is transient (d >= 3).  Its reciprocal at 0 is the critical coupling
beta_c = 1/I(0) = 2d e_d, an eigenvalue lam0(beta) exists iff
I(lam0) = 1/beta has a root, and the (unnormalized) eigenfunction is a
free resolvent slice psi(x) = beta R_{0,lam0}(0, x).

Everything here is built on the one-dimensional Bessel--Laplace
representation of I (see :mod:`pinlab.lattice`); small-lam differences
I(0) - I(lam) are integrated directly in cancellation-free form, since the
lam -> 0 expansion coefficients are the input to every heat-kernel and
partition-function tail law:

    d = 3 :  I(0) - I(lam) ~ sqrt(lam) / (4 pi)
    d = 4 :  I(0) - I(lam) ~ lam ln(1/lam) / (16 pi^2)
    d >= 5:  I(0) - I(lam) ~ s_d lam,   s_d = -I'(0).

(The d = 4 constant follows from the surface measure of S^3 against the
(2 pi)^{-4} normalization, and is verified numerically in the test suite;
so is the d = 3 constant.)
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from .lattice import (
    TimeGrid,
    first_passage_density,
    free_resolvent,
    scaled_bessel_i,
    _as_site,
)

__all__ = [
    "SpectralTable",
    "LatticeField",
    "EigenPair",
    "StationaryMeasure",
    "ExpansionCheck",
    "MomentScan",
    "NoEigenvalueError",
    "NonNormalizableError",
    "I_lambda",
    "I_lambda_prime",
    "I_diff",
    "critical_beta",
    "lambda0",
    "eigenfunction",
    "stationary_measure",
    "asymptotic_expansion_check",
]


class NoEigenvalueError(ValueError):
    """No point eigenvalue exists for the requested (beta, d)."""


class NonNormalizableError(ValueError):
    """The eigenfunction is not square-summable (d <= 4 at criticality)."""


# ----------------------------------------------------------------------
# I(lam) and its small-lam behavior
# ----------------------------------------------------------------------

def I_lambda(lam: float, dim: int) -> float:
    """Diagonal free resolvent I(lam); math.inf at lam = 0 for d <= 2."""
    if lam < 0.0:
        raise ValueError("lam must be nonnegative")
    if lam == 0.0 and dim <= 2:
        return math.inf
    return free_resolvent(lam, np.zeros(dim, dtype=int))


def I_lambda_prime(lam: float, dim: int) -> float:
    """dI/dlam, by differentiating under the Bessel--Laplace integral."""
    return -free_resolvent(lam, np.zeros(dim, dtype=int), weight_t=1)


def I_diff(lam: float, dim: int, T: float = 48.0) -> float:
    """I(0) - I(lam) for d >= 3, computed without cancellation.

    Integrates (1 - e^{-lam t}) p0(t,0,0) directly, so the tiny difference
    at small lam carries full relative accuracy.
    """
    if dim <= 2:
        raise ValueError("I(0) is infinite for d <= 2")
    if lam < 0.0:
        raise ValueError("lam must be nonnegative")
    if lam == 0.0:
        return 0.0
    d = dim

    def body(t):
        return -math.expm1(-lam * t) * float(scaled_bessel_i(0, 2.0 * t)) ** d

    val, _ = integrate.quad(body, 0.0, T, epsabs=1e-16, epsrel=1e-13, limit=300)

    def tail(v):
        if v <= 1e-140:
            return 0.0
        t = T / (v * v)
        r = float(scaled_bessel_i(0, 2.0 * t)) / v
        return 2.0 * T * r**d * v ** (d - 3) * (-math.expm1(-lam * t))

    tval, _ = integrate.quad(tail, 0.0, 1.0, epsabs=1e-16, epsrel=1e-13,
                             limit=300)
    return val + tval


def _i_slope_fit(dim: int, lam_pair=(1e-3, 1e-4)):
    """Richardson fit of s_d = lim (I(0)-I(lam))/lam for d >= 5.

    The next correction is O(sqrt(lam)), so fitting f(lam) = s + c sqrt(lam)
    through two small lam values removes it.
    """
    l1, l2 = lam_pair
    f1 = I_diff(l1, dim) / l1
    f2 = I_diff(l2, dim) / l2
    c = (f1 - f2) / (math.sqrt(l1) - math.sqrt(l2))
    return f1 - c * math.sqrt(l1)


# ----------------------------------------------------------------------
# critical coupling and derived constants
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralTable:
    """Critical constants of the pinning transition in dimension d.

    ``c_d`` is the large-t limit constant of the pinned diagonal kernel at
    criticality and ``d_d`` the matching partition-function constant:

        d = 3 :  sqrt(t) p(t)  -> c_3 = 4 sqrt(pi)/beta_3^2,   Z/sqrt(t) -> d_3 = 2 beta_3 c_3
        d = 4 :  ln(t) p(t)    -> c_4 = 16 pi^2/beta_4^2,      Z ln(t)/t -> d_4 = beta_4 c_4
        d >= 5:  p(t)          -> c_d = 1/(beta_d^2 s_d),      Z/t       -> d_d = beta_d c_d

    with s_d = -I'(0) (``i_slope``).  These follow from the exact Laplace
    transform Zhat(lam) = 1/(lam (1 - beta I(lam))) and the Tauberian
    transfer of the I expansions quoted in the module docstring; each is
    verified against the renewal solvers in the test suite.
    """

    dim: int
    i0: float
    beta_c: float
    escape_prob: float
    c_d: float
    d_d: float
    i_slope: float | None = None
    note: str = ""


@lru_cache(maxsize=None)
def critical_beta(dim: int) -> SpectralTable:
    """Critical coupling beta_d = 1/I(0) = 2d e_d plus tail-law constants."""
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if dim <= 2:
        return SpectralTable(dim=dim, i0=math.inf, beta_c=0.0, escape_prob=0.0,
                             c_d=math.nan, d_d=math.nan,
                             note="recurrent: I(0) infinite")
    i0 = I_lambda(0.0, dim)
    beta_c = 1.0 / i0
    escape = beta_c / (2.0 * dim)
    if dim == 3:
        c = 4.0 * math.sqrt(math.pi) / beta_c**2
        dd = 2.0 * beta_c * c
        slope = None
    elif dim == 4:
        c = 16.0 * math.pi**2 / beta_c**2
        dd = beta_c * c
        slope = None
    else:
        slope = _i_slope_fit(dim)
        c = 1.0 / (beta_c**2 * slope)
        dd = beta_c * c
    return SpectralTable(dim=dim, i0=i0, beta_c=beta_c, escape_prob=escape,
                         c_d=c, d_d=dd, i_slope=slope)


def lambda0(beta: float, dim: int, rel_tol: float = 1e-12):
    """Principal eigenvalue of Delta + beta delta_0, or None if absent.

    The root of I(lam) = 1/beta on [0, 4d + beta], found by bisection (I is
    strictly decreasing, so bracketing is unconditional).  Returns 0.0 at
    beta = beta_c for d >= 3; the zero energy is a genuine (edge) eigenvalue
    only for d >= 5, but the resolvent slice at lam = 0 remains pointwise
    finite in d = 3, 4 and is needed there.
    """
    if beta <= 0.0:
        return None
    if dim >= 3:
        i0 = I_lambda(0.0, dim)
        # relative placement of beta vs beta_c decides existence
        if beta * i0 < 1.0 - 1e-12:
            return None
        if abs(beta * i0 - 1.0) <= 1e-12:
            return 0.0
    target = 1.0 / beta
    lo, hi = 0.0, 4.0 * dim + beta
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if I_lambda(mid, dim) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rel_tol * max(hi, 1e-3):
            break
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------
# eigenfunction on a box, via a fixed resolvent quadrature rule
# ----------------------------------------------------------------------

def _resolvent_rule(T: float = 48.0, n_body: int = 24, n_tail: int = 64):
    """Fixed nodes/weights for integral_0^inf g(t) dt with g ~ t^{-d/2} tails.

    Composite Gauss-Legendre panels on [0, T] plus the t = T/v^2 transform
    of the tail; exp(-lam0 t) factors are applied at evaluation time, so one
    rule serves every lam0 >= 0.
    """
    gx, gw = np.polynomial.legendre.leggauss(n_body)
    breaks = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, T]
    ts, ws = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        ts.append(0.5 * (a + b) + 0.5 * (b - a) * gx)
        ws.append(0.5 * (b - a) * gw)
    vx, vw = np.polynomial.legendre.leggauss(n_tail)
    v = 0.5 + 0.5 * vx
    ts.append(T / v**2)
    ws.append(0.5 * vw * 2.0 * T / v**3)
    return np.concatenate(ts), np.concatenate(ws)


_RULE_T, _RULE_W = _resolvent_rule()


class _ResolventEvaluator:
    """Batched psi(x) = beta R_{0,lam0}(0,x) over many sites."""

    def __init__(self, beta: float, lam0: float, dim: int, n_max: int):
        self.beta = beta
        self.lam0 = lam0
        self.dim = dim
        self.n_max = n_max
        w = _RULE_W * np.exp(-lam0 * _RULE_T)
        keep = w != 0.0          # exp underflow: those nodes contribute nothing
        self._t = _RULE_T[keep]
        self._w = w[keep]
        self._bessel = scaled_bessel_i(
            np.arange(n_max + 1)[:, None], 2.0 * self._t[None, :])

    def _ensure_orders(self, n):
        if n > self.n_max:
            extra = scaled_bessel_i(
                np.arange(self.n_max + 1, n + 1)[:, None], 2.0 * self._t[None, :])
            self._bessel = np.vstack([self._bessel, extra])
            self.n_max = n

    def psi_many(self, reps: np.ndarray) -> np.ndarray:
        """reps: (m, d) array of |coordinate| multisets."""
        self._ensure_orders(int(reps.max(initial=0)))
        out = np.empty(reps.shape[0])
        chunk = max(1, int(4e6 // self._w.size))
        for lo in range(0, reps.shape[0], chunk):
            block = self._bessel[reps[lo:lo + chunk]]     # (m, d, Q)
            out[lo:lo + chunk] = np.prod(block, axis=1) @ self._w
        return self.beta * out

    def psi(self, x) -> float:
        x = np.abs(_as_site(x, self.dim))
        return float(self.psi_many(np.sort(x)[None, :])[0])


def _box_representatives(dim: int, radius: int) -> np.ndarray:
    """Sorted |coordinate| multisets covering the sup-norm box of given radius."""
    reps = np.array(
        list(itertools.combinations_with_replacement(range(radius + 1), dim)),
        dtype=np.int64)
    return reps


def rep_multiplicity(rep) -> int:
    """Number of lattice sites sharing a sorted-|coords| representative."""
    rep = tuple(rep)
    d = len(rep)
    perms = math.factorial(d)
    for v in set(rep):
        perms //= math.factorial(rep.count(v))
    signs = 2 ** sum(1 for v in rep if v != 0)
    return perms * signs


@dataclass
class LatticeField:
    """Symmetric field on a sup-norm box, stored on sorted-|coords| reps.

    ``tail_exponent`` is the power-law decay 2 - d of the lattice Green
    function; ``tail_constant`` matches it to the boundary shell so values
    outside the box can be extrapolated.
    """

    dim: int
    box_radius: int
    values: dict
    tail_constant: float
    tail_exponent: float

    @staticmethod
    def rep_of(x) -> tuple:
        return tuple(sorted(abs(int(v)) for v in x))

    def __contains__(self, x) -> bool:
        return self.rep_of(x) in self.values

    def value(self, x) -> float:
        rep = self.rep_of(x)
        try:
            return self.values[rep]
        except KeyError:
            r = math.sqrt(sum(v * v for v in rep))
            return self.tail_constant * r**self.tail_exponent

    def reps_array(self):
        reps = np.array(list(self.values.keys()), dtype=np.int64)
        vals = np.array(list(self.values.values()))
        return reps, vals


@dataclass
class EigenPair:
    """Eigenvalue lam0 and eigenfunction psi (normalized psi(0) = 1)."""

    beta: float
    dim: int
    lam0: float
    field: LatticeField
    square_summable: bool
    _evaluator: _ResolventEvaluator = field(repr=False, default=None)

    def psi(self, x) -> float:
        """psi at any site: box value, or exact on-demand evaluation."""
        if x in self.field:
            return self.field.value(x)
        return self._evaluator.psi(x)

    def eigen_residual(self, x) -> float:
        """Pointwise defect (Delta psi + beta delta_0 psi - lam0 psi)(x)."""
        x = _as_site(x, self.dim)
        c = self.psi(x)
        acc = -2.0 * self.dim * c
        for j in range(self.dim):
            for s in (-1, 1):
                y = x.copy()
                y[j] += s
                acc += self.psi(y)
        if not x.any():
            acc += self.beta * c
        return acc - self.lam0 * c

    def max_interior_residual(self, radius=None) -> float:
        """Max |eigen-residual| over representatives with sup-norm <= radius."""
        radius = self.field.box_radius - 1 if radius is None else radius
        reps = _box_representatives(self.dim, radius)
        worst = 0.0
        for rep in reps:
            worst = max(worst, abs(self.eigen_residual(np.array(rep))))
        return worst


def eigenfunction(beta: float, dim: int, box_radius: int = 20,
                  norm_tol: float = 1e-8) -> EigenPair:
    """Eigenfunction psi(x) = beta R_{0, lam0}(0, x) on a sup-norm box.

    Raises :class:`NoEigenvalueError` when I(lam) = 1/beta has no root.
    psi(0) = 1 is verified to ``norm_tol`` (it equals beta I(lam0) by
    construction, so this is a pure quadrature/root-finding check).
    """
    lam = lambda0(beta, dim)
    if lam is None:
        raise NoEigenvalueError(
            f"beta = {beta} is below the critical coupling in d = {dim}")
    square_summable = lam > 0.0 or dim >= 5
    ev = _ResolventEvaluator(beta, lam, dim, n_max=box_radius + 1)
    reps = _box_representatives(dim, box_radius)
    vals = ev.psi_many(reps)
    psi0 = vals[0] if tuple(reps[0]) == (0,) * dim else ev.psi(np.zeros(dim, int))
    if abs(psi0 - 1.0) > norm_tol:
        raise RuntimeError(
            f"normalization check failed: psi(0) = {psi0!r} (|psi(0)-1| > {norm_tol})")
    values = {tuple(r): float(v) for r, v in zip(reps, vals)}
    # match the |x|^{2-d} tail on the boundary shell
    boundary = [(r, v) for r, v in values.items() if max(r) == box_radius]
    tail_c = float(np.mean([
        v * math.sqrt(sum(c * c for c in r)) ** (dim - 2) for r, v in boundary
    ])) if dim > 2 else 0.0
    fld = LatticeField(dim=dim, box_radius=box_radius, values=values,
                       tail_constant=tail_c, tail_exponent=2.0 - dim)
    return EigenPair(beta=beta, dim=dim, lam0=lam, field=fld,
                     square_summable=square_summable, _evaluator=ev)


# ----------------------------------------------------------------------
# stationary measure and moment scans
# ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _box_exterior_angular(dim: int, m: int, n_nodes: int = 14) -> float:
    """2^{d-1} int_{[0,1]^{d-1}} (1 + |u|^2)^{-m} du (tensor Gauss-Legendre)."""
    gx, gw = np.polynomial.legendre.leggauss(n_nodes)
    u = 0.5 + 0.5 * gx
    w = 0.5 * gw
    grids = np.meshgrid(*([u] * (dim - 1)), indexing="ij") if dim > 1 else []
    if dim == 1:
        return 1.0
    s = np.zeros((n_nodes,) * (dim - 1))
    for g in grids:
        s = s + g * g
    vals = (1.0 + s) ** (-m)
    for _ in range(dim - 1):
        vals = vals @ w
    return float(vals) * 2 ** (dim - 1)


@dataclass
class StationaryMeasure:
    """pi(x) = psi(x)^2 / ||psi||^2 with a continuum tail correction."""

    pair: EigenPair
    norm_sq: float
    box_sum: float

    def prob(self, x) -> float:
        return self.pair.psi(x) ** 2 / self.norm_sq

    @property
    def box_probability(self) -> float:
        return self.box_sum / self.norm_sq


def stationary_measure(pair: EigenPair) -> StationaryMeasure:
    """Normalize psi^2 into the stationary law of the pinned chain.

    The box sum is extended by the continuum integral of the matched
    |x|^{2(2-d)} tail over the box exterior (truncation alone would bias
    the normalization by O(radius^{4-d})).
    """
    if not pair.square_summable:
        raise NonNormalizableError(
            "psi is not square-summable (d <= 4 at the critical coupling)")
    d = pair.dim
    reps, vals = pair.field.reps_array()
    mult = np.array([rep_multiplicity(tuple(r)) for r in reps], dtype=float)
    box_sum = float(np.dot(mult, vals**2))
    norm_sq = box_sum
    if pair.lam0 == 0.0 and d >= 5:
        m = d - 2
        R = pair.field.box_radius + 0.5
        c2 = pair.field.tail_constant ** 2
        norm_sq += (c2 * 2 * d * R ** (d - 2 * m) / (2 * m - d)
                    * _box_exterior_angular(d, m))
    return StationaryMeasure(pair=pair, norm_sq=norm_sq, box_sum=box_sum)


@dataclass
class MomentScan:
    """Partial sums of sum |x|^k pi(x) over nested boxes, with growth slope."""

    k: int
    radii: np.ndarray
    partial_sums: np.ndarray
    shell_increments: np.ndarray
    increment_slope: float

    @property
    def converges(self) -> bool:
        # shell increments ~ r^slope are summable iff slope < -1; the exact
        # slopes here are integers (k + 3 - d), so a fitted value near -1
        # is the log-divergent boundary case and must count as divergent
        return self.increment_slope < -1.1


def moment_scan(measure: StationaryMeasure, k: int, radii=None) -> MomentScan:
    """Growth of the k-th radial moment of pi over nested sup-norm boxes.

    Finite boxes cannot certify an infinite sum; the fitted log-log slope of
    the shell increments can (increments ~ r^{k + 3 - d}: summable iff the
    slope is below -1, i.e. k <= d - 5).
    """
    pair = measure.pair
    R = pair.field.box_radius
    if radii is None:
        radii = np.arange(2, R + 1)
    reps, vals = pair.field.reps_array()
    mult = np.array([rep_multiplicity(tuple(r)) for r in reps], dtype=float)
    sup = reps.max(axis=1)
    r2 = np.sqrt((reps.astype(float) ** 2).sum(axis=1))
    weights = mult * vals**2 / measure.norm_sq * r2**k
    partial = np.array([weights[sup <= r].sum() for r in radii])
    shells = np.array([weights[sup == r].sum() for r in radii])
    half = len(radii) // 2
    mask = shells[half:] > 0
    slope = float(np.polyfit(np.log(radii[half:][mask]),
                             np.log(shells[half:][mask]), 1)[0])
    return MomentScan(k=k, radii=np.asarray(radii), partial_sums=partial,
                      shell_increments=shells, increment_slope=slope)


# ----------------------------------------------------------------------
# small-lam expansion report
# ----------------------------------------------------------------------

@dataclass
class ExpansionCheck:
    """I(0) - I(lam) against its lam -> 0 law; ratios must tend to 1."""

    dim: int
    lam: np.ndarray
    diff: np.ndarray
    reference: np.ndarray
    ratio: np.ndarray
    slope: float | None = None


def asymptotic_expansion_check(dim: int, lam_list) -> ExpansionCheck:
    """Tabulate (I(0) - I(lam)) / reference(lam) for lam in (0, 0.1].

    The reference laws are sqrt(lam)/(4 pi) for d = 3,
    lam ln(1/lam)/(16 pi^2) for d = 4, and s_d lam for d >= 5 with s_d
    fitted by Richardson extrapolation (see :func:`_i_slope_fit`).
    """
    if dim < 3:
        raise ValueError("expansion check requires d >= 3")
    lam = np.asarray(sorted(lam_list), dtype=float)
    if np.any(lam <= 0.0) or np.any(lam > 0.1):
        raise ValueError("lam values must lie in (0, 0.1]")
    diff = np.array([I_diff(l, dim) for l in lam])
    slope = None
    if dim == 3:
        ref = np.sqrt(lam) / (4.0 * math.pi)
    elif dim == 4:
        ref = lam * np.log(1.0 / lam) / (16.0 * math.pi**2)
    else:
        slope = _i_slope_fit(dim)
        ref = slope * lam
    return ExpansionCheck(dim=dim, lam=lam, diff=diff, reference=ref,
                          ratio=diff / ref, slope=slope)
