"""Pinned heat kernel, partition functions, and the conditioned transition density.

Two independent routes compute the pinned diagonal p(t, 0, 0):

* a Volterra renewal solve of
      p(t) = p0(t) + beta int_0^t p0(t - s) p(s) ds
  by product integration (exact panel moments of the peaked free kernel
  against a piecewise-linear solution; plain trapezoid weights would
  misintegrate the kernel peak at 0 and, at criticality, that mass defect
  grows exponentially in t);

* a fixed-Talbot inversion of the resolvent identity
      R_beta(lam) = I(lam) / (1 - beta I(lam)),
  applied to the correction transform G = beta I^2 / (1 - beta I) so the
  free part is carried exactly, with the principal-eigenvalue pole
  subtracted and restored analytically.  I(lam) is continued into the left
  half-plane by a finite Bessel integral plus an asymptotic incomplete-
  gamma tail; choosing the split point T <= t keeps the body/tail
  cancellation damped below machine epsilon by the e^{lam t} factor.

The Volterra route is O(N^2) and owns t up to ~1e3; Talbot owns large t
(validated to 1e6) and costs a few dozen transform evaluations per point.
Partition functions integrate the diagonal kernel (Z = 1 + beta int p) or
invert Zhat(lam) = 1/(lam (1 - beta I(lam))) on the same contour.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from functools import lru_cache

import mpmath as mp
import numpy as np
from scipy import signal

from .lattice import (TimeGrid, free_kernel, free_kernel_diag, free_resolvent,
                      first_passage_density, scaled_bessel_i, _as_site,
                      _IVE0_COEFFS)
from .spectral import EigenPair, lambda0

__all__ = [
    "KernelGrid",
    "PartitionCurve",
    "ConvergenceError",
    "solve_pinned_diag",
    "inverse_laplace_diag",
    "partition_curve",
    "partition_large_t",
    "partition_at",
    "pinned_kernel_offdiag",
    "h_transition_density",
    "h_transition_row",
    "eigenvalue_residue",
]


class ConvergenceError(RuntimeError):
    """An internal refinement or contour diagnostic failed."""


# ----------------------------------------------------------------------
# Volterra route
# ----------------------------------------------------------------------

@dataclass
class KernelGrid:
    """Diagonal kernels on a uniform grid: p0(t,0,0) and p_beta(t,0,0)."""

    grid: TimeGrid
    p0_diag: np.ndarray
    pbeta_diag: np.ndarray
    beta: float
    dim: int

    def at(self, t: float) -> float:
        """Pinned diagonal at a grid node (interpolates linearly off-node)."""
        return float(np.interp(t, self.grid.values, self.pbeta_diag))


_GL12 = np.polynomial.legendre.leggauss(12)


def _kernel_panel_moments(dim: int, n: int, h: float):
    """Exact panel moments of the free kernel: M0[i] = int k, M1[i] = int (u - t_i) k."""
    gx, gw = _GL12
    ti = h * np.arange(n)
    pts = ti[:, None] + 0.5 * h * (1.0 + gx[None, :])
    w = 0.5 * h * gw
    kv = scaled_bessel_i(0, 2.0 * pts) ** dim
    return kv @ w, ((pts - ti[:, None]) * kv) @ w


def _solve_product_integration(beta: float, dim: int, n: int, h: float):
    ts = h * np.arange(n + 1)
    g = free_kernel_diag(ts, dim)
    M0, M1 = _kernel_panel_moments(dim, n, h)
    A = M1 / h
    B = M0 - A
    D = A.copy()
    D[:-1] += B[1:]                 # combined history weight, see derivation
    Drev = D[::-1].copy()           # Drev[n-1-m] = D[m]
    p = np.empty(n + 1)
    p[0] = 1.0
    denom = 1.0 - beta * B[0]
    for k in range(1, n + 1):
        hist = A[k - 1] * p[0]
        if k > 1:
            hist += np.dot(p[1:k], Drev[n - k + 1:n])
        p[k] = (g[k] + beta * hist) / denom
    return ts, g, p


def solve_pinned_diag(beta: float, grid: TimeGrid, dim: int,
                      refine_check: bool = False,
                      richardson: bool = False) -> KernelGrid:
    """Solve the renewal equation for p_beta(t, 0, 0) on a uniform grid.

    Product integration (free kernel integrated exactly over each panel
    against a piecewise-linear p) is second order and, crucially, carries
    the exact kernel mass, so the solve stays stable at beta = beta_c.

    Parameters
    ----------
    refine_check : bool
        Re-solve at half the step; if the endpoint moves by more than 1e-4
        relative, raise :class:`ConvergenceError`.
    richardson : bool
        Return the (4 p_{h/2} - p_h)/3 extrapolation on the original nodes
        (fourth-order nodal values; used where 1e-6-level accuracy is
        required of this route).
    """
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    n = grid.n_steps
    h = grid.step
    ts, g, p = _solve_product_integration(beta, dim, n, h)
    if refine_check or richardson:
        _, _, p_half = _solve_product_integration(beta, dim, 2 * n, 0.5 * h)
        rel = abs(p_half[-1] - p[-1]) / max(abs(p_half[-1]), 1e-300)
        if refine_check and rel > 1e-4:
            raise ConvergenceError(
                f"grid step {h} too coarse: halving it moves the endpoint by "
                f"{rel:.2e} (> 1e-4 relative)")
        if richardson:
            p = (4.0 * p_half[::2] - p) / 3.0
    return KernelGrid(grid=grid, p0_diag=g, pbeta_diag=p, beta=beta, dim=dim)


# ----------------------------------------------------------------------
# Talbot route
# ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _kd_series_coeffs(dim: int, nterms: int = 16) -> tuple:
    """k_d(t) = (4 pi t)^{-d/2} (1 + sum_j b_j t^{-j}); returns (1, b_1, ...)."""
    base = np.zeros(nterms)
    base[0] = 1.0
    base[1:] = _IVE0_COEFFS[1:nterms] / 2.0 ** np.arange(1, nterms)
    res = np.zeros(nterms)
    res[0] = 1.0
    for _ in range(dim):
        out = np.zeros(nterms)
        for a in range(nterms):
            if res[a] == 0.0:
                continue
            lim = nterms - a
            out[a:] += res[a] * base[:lim]
        res = out
    return tuple(res)


_GL24 = np.polynomial.legendre.leggauss(24)


def _body_integral(lam: complex, dim: int, T: float) -> complex:
    """int_0^T e^{-lam t} k_d(t) dt on oscillation/growth-capped GL panels."""
    gx, gw = _GL24
    cap = min(20.0 / max(abs(lam.real), 1e-12),
              6.0 / max(abs(lam.imag), 1e-12), T)
    breaks = [0.0]
    step = min(0.25, T / 8.0, cap)
    while breaks[-1] < T:
        breaks.append(min(T, breaks[-1] + step))
        step = min(2.0 * step, cap)
    total = 0.0 + 0.0j
    for a, b in zip(breaks[:-1], breaks[1:]):
        tm = 0.5 * (a + b) + 0.5 * (b - a) * gx
        wm = 0.5 * (b - a) * gw
        total += np.sum(wm * np.exp(-lam * tm) * scaled_bessel_i(0, 2.0 * tm) ** dim)
    return complex(total)


def _tail_integral(lam: complex, dim: int, T: float) -> complex:
    """Analytic continuation of int_T^inf e^{-lam t} k_d(t) dt.

    Termwise Laplace transform of the large-t kernel series; each term is
    lam^{-s} Gamma(s, lam T) on principal branches, which is the analytic
    continuation off (-inf, 0] of the Re lam > 0 integral.
    """
    coeffs = _kd_series_coeffs(dim)
    with mp.workdps(30):
        z = mp.mpc(lam)
        tot = mp.mpf(0)
        for j, b in enumerate(coeffs):
            s = mp.mpf(1) - mp.mpf(dim) / 2 - j
            tot += b * mp.power(z, -s) * mp.gammainc(s, a=z * T)
        tot *= (4 * mp.pi) ** (-mp.mpf(dim) / 2)
        return complex(tot)


def _I_complex(lam: complex, dim: int, T: float) -> complex:
    return _body_integral(lam, dim, T) + _tail_integral(lam, dim, T)


def _talbot_sum(F, t: float, n_nodes: int) -> float:
    """Fixed-Talbot inversion: (r/M) [ e^{rt} F(r)/2 + sum Re(e^{lam t} F (1+i sigma)) ]."""
    M = n_nodes
    r = 2.0 * M / (5.0 * t)
    total = 0.5 * math.exp(r * t) * F(complex(r, 0.0)).real
    for k in range(1, M):
        th = math.pi * k / M
        cot = 1.0 / math.tan(th)
        lam = r * th * complex(cot, 1.0)
        sigma = th + (th * cot - 1.0) * cot
        total += (cmath.exp(lam * t) * F(lam) * complex(1.0, sigma)).real
    return r / M * total


def eigenvalue_residue(beta: float, dim: int):
    """(lam0, residue) of R_beta at its principal pole, or (None, 0).

    The residue equals 1/(beta^2 |I'(lam0)|) = psi(0)^2/||psi||^2, the
    large-t amplitude of the bound-state term res * e^{lam0 t}; verified
    against the d = 1 closed form beta/sqrt(4 + beta^2) in the tests.
    At lam0 = 0 (d >= 5 critical) the same expression gives the constant
    p(t) -> res.
    """
    lam = lambda0(beta, dim)
    if lam is None or (lam == 0.0 and dim <= 4):
        # no pole: at criticality in d <= 4 the singularity is a branch point
        return None, 0.0
    J = free_resolvent(lam, np.zeros(dim, int), weight_t=1)
    return lam, 1.0 / (beta * beta * J)


def _correction_transform(beta: float, dim: int, T: float, lam0, res):
    def G(lam: complex) -> complex:
        I = _I_complex(lam, dim, T)
        val = beta * I * I / (1.0 - beta * I)
        if lam0 is not None:
            val -= res / (lam - lam0)
        return val
    return G


_SMALL_T_SWITCH = 8.0


def inverse_laplace_diag(beta: float, t: float, dim: int,
                         n_nodes: int = 28, validate: bool = True) -> float:
    """p_beta(t, 0, 0) by contour inversion of I(lam)/(1 - beta I(lam)).

    The free kernel p0(t) is split off exactly and only the correction
    transform beta I^2/(1 - beta I) is inverted; for beta above (or at, in
    d >= 5) the critical coupling the pole at lam0 is subtracted and its
    residue term res * e^{lam0 t} restored in closed form.  Reaches t = 1e6
    and beyond at fixed cost.  Below t = 8 the asymptotic tail of the
    transform loses accuracy and the call delegates to a fine-grid
    Richardson Volterra solve instead.

    ``validate=True`` re-inverts with a reduced node count and raises
    :class:`ConvergenceError` if the two disagree beyond 1e-8 relative
    (with a 1e-13 absolute floor for far-tail values).
    """
    if t <= 0.0:
        raise ValueError("t must be positive")
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    p0 = free_kernel_diag(t, dim)
    if beta == 0.0:
        return float(p0)
    if t < _SMALL_T_SWITCH:
        h = min(0.002, t / 1000.0)
        kg = solve_pinned_diag(beta, TimeGrid(t, h), dim, richardson=True)
        return float(kg.pbeta_diag[-1])
    lam0_, res = eigenvalue_residue(beta, dim)
    T = min(32.0, t)
    G = _correction_transform(beta, dim, T, lam0_, res)
    q = _talbot_sum(G, t, n_nodes)
    if validate:
        q2 = _talbot_sum(G, t, n_nodes - 6)
        scale = abs(p0) + abs(q)
        if lam0_ is not None:
            scale += abs(res) * math.exp(lam0_ * t)
        if abs(q - q2) > max(1e-8 * scale, 1e-13):
            raise ConvergenceError(
                f"Talbot node-count check failed at t={t}: {q!r} vs {q2!r}")
    out = p0 + q
    if lam0_ is not None:
        out += res * math.exp(lam0_ * t)
    return float(out)


# ----------------------------------------------------------------------
# partition functions
# ----------------------------------------------------------------------

@dataclass
class PartitionCurve:
    """Z_{beta,t}(x) on a uniform grid; x is the origin unless stated."""

    grid: TimeGrid
    z_values: np.ndarray
    beta: float
    dim: int
    origin: tuple = None

    def at(self, t: float) -> float:
        return float(np.interp(t, self.grid.values, self.z_values))


def partition_curve(beta: float, grid: TimeGrid, dim: int,
                    kernel: KernelGrid | None = None,
                    richardson: bool = False) -> PartitionCurve:
    """Z_{beta,t}(0) = 1 + beta int_0^t p_beta(s,0,0) ds on the grid.

    The integral uses the trapezoid rule, which is the exact integral of
    the piecewise-linear kernel representation the solver produces; the
    curve is nondecreasing because the kernel is positive.
    """
    if kernel is None:
        kernel = solve_pinned_diag(beta, grid, dim, richardson=richardson)
    p = kernel.pbeta_diag
    h = grid.step
    z = np.empty_like(p)
    z[0] = 1.0
    z[1:] = 1.0 + beta * h * (np.cumsum(0.5 * (p[1:] + p[:-1])))
    return PartitionCurve(grid=grid, z_values=z, beta=beta, dim=dim,
                          origin=(0,) * dim)


def partition_large_t(beta: float, t: float, dim: int, n_nodes: int = 28,
                      validate: bool = True) -> float:
    """Z_{beta,t}(0) by contour inversion of Zhat = 1/(lam (1 - beta I)).

    The constant 1 inverts exactly; the remainder beta I/(lam (1 - beta I))
    is Talbot-inverted, with the pole at lam0 > 0 subtracted (residue
    1/(lam0 beta |I'(lam0)|), the free-energy growth term).
    """
    if beta == 0.0:
        return 1.0
    if t < _SMALL_T_SWITCH:
        return partition_curve(beta, TimeGrid(t, min(0.002, t / 1000.0)), dim,
                               richardson=True).z_values[-1]
    lam0_, res_p = eigenvalue_residue(beta, dim)
    pole = lam0_ is not None and lam0_ > 0.0
    res_z = res_p / lam0_ if pole else 0.0
    T = min(32.0, t)

    def G(lam: complex) -> complex:
        I = _I_complex(lam, dim, T)
        val = beta * I / (lam * (1.0 - beta * I))
        if pole:
            val -= res_z / (lam - lam0_)
        return val

    q = _talbot_sum(G, t, n_nodes)
    if validate:
        q2 = _talbot_sum(G, t, n_nodes - 6)
        if abs(q - q2) > max(1e-8 * (1.0 + abs(q)), 1e-13):
            raise ConvergenceError(f"Talbot node-count check failed at t={t}")
    out = 1.0 + q
    if pole:
        out += res_z * math.exp(lam0_ * t)
    return float(out)


def partition_at(beta: float, x, grid: TimeGrid, dim=None,
                 kernel: KernelGrid | None = None,
                 richardson: bool = False) -> PartitionCurve:
    """Z_{beta,t}(x) for x != 0 via the first-visit renewal decomposition.

    Z(x, t) = P^x(T > t) + int_0^t Z(0, t - u) f_x(u) du: either the walk
    never reaches the pin before t, or it arrives at time u and restarts
    from the origin.  Dominated by Z(0, t) for every x.
    """
    x = _as_site(x, dim)
    d = x.size
    if not x.any():
        raise ValueError("use partition_curve for the origin")
    z0 = partition_curve(beta, grid, d, kernel=kernel, richardson=richardson)
    fp = first_passage_density(x, grid, d)
    f = fp.values
    surv = fp.survival()
    h = grid.step
    n = grid.n_steps
    zmid = 0.5 * (z0.z_values[:-1] + z0.z_values[1:])   # Z at panel midpoints
    zmid_rev = zmid[::-1].copy()
    z = np.empty(n + 1)
    z[0] = 1.0
    for k in range(1, n + 1):
        # sum_{j<k} f[j] Z(t_k - m_j); zmid_rev[n-k+j] = zmid[k-1-j]
        z[k] = surv[k] + h * np.dot(f[:k], zmid_rev[n - k:n])
    return PartitionCurve(grid=grid, z_values=z, beta=beta, dim=d,
                          origin=tuple(int(v) for v in x))


# ----------------------------------------------------------------------
# off-diagonal kernel and the conditioned chain
# ----------------------------------------------------------------------

def _convolve_trapz(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    """Trapezoid-weight convolution on a uniform grid, length of a."""
    full = signal.fftconvolve(a, b)[:a.size]
    return h * (full - 0.5 * a[0] * b[:a.size] - 0.5 * a * b[0])


def _pinned_from_origin(kernel: KernelGrid, y: np.ndarray) -> np.ndarray:
    """p_beta(t, 0, y) on the grid from the solved diagonal."""
    ts = kernel.grid.values
    p0y = free_kernel(ts, y)
    return p0y + kernel.beta * _convolve_trapz(p0y, kernel.pbeta_diag,
                                               kernel.grid.step)


def pinned_kernel_offdiag(beta: float, t: float, x, y, dim=None,
                          step: float = 0.01,
                          kernel: KernelGrid | None = None) -> float:
    """Two-sided pinned kernel p_beta(t, x, y).

    Splits the path at its first visit to the origin:
    p_beta(t,x,y) = p0(t,x,y) + beta int_0^t p0(s,x,0) p_beta(t-s,0,y) ds,
    with p_beta(., 0, y) from the one-sided equation.  Symmetry in (x, y)
    is not imposed anywhere, so comparing the two orders is a genuine check.
    """
    x = _as_site(x, dim)
    y = _as_site(y, x.size)
    d = x.size
    if kernel is None or kernel.grid.values[-1] < t - 1e-12:
        grid = TimeGrid(t, step)
        kernel = solve_pinned_diag(beta, grid, d, richardson=True)
    grid = kernel.grid
    if not x.any() and not y.any():
        return float(kernel.at(t))
    ts = grid.values
    k_idx = int(round(t / grid.step))
    pby = _pinned_from_origin(kernel, y)        # p_beta(., 0, y)
    p0x = free_kernel(ts, x)                    # p0(., x, 0) = p0(., 0, x)
    h = grid.step
    conv = h * (np.dot(p0x[:k_idx + 1], pby[k_idx::-1])
                - 0.5 * (p0x[0] * pby[k_idx] + p0x[k_idx] * pby[0]))
    return float(free_kernel(t, y - x) + beta * conv)


def h_transition_density(s: float, x, y, pair: EigenPair,
                         step: float = 0.01,
                         kernel: KernelGrid | None = None) -> float:
    """Transition density r(s, x, y) = p_beta(s, x, y) psi(y)/psi(x).

    The Doob transform of the pinned kernel by its ground state; rows sum
    to one (up to box truncation) and are in detailed balance with
    pi = psi^2/||psi||^2 because p_beta is symmetric.
    """
    p = pinned_kernel_offdiag(pair.beta, s, x, y, dim=pair.dim, step=step,
                              kernel=kernel)
    return p * pair.psi(y) / pair.psi(x)


def h_transition_row(s: float, x, pair: EigenPair, radius: int,
                     step: float = 0.005):
    """All r(s, x, y) for |y|_inf <= radius, plus the row sum.

    Vectorized over the sign/permutation representatives of y; the row sum
    tests the Markov normalization at truncation accuracy.
    """
    from .spectral import _box_representatives, rep_multiplicity

    x = _as_site(x, pair.dim)
    d = pair.dim
    grid = TimeGrid(s, step)
    kernel = solve_pinned_diag(pair.beta, grid, d, richardson=True)
    ts = grid.values
    n = grid.n_steps
    reps = _box_representatives(d, radius)
    bess = scaled_bessel_i(np.arange(radius + 1)[:, None], 2.0 * ts[None, :])
    p0y = np.prod(bess[reps], axis=1)           # (m, n+1): p0(., 0, |y|-rep)
    conv = signal.fftconvolve(p0y, kernel.pbeta_diag[None, :], axes=1)[:, :n + 1]
    conv = step * (conv - 0.5 * np.outer(p0y[:, 0], kernel.pbeta_diag)
                   - 0.5 * p0y * kernel.pbeta_diag[0])
    pby = p0y[:, -1] + pair.beta * conv[:, -1]   # p_beta(s, 0, y), all reps
    if x.any():
        raise NotImplementedError("row evaluation is implemented from the origin")
    psi_x = pair.psi(x)
    psi_y = pair._evaluator.psi_many(reps)
    mult = np.array([rep_multiplicity(tuple(r)) for r in reps], dtype=float)
    rows = pby * psi_y / psi_x
    return reps, rows, float(np.dot(mult, rows))
