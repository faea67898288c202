"""Path-level sampling: free ensembles, pinned reweighting, and the conditioned chain.

Sampling of the continuous-time walk is exact (exponential holding times,
no time discretization); local time at the origin and the last-visit time
are accumulated along the way.  Every walker owns a counter-based RNG
stream keyed by (seed, window, walker index), so results are bit-identical
for a fixed seed regardless of how many threads execute the walkers.

Weighting paths by e^{beta L_t} targets the pinned Gibbs measure, but the
chi-squared distance between the free and pinned path laws grows
exponentially in t (the weight second moment is the partition function at
2 beta, which is supercritical), so a fixed-population importance sample
collapses beyond t of a few units; :func:`sample_free_paths` measures this
honestly through its ESS.  :func:`sample_pinned_paths` therefore runs a
weighted ensemble: walkers are advanced window by window, and when the ESS
decays below a threshold the population is resampled systematically
(high-weight walkers split, low-weight ones culled).  The product of
window-mean weights keeps an unbiased partition-function estimator, and
path functionals (endpoint, sigma_t, L_t) ride along through the cloning.

The escape probability estimator walks the embedded discrete chain only,
then draws a single Gamma variate for the continuous return time; the
conditioned (h-transform) chain is simulated directly from ground-state
ratio rates, with the exit-rate identity checked at every visited site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy import special

from .lattice import TimeGrid, first_passage_density
from .spectral import EigenPair

__all__ = [
    "PathSample",
    "WeightedEnsemble",
    "EscapeEstimate",
    "SigmaReport",
    "EndpointReport",
    "HChainRun",
    "LowESSError",
    "RadiusCapError",
    "sample_free_paths",
    "sample_pinned_paths",
    "estimate_escape_probability",
    "sigma_distribution",
    "endpoint_statistics",
    "simulate_h_chain",
    "limit_sigma_cdf",
    "limit_sigma_density",
    "limit_endpoint_cf",
]


class LowESSError(RuntimeError):
    """Weighted statistics refused: effective sample size below the floor."""


class RadiusCapError(RuntimeError):
    """The conditioned chain left the maximal allowed box."""


# ----------------------------------------------------------------------
# counter-based RNG + walker kernels (numba)
# ----------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@njit(inline="always", cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def _stream_init(seed, window, idx):
    h = _mix64(np.uint64(seed) + _GOLDEN)
    h = _mix64(h ^ (np.uint64(window) * np.uint64(0xC2B2AE3D27D4EB4F)))
    return _mix64(h ^ (np.uint64(idx) * np.uint64(0xD6E8FEB86659FD93)))


@njit(parallel=True, cache=True)
def _advance_walkers(pos, tnow, sigma, lgain, visits, t_end, rate, rate0, two_d,
                     seed, window):
    """Advance every walker to t_end.

    lgain[i] collects time at the origin this window and visits[i] the number
    of completed origin visits.  rate0 is the exit rate used *at the origin*;
    rate0 = rate is the free walk, rate0 = 2d - beta is the exponentially
    tilted proposal whose likelihood ratio against the pinned target is
    (rate/rate0) per completed visit (the e^{beta tau} factors cancel).
    """
    n, d = pos.shape
    for i in prange(n):
        state = _stream_init(seed, window, i)
        ti = tnow[i]
        si = sigma[i]
        gain = 0.0
        nvis = 0
        at0 = True
        for j in range(d):
            if pos[i, j] != 0:
                at0 = False
                break
        while True:
            state += _GOLDEN
            u = (np.float64((_mix64(state) >> np.uint64(11))) + 1.0) * 1.1102230246251565e-16
            tau = -math.log(u) / (rate0 if at0 else rate)
            if ti + tau >= t_end:
                if at0:
                    gain += t_end - ti
                    si = t_end
                ti = t_end
                break
            ti += tau
            if at0:
                gain += tau
                si = ti
                nvis += 1
            state += _GOLDEN
            mv = _mix64(state) % np.uint64(two_d)
            ax = np.int64(mv >> np.uint64(1))
            if mv & np.uint64(1):
                pos[i, ax] += 1
            else:
                pos[i, ax] -= 1
            if pos[i, ax] != 0:
                at0 = False
            else:
                at0 = True
                for j in range(d):
                    if pos[i, j] != 0:
                        at0 = False
                        break
        tnow[i] = ti
        sigma[i] = si
        lgain[i] = gain
        visits[i] = nvis
    return pos


@njit(parallel=True, cache=True)
def _escape_walk(n, d, k_max, seed):
    """First-return step of the embedded walk from a uniform neighbor (0 = none)."""
    out = np.zeros(n, dtype=np.int64)
    two_d = np.uint64(2 * d)
    for i in prange(n):
        state = _stream_init(seed, np.uint64(1) << np.uint64(40), i)
        state += _GOLDEN
        first = _mix64(state) % two_d
        ax0 = np.int64(first >> np.uint64(1))
        pos = np.zeros(d, dtype=np.int64)
        pos[ax0] = 1 if (first & np.uint64(1)) else -1
        l1 = 1
        for k in range(1, k_max + 1):
            state += _GOLDEN
            mv = _mix64(state) % two_d
            ax = np.int64(mv >> np.uint64(1))
            old = pos[ax]
            if mv & np.uint64(1):
                pos[ax] = old + 1
            else:
                pos[ax] = old - 1
            l1 += abs(pos[ax]) - abs(old)
            if l1 == 0:
                out[i] = k
                break
    return out


def _set_workers(n_workers):
    import numba

    try:
        numba.set_num_threads(max(1, min(int(n_workers),
                                         numba.config.NUMBA_NUM_THREADS)))
    except Exception:
        pass


# ----------------------------------------------------------------------
# ensembles
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PathSample:
    """Summary of one path: endpoint x_t, sigma_t, L_t, and its weight."""

    endpoint: tuple
    last_visit: float
    local_time: float
    weight: float


@dataclass
class WeightedEnsemble:
    """Path summaries of n walkers with importance weights.

    In plain mode ``weights[i] = exp(beta * local_time[i])`` and their mean
    estimates Z_{beta,t}(0).  In resampled mode the weights are the
    within-epoch weights since the last resampling and ``z_estimate``
    carries the full unbiased product estimator (which reduces to the mean
    weight in plain mode).
    """

    horizon: float
    beta: float
    dim: int
    seed: int
    endpoints: np.ndarray
    last_visit: np.ndarray
    local_time: np.ndarray
    log_weights: np.ndarray
    log_z_prefix: float = 0.0
    n_resamplings: int = 0

    def __len__(self):
        return self.last_visit.size

    def __getitem__(self, i) -> PathSample:
        return PathSample(endpoint=tuple(int(v) for v in self.endpoints[i]),
                          last_visit=float(self.last_visit[i]),
                          local_time=float(self.local_time[i]),
                          weight=float(np.exp(self.log_weights[i])))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        lw = self.log_weights
        return float(np.exp(2.0 * special.logsumexp(lw) - special.logsumexp(2.0 * lw)))

    @property
    def mean_weight(self) -> float:
        lw = self.log_weights
        return float(np.exp(special.logsumexp(lw) - math.log(lw.size)))

    @property
    def z_estimate(self) -> float:
        return float(np.exp(self.log_z_prefix) * self.mean_weight)


def _systematic_resample(logw: np.ndarray, u: float) -> np.ndarray:
    w = np.exp(logw - logw.max())
    c = np.cumsum(w)
    c /= c[-1]
    pts = (u + np.arange(w.size)) / w.size
    return np.searchsorted(c, pts, side="left")


def sample_free_paths(t: float, n: int, beta: float, dim: int, seed: int,
                      n_workers: int = 1) -> WeightedEnsemble:
    """n independent free paths from the origin, weighted by e^{beta L_t}.

    Exact continuous-time simulation; deterministic given (seed, walker
    index), independent of ``n_workers``.  At beta = 0 all weights are one
    and the ESS equals n.
    """
    if t <= 0.0 or n < 1:
        raise ValueError("need t > 0 and n >= 1")
    _set_workers(n_workers)
    pos = np.zeros((n, dim), dtype=np.int16)
    tnow = np.zeros(n)
    sigma = np.zeros(n)
    lgain = np.zeros(n)
    visits = np.zeros(n, dtype=np.int64)
    rate = 2.0 * dim
    _advance_walkers(pos, tnow, sigma, lgain, visits, t, rate, rate, 2 * dim,
                     np.uint64(seed), np.uint64(0))
    return WeightedEnsemble(horizon=t, beta=beta, dim=dim, seed=seed,
                            endpoints=pos, last_visit=sigma, local_time=lgain,
                            log_weights=beta * lgain)


def sample_pinned_paths(t: float, n: int, beta: float, dim: int, seed: int,
                        window: float = 0.25, resample_threshold: float = 0.9,
                        tilt: bool | None = None,
                        n_workers: int = 1) -> WeightedEnsemble:
    """Weighted-ensemble sampler of the pinned path measure at horizon t.

    Walkers advance in windows of the given length and the population is
    resampled systematically whenever the ESS drops below
    ``resample_threshold * n``.  By default (``tilt``) origin holding times
    are drawn from the exponentially tilted law Exp(2d - beta), whose
    likelihood ratio against the pinned target is the *constant*
    2d/(2d - beta) per completed origin visit: the e^{beta tau} weight
    tails (a power law of index 2d/beta under untilted sampling) are
    removed exactly.  All statistics are weighted averages over the final
    ensemble; ``z_estimate`` is the unbiased partition-function estimator.
    """
    if t <= 0.0 or n < 1:
        raise ValueError("need t > 0 and n >= 1")
    if tilt is None:
        tilt = 0.0 < beta < 1.9 * dim
    if tilt and beta >= 2.0 * dim:
        raise ValueError("tilted sampling requires beta < 2d")
    _set_workers(n_workers)
    rate = 2.0 * dim
    rate0 = rate - beta if tilt else rate
    log_visit_w = math.log(rate / rate0) if tilt else 0.0
    pos = np.zeros((n, dim), dtype=np.int16)
    tnow = np.zeros(n)
    sigma = np.zeros(n)
    local = np.zeros(n)
    logw = np.zeros(n)
    lgain = np.zeros(n)
    visits = np.zeros(n, dtype=np.int64)
    log_z = 0.0
    n_resamp = 0
    n_windows = int(math.ceil(t / window))
    for k in range(n_windows):
        t_end = t if k == n_windows - 1 else (k + 1) * window
        lgain[:] = 0.0
        _advance_walkers(pos, tnow, sigma, lgain, visits, t_end, rate, rate0,
                         2 * dim, np.uint64(seed), np.uint64(k + 1))
        local += lgain
        if tilt:
            logw += log_visit_w * visits
        else:
            logw += beta * lgain
        if k == n_windows - 1:
            break
        mx = logw.max()
        w = np.exp(logw - mx)
        ess = w.sum() ** 2 / np.square(w).sum()
        if ess < resample_threshold * n:
            log_z += mx + math.log(w.mean())
            rng = np.random.Generator(np.random.Philox(
                key=np.array([seed, (1 << 63) | (k + 1)], dtype=np.uint64)))
            idx = _systematic_resample(logw, rng.random())
            pos = pos[idx].copy()
            sigma = sigma[idx].copy()
            local = local[idx].copy()
            logw = np.zeros(n)
            n_resamp += 1
    return WeightedEnsemble(horizon=t, beta=beta, dim=dim, seed=seed,
                            endpoints=pos, last_visit=sigma, local_time=local,
                            log_weights=logw, log_z_prefix=log_z,
                            n_resamplings=n_resamp)


# ----------------------------------------------------------------------
# escape probability
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EscapeEstimate:
    """MC estimate of P(no return to 0 up to t_cut) from a uniform neighbor."""

    dim: int
    t_cut: float
    n: int
    value: float
    stderr: float
    bias_estimate: float
    note: str = ""

    @property
    def corrected(self) -> float:
        """Estimate of e_d with the finite-horizon tail removed."""
        return self.value - self.bias_estimate


def _return_tail_beyond(dim: int, t_cut: float) -> float:
    """P(T in (t_cut, inf)) from a neighbor, via the fitted first-passage tail."""
    fp = first_passage_density(np.eye(dim, dtype=int)[0], TimeGrid(200.0, 0.02),
                               dim)
    a, b = fp.tail_fit()
    s = fp.tail_exponent()
    return a * t_cut ** (1.0 - s) / (s - 1.0) + b * t_cut ** (-s) / s


def estimate_escape_probability(dim: int, t_cut: float, n: int, seed: int,
                                n_workers: int = 1) -> EscapeEstimate:
    """Fraction of paths from a uniform neighbor of 0 avoiding 0 up to t_cut.

    Simulates the embedded discrete walk (step budget covering t_cut with
    ~8 sigma to spare) and draws one Gamma(k, 1/2d) variate per returning
    path for its continuous return time.  The reported ``bias_estimate`` is
    P(T > t_cut, T < inf), the excess of the estimate over e_d, computed
    from the fitted free-kernel first-passage tail.
    """
    if dim <= 2:
        return EscapeEstimate(dim=dim, t_cut=t_cut, n=n, value=0.0, stderr=0.0,
                              bias_estimate=0.0,
                              note="recurrent walk: escape probability is 0")
    _set_workers(n_workers)
    rate = 2.0 * dim
    k_max = int(rate * t_cut + 8.0 * math.sqrt(rate * t_cut)) + 10
    steps = _escape_walk(n, dim, k_max, np.uint64(seed))
    returned = steps > 0
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed, 1 << 62], dtype=np.uint64)))
    t_ret = rng.gamma(shape=steps[returned].astype(float), scale=1.0 / rate)
    n_escaped = int((~returned).sum()) + int((t_ret > t_cut).sum())
    value = n_escaped / n
    stderr = math.sqrt(max(value * (1.0 - value), 1e-300) / n)
    return EscapeEstimate(dim=dim, t_cut=t_cut, n=n, value=value, stderr=stderr,
                          bias_estimate=_return_tail_beyond(dim, t_cut))


# ----------------------------------------------------------------------
# limit laws and weighted statistics
# ----------------------------------------------------------------------

def limit_sigma_cdf(dim: int, u):
    """Limiting CDF of sigma_t/t at criticality: sqrt(u) in d=3, u in d=4."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    if dim == 3:
        return np.sqrt(u)
    if dim == 4:
        return u
    raise ValueError("limit law is available for d = 3, 4 only")


def limit_sigma_density(dim: int, u):
    u = np.asarray(u, dtype=float)
    if dim == 3:
        return 0.5 / np.sqrt(np.maximum(u, 1e-300))
    if dim == 4:
        return np.ones_like(u)
    raise ValueError("limit law is available for d = 3, 4 only")


def limit_endpoint_cf(dim: int, phi_norm):
    """Characteristic function of the limiting x_t/sqrt(t) mixture.

    d=3: (1/2) int_0^1 e^{-r^2 (1-u)} u^{-1/2} du = dawsn(r)/r;
    d=4: int_0^1 e^{-r^2 (1-u)} du = (1 - e^{-r^2})/r^2.
    """
    r = np.asarray(phi_norm, dtype=float)
    out = np.ones_like(r)
    nz = r > 0
    if dim == 3:
        out[nz] = special.dawsn(r[nz]) / r[nz]
    elif dim == 4:
        out[nz] = -np.expm1(-r[nz] ** 2) / r[nz] ** 2
    else:
        raise ValueError("limit law is available for d = 3, 4 only")
    return out if out.ndim else float(out)


def _weighted_ks(u: np.ndarray, w: np.ndarray, cdf) -> float:
    order = np.argsort(u)
    us = u[order]
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    F = cdf(us)
    lower = np.concatenate([[0.0], cw[:-1]])
    return float(np.max(np.maximum(np.abs(cw - F), np.abs(lower - F))))


def _check_ess(ens: WeightedEnsemble, floor: float):
    ess = ens.ess
    if ess < floor:
        raise LowESSError(
            f"effective sample size {ess:.1f} below floor {floor}; "
            f"n={len(ens)}, beta={ens.beta}, t={ens.horizon}, "
            f"resamplings={ens.n_resamplings} -- use the weighted-ensemble "
            f"sampler or reduce the horizon")


@dataclass
class SigmaReport:
    """Weighted law of sigma_t/t against its critical limit."""

    dim: int
    horizon: float
    bin_edges: np.ndarray
    weighted_density: np.ndarray
    limit_density: np.ndarray | None
    ks_stat: float | None
    weighted_mean: float
    ess: float


def sigma_distribution(ens: WeightedEnsemble, bins: int = 40,
                       ess_floor: float = 1000.0) -> SigmaReport:
    """Weighted empirical distribution of sigma_t/t (KS-tested in d = 3, 4)."""
    _check_ess(ens, ess_floor)
    u = ens.last_visit / ens.horizon
    w = ens.weights
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist, _ = np.histogram(u, bins=edges, weights=w)
    density = hist / w.sum() / np.diff(edges)
    if ens.dim in (3, 4):
        mids = 0.5 * (edges[1:] + edges[:-1])
        limit = limit_sigma_density(ens.dim, mids)
        ks = _weighted_ks(u, w, lambda q: limit_sigma_cdf(ens.dim, q))
    else:
        limit, ks = None, None
    mean = float(np.average(u, weights=w))
    return SigmaReport(dim=ens.dim, horizon=ens.horizon, bin_edges=edges,
                       weighted_density=density, limit_density=limit,
                       ks_stat=ks, weighted_mean=mean, ess=ens.ess)


@dataclass
class EndpointReport:
    """Weighted endpoint statistics of x_t against the Gaussian-mixture limit."""

    dim: int
    horizon: float
    second_moment_ratios: dict
    covariance_over_t: np.ndarray
    max_offdiag_over_t: float
    phi_norms: np.ndarray
    ecf_axis: np.ndarray
    ecf_diag: np.ndarray
    ecf_imag_max: float
    limit_cf: np.ndarray | None
    sup_cf_distance: float | None
    ess: float


def endpoint_statistics(ens: WeightedEnsemble, zeta=None, phi_max: float = 3.0,
                        n_phi: int = 13, ess_floor: float = 1000.0) -> EndpointReport:
    """Weighted second moments, covariance, and characteristic function of x_t.

    ``second_moment_ratios`` maps each direction zeta to
    E[<zeta, x_t>^2] / (|zeta|^2 t); the free walk gives 2 for every zeta.
    The empirical CF is evaluated at phi = r e_1 and r (1,..,1)/sqrt(d)
    for r on a uniform grid up to ``phi_max`` and compared, in d = 3 and 4,
    with the limiting mixture CF.
    """
    _check_ess(ens, ess_floor)
    t = ens.horizon
    x = ens.endpoints.astype(float)
    w = ens.weights
    wsum = w.sum()
    d = ens.dim
    if zeta is None:
        zeta = [np.eye(d)[j] for j in range(d)] + [np.ones(d) / math.sqrt(d)]
    ratios = {}
    for z in zeta:
        z = np.asarray(z, dtype=float)
        proj = x @ z
        ratios[tuple(float(v) for v in np.round(z, 6))] = float(
            np.dot(w, proj**2) / wsum / (np.dot(z, z) * t))
    xc = x - (w @ x)[None, :] / wsum
    cov = (xc.T * w) @ xc / wsum / t
    off = cov - np.diag(np.diag(cov))
    phi = np.linspace(0.0, phi_max, n_phi)
    scale = 1.0 / math.sqrt(t)
    ecf_ax = np.empty(n_phi)
    ecf_dg = np.empty(n_phi)
    imag_max = 0.0
    diag_dir = np.ones(d) / math.sqrt(d)
    for j, r in enumerate(phi):
        za = x[:, 0] * (r * scale)
        zd = (x @ diag_dir) * (r * scale)
        ecf_ax[j] = np.dot(w, np.cos(za)) / wsum
        ecf_dg[j] = np.dot(w, np.cos(zd)) / wsum
        imag_max = max(imag_max, abs(np.dot(w, np.sin(za))) / wsum,
                       abs(np.dot(w, np.sin(zd))) / wsum)
    if d in (3, 4):
        limit = limit_endpoint_cf(d, phi)
        sup = float(max(np.max(np.abs(ecf_ax - limit)),
                        np.max(np.abs(ecf_dg - limit))))
    else:
        limit, sup = None, None
    return EndpointReport(dim=d, horizon=t, second_moment_ratios=ratios,
                          covariance_over_t=cov,
                          max_offdiag_over_t=float(np.max(np.abs(off))),
                          phi_norms=phi, ecf_axis=ecf_ax, ecf_diag=ecf_dg,
                          ecf_imag_max=imag_max, limit_cf=limit,
                          sup_cf_distance=sup, ess=ens.ess)


# ----------------------------------------------------------------------
# conditioned (h-transform) chain
# ----------------------------------------------------------------------

@dataclass
class HChainRun:
    """One trajectory of the conditioned chain with occupation statistics."""

    dim: int
    beta: float
    t_total: float
    seed: int
    position: tuple
    clock: float
    occupation: dict
    origin_fraction: float
    origin_fraction_stderr: float
    n_jumps: int
    max_radius: float
    max_rate_error: float
    moment_checkpoints: np.ndarray
    moment_k1: np.ndarray

    def occupation_moment(self, k: int) -> float:
        tot = 0.0
        for site, tau in self.occupation.items():
            tot += tau * math.sqrt(sum(v * v for v in site)) ** k
        return tot / self.clock


def simulate_h_chain(pair: EigenPair, t_total: float, seed: int,
                     radius_cap: int | None = None, n_batches: int = 64,
                     rate_tol: float = 1e-8, n_checkpoints: int = 24) -> HChainRun:
    """Simulate the ground-state-conditioned chain (rates psi(y)/psi(x)).

    At every visited site the total exit rate is checked against the
    eigen-identity 2d - beta * delta_0 to ``rate_tol`` (psi values beyond
    the precomputed box are evaluated exactly on demand, so the identity
    holds everywhere; a violation indicates quadrature trouble and raises).
    Origin occupation comes with a batch-means standard error; radial
    occupation moments are recorded at geometric checkpoints so
    non-stabilizing (infinite) moments can be seen growing.
    """
    if pair.dim < 5 or pair.lam0 != 0.0:
        raise ValueError("the conditioned chain requires the critical "
                         "eigenfunction in d >= 5 (lam0 = 0)")
    d = pair.dim
    beta = pair.beta
    cap = radius_cap if radius_cap is not None else max(200, 10 * pair.field.box_radius)
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed, 3 << 60], dtype=np.uint64)))
    psi_cache: dict = {}

    def psi(site):
        v = psi_cache.get(site)
        if v is None:
            v = pair.psi(np.array(site))
            psi_cache[site] = v
        return v

    pos = (0,) * d
    clock = 0.0
    occupation: dict = {}
    batch_len = t_total / n_batches
    batch_origin = np.zeros(n_batches)
    checkpoints = t_total * np.geomspace(1.0 / (1 << (n_checkpoints - 1)), 1.0,
                                         n_checkpoints)
    moment_k1 = np.zeros(n_checkpoints)
    ckpt_idx = 0
    running_k1 = 0.0          # sum over sites of occ * |x|
    max_rate_err = 0.0
    max_radius = 0.0
    n_jumps = 0
    BLOCK = 8192
    u_hold = rng.random(BLOCK)
    u_jump = rng.random(BLOCK)
    ptr = 0
    neighbor_psi = np.empty(2 * d)
    while clock < t_total:
        if ptr == BLOCK:
            u_hold = rng.random(BLOCK)
            u_jump = rng.random(BLOCK)
            ptr = 0
        px = psi(pos)
        at0 = not any(pos)
        for j in range(d):
            for s_i, s in enumerate((-1, 1)):
                y = list(pos)
                y[j] += s
                neighbor_psi[2 * j + s_i] = psi(tuple(y))
        rates = neighbor_psi / px
        total_rate = rates.sum()
        expected = 2.0 * d - (beta if at0 else 0.0)
        err = abs(total_rate - expected)
        max_rate_err = max(max_rate_err, err)
        if err > rate_tol:
            raise RuntimeError(
                f"exit-rate identity violated at {pos}: {total_rate!r} vs "
                f"{expected!r} (psi quadrature accuracy insufficient)")
        tau = -math.log(1.0 - u_hold[ptr]) / total_rate
        t_next = clock + tau
        hold = min(t_next, t_total) - clock
        occupation[pos] = occupation.get(pos, 0.0) + hold
        r2 = math.sqrt(sum(v * v for v in pos))
        running_k1 += hold * r2
        b = min(int(clock / batch_len), n_batches - 1)
        if at0:
            batch_origin[b] += hold
        while ckpt_idx < n_checkpoints and min(t_next, t_total) >= checkpoints[ckpt_idx]:
            moment_k1[ckpt_idx] = running_k1 / checkpoints[ckpt_idx]
            ckpt_idx += 1
        clock = t_next
        if clock >= t_total:
            clock = t_total
            break
        # jump proportionally to neighbor psi values
        choice = int(np.searchsorted(np.cumsum(rates) / total_rate, u_jump[ptr],
                                     side="right"))
        choice = min(choice, 2 * d - 1)
        y = list(pos)
        y[choice >> 1] += -1 if (choice & 1) == 0 else 1
        pos = tuple(y)
        n_jumps += 1
        ptr += 1
        max_radius = max(max_radius, max(abs(v) for v in pos))
        if max_radius > cap:
            raise RadiusCapError(
                f"chain reached sup-norm radius {max_radius} > cap {cap} after "
                f"{n_jumps} jumps at clock {clock:.1f}")
    frac = batch_origin / batch_len
    origin_total = occupation.get((0,) * d, 0.0) / t_total
    stderr = float(np.std(frac, ddof=1) / math.sqrt(n_batches))
    return HChainRun(dim=d, beta=beta, t_total=t_total, seed=seed, position=pos,
                     clock=clock, occupation=occupation,
                     origin_fraction=origin_total,
                     origin_fraction_stderr=stderr, n_jumps=n_jumps,
                     max_radius=max_radius, max_rate_error=max_rate_err,
                     moment_checkpoints=checkpoints, moment_k1=moment_k1)
