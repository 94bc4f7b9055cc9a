"""Mean-field fluid limit of the TABS dynamics.

State is the occupancy vector (q_1..q_I, delta0, delta1) on the truncated
space where every level fraction sits between kappa (the infinite-queue
fraction) and 1 and levels are nonincreasing.  The level just past the
truncation depth is pinned at kappa, which is exact at every closed-form
equilibrium.  The right-hand side routes arriving task mass to idle servers
while any exist, and otherwise splits it between newly idling capacity and
the busy-server levels, converting the shortfall into setup mass while
idle-off capacity remains.

Integration is fixed-step RK4 with a post-step projection back onto the
state space.  The indicator switches in the dynamics make trajectories slide
along the constraint surfaces; the projection absorbs the O(dt) overshoot a
fixed-step scheme produces there (see ``_project``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import OccupancyState

U_TOL = 1e-12       # idle fraction above this takes the all-to-idle branch
DELTA_TOL = 1e-12   # idle-off fraction above this can absorb setup triggers
PROJECTION_TOL = 1e-9   # constraint slack the projection repairs silently
OVERFLOW_TOL = 1e-6     # beyond this a violation signals a bug or too-big dt


class DegenerateRoutingError(Exception):
    """Routing mass cannot be normalized: q1 = 0 with nonzero level gaps."""


class SaturatedRegimeError(Exception):
    """kappa >= 1 - lam: the busy fraction tends to 1, no interior equilibrium."""


class ProjectionOverflowError(Exception):
    """A post-step constraint violation exceeded the repairable tolerance."""


class TruncationInadequateWarning(UserWarning):
    """Level mass reached the truncation depth; deeper I_max recommended."""


@dataclass
class FluidParams:
    lam: float
    mu: float = 1.0
    nu: float = 0.1
    kappa: float = 0.0
    i_max: int = 64
    dt: float = 1e-3
    horizon: float = 100.0
    sample_interval: float | None = None

    def check(self) -> None:
        if self.lam <= 0 or self.mu <= 0 or self.nu <= 0:
            raise ValueError("lam, mu, nu must be positive")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must be in [0, 1]")
        if self.i_max < 2:
            raise ValueError("i_max must be >= 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.sample_interval is not None and self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")


@njit(cache=True)
def _routing(y, imax, lam, nu, kappa, reg, p):
    """Fill p[0..imax] with the task-routing split; 0 on success, 1 if degenerate.

    ``reg`` floors the busy-mass denominator.  With reg = 0 the split is the
    exact formula; the integrator passes reg ~ lam * dt so that the mass a
    single step moves between levels can never exceed a fraction of the busy
    mass itself (the exact split concentrates unbounded per-server rates as
    q1 -> 0, a boundary layer no fixed step can resolve; the damped share is
    mass the untruncated dynamics would push to unbounded depth).
    """
    q1 = y[0]
    u = 1.0 - q1 - y[imax] - y[imax + 1]
    if u > U_TOL:
        p[0] = 1.0
        for i in range(1, imax + 1):
            p[i] = 0.0
        return 0
    p0 = (y[imax + 1] * nu + q1 - y[1]) / lam
    if p0 > 1.0:
        p0 = 1.0
    p[0] = p0
    rem = 1.0 - p0
    if rem <= 0.0:
        for i in range(1, imax + 1):
            p[i] = 0.0
        return 0
    denom = q1 if q1 > reg else reg
    if denom > 0.0:
        for i in range(imax):
            nxt = kappa if i == imax - 1 else y[i + 1]
            p[i + 1] = rem * (y[i] - nxt) / denom
        return 0
    # q1 = 0 forces every level gap to 0 in a consistent state, so no busy
    # server exists to receive mass; anything else cannot be normalized
    for i in range(imax):
        nxt = kappa if i == imax - 1 else y[i + 1]
        if y[i] - nxt != 0.0:
            return 1
        p[i + 1] = 0.0
    return 0


@njit(cache=True)
def _deriv(y, dy, p, imax, lam, mu, nu, kappa, reg):
    """Fill dy with d/dt of (q, delta0, delta1); return (status, setup rate)."""
    st = _routing(y, imax, lam, nu, kappa, reg, p)
    if st != 0:
        return st, 0.0
    for i in range(imax):
        nxt = kappa if i == imax - 1 else y[i + 1]
        dy[i] = lam * p[i] - (y[i] - nxt)
    d0 = y[imax]
    d1 = y[imax + 1]
    u = 1.0 - y[0] - d0 - d1
    xi_rate = lam * (1.0 - p[0]) if d0 > DELTA_TOL else 0.0
    dy[imax] = mu * u - xi_rate
    dy[imax + 1] = xi_rate - nu * d1
    return 0, xi_rate


@njit(cache=True)
def _project(y, imax, kappa):
    """Repair the state in place after a step.

    Clips levels to [kappa, 1] and the delta fractions to >= 0, restores
    level monotonicity by a reverse running max, and removes any mass excess
    q1 + delta0 + delta1 > 1 (taken first from q1 down to q2, then delta0,
    then delta1).  The delta clips and the mass excess are the expected
    O(dt) overshoot of a fixed step crossing the indicator surfaces (delta0
    exhausting, idle capacity exhausting), so they are repaired and reported
    rather than treated as errors.  Level negativity and monotonicity
    breakage have no such mechanism and stay at rounding level unless the
    dynamics or the step size are wrong.  Returns the largest pre-repair
    (level negativity, monotonicity, delta clip, mass excess) violations.
    """
    q_neg = 0.0
    for i in range(imax):
        d = kappa - y[i]
        if d > q_neg:
            q_neg = d
        if y[i] < kappa:
            y[i] = kappa
        elif y[i] > 1.0:
            y[i] = 1.0
    delta_clip = 0.0
    if y[imax] < 0.0:
        if -y[imax] > delta_clip:
            delta_clip = -y[imax]
        y[imax] = 0.0
    if y[imax + 1] < 0.0:
        if -y[imax + 1] > delta_clip:
            delta_clip = -y[imax + 1]
        y[imax + 1] = 0.0
    mono = 0.0
    for i in range(imax - 1, 0, -1):
        if y[i] > y[i - 1]:
            if y[i] - y[i - 1] > mono:
                mono = y[i] - y[i - 1]
            y[i - 1] = y[i]
    excess = y[0] + y[imax] + y[imax + 1] - 1.0
    clamp = 0.0
    if excess > 0.0:
        clamp = excess
        take = y[0] - (y[1] if imax > 1 else kappa)
        if take > excess:
            take = excess
        if take > 0.0:
            y[0] -= take
            excess -= take
        if excess > 0.0:
            take = y[imax] if y[imax] < excess else excess
            y[imax] -= take
            excess -= take
        if excess > 0.0:
            y[imax + 1] -= excess
            if y[imax + 1] < 0.0:
                y[imax + 1] = 0.0
    return q_neg, mono, delta_clip, clamp


@njit(cache=True)
def _integrate_loop(y0, imax, lam, mu, nu, kappa, dt, horizon, thin, reg):
    n_steps = int(np.ceil(horizon / dt - 1e-12))
    cap = n_steps // thin + 2
    ts = np.empty(cap)
    qs = np.empty((cap, imax))
    d0s = np.empty(cap)
    d1s = np.empty(cap)
    xis = np.empty(cap)
    m = imax + 2
    y = y0.copy()
    yt = np.empty(m)
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    p = np.empty(imax + 1)

    ts[0] = 0.0
    qs[0, :] = y[:imax]
    d0s[0] = y[imax]
    d1s[0] = y[imax + 1]
    xis[0] = 0.0
    nrec = 1

    xi = 0.0
    neg_max = 0.0
    mono_max = 0.0
    dclip_max = 0.0
    clamp_max = 0.0
    tail_max = 0.0
    status = 0
    bad_t = -1.0
    t = 0.0
    for step_i in range(n_steps):
        h = dt if step_i < n_steps - 1 else horizon - t
        st, x1 = _deriv(y, k1, p, imax, lam, mu, nu, kappa, reg)
        if st != 0:
            status = 1
            bad_t = t
            break
        for i in range(m):
            yt[i] = y[i] + 0.5 * h * k1[i]
        st, x2 = _deriv(yt, k2, p, imax, lam, mu, nu, kappa, reg)
        if st != 0:
            status = 1
            bad_t = t
            break
        for i in range(m):
            yt[i] = y[i] + 0.5 * h * k2[i]
        st, x3 = _deriv(yt, k3, p, imax, lam, mu, nu, kappa, reg)
        if st != 0:
            status = 1
            bad_t = t
            break
        for i in range(m):
            yt[i] = y[i] + h * k3[i]
        st, x4 = _deriv(yt, k4, p, imax, lam, mu, nu, kappa, reg)
        if st != 0:
            status = 1
            bad_t = t
            break
        w = h / 6.0
        for i in range(m):
            y[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        xi += w * (x1 + 2.0 * x2 + 2.0 * x3 + x4)
        q_neg, mono, delta_clip, clamp = _project(y, imax, kappa)
        if q_neg > neg_max:
            neg_max = q_neg
        if mono > mono_max:
            mono_max = mono
        if delta_clip > dclip_max:
            dclip_max = delta_clip
        if clamp > clamp_max:
            clamp_max = clamp
        t = horizon if step_i == n_steps - 1 else (step_i + 1) * dt
        if q_neg > OVERFLOW_TOL or mono > OVERFLOW_TOL:
            status = 2
            bad_t = t
            break
        if y[imax - 1] - kappa > tail_max:
            tail_max = y[imax - 1] - kappa
        if (step_i + 1) % thin == 0 or step_i == n_steps - 1:
            ts[nrec] = t
            qs[nrec, :] = y[:imax]
            d0s[nrec] = y[imax]
            d1s[nrec] = y[imax + 1]
            xis[nrec] = xi
            nrec += 1
    return (status, bad_t, nrec, ts, qs, d0s, d1s, xis,
            neg_max, mono_max, dclip_max, clamp_max, tail_max)


def _state_vector(state: OccupancyState, i_max: int, kappa: float) -> np.ndarray:
    """Pack an occupancy state into the integrator layout, padding with kappa."""
    q = np.asarray(state.q, dtype=float)
    if q.ndim != 1 or q.shape[0] < 1:
        raise ValueError("state.q must be a nonempty vector")
    if q.shape[0] > i_max:
        dropped = q[i_max:]
        if np.any(dropped > kappa + PROJECTION_TOL):
            raise ValueError(
                "initial state carries level mass beyond i_max; raise i_max")
        q = q[:i_max]
    elif q.shape[0] < i_max:
        q = np.concatenate([q, np.full(i_max - q.shape[0], kappa)])
    y = np.empty(i_max + 2)
    y[:i_max] = q
    y[i_max] = state.delta0
    y[i_max + 1] = state.delta1
    return y


def routing_coeffs(state: OccupancyState, lam: float, nu: float) -> np.ndarray:
    """Task-routing split p[0..I]: p[0] is the idle-server share, p[i] the
    share joining servers currently holding i tasks.

    When idle-on capacity exists everything routes there; otherwise the
    idle-server share is capped by the rate at which idle servers are
    produced (setup completions plus busy servers finishing their last
    task), and the remainder spreads over busy servers proportionally to
    level occupancy.
    """
    if lam <= 0 or nu <= 0:
        raise ValueError("lam and nu must be positive")
    q = np.asarray(state.q, dtype=float)
    if q.shape[0] < 2:
        raise ValueError("need at least two occupancy levels")
    i_max = q.shape[0]
    y = _state_vector(state, i_max, state.kappa)
    p = np.empty(i_max + 1)
    st = _routing(y, i_max, lam, nu, state.kappa, 0.0, p)
    if st != 0:
        raise DegenerateRoutingError(
            "q1 = 0 with nonzero level differences; routing cannot be normalized")
    return p


def rhs(state: OccupancyState, params: FluidParams) -> tuple[np.ndarray, float, float]:
    """Time derivative (dq, ddelta0, ddelta1) at a state."""
    params.check()
    y = _state_vector(state, params.i_max, params.kappa)
    dy = np.empty(params.i_max + 2)
    p = np.empty(params.i_max + 1)
    st, _ = _deriv(y, dy, p, params.i_max, params.lam, params.mu, params.nu,
                   params.kappa, 0.0)
    if st != 0:
        raise DegenerateRoutingError(
            "q1 = 0 with nonzero level differences; routing cannot be normalized")
    return dy[:params.i_max].copy(), float(dy[params.i_max]), float(dy[params.i_max + 1])


def fixed_point(lam: float, kappa: float = 0.0, i_max: int = 64) -> OccupancyState:
    """Closed-form equilibrium: q1 = kappa + lam, deeper levels at kappa,
    delta0 = 1 - lam - kappa, delta1 = 0.

    Only exists while kappa < 1 - lam; beyond that the busy fraction is
    driven to 1 and SaturatedRegimeError is raised.  The returned state is
    verified to be stationary to 1e-14 per component.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must be in (0, 1)")
    if not 0.0 <= kappa < 1.0:
        raise ValueError("kappa must be in [0, 1)")
    if i_max < 2:
        raise ValueError("i_max must be >= 2")
    if kappa >= 1.0 - lam:
        raise SaturatedRegimeError(
            f"kappa={kappa} >= 1-lam={1.0 - lam}: busy fraction tends to 1, "
            "no interior equilibrium exists")
    q = np.full(i_max, kappa)
    q[0] = kappa + lam
    state = OccupancyState(q=q, delta0=1.0 - lam - kappa, delta1=0.0, kappa=kappa)
    dq, dd0, dd1 = rhs(state, FluidParams(lam=lam, mu=1.0, nu=1.0, kappa=kappa,
                                          i_max=i_max))
    resid = max(float(np.max(np.abs(dq))), abs(dd0), abs(dd1))
    assert resid <= 1e-14, f"equilibrium residual {resid} exceeds 1e-14"
    return state


@dataclass
class FluidTrajectory:
    """Integrated trajectory: level fractions, delta fractions, and the
    cumulative setup mass xi, sampled on a uniform grid.

    ``max_mass_clamp`` is the largest single-step mass excess the projection
    removed (the O(dt) cost of crossing a switching surface); the pre-repair
    negativity/monotonicity violations stayed within the repair tolerance.
    """

    t: np.ndarray
    q: np.ndarray
    delta0: np.ndarray
    delta1: np.ndarray
    xi: np.ndarray
    kappa: float
    params: FluidParams
    max_level_negativity: float
    max_monotonicity_violation: float
    max_delta_clip: float
    max_mass_clamp: float
    max_tail_mass: float
    tail_truncated: bool

    @property
    def q1(self) -> np.ndarray:
        return self.q[:, 0]

    @property
    def u(self) -> np.ndarray:
        return 1.0 - self.q[:, 0] - self.delta0 - self.delta1

    def __len__(self) -> int:
        return self.t.shape[0]

    def state_at(self, i: int) -> OccupancyState:
        return OccupancyState(q=self.q[i].copy(), delta0=float(self.delta0[i]),
                              delta1=float(self.delta1[i]), kappa=self.kappa)

    def final_state(self) -> OccupancyState:
        return self.state_at(len(self) - 1)


def integrate(initial: OccupancyState, params: FluidParams) -> FluidTrajectory:
    """Fixed-step RK4 over [0, horizon] with post-step projection.

    Raises ProjectionOverflowError if a step violates the state-space
    constraints beyond repair (dt too large, or a bad right-hand side), and
    warns with TruncationInadequateWarning when level mass reaches the
    truncation depth.
    """
    params.check()
    if params.horizon <= 0:
        raise ValueError("horizon must be positive")
    bad = initial.check(tol=PROJECTION_TOL)
    if bad:
        raise ValueError(f"initial state outside the occupancy space: {bad}")
    if abs(initial.kappa - params.kappa) > 1e-12:
        raise ValueError("initial.kappa disagrees with params.kappa")
    y0 = _state_vector(initial, params.i_max, params.kappa)
    interval = (params.sample_interval if params.sample_interval is not None
                else params.horizon / 1000.0)
    thin = max(1, int(round(interval / params.dt)))
    (status, bad_t, nrec, ts, qs, d0s, d1s, xis,
     neg_max, mono_max, dclip_max, clamp_max, tail_max) = _integrate_loop(
        y0, params.i_max, params.lam, params.mu, params.nu, params.kappa,
        params.dt, params.horizon, thin, 4.0 * params.lam * params.dt)
    if status == 1:
        raise DegenerateRoutingError(
            f"routing became degenerate at t={bad_t:.6g}")
    if status == 2:
        raise ProjectionOverflowError(
            f"constraint violation beyond {OVERFLOW_TOL} at t={bad_t:.6g} "
            f"(negativity {neg_max:.3g}, monotonicity {mono_max:.3g}); "
            "reduce dt or check the dynamics")
    tail_truncated = tail_max > OVERFLOW_TOL
    if tail_truncated:
        warnings.warn(
            f"level mass {tail_max:.3g} above kappa reached truncation depth "
            f"i_max={params.i_max}; deeper levels are folded onto kappa",
            TruncationInadequateWarning, stacklevel=2)
    return FluidTrajectory(
        t=ts[:nrec].copy(), q=qs[:nrec].copy(), delta0=d0s[:nrec].copy(),
        delta1=d1s[:nrec].copy(), xi=xis[:nrec].copy(), kappa=params.kappa,
        params=params, max_level_negativity=neg_max,
        max_monotonicity_violation=mono_max, max_delta_clip=dclip_max,
        max_mass_clamp=clamp_max, max_tail_mass=tail_max,
        tail_truncated=tail_truncated,
    )


@dataclass
class CompareReport:
    """Sup-norm gaps between a sampled simulation path and a fluid path."""

    sup_q1: float
    t_sup_q1: float
    sup_delta0: float
    t_sup_delta0: float
    sup_delta1: float
    t_sup_delta1: float

    def as_dict(self) -> dict:
        return {
            "sup_q1": self.sup_q1, "t_sup_q1": self.t_sup_q1,
            "sup_delta0": self.sup_delta0, "t_sup_delta0": self.t_sup_delta0,
            "sup_delta1": self.sup_delta1, "t_sup_delta1": self.t_sup_delta1,
        }


def compare(trace, fluid: FluidTrajectory) -> CompareReport:
    """Sup over the common time range of |q1|, |delta0|, |delta1| gaps.

    The fluid path is linearly interpolated onto the simulation's sample
    grid restricted to the overlap of the two time ranges.
    """
    if len(trace.t) == 0 or len(fluid.t) == 0:
        raise ValueError("empty trajectory")
    lo = max(float(trace.t[0]), float(fluid.t[0]))
    hi = min(float(trace.t[-1]), float(fluid.t[-1]))
    if lo > hi:
        raise ValueError("trajectories cover disjoint time ranges")
    sel = (trace.t >= lo) & (trace.t <= hi)
    grid = trace.t[sel]
    if grid.size == 0:
        raise ValueError("no simulation samples inside the common time range")
    out = []
    for sim_vals, fluid_vals in (
            (trace.q1[sel], fluid.q1),
            (trace.delta0[sel], fluid.delta0),
            (trace.delta1[sel], fluid.delta1)):
        gap = np.abs(sim_vals - np.interp(grid, fluid.t, fluid_vals))
        i = int(np.argmax(gap))
        out.extend([float(gap[i]), float(grid[i])])
    return CompareReport(*out)
