"""Exact event-by-event simulation of the N-server TABS system.

All clocks are exponential, so the simulator draws the total-rate dwell time
and picks the event category proportionally to its rate (the embedded-chain
construction is exact; no timer calendar is needed).  Runs are deterministic
given (params, seed, replica).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .core import (
    IndexedSet,
    OccupancyState,
    ServerMode,
    ServerState,
    SystemState,
    occupancy_of,
)

_BUSY = int(ServerMode.BUSY)
_IDLE_ON = int(ServerMode.IDLE_ON)
_IDLE_OFF = int(ServerMode.IDLE_OFF)
_SETUP = int(ServerMode.SETUP)


@dataclass
class SimParams:
    """Run parameters.

    Rates are per server in service-time units: tasks arrive at total rate
    lam * N, an idle-on server turns off after Exp(mu), a setup completes
    after Exp(nu).  The first ``k_infinite`` servers are pinned busy with an
    infinite queue and only their net task flow is tracked.  ``buffer_cap``
    (drop arrivals routed to a busy server already holding that many tasks)
    exists solely so the dynamics can be matched against the truncated
    brute-force oracle.
    """

    N: int
    lam: float
    mu: float = 1.0
    nu: float = 0.1
    horizon: float = 100.0
    seed: int = 0
    k_infinite: int = 0
    initial: str = "all-idle-off"
    sample_interval: float | None = None
    record_depth: int = 8
    buffer_cap: int | None = None

    def check(self) -> None:
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.lam <= 0 or self.mu <= 0 or self.nu <= 0:
            raise ValueError("lam, mu, nu must be positive")
        if not 0 <= self.k_infinite <= self.N:
            raise ValueError("k_infinite must be in [0, N]")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.sample_interval is not None and self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")
        if self.record_depth < 1:
            raise ValueError("record_depth must be >= 1")
        if self.buffer_cap is not None and self.buffer_cap < 1:
            raise ValueError("buffer_cap must be >= 1")


def rng_for(seed: int, replica: int = 0) -> np.random.Generator:
    """PCG64 stream for one replica; distinct replicas never share a stream."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(replica,)))


def initial_state(params: SimParams) -> SystemState:
    """Build the starting state from the descriptor in ``params.initial``.

    Descriptors: "all-idle-off", "all-idle-on", "all-busy" (one task each),
    "all-busy:<q>", or "queues:<a>,<b>,..." giving queue lengths for the
    first servers (zero means idle-off) with the rest idle-off.  The first
    ``k_infinite`` servers are then overridden to infinite busy queues.
    """
    desc = params.initial
    n = params.N
    lens: list[int]
    if desc == "all-idle-off":
        lens = [0] * n
        empty_mode = ServerMode.IDLE_OFF
    elif desc == "all-idle-on":
        lens = [0] * n
        empty_mode = ServerMode.IDLE_ON
    elif desc == "all-busy" or desc.startswith("all-busy:"):
        per = 1 if desc == "all-busy" else int(desc.split(":", 1)[1])
        if per < 1:
            raise ValueError("all-busy queue length must be >= 1")
        lens = [per] * n
        empty_mode = ServerMode.IDLE_OFF
    elif desc.startswith("queues:"):
        listed = [int(x) for x in desc.split(":", 1)[1].split(",") if x != ""]
        if len(listed) > n:
            raise ValueError("more initial queues than servers")
        if any(x < 0 for x in listed):
            raise ValueError("initial queue lengths must be >= 0")
        lens = listed + [0] * (n - len(listed))
        empty_mode = ServerMode.IDLE_OFF
    else:
        raise ValueError(f"unknown initial-state descriptor {desc!r}")
    servers = []
    for j in range(n):
        if j < params.k_infinite:
            servers.append(ServerState(ServerMode.BUSY, 0, infinite=True))
        elif lens[j] > 0:
            servers.append(ServerState(ServerMode.BUSY, lens[j]))
        else:
            servers.append(ServerState(empty_mode, 0))
    return SystemState(servers)


def total_rate(state: SystemState, params: SimParams) -> float:
    return (params.lam * state.n + len(state.busy)
            + params.mu * len(state.tokens.green)
            + params.nu * len(state.tokens.orange))


def dispatch(state: SystemState, rng: np.random.Generator,
             buffer_cap: int | None = None) -> tuple[str, int | None, int | None]:
    """Route one arriving task; mutates the state.

    Returns (kind, target, setup_server) with kind one of "to_idle",
    "to_busy", "cap_drop", "lost".  A green server takes the task if one
    exists; otherwise a uniformly random busy server takes it (or it is lost
    if none is busy), and a uniformly random red token, if present, is
    converted into a setup.  A loss is a modeled outcome, not an error.
    """
    state.arrivals_total += 1
    green = state.tokens.green
    if len(green) > 0:
        j = green.sample(rng)
        green.remove(j)
        state.mode[j] = _BUSY
        state.queue[j] = 1
        state.busy.add(j)
        state.enqueued_finite += 1
        return ("to_idle", j, None)
    state.arrivals_all_occupied += 1
    busy = state.busy
    if len(busy) > 0:
        j = busy.sample(rng)
        if state.infinite[j]:
            state.net_flow[j] += 1
            state.arrivals_infinite += 1
            kind = "to_busy"
        elif buffer_cap is not None and state.queue[j] >= buffer_cap:
            state.losses += 1
            kind = "cap_drop"
        else:
            state.queue[j] += 1
            state.enqueued_finite += 1
            kind = "to_busy"
    else:
        j = None
        state.losses += 1
        kind = "lost"
    red = state.tokens.red
    setup_server = None
    if len(red) > 0:
        setup_server = red.sample(rng)
        red.remove(setup_server)
        state.tokens.orange.add(setup_server)
        state.mode[setup_server] = _SETUP
        state.setups_initiated += 1
    return (kind, j, setup_server)


def _complete_service(state: SystemState, j: int) -> None:
    state.departures_total += 1
    if state.infinite[j]:
        state.net_flow[j] -= 1
        return
    q = state.queue[j] - 1
    state.queue[j] = q
    if q == 0:
        state.mode[j] = _IDLE_ON
        state.busy.remove(j)
        state.tokens.green.add(j)


def _fire(state: SystemState, rng: np.random.Generator, lam_n: float,
          mu: float, nu: float, buffer_cap: int | None, rate: float) -> str:
    """Pick one event proportionally to its rate and apply it."""
    u = rng.random() * rate
    if u < lam_n:
        dispatch(state, rng, buffer_cap)
        return "arrival"
    u -= lam_n
    if u < len(state.busy):
        _complete_service(state, state.busy.sample(rng))
        return "service"
    u -= len(state.busy)
    green = state.tokens.green
    if u < mu * len(green):
        j = green.sample(rng)
        green.remove(j)
        state.tokens.red.add(j)
        state.mode[j] = _IDLE_OFF
        return "standby"
    orange = state.tokens.orange
    j = orange.sample(rng)
    orange.remove(j)
    green.add(j)
    state.mode[j] = _IDLE_ON
    return "setup"


def step(state: SystemState, params: SimParams,
         rng: np.random.Generator) -> tuple[str, float, SystemState]:
    """One exact transition: Exp(total rate) dwell, then the chosen event."""
    rate = total_rate(state, params)
    dwell = -math.log(1.0 - rng.random()) / rate
    kind = _fire(state, rng, params.lam * state.n, params.mu, params.nu,
                 params.buffer_cap, rate)
    state.t += dwell
    return kind, dwell, state


@dataclass(frozen=True)
class TraceSample:
    t: float
    occ: OccupancyState
    losses: int
    setups_initiated: int
    max_queue: int


@dataclass
class SimTrace:
    """Sampled occupancy trajectory plus cumulative counters.

    Counters are the values in force at each sample time (the state is
    piecewise constant between events).  ``final`` is the full state after
    the last applied event, whose time may slightly exceed the horizon.
    """

    t: np.ndarray
    q: np.ndarray
    delta0: np.ndarray
    delta1: np.ndarray
    kappa: float
    losses: np.ndarray
    setups: np.ndarray
    arrivals: np.ndarray
    all_occupied_arrivals: np.ndarray
    enqueued_finite: np.ndarray
    arrivals_infinite: np.ndarray
    net_flow_total: np.ndarray
    max_queue: np.ndarray
    events_processed: int
    final: SystemState
    params: SimParams
    replica: int = 0

    @property
    def q1(self) -> np.ndarray:
        return self.q[:, 0]

    @property
    def u(self) -> np.ndarray:
        return 1.0 - self.q[:, 0] - self.delta0 - self.delta1

    def __len__(self) -> int:
        return self.t.shape[0]

    def samples(self) -> Iterator[TraceSample]:
        for i in range(len(self)):
            occ = OccupancyState(q=self.q[i].copy(), delta0=float(self.delta0[i]),
                                 delta1=float(self.delta1[i]), kappa=self.kappa,
                                 max_queue=int(self.max_queue[i]))
            yield TraceSample(float(self.t[i]), occ, int(self.losses[i]),
                              int(self.setups[i]), int(self.max_queue[i]))


def run(params: SimParams, replica: int = 0) -> SimTrace:
    """Simulate until the horizon, sampling occupancy on a uniform grid.

    Samples at grid time g carry the state in force at g (recorded before
    the event that jumps past g), so the grid is an exact snapshot of the
    piecewise-constant path.  Deterministic given (params, seed, replica).
    """
    params.check()
    state = initial_state(params)
    rng = rng_for(params.seed, replica)
    horizon = float(params.horizon)
    depth = params.record_depth

    rows_t: list[float] = []
    rows: list[tuple] = []
    events = 0

    if horizon > 0:
        interval = (params.sample_interval if params.sample_interval is not None
                    else horizon / 1000.0)
        lam_n = params.lam * state.n
        mu, nu = params.mu, params.nu
        cap = params.buffer_cap
        rand = rng.random
        log = math.log
        busy = state.busy
        green = state.tokens.green
        orange = state.tokens.orange
        i_sample = 0
        next_sample = 0.0
        t = 0.0
        while t < horizon:
            rate = lam_n + len(busy) + mu * len(green) + nu * len(orange)
            dwell = -log(1.0 - rand()) / rate
            t_new = t + dwell
            if next_sample <= t_new:
                limit = t_new if t_new < horizon else horizon
                while next_sample <= limit:
                    occ = occupancy_of(state, i_max=depth)
                    rows_t.append(next_sample)
                    rows.append((occ, state.losses, state.setups_initiated,
                                 state.arrivals_total,
                                 state.arrivals_all_occupied,
                                 state.enqueued_finite,
                                 state.arrivals_infinite,
                                 state.net_flow_total()))
                    i_sample += 1
                    next_sample = i_sample * interval
            _fire(state, rng, lam_n, mu, nu, cap, rate)
            events += 1
            t = t_new
        state.t = t

    m = len(rows_t)
    q = np.empty((m, depth))
    delta0 = np.empty(m)
    delta1 = np.empty(m)
    ints = np.empty((m, 7), dtype=np.int64)
    max_queue = np.empty(m, dtype=np.int64)
    for i, (occ, *counters) in enumerate(rows):
        q[i] = occ.q
        delta0[i] = occ.delta0
        delta1[i] = occ.delta1
        max_queue[i] = occ.max_queue
        ints[i] = counters
    return SimTrace(
        t=np.asarray(rows_t), q=q, delta0=delta0, delta1=delta1,
        kappa=params.k_infinite / params.N,
        losses=ints[:, 0], setups=ints[:, 1], arrivals=ints[:, 2],
        all_occupied_arrivals=ints[:, 3], enqueued_finite=ints[:, 4],
        arrivals_infinite=ints[:, 5], net_flow_total=ints[:, 6],
        max_queue=max_queue, events_processed=events, final=state,
        params=params, replica=replica,
    )


class SteadyStats:
    """Time-averaged statistics over the post-burn-in window of a trace.

    Averages weight each sample by the time to the next one (the grid is a
    snapshot of a piecewise-constant path).  ``infinite_drift`` is the net
    task flow rate per infinite server, None when there are none.
    ``p_all_occupied`` is the fraction of window arrival epochs that found
    every server busy, off, or in setup (0.0 if the window saw no arrivals).
    """

    def __init__(self, trace: SimTrace, burn_in_fraction: float = 0.2) -> None:
        if not 0 <= burn_in_fraction < 1:
            raise ValueError("burn_in_fraction must be in [0, 1)")
        if len(trace) == 0:
            raise ValueError("trace has no samples")
        t0 = burn_in_fraction * trace.params.horizon
        sel = trace.t >= t0
        if np.count_nonzero(sel) < 2:
            raise ValueError("post-burn-in window has fewer than two samples")
        t = trace.t[sel]
        w = np.diff(t)
        span = t[-1] - t[0]
        self._t = t
        self._q1 = trace.q1[sel]
        self.window = (float(t[0]), float(t[-1]))
        self.mean_q1 = float(np.dot(self._q1[:-1], w) / span)
        self.mean_delta0 = float(np.dot(trace.delta0[sel][:-1], w) / span)
        self.mean_delta1 = float(np.dot(trace.delta1[sel][:-1], w) / span)
        self.mean_u = float(np.dot(trace.u[sel][:-1], w) / span)
        arr = trace.arrivals[sel]
        occ = trace.all_occupied_arrivals[sel]
        n_arr = int(arr[-1] - arr[0])
        self.p_all_occupied = (int(occ[-1] - occ[0]) / n_arr) if n_arr else 0.0
        losses = trace.losses[sel]
        self.loss_rate = float(losses[-1] - losses[0]) / span
        k = trace.params.k_infinite
        if k > 0:
            nf = trace.net_flow_total[sel]
            self.infinite_drift: float | None = float(nf[-1] - nf[0]) / (k * span)
        else:
            self.infinite_drift = None

    def p_q1_below(self, eps: float) -> float:
        """Fraction of window time with a busy-server fraction below eps."""
        w = np.diff(self._t)
        below = self._q1[:-1] < eps
        return float(np.dot(below, w) / (self._t[-1] - self._t[0]))


def steady_stats(trace: SimTrace, burn_in_fraction: float = 0.2) -> SteadyStats:
    return SteadyStats(trace, burn_in_fraction)


def empirical_state_law(params: SimParams, n_events: int,
                        burn_in_events: int = 0, replica: int = 0,
                        reduce: str = "counts") -> dict:
    """Time-weighted occupation law over ``n_events`` transitions.

    Keys are (#busy, #idle-off, #setup) for ``reduce="counts"`` or the
    exchangeability-reduced (sorted busy queue lengths, #idle-off, #setup)
    for ``reduce="queues"``.  Used to cross-check the simulator against the
    exact stationary solve at small N.
    """
    params.check()
    if reduce not in ("counts", "queues"):
        raise ValueError("reduce must be 'counts' or 'queues'")
    by_queues = reduce == "queues"
    state = initial_state(params)
    rng = rng_for(params.seed, replica)
    lam_n = params.lam * state.n
    mu, nu = params.mu, params.nu
    cap = params.buffer_cap
    rand = rng.random
    log = math.log
    busy = state.busy
    green = state.tokens.green
    red = state.tokens.red
    orange = state.tokens.orange
    queue = state.queue
    acc: dict = {}
    total = 0.0
    for i in range(n_events):
        rate = lam_n + len(busy) + mu * len(green) + nu * len(orange)
        dwell = -log(1.0 - rand()) / rate
        if i >= burn_in_events:
            if by_queues:
                key = (tuple(sorted(queue[j] for j in busy)),
                       len(red), len(orange))
            else:
                key = (len(busy), len(red), len(orange))
            acc[key] = acc.get(key, 0.0) + dwell
            total += dwell
        _fire(state, rng, lam_n, mu, nu, cap, rate)
    if total > 0.0:
        for key in acc:
            acc[key] /= total
    return acc


def merge_params(params: SimParams, **overrides) -> SimParams:
    return replace(params, **overrides)
