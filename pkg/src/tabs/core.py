"""Domain types for the TABS token scheme.

Servers advertise their state to the dispatcher through colored tokens:
green (idle-on), red (idle-off), orange (in setup); busy servers hold the
implicit yellow token.  These types are shared by the event simulator, the
mean-field ODE engine, and the brute-force oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator, Sequence

import numpy as np


class TruncationOverflowError(Exception):
    """A finite queue exceeded the requested occupancy depth in strict mode."""


class ServerMode(IntEnum):
    BUSY = 0      # serving at least one task (yellow)
    IDLE_ON = 1   # idle, advertising a green token, waiting Exp(mu) before off
    IDLE_OFF = 2  # turned off, red token at the dispatcher
    SETUP = 3     # warming up for Exp(nu), orange token


@dataclass(frozen=True)
class ServerState:
    """Immutable snapshot of one server.

    ``net_flow`` counts arrivals minus departures since the infinite flag was
    set; it is only meaningful when ``infinite`` is true.  Queue lengths are
    plain 64-bit counts; an infinite queue is a flag, never a sentinel value.
    """

    mode: ServerMode
    queue_len: int = 0
    infinite: bool = False
    net_flow: int = 0


class IndexedSet:
    """Set of ints with O(1) add/remove/uniform-sample.

    Backed by a list plus a position map; removal swaps with the last element
    so sampling stays O(1).  Iteration order is an implementation detail.
    """

    __slots__ = ("_items", "_pos")

    def __init__(self, items: Iterable[int] = ()) -> None:
        self._items: list[int] = []
        self._pos: dict[int, int] = {}
        for x in items:
            self.add(x)

    def add(self, x: int) -> None:
        if x not in self._pos:
            self._pos[x] = len(self._items)
            self._items.append(x)

    def remove(self, x: int) -> None:
        pos = self._pos.pop(x)
        last = self._items.pop()
        if last != x:
            self._items[pos] = last
            self._pos[last] = pos

    def sample(self, rng: np.random.Generator) -> int:
        # 2^-53 index bias from the float product is negligible at desk scale
        return self._items[int(rng.random() * len(self._items))]

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, x: int) -> bool:
        return x in self._pos

    def __iter__(self) -> Iterator[int]:
        return iter(self._items)

    def copy(self) -> "IndexedSet":
        new = IndexedSet.__new__(IndexedSet)
        new._items = list(self._items)
        new._pos = dict(self._pos)
        return new


@dataclass
class TokenPool:
    """Dispatcher-side token sets, one per color; yellow is implicit (busy)."""

    green: IndexedSet = field(default_factory=IndexedSet)
    red: IndexedSet = field(default_factory=IndexedSet)
    orange: IndexedSet = field(default_factory=IndexedSet)

    def copy(self) -> "TokenPool":
        return TokenPool(self.green.copy(), self.red.copy(), self.orange.copy())


class SystemState:
    """Full unscaled Markov state of an N-server system.

    Server fields are stored as parallel lists (hot path of the simulator);
    ``server(j)`` and ``servers`` expose them as ``ServerState`` views.  The
    token pool and the busy index mirror the mode list; ``validate`` checks
    the mirror.  Counters are cumulative since construction.
    """

    __slots__ = (
        "n", "mode", "queue", "infinite", "net_flow", "tokens", "busy", "t",
        "losses", "setups_initiated", "arrivals_total", "departures_total",
        "arrivals_all_occupied", "enqueued_finite", "arrivals_infinite",
    )

    def __init__(self, servers: Sequence[ServerState], t: float = 0.0) -> None:
        if not servers:
            raise ValueError("need at least one server")
        self.n = len(servers)
        self.mode = [int(s.mode) for s in servers]
        self.queue = [int(s.queue_len) for s in servers]
        self.infinite = [bool(s.infinite) for s in servers]
        self.net_flow = [int(s.net_flow) for s in servers]
        self.tokens = TokenPool()
        self.busy = IndexedSet()
        for j, s in enumerate(servers):
            if s.mode == ServerMode.BUSY:
                self.busy.add(j)
            elif s.mode == ServerMode.IDLE_ON:
                self.tokens.green.add(j)
            elif s.mode == ServerMode.IDLE_OFF:
                self.tokens.red.add(j)
            else:
                self.tokens.orange.add(j)
        self.t = float(t)
        self.losses = 0
        self.setups_initiated = 0
        self.arrivals_total = 0
        self.departures_total = 0
        self.arrivals_all_occupied = 0
        self.enqueued_finite = 0
        self.arrivals_infinite = 0

    def server(self, j: int) -> ServerState:
        return ServerState(
            mode=ServerMode(self.mode[j]),
            queue_len=self.queue[j],
            infinite=self.infinite[j],
            net_flow=self.net_flow[j],
        )

    @property
    def servers(self) -> tuple[ServerState, ...]:
        return tuple(self.server(j) for j in range(self.n))

    def mode_counts(self) -> dict[ServerMode, int]:
        counts = {m: 0 for m in ServerMode}
        for m in self.mode:
            counts[ServerMode(m)] += 1
        return counts

    def net_flow_total(self) -> int:
        return sum(self.net_flow[j] for j in range(self.n) if self.infinite[j])

    def max_finite_queue(self) -> int:
        best = 0
        for j in range(self.n):
            if not self.infinite[j] and self.queue[j] > best:
                best = self.queue[j]
        return best

    def copy(self) -> "SystemState":
        new = SystemState.__new__(SystemState)
        new.n = self.n
        new.mode = list(self.mode)
        new.queue = list(self.queue)
        new.infinite = list(self.infinite)
        new.net_flow = list(self.net_flow)
        new.tokens = self.tokens.copy()
        new.busy = self.busy.copy()
        for name in ("t", "losses", "setups_initiated", "arrivals_total",
                     "departures_total", "arrivals_all_occupied",
                     "enqueued_finite", "arrivals_infinite"):
            setattr(new, name, getattr(self, name))
        return new


@dataclass
class OccupancyState:
    """Scaled occupancy vector: the state the mean-field dynamics live on.

    ``q[i-1]`` is the fraction of servers with queue length >= i (infinite
    queues count at every depth), ``delta0``/``delta1`` the idle-off and setup
    fractions, ``kappa`` the infinite-queue fraction.  ``max_queue`` is set by
    ``occupancy_of`` so callers can detect truncation; ODE output leaves it
    None.
    """

    q: np.ndarray
    delta0: float
    delta1: float
    kappa: float = 0.0
    max_queue: int | None = None

    @property
    def q1(self) -> float:
        return float(self.q[0])

    @property
    def u(self) -> float:
        return 1.0 - float(self.q[0]) - self.delta0 - self.delta1

    def check(self, tol: float = 1e-9) -> list[str]:
        """Return violations of the occupancy-space constraints, if any."""
        bad = []
        q = self.q
        if q.ndim != 1 or q.shape[0] < 1:
            return ["q must be a nonempty 1-d vector"]
        if np.any(q[:-1] < q[1:] - tol):
            bad.append("q not nonincreasing")
        if np.any(q < self.kappa - tol):
            bad.append("q below kappa floor")
        if q[0] > 1.0 + tol:
            bad.append("q1 exceeds 1")
        if self.delta0 < -tol or self.delta1 < -tol:
            bad.append("negative delta fraction")
        if self.q1 + self.delta0 + self.delta1 > 1.0 + tol:
            bad.append("q1 + delta0 + delta1 exceeds 1")
        if not 0.0 <= self.kappa <= 1.0:
            bad.append("kappa outside [0, 1]")
        return bad


def occupancy_of(state: SystemState, i_max: int = 64,
                 strict: bool = False) -> OccupancyState:
    """Scaled occupancy of a full system state.

    Counts are integer-exact and divided by N once, so the monotonicity and
    mass constraints hold to the precision of a single division.  Finite
    queues deeper than ``i_max`` still contribute to every recorded level;
    with ``strict`` they raise instead.
    """
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    n = state.n
    finite_lens = [state.queue[j] for j in range(n) if not state.infinite[j]]
    k_inf = n - len(finite_lens)
    max_q = max(finite_lens, default=0)
    if strict and max_q > i_max:
        raise TruncationOverflowError(
            f"finite queue length {max_q} exceeds recorded depth {i_max}")
    hist = np.bincount(np.asarray(finite_lens, dtype=np.int64),
                       minlength=i_max + 1) if finite_lens else np.zeros(
        i_max + 1, dtype=np.int64)
    # count of finite servers with queue >= i, i = 1..i_max
    at_least = len(finite_lens) - np.cumsum(hist)[:i_max]
    q = (at_least + k_inf) / n
    c_off = len(state.tokens.red)
    c_setup = len(state.tokens.orange)
    return OccupancyState(
        q=np.asarray(q, dtype=float),
        delta0=c_off / n,
        delta1=c_setup / n,
        kappa=k_inf / n,
        max_queue=max_q,
    )


def validate(state: SystemState) -> list[str]:
    """Check every structural invariant; return [] iff the state is consistent.

    Each violation names the broken invariant and the offending server id.
    Diagnostic only, never raises.
    """
    bad: list[str] = []
    n = state.n
    counts = {m: 0 for m in ServerMode}
    for j in range(n):
        m = ServerMode(state.mode[j])
        counts[m] += 1
        qlen = state.queue[j]
        if qlen < 0:
            bad.append(f"server {j}: negative queue length {qlen}")
        if state.infinite[j]:
            if m != ServerMode.BUSY:
                bad.append(f"server {j}: infinite queue but mode {m.name}")
        elif m == ServerMode.BUSY:
            if qlen < 1:
                bad.append(f"server {j}: mode BUSY with empty queue")
        else:
            if qlen != 0:
                bad.append(f"server {j}: mode {m.name} with queue {qlen}")
        in_green = j in state.tokens.green
        in_red = j in state.tokens.red
        in_orange = j in state.tokens.orange
        in_busy = j in state.busy
        memberships = in_green + in_red + in_orange + in_busy
        if memberships != 1:
            bad.append(f"server {j}: appears in {memberships} token/busy sets")
        expected = {
            ServerMode.BUSY: in_busy,
            ServerMode.IDLE_ON: in_green,
            ServerMode.IDLE_OFF: in_red,
            ServerMode.SETUP: in_orange,
        }[m]
        if not expected:
            bad.append(f"server {j}: mode {m.name} not mirrored by its token set")
    if sum(counts.values()) != n:
        bad.append("mode counts do not sum to N")
    size_sum = (len(state.busy) + len(state.tokens.green)
                + len(state.tokens.red) + len(state.tokens.orange))
    if size_sum != n:
        bad.append(f"token/busy set sizes sum to {size_sum}, expected {n}")
    return bad
