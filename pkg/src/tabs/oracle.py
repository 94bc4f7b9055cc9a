"""Brute-force ground truth for tiny systems.

Enumerates the full per-server state space of the buffer-truncated dynamics
(arrivals routed to a busy server already at the cap are dropped), builds
the exact transition-rate matrix, and solves for the stationary law by dense
linear algebra.  Used to validate the event simulator, which exposes the
same drop-at-cap switch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

# per-server encoding: 0 idle-on, 1 idle-off, 2 setup, 3..cap+2 busy with 1..cap tasks
_IDLE_ON = 0
_IDLE_OFF = 1
_SETUP = 2
_BUSY_BASE = 3

MAX_STATES = 80_000
MAX_DENSE_BYTES = 2 << 30


class StateSpaceSizeError(Exception):
    """Requested truncated chain is too large to enumerate or solve densely."""


class ReducibleChainError(Exception):
    """The generator is not irreducible; no unique stationary law exists."""


def _describe(enc: int) -> str:
    if enc == _IDLE_ON:
        return "on"
    if enc == _IDLE_OFF:
        return "off"
    if enc == _SETUP:
        return "setup"
    return f"B{enc - _BUSY_BASE + 1}"


@dataclass
class TruncatedStateSpace:
    """Enumeration of all (cap+3)^N per-server state tuples with an index map."""

    n: int
    cap: int
    states: list[tuple[int, ...]]
    index: dict[tuple[int, ...], int]

    @classmethod
    def build(cls, n: int, cap: int) -> "TruncatedStateSpace":
        if not 1 <= n <= 3:
            raise StateSpaceSizeError("oracle supports 1 to 3 servers")
        if not 1 <= cap <= 40:
            raise StateSpaceSizeError("buffer cap must be in [1, 40]")
        size = (cap + 3) ** n
        if size > MAX_STATES:
            raise StateSpaceSizeError(
                f"{size} states exceeds the {MAX_STATES} enumeration guard")
        states = list(itertools.product(range(cap + 3), repeat=n))
        return cls(n=n, cap=cap, states=states,
                   index={s: i for i, s in enumerate(states)})

    def permuted(self, order: np.ndarray) -> "TruncatedStateSpace":
        states = [self.states[i] for i in order]
        return TruncatedStateSpace(n=self.n, cap=self.cap, states=states,
                                   index={s: i for i, s in enumerate(states)})

    def describe(self, i: int) -> str:
        return "|".join(_describe(e) for e in self.states[i])


@dataclass
class GeneratorMatrix:
    """Dense transition-rate matrix; rows sum to zero."""

    rates: np.ndarray
    space: TruncatedStateSpace | None = None


def build_generator(n: int, cap: int, lam: float, mu: float, nu: float,
                    space: TruncatedStateSpace | None = None) -> GeneratorMatrix:
    """Exact generator of the N-server system with per-server buffer cap.

    The arrival transition mirrors the dispatcher: a uniformly random green
    server takes the task if one exists; otherwise a uniformly random busy
    server takes it (dropped if that server is at the cap, lost if no server
    is busy), and independently a uniformly random red token, if present,
    turns into a setup.
    """
    if lam <= 0 or mu <= 0 or nu <= 0:
        raise ValueError("lam, mu, nu must be positive")
    if space is None:
        space = TruncatedStateSpace.build(n, cap)
    elif space.n != n or space.cap != cap:
        raise ValueError("space does not match n/cap")
    size = len(space.states)
    if size * size * 8 > MAX_DENSE_BYTES:
        raise StateSpaceSizeError(
            f"dense generator for {size} states needs "
            f"{size * size * 8 / 2**30:.1f} GiB; reduce N or the cap")
    gen = np.zeros((size, size))
    lam_n = lam * n
    index = space.index

    def add(i: int, target: tuple[int, ...], rate: float) -> None:
        j = index[target]
        if j != i:
            gen[i, j] += rate

    for i, s in enumerate(space.states):
        greens = [j for j, e in enumerate(s) if e == _IDLE_ON]
        reds = [j for j, e in enumerate(s) if e == _IDLE_OFF]
        oranges = [j for j, e in enumerate(s) if e == _SETUP]
        busys = [j for j, e in enumerate(s) if e >= _BUSY_BASE]

        if greens:
            r = lam_n / len(greens)
            for j in greens:
                t = list(s)
                t[j] = _BUSY_BASE
                add(i, tuple(t), r)
        else:
            targets = ([(j, 1.0 / len(busys)) for j in busys]
                       if busys else [(None, 1.0)])
            triggers = ([(j, 1.0 / len(reds)) for j in reds]
                        if reds else [(None, 1.0)])
            for tj, pj in targets:
                for rj, pr in triggers:
                    t = list(s)
                    if tj is not None and s[tj] - _BUSY_BASE + 1 < cap:
                        t[tj] += 1
                    if rj is not None:
                        t[rj] = _SETUP
                    add(i, tuple(t), lam_n * pj * pr)

        for j in busys:
            t = list(s)
            t[j] = _IDLE_ON if s[j] == _BUSY_BASE else s[j] - 1
            add(i, tuple(t), 1.0)
        for j in greens:
            t = list(s)
            t[j] = _IDLE_OFF
            add(i, tuple(t), mu)
        for j in oranges:
            t = list(s)
            t[j] = _IDLE_ON
            add(i, tuple(t), nu)

    gen[np.arange(size), np.arange(size)] = -gen.sum(axis=1)
    return GeneratorMatrix(rates=gen, space=space)


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        i = stack.pop()
        for j in np.nonzero(adj[i])[0]:
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return seen


def stationary(gen: GeneratorMatrix | np.ndarray) -> np.ndarray:
    """Stationary probability vector pi with pi @ G = 0 and sum(pi) = 1.

    One balance equation is replaced by the normalization; requires an
    irreducible generator (checked by reachability in both directions from
    state 0).  The residual max|pi @ G| is verified below 1e-10.
    """
    g = gen.rates if isinstance(gen, GeneratorMatrix) else np.asarray(gen, float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError("generator must be square")
    off = g > 0
    if not _reachable(off, 0).all() or not _reachable(off.T, 0).all():
        raise ReducibleChainError("generator is not irreducible")
    size = g.shape[0]
    a = g.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(size)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    residual = float(np.max(np.abs(pi @ g)))
    if residual > 1e-10:
        raise ArithmeticError(f"stationary residual {residual:.3g} exceeds 1e-10")
    if pi.min() < -1e-9:
        raise ArithmeticError(f"stationary vector has negative mass {pi.min():.3g}")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def occupancy_marginal(space: TruncatedStateSpace, pi: np.ndarray,
                       reduce: str = "counts") -> dict:
    """Project the stationary law onto the exchangeable occupancy description.

    Keys match ``sim.empirical_state_law``: (#busy, #idle-off, #setup) for
    ``reduce="counts"``, or (sorted busy queue lengths, #idle-off, #setup)
    for ``reduce="queues"``.
    """
    if reduce not in ("counts", "queues"):
        raise ValueError("reduce must be 'counts' or 'queues'")
    out: dict = {}
    for s, p in zip(space.states, pi):
        n_off = sum(1 for e in s if e == _IDLE_OFF)
        n_setup = sum(1 for e in s if e == _SETUP)
        if reduce == "counts":
            key = (sum(1 for e in s if e >= _BUSY_BASE), n_off, n_setup)
        else:
            key = (tuple(sorted(e - _BUSY_BASE + 1 for e in s if e >= _BUSY_BASE)),
                   n_off, n_setup)
        out[key] = out.get(key, 0.0) + float(p)
    return out


def total_variation(p: dict, q: dict) -> float:
    """Half the L1 distance between two probability mass functions."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
