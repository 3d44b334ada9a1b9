"""Discrete-event simulation of the infinite-server model with catastrophes.

Replications are processed in fixed-size blocks, each block drawing from its
own child of one ``SeedSequence``, so results depend only on the seed and the
block size. Within a block all customers are handled as flat arrays: with
infinitely many servers a customer's fate depends only on its own arrival
time, service time and the catastrophe epochs.

Simultaneous events are ordered service completion, then catastrophe, then
arrival.

Besides genuine completions the summary records the nominal served count: the
customers whose service requirement has elapsed by the checkpoint, whether or
not a catastrophe removed them first. That is the quantity the analytic
served-count PGF describes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelSpec, RateFunction

DEFAULT_BLOCK = 4096
BUSY_BLOCK = 65536


@dataclass(frozen=True)
class SimConfig:
    spec: ModelSpec
    horizon: float
    checkpoints: tuple[float, ...] = ()
    replications: int = 1000
    seed: int = 0
    busy_cycle_target: int = 0
    block_size: int = DEFAULT_BLOCK
    event_log_replications: int = 0

    def __post_init__(self):
        cps = tuple(float(c) for c in self.checkpoints)
        object.__setattr__(self, "checkpoints", cps)
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not self.horizon >= 0 or not math.isfinite(self.horizon):
            raise ValueError("horizon must be finite and nonnegative")
        if any(c < 0 or c > self.horizon for c in cps):
            raise ValueError("checkpoints must lie in [0, horizon]")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.busy_cycle_target < 0 or self.block_size < 1:
            raise ValueError("busy_cycle_target must be >= 0 and block_size >= 1")


@dataclass
class SimulationSummary:
    """Per checkpoint, replication and class: in-system ``N``, nominal served
    ``served``, genuine completions ``completed``, catastrophe losses
    ``destroyed``; arrays have shape (checkpoints, replications, classes)."""

    seed: int
    replications: int
    checkpoints: tuple[float, ...]
    in_system: np.ndarray
    served: np.ndarray
    completed: np.ndarray
    destroyed: np.ndarray
    arrivals: np.ndarray
    busy_periods: np.ndarray = field(default_factory=lambda: np.zeros(0))
    idle_periods: np.ndarray = field(default_factory=lambda: np.zeros(0))
    events: list[tuple] = field(default_factory=list)

    @property
    def cycles(self) -> np.ndarray:
        return self.busy_periods + self.idle_periods

    def _index(self, t: float) -> int:
        try:
            return self.checkpoints.index(float(t))
        except ValueError:
            raise KeyError(f"no checkpoint at t={t}") from None

    def total_in_system(self, t: float) -> np.ndarray:
        return self.in_system[self._index(t)].sum(axis=1)

    def pmf(self, t: float, which: str = "in_system", aggregate: bool = True) -> np.ndarray:
        """Empirical pmf of the counts at checkpoint ``t``.

        ``which`` is 'in_system', 'served', 'completed' or 'joint' (in-system
        classes followed by served classes). Aggregated output is over the
        total count.
        """
        i = self._index(t)
        if which == "joint":
            data = np.concatenate([self.in_system[i], self.served[i]], axis=1)
            aggregate = False
        else:
            data = getattr(self, which)[i]
        if aggregate:
            counts = np.bincount(data.sum(axis=1))
            return counts / self.replications
        shape = tuple(data.max(axis=0) + 1)
        flat = np.ravel_multi_index(data.T, shape)
        counts = np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape)
        return counts / self.replications

    def mean(self, t: float, which: str = "in_system") -> tuple[float, float]:
        """Sample mean of the total count and its standard error."""
        x = getattr(self, which)[self._index(t)].sum(axis=1)
        return float(x.mean()), _stderr(x)

    def variance(self, t: float, which: str = "in_system") -> float:
        x = getattr(self, which)[self._index(t)].sum(axis=1)
        return float(x.var(ddof=1)) if len(x) > 1 else 0.0


def _stderr(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


# -- arrival generation -------------------------------------------------------------


def _poisson_epochs(rng: np.random.Generator, rate: RateFunction, horizon: float, reps: int):
    """Epochs of a Poisson process with piecewise-constant ``rate`` on
    [0, horizon] for ``reps`` replications, by thinning against the maximum
    rate. Returns (replication index, time), sorted by replication then time."""
    top = rate.max_on(horizon) if horizon > 0 else 0.0
    if top == 0 or horizon == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    counts = rng.poisson(top * horizon, size=reps)
    rep = np.repeat(np.arange(reps), counts)
    times = rng.uniform(0.0, horizon, size=rep.size)
    if not rate.is_constant:
        keep = rng.random(rep.size) * top < rate(times)
        rep, times = rep[keep], times[keep]
    order = np.lexsort((times, rep))
    return rep[order], times[order]


def _expand_batches(spec: ModelSpec, rng: np.random.Generator, stream: int, nbatches: int):
    """Sample batch compositions for ``nbatches`` batches of a stream.

    Returns (batch index, class) per customer.
    """
    if spec.shared:
        comp = spec.shared_batch.sample(rng, nbatches)                  # (n, k)
    else:
        comp = np.zeros((nbatches, spec.k), dtype=np.int64)
        comp[:, stream] = spec.classes[stream].batch.sample(rng, nbatches)[:, 0]
    k = spec.k
    per = comp.ravel()
    batch_idx = np.repeat(np.repeat(np.arange(nbatches), k), per)
    cls = np.repeat(np.tile(np.arange(k), nbatches), per)
    return batch_idx, cls


def _service_times(spec: ModelSpec, rng: np.random.Generator, cls: np.ndarray) -> np.ndarray:
    out = np.empty(cls.size)
    for i, c in enumerate(spec.classes):
        mask = cls == i
        if mask.any():
            out[mask] = c.service.sample(rng, int(mask.sum()))
    return out


def _next_after(cat_rep, cat_time, reps: int, rep: np.ndarray, t: np.ndarray) -> np.ndarray:
    """First catastrophe strictly after ``t`` in replication ``rep`` (inf if none)."""
    out = np.full(t.shape, np.inf)
    if len(cat_time) == 0:
        return out
    starts = np.searchsorted(cat_rep, np.arange(reps + 1), side="left")
    lo = starts[rep].copy()
    hi = starts[rep + 1].copy()
    # vectorised binary search for the first index with cat_time > t
    while True:
        active = lo < hi
        if not active.any():
            break
        mid = (lo + hi) // 2
        mid_time = np.where(active, cat_time[np.minimum(mid, len(cat_time) - 1)], np.inf)
        go_right = active & (mid_time <= t)
        lo = np.where(go_right, mid + 1, lo)
        hi = np.where(active & ~go_right, mid, hi)
    found = lo < starts[rep + 1]
    out[found] = cat_time[lo[found]]
    return out


@dataclass
class _Block:
    reps: int
    cat_rep: np.ndarray
    cat_time: np.ndarray
    rep: np.ndarray
    cls: np.ndarray
    arrive: np.ndarray
    depart: np.ndarray
    catastrophe: np.ndarray


def _simulate_block(spec: ModelSpec, horizon: float, reps: int, rng: np.random.Generator) -> _Block:
    cat_rep, cat_time = _poisson_epochs(rng, spec.catastrophe_rate, horizon, reps)
    parts = []
    for stream, rate in enumerate(spec.arrival_rates):
        b_rep, b_time = _poisson_epochs(rng, rate, horizon, reps)
        if b_rep.size == 0:
            continue
        idx, cls = _expand_batches(spec, rng, stream, b_rep.size)
        parts.append((b_rep[idx], cls, b_time[idx]))
    if parts:
        rep = np.concatenate([p[0] for p in parts])
        cls = np.concatenate([p[1] for p in parts])
        arrive = np.concatenate([p[2] for p in parts])
    else:
        rep = np.zeros(0, dtype=np.int64)
        cls = np.zeros(0, dtype=np.int64)
        arrive = np.zeros(0)
    depart = arrive + _service_times(spec, rng, cls)
    cat = _next_after(cat_rep, cat_time, reps, rep, arrive)
    return _Block(reps, cat_rep, cat_time, rep, cls, arrive, depart, cat)


def _count(rep, cls, mask, reps: int, k: int) -> np.ndarray:
    flat = rep[mask] * k + cls[mask]
    return np.bincount(flat, minlength=reps * k).reshape(reps, k)


def _block_events(blk: _Block, limit: int, offset: int, horizon: float) -> list[tuple]:
    """Event rows (replication, time, type, class, N_after, M_after) for the
    first ``limit`` replications of a block; M counts genuine completions."""
    rows = []
    for r in range(min(limit, blk.reps)):
        ev = []
        mine = blk.rep == r
        for a, d, c, k in zip(blk.arrive[mine], blk.depart[mine], blk.catastrophe[mine], blk.cls[mine]):
            ev.append((a, 2, "arrival", int(k)))
            if d <= c:
                ev.append((d, 0, "departure", int(k)))
        for t in blk.cat_time[blk.cat_rep == r]:
            ev.append((t, 1, "catastrophe", -1))
        ev = [e for e in ev if e[0] <= horizon]
        ev.sort(key=lambda e: (e[0], e[1]))
        n = m = 0
        for t, _, kind, k in ev:
            if kind == "arrival":
                n += 1
            elif kind == "departure":
                n -= 1
                m += 1
            else:
                n = 0
            rows.append((offset + r, float(t), kind, k, n, m))
    return rows


def simulate_transient(config: SimConfig) -> SimulationSummary:
    """Record in-system, served and destroyed counts at each checkpoint."""
    spec = config.spec
    k = spec.k
    cps = config.checkpoints
    R = config.replications
    shape = (len(cps), R, k)
    out = {name: np.zeros(shape, dtype=np.int64) for name in
           ("in_system", "served", "completed", "destroyed", "arrivals")}
    events: list[tuple] = []
    nblocks = -(-R // config.block_size)
    children = np.random.SeedSequence(config.seed).spawn(nblocks)
    horizon = max(cps) if cps and config.event_log_replications == 0 else config.horizon
    for b, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        lo = b * config.block_size
        reps = min(config.block_size, R - lo)
        blk = _simulate_block(spec, horizon, reps, rng)
        a, d, c = blk.arrive, blk.depart, blk.catastrophe
        finished = d <= c
        for j, t in enumerate(cps):
            arrived = a <= t
            completed = arrived & finished & (d <= t)
            destroyed = arrived & ~finished & (c <= t)
            present = arrived & ~completed & ~destroyed
            out["in_system"][j, lo:lo + reps] = _count(blk.rep, blk.cls, present, reps, k)
            out["served"][j, lo:lo + reps] = _count(blk.rep, blk.cls, arrived & (d <= t), reps, k)
            out["completed"][j, lo:lo + reps] = _count(blk.rep, blk.cls, completed, reps, k)
            out["destroyed"][j, lo:lo + reps] = _count(blk.rep, blk.cls, destroyed, reps, k)
            out["arrivals"][j, lo:lo + reps] = _count(blk.rep, blk.cls, arrived, reps, k)
        if lo < config.event_log_replications:
            events.extend(_block_events(blk, config.event_log_replications - lo, lo, horizon))
    return SimulationSummary(config.seed, R, cps, events=events, **out)


def write_event_log(summary: SimulationSummary, path) -> Path:
    """One CSV with columns replication, event_time, event_type, class, N_after, M_after."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replication", "event_time", "event_type", "class", "N_after", "M_after"])
        for row in summary.events:
            w.writerow([row[0], repr(row[1]), row[2], "" if row[3] < 0 else row[3], row[4], row[5]])
    return path


# -- busy periods --------------------------------------------------------------------


def _batch_max_service(spec: ModelSpec, rng: np.random.Generator, streams: np.ndarray) -> np.ndarray:
    """Longest service time within each batch, one batch per entry of ``streams``."""
    n = streams.size
    out = np.zeros(n)
    if spec.shared:
        groups = [(np.arange(n), 0)]
    else:
        groups = [(np.flatnonzero(streams == i), i) for i in range(spec.k)]
    for idx, stream in groups:
        if idx.size == 0:
            continue
        bidx, cls = _expand_batches(spec, rng, stream, idx.size)
        serv = _service_times(spec, rng, cls)
        best = np.zeros(idx.size)
        np.maximum.at(best, bidx, serv)
        out[idx] = best
    return out


def simulate_busy(config: SimConfig) -> SimulationSummary:
    """Sample ``busy_cycle_target`` busy cycles starting from an arrival to the empty system.

    A busy period ends at the last departure if no catastrophe comes first,
    otherwise at the catastrophe. The idle period that follows is
    exponential with the total batch arrival rate.
    """
    spec = config.spec
    if not spec.is_homogeneous:
        raise ValueError("homogeneity required: busy-period simulation needs constant rates")
    if config.busy_cycle_target < 1:
        raise ValueError("busy_cycle_target must be at least 1")
    rates = np.array([r.value for r in spec.arrival_rates])
    lam = float(rates.sum())
    if lam <= 0:
        raise ValueError("busy periods need a positive arrival rate")
    nu = spec.catastrophe_rate.value
    share = rates / lam
    target = config.busy_cycle_target
    busy = np.empty(target)
    idle = np.empty(target)
    nblocks = -(-target // BUSY_BLOCK)
    children = np.random.SeedSequence(config.seed).spawn(nblocks)
    for b, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        lo = b * BUSY_BLOCK
        n = min(BUSY_BLOCK, target - lo)

        def pick_streams(m):
            return rng.choice(len(rates), size=m, p=share) if len(rates) > 1 else np.zeros(m, dtype=np.int64)

        last_dep = _batch_max_service(spec, rng, pick_streams(n))
        cat = rng.exponential(1.0 / nu, n) if nu > 0 else np.full(n, np.inf)
        now = np.zeros(n)
        end = np.full(n, np.nan)
        open_ = np.arange(n)
        while open_.size:
            nxt = now[open_] + rng.exponential(1.0 / lam, open_.size)
            d, c = last_dep[open_], cat[open_]
            by_departure = (d <= c) & (d <= nxt)
            by_catastrophe = ~by_departure & (c <= nxt)
            end[open_[by_departure]] = d[by_departure]
            end[open_[by_catastrophe]] = c[by_catastrophe]
            cont = ~(by_departure | by_catastrophe)
            idx = open_[cont]
            if idx.size:
                now[idx] = nxt[cont]
                dep = nxt[cont] + _batch_max_service(spec, rng, pick_streams(idx.size))
                last_dep[idx] = np.maximum(last_dep[idx], dep)
            open_ = idx
        busy[lo:lo + n] = end
        idle[lo:lo + n] = rng.exponential(1.0 / lam, n)
    empty = np.zeros((0, 0, spec.k), dtype=np.int64)
    return SimulationSummary(config.seed, target, (), empty, empty, empty, empty, empty,
                             busy_periods=busy, idle_periods=idle)


def empirical_lst(samples, s: float) -> tuple[float, float]:
    """Sample mean of exp(-s X) and its standard error."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("empirical_lst needs at least one sample")
    if not s > 0:
        raise ValueError("s must be positive")
    v = np.exp(-s * x)
    return float(v.mean()), _stderr(v)
