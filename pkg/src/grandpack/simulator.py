"""Event-driven simulation of the packing system under greedy-random placement.

The state is the integer count of servers per nonzero configuration.  Three
placement policies are supported:

* ``grand-az``: an arriving type-i customer picks uniformly among occupied
  servers that can still fit it plus ``ceil(a_s Z)`` designated idle servers
  of each compatible type s, where Z is the current total customer count.
* ``grand-zp``: same with ``ceil(Z^((p-1) gamma_s + 1))`` idle servers.
* ``grand-f``: finite pools of ``H_s = h_s r`` servers; the customer picks
  uniformly among all servers (idle or occupied) where it fits and is blocked
  when there are none.  Every accepted arrival and every departure changes a
  server's configuration and therefore costs one pull message.

Randomness comes from three counter-based Philox substreams per run (event
clock, event classification, placement choice), so two runs with the same
seed share the same arrival/departure skeleton even when the placement policy
or its parameters differ.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .csvio import write_csv
from .model import ModelError, PackingModel

GRAND_AZ = "grand-az"
GRAND_ZP = "grand-zp"
GRAND_F = "grand-f"
POLICIES = (GRAND_AZ, GRAND_ZP, GRAND_F)

# guards float noise when a_s * Z lands exactly on an integer
_CEIL_GUARD = 1e-9


class SimulationError(RuntimeError):
    pass


class StateValidationError(SimulationError):
    """An internal consistency check on the running state failed."""


class InsufficientDataError(SimulationError):
    """Some batch of the measurement window contained no events."""


@dataclass
class Placement:
    kind: str  # "zero" | "join" | "fallback" | "blocked"
    customer_type: int
    server_type: int = -1
    source: int = -1  # configuration index vacated (join only)
    target: int = -1  # configuration index entered
    edge: int = -1


@dataclass
class EventRecord:
    time: float
    elapsed: float
    kind: str  # "arrival" | "departure"
    customer_type: int
    edge: int = -1
    placement: Placement | None = None


@dataclass
class RunStatistics:
    """Time-averaged fluid-scaled state and counting statistics of one run.

    ``xbar`` (and its batch-means standard error) is on the fluid scale
    (counts divided by r); ``y_mean``/``y_var``/``z_mean``/``z_var`` are raw
    time-weighted moments of the per-type and total customer counts.
    Arrival/departure/blocking counters cover the measurement window
    ``[warmup, horizon]``; the per-edge cumulative counters ``arrivals_edge``
    and ``departures_edge`` cover the whole run.
    """

    policy: str
    r: int
    seed: int
    horizon: float
    warmup: float
    batches: int
    labels: list[str]
    xbar: np.ndarray
    xbar_stderr: np.ndarray
    y_mean: np.ndarray
    y_var: np.ndarray
    y_stderr: np.ndarray
    z_mean: float
    z_var: float
    z_stderr: float
    blocking: np.ndarray
    blocking_stderr: np.ndarray
    pull_per_accept: float
    arrivals: np.ndarray
    blocked: np.ndarray
    arrivals_edge: np.ndarray
    departures_edge: np.ndarray
    initial_state: np.ndarray
    final_state: np.ndarray
    events_total: int
    events_per_batch: np.ndarray

    @property
    def accepted(self) -> np.ndarray:
        return self.arrivals - self.blocked

    @property
    def ybar(self) -> np.ndarray:
        return self.y_mean / self.r

    @property
    def ybar_stderr(self) -> np.ndarray:
        return self.y_stderr / self.r

    @property
    def zbar(self) -> float:
        return self.z_mean / self.r

    def distance_to(self, x_ref) -> float:
        return float(np.linalg.norm(self.xbar - np.asarray(x_ref, dtype=float)))

    def to_csv(self, target=None, comments=()) -> str:
        base = [
            f"policy={self.policy} r={self.r} seed={self.seed}",
            f"horizon={self.horizon} warmup={self.warmup} batches={self.batches}",
        ]
        rows = [[f"x[{lab}]", self.xbar[k], self.xbar_stderr[k]] for k, lab in enumerate(self.labels)]
        for i in range(len(self.y_mean)):
            rows.append([f"y[{i + 1}]", self.ybar[i], self.ybar_stderr[i]])
        rows.append(["z", self.zbar, self.z_stderr / self.r])
        for i in range(len(self.blocking)):
            rows.append([f"blocking[{i + 1}]", self.blocking[i], self.blocking_stderr[i]])
        rows.append(["pull_rate", self.pull_per_accept, math.nan])
        return write_csv(target, ["name", "value", "stderr"], rows, comments=list(base) + list(comments))


def flow_balance_residual(model: PackingModel, stats: RunStatistics) -> np.ndarray:
    """Net state change minus what the per-edge counters account for (exact)."""
    t = model.tables
    net = stats.final_state.astype(np.int64) - stats.initial_state.astype(np.int64)
    explained = np.zeros_like(net)
    flow = stats.arrivals_edge.astype(np.int64) - stats.departures_edge.astype(np.int64)
    np.add.at(explained, t.edge_cfg, flow)
    inner = t.edge_src >= 0
    np.add.at(explained, t.edge_src[inner], -flow[inner])
    return net - explained


class Simulator:
    """One continuous-time run; strictly sequential and deterministic by seed."""

    def __init__(self, model: PackingModel, policy: str, r: int, seed: int, check_every: int = 10_000):
        if policy not in POLICIES:
            raise ModelError(f"unknown policy {policy!r}, expected one of {POLICIES}")
        if r < 1:
            raise ModelError("scale parameter r must be a positive integer")
        if seed < 0:
            raise ModelError("seed must be nonnegative")
        self.model = model
        self.tables = model.tables
        self.policy = policy
        self.r = int(r)
        self.seed = int(seed)
        self.check_every = int(check_every)

        if policy == GRAND_AZ:
            self._a = [float(v) for v in model.require_a()]
        elif policy == GRAND_ZP:
            p = model.require_p()
            self._zp_exponent = [(p - 1.0) * float(g) + 1.0 for g in model.gamma]
        else:
            h = model.require_h()
            self.pools = []
            for s, hs in enumerate(h):
                exact = hs * self.r
                rounded = int(round(exact))
                if abs(exact - rounded) > 1e-9:
                    warnings.warn(
                        f"pool size h_{s + 1} * r = {exact} is not integral; using {rounded}",
                        stacklevel=3,
                    )
                if rounded < 1:
                    raise ModelError(f"pool {s + 1} rounds to zero servers at r={r}")
                self.pools.append(rounded)

        self._clock = np.random.Generator(np.random.Philox(key=[self.seed, 0]))
        self._choice = np.random.Generator(np.random.Philox(key=[self.seed, 1]))
        self._placement = np.random.Generator(np.random.Philox(key=[self.seed, 2]))

        t = self.tables
        self.X = np.zeros(t.num_configs, dtype=np.int64)
        self.Y = [0] * model.num_types
        self.Z = 0
        self.occupied = [0] * model.num_servers
        self.now = 0.0
        self.events = 0

        self._lamr = [float(v) * self.r for v in model.lam]
        self._lamr_total = float(sum(self._lamr))
        self._mu = [float(v) for v in model.mu]

        E = t.num_edges
        self.arrivals_edge = np.zeros(E, dtype=np.int64)
        self.departures_edge = np.zeros(E, dtype=np.int64)
        self.arrivals_type = [0] * model.num_types
        self.blocked_type = [0] * model.num_types
        self.pulls = 0
        self.initial_state = self.X.copy()

    # -- state queries ------------------------------------------------------

    def zero_servers(self, s: int) -> int:
        if self.policy == GRAND_AZ:
            return max(0, math.ceil(self._a[s] * self.Z - _CEIL_GUARD))
        if self.policy == GRAND_ZP:
            if self.Z == 0:
                return 0
            return max(0, math.ceil(self.Z ** self._zp_exponent[s] - _CEIL_GUARD))
        return self.pools[s] - self.occupied[s]

    def availability(self, i: int) -> int:
        t = self.tables
        total = sum(self.zero_servers(s) for s, _, _ in t.zero_walk[i])
        total += int(sum(self.X[m] for m, _, _ in t.join_walk[i]))
        return total

    def total_rate(self) -> float:
        return self._lamr_total + sum(m * y for m, y in zip(self._mu, self.Y))

    # -- placement ----------------------------------------------------------

    def choose_placement(self, i: int) -> Placement:
        """Pick where an arriving type-i customer goes; does not mutate state."""
        t = self.tables
        zero_walk = t.zero_walk[i]
        zero_counts = [self.zero_servers(s) for s, _, _ in zero_walk]
        avail = sum(zero_counts) + int(sum(self.X[m] for m, _, _ in t.join_walk[i]))
        if avail == 0:
            if self.policy == GRAND_F:
                return Placement("blocked", i)
            s, unit, edge = zero_walk[0]  # smallest-index server type hosting e_i
            return Placement("fallback", i, s, -1, unit, edge)
        pick = int(self._placement.integers(avail))
        for (s, unit, edge), count in zip(zero_walk, zero_counts):
            if pick < count:
                return Placement("zero", i, s, -1, unit, edge)
            pick -= count
        for m, dst, edge in t.join_walk[i]:
            count = int(self.X[m])
            if pick < count:
                return Placement("join", i, int(t.server[dst]), m, dst, edge)
            pick -= count
        raise AssertionError("placement walk exhausted")  # pragma: no cover

    def apply_placement(self, pl: Placement) -> None:
        i = pl.customer_type
        self.arrivals_type[i] += 1
        if pl.kind == "blocked":
            self.blocked_type[i] += 1
            return
        self.X[pl.target] += 1
        if pl.kind == "join":
            self.X[pl.source] -= 1
        else:
            self.occupied[pl.server_type] += 1
        self.Y[i] += 1
        self.Z += 1
        self.arrivals_edge[pl.edge] += 1
        if self.policy == GRAND_F:
            self.pulls += 1

    def apply_departure(self, cfg: int, edge: int, src: int, i: int) -> None:
        self.X[cfg] -= 1
        if src >= 0:
            self.X[src] += 1
        else:
            self.occupied[int(self.tables.server[cfg])] -= 1
        self.Y[i] -= 1
        self.Z -= 1
        self.departures_edge[edge] += 1
        if self.policy == GRAND_F:
            self.pulls += 1

    # -- event dynamics -----------------------------------------------------

    def _classify_and_apply(self, u: float) -> EventRecord:
        if u < self._lamr_total:
            acc = 0.0
            i = len(self._lamr) - 1
            for j, rate in enumerate(self._lamr):
                acc += rate
                if u < acc:
                    i = j
                    break
            pl = self.choose_placement(i)
            self.apply_placement(pl)
            return EventRecord(self.now, 0.0, "arrival", i, pl.edge, pl)
        v = u - self._lamr_total
        i = len(self.Y) - 1
        for j in range(len(self.Y)):
            rate = self._mu[j] * self.Y[j]
            if v < rate:
                i = j
                break
            v -= rate
        while self.Y[i] == 0:  # float-edge guard: walk back to a busy type
            i -= 1
        weight = v / self._mu[i]  # uniform in [0, Y_i); edge weights are integers
        acc = 0
        walk = self.tables.dep_walk[i]
        cfg, count, edge, src = walk[-1]
        for cfg_, count_, edge_, src_ in walk:
            acc += count_ * int(self.X[cfg_])
            if weight < acc:
                cfg, count, edge, src = cfg_, count_, edge_, src_
                break
        self.apply_departure(cfg, edge, src, i)
        return EventRecord(self.now, 0.0, "departure", i, edge)

    def step(self) -> EventRecord:
        """Advance one event: exponential holding time, then arrival/departure."""
        rate = self.total_rate()
        elapsed = float(self._clock.standard_exponential()) / rate
        self.now += elapsed
        u = float(self._choice.random()) * rate
        record = self._classify_and_apply(u)
        record.elapsed = elapsed
        self.events += 1
        if self.check_every and self.events % self.check_every == 0:
            self.verify_state()
        return record

    def verify_state(self) -> None:
        t = self.tables
        if (self.X < 0).any():
            raise StateValidationError("negative configuration count")
        y = t.counts.T @ self.X
        if list(y) != self.Y or int(np.sum(y)) != self.Z:
            raise StateValidationError("customer totals out of sync with configuration counts")
        for s in range(self.model.num_servers):
            occ = int(np.sum(self.X[t.per_server[s]]))
            if occ != self.occupied[s]:
                raise StateValidationError(f"occupied-server count of pool {s + 1} out of sync")
            if self.policy == GRAND_F and occ > self.pools[s]:
                raise StateValidationError(f"pool {s + 1} exceeds its size")

    # -- statistics run -----------------------------------------------------

    def run(self, horizon: float, warmup: float | None = None, batches: int = 20) -> RunStatistics:
        """Simulate to ``horizon`` and return batch-means statistics.

        The measurement window is ``[warmup, horizon]`` split into ``batches``
        equal batches; ``warmup`` defaults to 20% of the horizon.  Raises
        ``InsufficientDataError`` when a batch sees no events.
        """
        if warmup is None:
            warmup = 0.2 * horizon
        if not horizon > warmup >= 0.0:
            raise ModelError(f"need horizon > warmup >= 0, got {horizon} and {warmup}")
        if batches < 2:
            raise ModelError("need at least 2 batches")
        if self.events:
            raise SimulationError("run() must start from a fresh simulator")

        t = self.tables
        n, I = t.num_configs, self.model.num_types
        window = horizon - warmup
        blen = window / batches
        ibx = np.zeros((batches, n))
        iby = np.zeros((batches, I))
        iy2 = [0.0] * I
        iz = 0.0
        iz2 = 0.0
        ev_b = np.zeros(batches, dtype=np.int64)
        arr_b = np.zeros((batches, I), dtype=np.int64)
        blk_b = np.zeros((batches, I), dtype=np.int64)
        pull_b = np.zeros(batches, dtype=np.int64)

        while True:
            rate = self.total_rate()
            elapsed = float(self._clock.standard_exponential()) / rate
            t_next = self.now + elapsed
            t0 = max(self.now, warmup)
            t1 = min(t_next, horizon)
            if t1 > t0:
                seg_total = t1 - t0
                for i in range(I):
                    yi = self.Y[i]
                    iy2[i] += yi * yi * seg_total
                iz += self.Z * seg_total
                iz2 += self.Z * self.Z * seg_total
                cur = t0
                while cur < t1 - 1e-15:
                    b = min(int((cur - warmup) / blen), batches - 1)
                    end = min(t1, warmup + (b + 1) * blen)
                    seg = end - cur
                    ibx[b] += self.X * seg
                    for i in range(I):
                        iby[b, i] += self.Y[i] * seg
                    cur = end
            if t_next >= horizon:
                self.now = horizon
                break
            self.now = t_next
            u = float(self._choice.random()) * rate
            record = self._classify_and_apply(u)
            self.events += 1
            if self.now >= warmup:
                b = min(int((self.now - warmup) / blen), batches - 1)
                ev_b[b] += 1
                if record.kind == "arrival":
                    arr_b[b, record.customer_type] += 1
                    if record.placement.kind == "blocked":
                        blk_b[b, record.customer_type] += 1
                    elif self.policy == GRAND_F:
                        pull_b[b] += 1
                elif self.policy == GRAND_F:
                    pull_b[b] += 1
            if self.check_every and self.events % self.check_every == 0:
                self.verify_state()

        self.verify_state()
        if (ev_b == 0).any():
            empty = int(np.flatnonzero(ev_b == 0)[0])
            raise InsufficientDataError(
                f"batch {empty + 1} of {batches} contains no events; extend the horizon")

        r = float(self.r)
        batch_x = ibx / (blen * r)
        xbar = batch_x.mean(axis=0)
        xbar_stderr = batch_x.std(axis=0, ddof=1) / math.sqrt(batches)
        batch_y = iby / blen
        y_mean = batch_y.mean(axis=0)
        y_stderr = batch_y.std(axis=0, ddof=1) / math.sqrt(batches)
        y_var = np.array([iy2[i] / window for i in range(I)]) - y_mean ** 2
        batch_z = batch_y.sum(axis=1)
        z_mean = iz / window
        z_var = iz2 / window - z_mean ** 2
        z_stderr = float(batch_z.std(ddof=1) / math.sqrt(batches))

        arr_w = arr_b.sum(axis=0)
        blk_w = blk_b.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            blocking = np.where(arr_w > 0, blk_w / np.maximum(arr_w, 1), 0.0)
            batch_blocking = np.where(arr_b > 0, blk_b / np.maximum(arr_b, 1), np.nan)
        if np.isnan(batch_blocking).any():
            blocking_stderr = np.full(I, math.nan)
        else:
            blocking_stderr = batch_blocking.std(axis=0, ddof=1) / math.sqrt(batches)

        if self.policy == GRAND_F:
            accepted_w = int((arr_w - blk_w).sum())
            pull_per_accept = float(pull_b.sum()) / accepted_w if accepted_w else math.nan
        else:
            pull_per_accept = math.nan

        stats = RunStatistics(
            policy=self.policy, r=self.r, seed=self.seed, horizon=horizon, warmup=warmup,
            batches=batches, labels=list(t.labels), xbar=xbar, xbar_stderr=xbar_stderr,
            y_mean=y_mean, y_var=y_var, y_stderr=y_stderr, z_mean=float(z_mean),
            z_var=float(z_var), z_stderr=z_stderr, blocking=blocking,
            blocking_stderr=blocking_stderr, pull_per_accept=pull_per_accept,
            arrivals=arr_w, blocked=blk_w, arrivals_edge=self.arrivals_edge.copy(),
            departures_edge=self.departures_edge.copy(), initial_state=self.initial_state,
            final_state=self.X.copy(), events_total=self.events, events_per_batch=ev_b,
        )
        residual = flow_balance_residual(self.model, stats)
        if residual.any():
            raise StateValidationError("per-edge flow counters do not explain the net state change")
        return stats


def run_simulation(model: PackingModel, policy: str, r: int, horizon: float,
                   warmup: float | None = None, seed: int = 0, batches: int = 20,
                   check_every: int = 10_000) -> RunStatistics:
    """Fresh deterministic run; same arguments give a bit-identical result."""
    return Simulator(model, policy, r, seed, check_every=check_every).run(horizon, warmup, batches)
