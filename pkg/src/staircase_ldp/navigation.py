"""Traffic-aware navigation with privately reported locations.

Vehicles drive over a grid of domain cells.  Segment times come from a static
table; a cell whose current crowd count reaches the congestion threshold adds
a fixed delay to entering it.  A vehicle plans on the density feed it can
download, and when the time it has actually spent since its last plan exceeds
the planned time by more than ``theta`` it uploads a perturbed location
(costing one budget unit), downloads a fresh feed and re-plans.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .domain import LocationDomain
from .estimation import Estimator
from .geo import encode_tile
from .mechanism import SchemeTable, perturb_indices
from .seeding import STREAM_SCENARIO, make_rng
from .service import Collector

EPOCH_SECONDS = 300
CONGESTION_USERS = 50
CONGESTION_DELAY = 3.0
DEFAULT_THETA = 40.0


@dataclass
class TrajectoryRecord:
    user: str
    waypoints: list[tuple[int, float]]

    def __post_init__(self):
        if not self.waypoints:
            raise ValueError("empty trajectory")
        ts = [t for _, t in self.waypoints]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timestamps of {self.user} are not strictly increasing")

    @property
    def cells(self) -> list[int]:
        return [c for c, _ in self.waypoints]


@dataclass
class TravelModel:
    d: int
    segments: dict[tuple[int, int], float]
    congestion_users: int = CONGESTION_USERS
    delay: float = CONGESTION_DELAY

    def __post_init__(self):
        if any(s < 0 for s in self.segments.values()):
            raise ValueError("segment times must be non-negative")
        self.neighbours: dict[int, list[tuple[int, float]]] = {}
        for (a, b), s in sorted(self.segments.items()):
            self.neighbours.setdefault(a, []).append((b, s))

    def congested(self, density: np.ndarray) -> np.ndarray:
        return np.asarray(density) >= self.congestion_users

    def step_time(self, a: int, b: int, congested: np.ndarray) -> float:
        return self.segments[(a, b)] + (self.delay if congested[b] else 0.0)

    def route_time(self, route: list[int], congested: np.ndarray) -> float:
        return sum(self.step_time(a, b, congested) for a, b in zip(route, route[1:]))

    def shortest_route(self, src: int, dst: int, congested: np.ndarray) -> list[int]:
        """Fastest route under a fixed congestion snapshot."""
        if src == dst:
            return [src]
        keys = sorted(self.segments)
        rows = np.array([a for a, _ in keys])
        cols = np.array([b for _, b in keys])
        w = np.array([self.segments[k] for k in keys]) + np.where(congested[cols], self.delay, 0.0)
        graph = csr_matrix((w, (rows, cols)), shape=(self.d, self.d))
        dist, pred = dijkstra(graph, directed=True, indices=src, return_predecessors=True)
        if not np.isfinite(dist[dst]):
            raise ValueError(f"no route from {src} to {dst}")
        path = [dst]
        while path[-1] != src:
            path.append(int(pred[path[-1]]))
        return path[::-1]


# --- density feeds -------------------------------------------------------------------------


@dataclass
class Incident:
    cell: int
    epoch_from: int
    epoch_to: int
    users: int


@dataclass
class Crowd:
    """True number of people per cell and epoch: a stable background plus incidents."""

    d: int
    background: int
    incidents: list[Incident] = field(default_factory=list)
    seed: int = 0

    def counts(self, epoch: int) -> np.ndarray:
        rng = make_rng(self.seed, STREAM_SCENARIO, epoch)
        out = rng.multinomial(self.background, np.full(self.d, 1.0 / self.d)).astype(np.int64)
        for inc in self.incidents:
            if inc.epoch_from <= epoch <= inc.epoch_to:
                out[inc.cell] += inc.users
        return out


class TrueFeed:
    """Noiseless feed: the actual crowd counts."""

    def __init__(self, crowd: Crowd, epoch_seconds: int = EPOCH_SECONDS):
        self.crowd = crowd
        self.epoch_seconds = epoch_seconds
        self.uploads: list[tuple[float, int]] = []

    def density(self, t: float) -> np.ndarray:
        return self.crowd.counts(int(t // self.epoch_seconds)).astype(np.float64)

    def upload(self, t: float, index: int) -> None:
        self.uploads.append((t, index))


class CollectorFeed:
    """Estimated density from perturbed crowd reports aggregated by a collector.

    The crowd of an epoch reports when that epoch is first requested; the
    epoch is then frozen and the full estimate table downloaded.  A vehicle
    upload goes to the next epoch if it is still open; uploads that arrive
    after that epoch was frozen are kept in ``late_uploads``.
    """

    def __init__(self, crowd: Crowd, table: SchemeTable, seed: int, epoch_seconds: int = EPOCH_SECONDS):
        self.crowd = crowd
        self.table = table
        self.seed = seed
        self.epoch_seconds = epoch_seconds
        self.collector = Collector(Estimator(table))
        self._frozen: dict[int, np.ndarray] = {}
        self.late_uploads: list[tuple[float, int]] = []

    def _materialise(self, epoch: int) -> np.ndarray:
        if epoch not in self._frozen:
            counts = self.crowd.counts(epoch)
            users = np.repeat(np.arange(self.crowd.d), counts)
            reports = perturb_indices(self.table, users, make_rng(self.seed, STREAM_SCENARIO, 1, epoch))
            self.collector.submit_many(epoch, reports)
            self.collector.freeze(epoch)
            est = self.collector.retrieve(epoch)
            self._frozen[epoch] = est.p_hat * est.n
        return self._frozen[epoch]

    def density(self, t: float) -> np.ndarray:
        return self._materialise(int(t // self.epoch_seconds))

    def upload(self, t: float, index: int) -> None:
        target = int(t // self.epoch_seconds) + 1
        if target in self._frozen:
            self.late_uploads.append((t, index))
        else:
            self.collector.submit(target, index)


# --- sessions ------------------------------------------------------------------------------------


@dataclass
class NavSession:
    theta: float = DEFAULT_THETA
    epsilon_per_update: float = 1.0
    lam: int = 0
    route: list[int] = field(default_factory=list)

    @property
    def spent(self) -> float:
        return self.lam * self.epsilon_per_update


def should_update(session: NavSession | float, actual: float, predicted: float) -> bool:
    theta = session.theta if isinstance(session, NavSession) else float(session)
    if actual < 0 or predicted < 0:
        raise ValueError("times must be non-negative")
    return actual - predicted > theta


@dataclass
class NavOutcome:
    lam: int
    route: list[int]
    trip_time: float
    spent: float
    updates: list[tuple[float, int, int]] = field(default_factory=list)


def run_session(
    session: NavSession,
    trajectory: TrajectoryRecord,
    travel: TravelModel,
    feed,
    crowd: Crowd,
    table: SchemeTable | None = None,
    rng: np.random.Generator | None = None,
    plan_at_start: bool = True,
    epoch_seconds: int = EPOCH_SECONDS,
) -> NavOutcome:
    """Drive one trajectory from its first to its last waypoint.

    The trip starts on the trajectory's own path unless ``plan_at_start``, in
    which case the vehicle first plans on the downloaded feed.  Downloads are
    free; each upload is one perturbed report and increments ``lam``.
    """
    src, dst = trajectory.cells[0], trajectory.cells[-1]
    t = trajectory.waypoints[0][1]
    if plan_at_start:
        planned_cong = travel.congested(feed.density(t))
        plan = travel.shortest_route(src, dst, planned_cong)
    else:
        planned_cong = np.zeros(travel.d, dtype=bool)
        plan = trajectory.cells
    session.route = [src]
    start = t
    actual_acc = predicted_acc = 0.0
    updates = []
    k = 0
    while session.route[-1] != dst:
        a, b = plan[k], plan[k + 1]
        true_cong = travel.congested(crowd.counts(int(t // epoch_seconds)))
        dt = travel.step_time(a, b, true_cong)
        actual_acc += dt
        predicted_acc += travel.step_time(a, b, planned_cong)
        t += dt
        session.route.append(b)
        k += 1
        if b != dst and should_update(session, actual_acc, predicted_acc):
            session.lam += 1
            if table is not None:
                if rng is None:
                    raise ValueError("an rng is needed to perturb uploads")
                y = int(perturb_indices(table, np.array([b]), rng)[0])
            else:
                y = b
            feed.upload(t, y)
            updates.append((t, b, y))
            planned_cong = travel.congested(feed.density(t))
            plan = travel.shortest_route(b, dst, planned_cong)
            k = 0
            actual_acc = predicted_acc = 0.0
    return NavOutcome(session.lam, list(session.route), t - start, session.spent, updates)


def offline_optimum(travel: TravelModel, crowd: Crowd, src: int, dst: int, depart: float, epoch_seconds: int = EPOCH_SECONDS):
    """Earliest-arrival route knowing the true crowd at every future moment."""
    best = {src: depart}
    prev: dict[int, int] = {}
    heap = [(depart, src)]
    done = set()
    while heap:
        t, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dst:
            break
        cong = travel.congested(crowd.counts(int(t // epoch_seconds)))
        for v, _ in travel.neighbours.get(u, []):
            tv = t + travel.step_time(u, v, cong)
            if tv < best.get(v, math.inf) - 1e-12:
                best[v] = tv
                prev[v] = u
                heapq.heappush(heap, (tv, v))
    if dst not in best:
        raise ValueError(f"no route from {src} to {dst}")
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1], best[dst] - depart


# --- deviation metrics --------------------------------------------------------------------


def levenshtein(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def route_deviation(true_route, rec_route) -> float:
    if not true_route or not rec_route:
        raise ValueError("routes must be non-empty")
    return levenshtein(true_route, rec_route) / len(true_route)


def trip_time_deviation(true_time: float, rec_time: float) -> float:
    if true_time < 0 or rec_time < 0:
        raise ValueError("times must be non-negative")
    return abs(true_time - rec_time)


# --- scenarios ------------------------------------------------------------------------------


@dataclass
class Scenario:
    domain: LocationDomain
    travel: TravelModel
    crowd: Crowd
    trajectories: list[TrajectoryRecord]
    theta: float = DEFAULT_THETA
    epsilon: float = 1.0
    epoch_seconds: int = EPOCH_SECONDS
    seed: int = 0
    snapped: int = 0


def grid_domain(side: int, level: int = 23, origin: tuple[int, int] = (4_000_000, 3_000_000)) -> tuple[LocationDomain, dict]:
    """Square block of adjacent tiles; returns the domain and a ``(col, row) -> rank`` map."""
    ox, oy = origin
    codes = {(i, j): encode_tile(ox + i, oy + j, level) for i in range(side) for j in range(side)}
    dom = LocationDomain(codes.values())
    return dom, {ij: dom.rank(c) for ij, c in codes.items()}


def grid_segments(side: int, cell_of: dict, seed: int, base: float = 30.0, spread: float = 10.0) -> dict:
    rng = make_rng(seed, STREAM_SCENARIO, 99)
    seg = {}
    for i in range(side):
        for j in range(side):
            for di, dj in ((1, 0), (0, 1)):
                if i + di < side and j + dj < side:
                    a, b = cell_of[(i, j)], cell_of[(i + di, j + dj)]
                    s = float(round(base + rng.uniform(-spread, spread)))
                    seg[(a, b)] = seg[(b, a)] = s
    return seg


def synthetic_scenario(
    side: int = 20,
    vehicles: int = 60,
    background_per_cell: float = 15.0,
    incidents: int = 10,
    incident_users: int = 400,
    incident_radius: int = 3,
    epochs: int = 8,
    seed: int = 0,
    theta: float = DEFAULT_THETA,
    epsilon: float = 3.0,
) -> Scenario:
    """Grid city with congestion blobs that appear and clear over a few epochs."""
    dom, cell_of = grid_domain(side)
    travel = TravelModel(dom.d, grid_segments(side, cell_of, seed))
    rng = make_rng(seed, STREAM_SCENARIO, 7)
    incs = []
    for _ in range(incidents):
        ci, cj = rng.integers(0, side, 2)
        e0 = int(rng.integers(0, epochs))
        e1 = int(min(epochs, e0 + rng.integers(1, 3)))
        for i in range(max(0, ci - incident_radius), min(side, ci + incident_radius + 1)):
            for j in range(max(0, cj - incident_radius), min(side, cj + incident_radius + 1)):
                incs.append(Incident(cell_of[(i, j)], e0, e1, incident_users))
    crowd = Crowd(dom.d, int(background_per_cell * dom.d), incs, seed)
    trajs = []
    for v in range(vehicles):
        while True:
            a, b = rng.integers(0, side, 2), rng.integers(0, side, 2)
            if abs(int(a[0]) - int(b[0])) + abs(int(a[1]) - int(b[1])) >= side // 2:
                break
        src, dst = cell_of[tuple(int(x) for x in a)], cell_of[tuple(int(x) for x in b)]
        depart = float(rng.uniform(0, EPOCH_SECONDS * max(1, epochs - 2)))
        path = travel.shortest_route(src, dst, np.zeros(dom.d, dtype=bool))
        ts, t = [], depart
        for k, c in enumerate(path):
            if k:
                t += travel.segments[(path[k - 1], c)]
            ts.append(t)
        trajs.append(TrajectoryRecord(f"v{v}", list(zip(path, ts))))
    return Scenario(dom, travel, crowd, trajs, theta, epsilon, EPOCH_SECONDS, seed)


@dataclass
class FleetResult:
    outcomes: list[NavOutcome]

    @property
    def mean_lambda(self) -> float:
        return float(np.mean([o.lam for o in self.outcomes]))

    @property
    def total_lambda(self) -> int:
        return int(sum(o.lam for o in self.outcomes))


def simulate_fleet(
    scenario: Scenario,
    theta: float | None = None,
    table: SchemeTable | None = None,
    private: bool = True,
    plan_at_start: bool = True,
) -> FleetResult:
    """Run every trajectory of a scenario against a true or a privately estimated feed.

    Each vehicle's upload stream is keyed by its position in the fleet, so two
    runs differing only in ``theta`` share their random draws.
    """
    theta = scenario.theta if theta is None else theta
    if private:
        if table is None:
            raise ValueError("a private feed needs a scheme table")
        feed = CollectorFeed(scenario.crowd, table, scenario.seed, scenario.epoch_seconds)
    else:
        feed = TrueFeed(scenario.crowd, scenario.epoch_seconds)
    outs = []
    for v, traj in enumerate(scenario.trajectories):
        session = NavSession(theta, scenario.epsilon)
        rng = make_rng(scenario.seed, STREAM_SCENARIO, 2, v)
        outs.append(
            run_session(
                session, traj, scenario.travel, feed, scenario.crowd,
                table if private else None, rng, plan_at_start, scenario.epoch_seconds,
            )
        )
    return FleetResult(outs)
