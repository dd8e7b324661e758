"""
This file contains the discrete-time market simulator: vehicle cohorts per grid, pending orders, in-transit
schedules, the entropy measure of supply-demand disorder, observations for managers and workers, the state
transition itself and the manager's extrinsic reward.

Vehicles in one grid are homogeneous, so the state holds counts rather than vehicle objects. A selected real order
takes one idle vehicle off the grid and brings it back, idle, at the destination `duration` steps later; a selected
fake order does the same with a one-step delay and marks the vehicle as part of the fleet-management group.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from bitarray import bitarray
from bitarray.util import zeros
from scipy.special import xlogy

from ride_core.constants import *
from ride_core.hexgrid import GridWorld
from ride_core.orders import Order, OrderSource, generate_orders

logger = logging.getLogger(__name__)


def entropy(n_vehicles, n_orders, k_b: float = BOLTZMANN_K) -> float:
    """
    -k_B * rho * ln(rho) with rho = min(N_v, N_o) / max(N_v, N_o). Zero when either count is zero.
    """
    low, high = min(n_vehicles, n_orders), max(n_vehicles, n_orders)
    if low <= 0:
        return 0.0
    rho = low / high
    return float(-k_b * xlogy(rho, rho))


def order_stats(orders: Sequence[Order]) -> Array:
    """
    Fixed-length, permutation-invariant summary of pending orders:
    [mean price, std price, mean duration, std duration, order count]. Zeros when empty.
    """
    if not orders:
        return np.zeros(ORDER_STATS_LENGTH)
    # sorted so the floating-point summation order does not depend on the order of the list
    prices = np.sort([o.price for o in orders])
    durations = np.sort([float(o.duration) for o in orders])
    return np.array([prices.mean(), prices.std(), durations.mean(), durations.std(), float(len(orders))])


@dataclass(frozen=True)
class Observation:
    n_vehicles: int
    n_orders: int
    entropy: float
    n_fleet: int
    order_stats: Array

    def as_vector(self) -> Array:
        return np.concatenate(([self.n_vehicles, self.n_orders, self.entropy, self.n_fleet], self.order_stats))


@dataclass
class SimState:
    clock: int
    idle: Array
    fleet_group: Array
    pending_orders: List[List[Order]]
    # arrival timestep -> [(destination, count, arrived via fake order)]
    in_transit: Dict[int, List[Tuple[int, int, bool]]] = field(default_factory=dict)
    next_order_id: int = 0

    @staticmethod
    def empty(n_grids: int) -> "SimState":
        return SimState(0, np.zeros(n_grids, dtype=Int), np.zeros(n_grids, dtype=Int), [[] for _ in range(n_grids)])

    @property
    def n_grids(self) -> int:
        return len(self.idle)

    def copy(self) -> "SimState":
        return SimState(self.clock, self.idle.copy(), self.fleet_group.copy(),
                        [list(p) for p in self.pending_orders],
                        {t: list(arrivals) for t, arrivals in self.in_transit.items()}, self.next_order_id)

    def total_vehicles(self) -> int:
        in_transit = sum(count for arrivals in self.in_transit.values() for _, count, _ in arrivals)
        return int(self.idle.sum()) + in_transit

    def vehicles_in_transit(self) -> Array:
        """ Vehicles currently on their way to each grid. """
        counts = np.zeros(self.n_grids, dtype=Int)
        for arrivals in self.in_transit.values():
            for destination, count, _ in arrivals:
                counts[destination] += count
        return counts

    def grid_entropies(self) -> Array:
        return np.array([entropy(self.idle[g], len(self.pending_orders[g])) for g in range(self.n_grids)])


@dataclass
class StepOutcome:
    served_real: List[Tuple[Order, int]] = field(default_factory=list)
    fleet_moves: List[Tuple[int, int, int]] = field(default_factory=list)
    adi_delta: float = 0.0
    orr_numerator: int = 0
    orr_denominator: int = 0
    ast_delta: int = 0
    tnf_delta: int = 0
    expired: int = 0
    online_delta: int = 0


@dataclass(frozen=True)
class ChurnRates:
    """ Per time bucket x grid Poisson rates of vehicles coming online / going offline each step. """
    online: Array
    offline: Array
    steps_per_day: int = STEPS_PER_DAY

    def bucket(self, clock: int) -> int:
        return (clock % self.steps_per_day) * len(self.online) // self.steps_per_day


def observe_worker(state: SimState, grid) -> Observation:
    n_vehicles = int(state.idle[grid])
    pending = state.pending_orders[grid]
    return Observation(n_vehicles, len(pending), entropy(n_vehicles, len(pending)), int(state.fleet_group[grid]),
                       order_stats(pending))


def observe_manager(state: SimState, world: GridWorld, district) -> Array:
    """
    Joint observation of a district: member worker vectors in canonical member order, zero-padded up to the
    largest district in the world.
    """
    vector = np.zeros(world.max_district_size * OBSERVATION_LENGTH)
    for slot, grid in enumerate(world.members(district)):
        vector[slot * OBSERVATION_LENGTH:(slot + 1) * OBSERVATION_LENGTH] = observe_worker(state, grid).as_vector()
    return vector


def _schedule(state: SimState, arrival: int, destination: int, fleet: bool):
    state.in_transit.setdefault(arrival, []).append((destination, 1, fleet))


def step(state: SimState, world: GridWorld, decisions: Mapping[int, Sequence[Order]],
         churn: Optional[ChurnRates] = None, rng: Optional[np.random.Generator] = None) -> Tuple[SimState, StepOutcome]:
    """
    Apply one timestep of decisions. Returns a new state; the input state is left untouched.
    Unserved real orders expire at the end of the step, then the clock advances and scheduled vehicles arrive.
    """
    new = state.copy()
    outcome = StepOutcome(orr_denominator=sum(len(p) for p in state.pending_orders))
    moves: Dict[Tuple[int, int], int] = {}

    for grid in sorted(decisions):
        items = decisions[grid]
        grid = world.check_grid(grid)
        if len(items) > state.idle[grid]:
            raise DecisionError(f"Grid {grid} has {state.idle[grid]} idle vehicles but {len(items)} items were selected.")
        pending = {o.id: o for o in state.pending_orders[grid]}
        taken = set()
        allowed_moves = set(world.neighbors(grid)) | {grid}
        for item in items:
            if item.origin != grid:
                raise DecisionError(f"Order {item.id} starts at grid {item.origin}, not at grid {grid}.")
            new.idle[grid] -= 1
            if item.kind == KIND_REAL:
                if pending.get(item.id) != item or item.id in taken:
                    raise DecisionError(f"Order {item.id} is not pending at grid {grid}.")
                taken.add(item.id)
                _schedule(new, state.clock + item.duration, item.destination, fleet=False)
                outcome.served_real.append((item, grid))
                outcome.adi_delta += item.price
                outcome.ast_delta += item.duration
                outcome.tnf_delta += 1
            else:
                if item.destination not in allowed_moves:
                    raise DecisionError(f"Fake order from grid {grid} to non-neighbour grid {item.destination}.")
                _schedule(new, state.clock + FAKE_DURATION, item.destination, fleet=True)
                moves[(grid, item.destination)] = moves.get((grid, item.destination), 0) + 1

    outcome.fleet_moves = [(o, d, c) for (o, d), c in sorted(moves.items())]
    outcome.orr_numerator = len(outcome.served_real)
    outcome.expired = outcome.orr_denominator - outcome.orr_numerator
    new.pending_orders = [[] for _ in range(new.n_grids)]

    new.clock += 1
    new.fleet_group[:] = 0
    for destination, count, fleet in new.in_transit.pop(new.clock, []):
        new.idle[destination] += count
        if fleet:
            new.fleet_group[destination] += count

    if churn is not None:
        if rng is None:
            raise ValueError("Vehicle churn needs a random generator.")
        bucket = churn.bucket(new.clock)
        online = rng.poisson(churn.online[bucket])
        offline = np.minimum(new.idle, rng.poisson(churn.offline[bucket]))
        new.idle += online - offline
        new.fleet_group = np.minimum(new.fleet_group, new.idle)
        outcome.online_delta = int(online.sum() - offline.sum())
    return new, outcome


def poisson_kl(rate_p, rate_q) -> float:
    """ KL(Poisson(rate_p) || Poisson(rate_q)) in closed form. """
    rate_p, rate_q = max(rate_p, RATE_FLOOR), max(rate_q, RATE_FLOOR)
    return float(rate_p * np.log(rate_p / rate_q) + rate_q - rate_p)


@dataclass(frozen=True)
class Area:
    mask: bitarray
    order_rate: float
    vehicle_rate: float


@dataclass(frozen=True)
class WorldStats:
    """
    Global quantities a manager reward needs: the mean grid entropy and the imbalanced areas with their fitted
    order and vehicle rates at the current time bucket.
    """
    entropies: Array
    mean_entropy: float
    areas: Tuple[Area, ...] = ()


def imbalanced_areas(world: GridWorld, entropies: Array) -> List[bitarray]:
    """
    Grids whose entropy differs from the mean by more than one standard deviation, split into connected areas.
    """
    deviation = np.abs(entropies - entropies.mean())
    spread = entropies.std()
    flagged = zeros(world.n_grids)
    for g in np.flatnonzero(deviation > spread):
        flagged[int(g)] = 1

    areas = []
    unvisited = flagged.copy()
    while unvisited.any():
        start = unvisited.index(1)
        area = zeros(world.n_grids)
        frontier = [start]
        area[start] = 1
        unvisited[start] = 0
        while frontier:
            g = frontier.pop()
            for n in world.neighbor_table[g]:
                if unvisited[n]:
                    unvisited[n] = 0
                    area[n] = 1
                    frontier.append(n)
        areas.append(area)
    return areas


def compute_world_stats(state: SimState, world: GridWorld, order_rates: Optional[Array] = None,
                        vehicle_rates: Optional[Array] = None, steps_per_day: int = STEPS_PER_DAY) -> WorldStats:
    """
    Without fitted rate tables no areas are reported, and the KL part of the manager reward is zero.
    """
    entropies = state.grid_entropies()
    areas = []
    if order_rates is not None and vehicle_rates is not None:
        bucket = (state.clock % steps_per_day) * len(order_rates) // steps_per_day
        for mask in imbalanced_areas(world, entropies):
            grids = [g for g in range(world.n_grids) if mask[g]]
            areas.append(Area(mask, float(order_rates[bucket, grids].sum()), float(vehicle_rates[bucket, grids].sum())))
    return WorldStats(entropies, float(entropies.mean()), tuple(areas))


def manager_reward(state_before: SimState, outcome: StepOutcome, world: GridWorld, district,
                   stats: WorldStats) -> float:
    """
    r_ADI + r_ORR for one district. r_ADI is the income of real orders served from the district's grids; r_ORR
    penalises the squared entropy deviation of the district's grids and the Poisson KL divergence of every
    imbalanced area touching the district.
    """
    district = world.check_district(district)
    r_adi = sum(order.price for order, grid in outcome.served_real if world.districts[grid] == district)
    members = list(world.members(district))
    variance_penalty = float(np.sum((stats.entropies[members] - stats.mean_entropy) ** 2))
    own = world.district_mask(district)
    kl_penalty = sum(poisson_kl(area.order_rate, area.vehicle_rate) for area in stats.areas if (area.mask & own).any())
    return r_adi - variance_penalty - kl_penalty


class MarketHistory:
    """
    Accumulates per (time bucket, grid) order and idle-vehicle counts for rate fitting.
    """

    def __init__(self, n_grids: int, buckets: int, steps_per_day: int = STEPS_PER_DAY):
        self.buckets = buckets
        self.steps_per_day = steps_per_day
        self.order_sums = np.zeros((buckets, n_grids))
        self.vehicle_sums = np.zeros((buckets, n_grids))
        self.samples = np.zeros((buckets, n_grids), dtype=Int)

    def bucket(self, clock: int) -> int:
        return (clock % self.steps_per_day) * self.buckets // self.steps_per_day

    def record(self, clock: int, order_counts, vehicle_counts):
        b = self.bucket(clock)
        self.order_sums[b] += order_counts
        self.vehicle_sums[b] += vehicle_counts
        self.samples[b] += 1

    def record_state(self, state: SimState):
        self.record(state.clock, [len(p) for p in state.pending_orders], state.idle)


def fit_poisson_rates(history: MarketHistory, floor: float = RATE_FLOOR) -> Tuple[Array, Array]:
    """
    Maximum-likelihood Poisson rates (sample means) per bucket and grid, floored at `floor`.
    """
    if not history.samples.any():
        raise ValueError("Cannot fit rates from an empty history.")
    unobserved = np.flatnonzero(history.samples.min(axis=1) == 0)
    if len(unobserved):
        raise ValueError(f"No observations for time buckets {unobserved.tolist()}.")
    order_rates = np.maximum(history.order_sums / history.samples, floor)
    vehicle_rates = np.maximum(history.vehicle_sums / history.samples, floor)
    return order_rates, vehicle_rates


@dataclass(frozen=True)
class MarketConfig:
    vehicles_per_grid: int = 3
    steps_per_episode: int = STEPS_PER_DAY
    steps_per_day: int = STEPS_PER_DAY
    rate_buckets: int = 24
    churn_online_rate: float = 0.0
    churn_offline_rate: float = 0.0


class MarketSimulator:
    """
    The stepping context: owns the world state and the seeded generator used for order sampling and churn.
    Each episode draws from its own stream derived from (seed, episode).
    """

    def __init__(self, world: GridWorld, source: OrderSource, config: MarketConfig = MarketConfig(), seed: int = 0,
                 initial_vehicles: Optional[Array] = None, debug_mode: bool = False):
        self.world = world
        self.source = source
        self.config = config
        self.seed = seed
        self.debug_mode = debug_mode
        if initial_vehicles is None:
            initial_vehicles = np.full(world.n_grids, config.vehicles_per_grid, dtype=Int)
        self.initial_vehicles = np.asarray(initial_vehicles, dtype=Int)
        if self.initial_vehicles.shape != (world.n_grids,) or np.any(self.initial_vehicles < 0):
            raise ShapeError(f"Initial vehicles must be {world.n_grids} non-negative counts.")
        self.churn = None
        if config.churn_online_rate > 0 or config.churn_offline_rate > 0:
            shape = (config.rate_buckets, world.n_grids)
            self.churn = ChurnRates(np.full(shape, config.churn_online_rate), np.full(shape, config.churn_offline_rate),
                                    config.steps_per_day)
        self.history = MarketHistory(world.n_grids, config.rate_buckets, config.steps_per_day)
        self.order_rates: Optional[Array] = None
        self.vehicle_rates: Optional[Array] = None
        self.state: Optional[SimState] = None
        self.rng: Optional[np.random.Generator] = None
        self.episode = 0

    def reset(self, episode: int = 0) -> SimState:
        self.episode = episode
        self.rng = np.random.default_rng([self.seed, episode])
        state = SimState.empty(self.world.n_grids)
        state.idle[:] = self.initial_vehicles
        self.state = self._with_new_orders(state)
        return self.state

    def _with_new_orders(self, state: SimState) -> SimState:
        orders = generate_orders(state, self.source, self.rng)
        for order in orders:
            state.pending_orders[order.origin].append(order)
        state.next_order_id += len(orders)
        self.history.record_state(state)
        return state

    @property
    def done(self) -> bool:
        return self.state.clock >= self.config.steps_per_episode

    def advance(self, decisions: Mapping[int, Sequence[Order]]) -> StepOutcome:
        """
        Step the market with the given per-grid decisions and sample the orders of the next timestep.
        """
        if self.state is None:
            raise RuntimeError("Call reset() before advance().")
        new, outcome = step(self.state, self.world, decisions, self.churn, self.rng)
        self.state = self._with_new_orders(new)
        if self.debug_mode:
            logger.debug(f"t={self.state.clock} served={outcome.orr_numerator}/{outcome.orr_denominator} "
                         f"adi={outcome.adi_delta:.2f} fleet_moves={len(outcome.fleet_moves)} "
                         f"idle={int(self.state.idle.sum())}")
        return outcome

    def fit_rates(self):
        self.order_rates, self.vehicle_rates = fit_poisson_rates(self.history)

    def world_stats(self, state: Optional[SimState] = None) -> WorldStats:
        return compute_world_stats(state if state is not None else self.state, self.world, self.order_rates,
                                   self.vehicle_rates, self.config.steps_per_day)
