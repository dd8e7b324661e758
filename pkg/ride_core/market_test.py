import itertools
import math
import unittest

import numpy as np
from bitarray.util import zeros
from scipy import stats

from ride_core.constants import *
from ride_core.hexgrid import WorldShape, build_world
from ride_core.market import (Area, MarketConfig, MarketHistory, MarketSimulator, SimState, StepOutcome, WorldStats,
                              compute_world_stats, entropy, fit_poisson_rates, imbalanced_areas, manager_reward,
                              observe_manager, observe_worker, order_stats, poisson_kl, step)
from ride_core.orders import Order, SyntheticOrderSource, build_fake_orders


def random_decisions(state, world, rng):
    """ A random valid decision set: per grid, a random subset of pending and fake orders within the idle count. """
    decisions = {}
    for grid in range(world.n_grids):
        items = list(state.pending_orders[grid]) + build_fake_orders(world, grid)
        k = int(rng.integers(0, min(int(state.idle[grid]), len(items)) + 1))
        if k:
            decisions[grid] = [items[i] for i in rng.choice(len(items), size=k, replace=False)]
    return decisions


class TestMarket(unittest.TestCase):

    def setUp(self):
        self.world = build_world(WorldShape(radius=1))

    def test_entropy(self):
        self.assertEqual(entropy(10, 10), 0.0)
        self.assertAlmostEqual(entropy(5, 10), 0.5 * math.log(2), delta=1e-9)
        self.assertAlmostEqual(entropy(5, 10), 0.34657, delta=1e-5)
        self.assertEqual(entropy(0, 7), 0.0)
        self.assertEqual(entropy(7, 0), 0.0)
        for a, b in itertools.product(range(11), repeat=2):
            self.assertEqual(entropy(a, b), entropy(b, a))
            self.assertGreaterEqual(entropy(a, b), 0.0)
        best = max(entropy(a, b) for a, b in itertools.product(range(11), repeat=2))
        self.assertLessEqual(best, 1 / math.e + 1e-12)
        self.assertAlmostEqual(best, 1 / math.e, delta=1e-3)

    def test_order_stats(self):
        np.testing.assert_array_equal(order_stats([]), np.zeros(ORDER_STATS_LENGTH))
        orders = [Order(i, 0, 1, p, d) for i, (p, d) in enumerate([(10.0, 1), (20.0, 3), (30.0, 2)])]
        summary = order_stats(orders)
        self.assertEqual(len(summary), ORDER_STATS_LENGTH)
        np.testing.assert_allclose(summary, [20.0, np.std([10, 20, 30]), 2.0, np.std([1, 3, 2]), 3.0])
        np.testing.assert_array_equal(order_stats(orders[::-1]), summary)

    def test_observe_worker(self):
        state = SimState.empty(self.world.n_grids)
        obs = observe_worker(state, 0)
        self.assertEqual((obs.n_vehicles, obs.n_orders, obs.entropy, obs.n_fleet), (0, 0, 0.0, 0))
        np.testing.assert_array_equal(obs.order_stats, np.zeros(ORDER_STATS_LENGTH))

        state.idle[2] = 5
        state.pending_orders[2] = [Order(i, 2, 3, 10.0, 1) for i in range(10)]
        obs = observe_worker(state, 2)
        self.assertAlmostEqual(obs.entropy, 0.34657, delta=1e-5)
        self.assertEqual(len(obs.as_vector()), OBSERVATION_LENGTH)

    def test_observe_manager(self):
        state = SimState.empty(self.world.n_grids)
        vector = observe_manager(state, self.world, 0)
        self.assertEqual(len(vector), 7 * OBSERVATION_LENGTH)
        np.testing.assert_array_equal(vector, np.zeros(7 * OBSERVATION_LENGTH))

        state.idle[4] = 2
        state.pending_orders[4] = [Order(i, 4, 0, 5.0 + i, 1 + i % 3) for i in range(6)]
        before = observe_manager(state, self.world, 0)
        np.testing.assert_array_equal(before[4 * OBSERVATION_LENGTH:5 * OBSERVATION_LENGTH],
                                      observe_worker(state, 4).as_vector())
        state.pending_orders[4] = state.pending_orders[4][::-1]
        np.testing.assert_array_equal(observe_manager(state, self.world, 0), before)

    def test_observe_manager_padding(self):
        cells = ((0, 0), (1, 0), (2, 0))
        world = build_world(WorldShape(cells=cells, district_labels=("a", "a", "b")))
        vector = observe_manager(SimState.empty(3), world, 1)
        self.assertEqual(len(vector), 2 * OBSERVATION_LENGTH)

    def test_step_without_decisions(self):
        state = SimState.empty(self.world.n_grids)
        state.idle[:] = 2
        state.pending_orders[3] = [Order(0, 3, 4, 9.0, 1)]
        state.in_transit[1] = [(5, 1, False)]
        new, outcome = step(state, self.world, {})
        self.assertEqual(new.clock, 1)
        self.assertEqual(new.pending_orders[3], [])
        self.assertEqual(outcome.expired, 1)
        self.assertEqual(outcome.orr_denominator, 1)
        self.assertEqual(outcome.orr_numerator, 0)
        self.assertEqual(new.idle[5], 3)
        # the input state is untouched
        self.assertEqual(state.clock, 0)
        self.assertEqual(len(state.pending_orders[3]), 1)

    def test_step_real_order(self):
        state = SimState.empty(self.world.n_grids)
        state.idle[0] = 1
        order = Order(0, 0, 1, 5.0, 2)
        state.pending_orders[0] = [order]
        new, outcome = step(state, self.world, {0: [order]})
        self.assertEqual((outcome.adi_delta, outcome.ast_delta, outcome.tnf_delta), (5.0, 2, 1))
        self.assertEqual((outcome.orr_numerator, outcome.orr_denominator), (1, 1))
        self.assertEqual(outcome.served_real, [(order, 0)])
        self.assertEqual(new.idle.sum(), 0)
        self.assertEqual(new.total_vehicles(), 1)
        later, _ = step(new, self.world, {})
        self.assertEqual(later.clock, 2)
        self.assertEqual(later.idle[1], 1)
        self.assertEqual(later.fleet_group[1], 0)

    def test_step_fake_order(self):
        state = SimState.empty(self.world.n_grids)
        state.idle[0] = 1
        state.pending_orders[0] = [Order(0, 0, 2, 5.0, 1)]
        fake = build_fake_orders(self.world, 0)[0]
        new, outcome = step(state, self.world, {0: [fake]})
        self.assertEqual(new.idle[fake.destination], 1)
        self.assertEqual(new.fleet_group[fake.destination], 1)
        self.assertEqual((outcome.adi_delta, outcome.ast_delta, outcome.tnf_delta), (0.0, 0, 0))
        self.assertEqual(outcome.orr_numerator, 0)
        self.assertEqual(outcome.fleet_moves, [(0, fake.destination, 1)])

    def test_step_errors(self):
        state = SimState.empty(self.world.n_grids)
        state.idle[0] = 1
        pending = Order(0, 0, 1, 5.0, 1)
        state.pending_orders[0] = [pending]
        with self.assertRaises(DecisionError):
            step(state, self.world, {0: [Order(9, 0, 1, 5.0, 1)]})
        with self.assertRaises(DecisionError):
            step(state, self.world, {0: [pending, build_fake_orders(self.world, 0)[0]]})
        with self.assertRaises(DecisionError):
            step(state, self.world, {0: [Order(-1, 0, 6, FAKE_PRICE, FAKE_DURATION, KIND_FAKE)]})
        with self.assertRaises(UnknownGridError):
            step(state, self.world, {12: []})

    def test_conservation(self):
        world = build_world(WorldShape(radius=2))
        source = SyntheticOrderSource(world, np.full((1, world.n_grids), 2.0), max_duration=4)
        simulator = MarketSimulator(world, source, MarketConfig(steps_per_episode=1000), seed=3)
        state = simulator.reset()
        total = state.total_vehicles()
        rng = np.random.default_rng(5)
        adi = 0.0
        for _ in range(1000):
            outcome = simulator.advance(random_decisions(simulator.state, world, rng))
            adi += outcome.adi_delta
            self.assertEqual(simulator.state.total_vehicles(), total)
            self.assertTrue(np.all(simulator.state.fleet_group <= simulator.state.idle))
            self.assertAlmostEqual(outcome.adi_delta, sum(o.price for o, _ in outcome.served_real), delta=1e-9)
            self.assertTrue(all(not o.is_fake for o, _ in outcome.served_real))
        self.assertTrue(simulator.done)
        self.assertGreater(adi, 0.0)

    def test_churn_is_tallied(self):
        world = build_world(WorldShape(radius=1))
        source = SyntheticOrderSource(world, np.full((1, world.n_grids), 1.0))
        config = MarketConfig(steps_per_episode=200, churn_online_rate=0.3, churn_offline_rate=0.3)
        simulator = MarketSimulator(world, source, config, seed=1)
        total = simulator.reset().total_vehicles()
        rng = np.random.default_rng(2)
        for _ in range(200):
            outcome = simulator.advance(random_decisions(simulator.state, world, rng))
            total += outcome.online_delta
            self.assertEqual(simulator.state.total_vehicles(), total)
            self.assertTrue(np.all(simulator.state.idle >= 0))

    def test_simulator_determinism(self):
        world = build_world(WorldShape(radius=2))
        source = SyntheticOrderSource(world, np.full((1, world.n_grids), 2.0))
        first = MarketSimulator(world, source, seed=9).reset(4)
        second = MarketSimulator(world, source, seed=9).reset(4)
        self.assertEqual(first.pending_orders, second.pending_orders)
        other = MarketSimulator(world, source, seed=9).reset(5)
        self.assertNotEqual(first.pending_orders, other.pending_orders)
        with self.assertRaises(RuntimeError):
            MarketSimulator(world, source).advance({})

    def test_poisson_kl(self):
        self.assertAlmostEqual(poisson_kl(2.0, 1.0), 2 * math.log(2) - 1, delta=1e-12)
        k = np.arange(101)
        p, q = stats.poisson.pmf(k, 2.0), stats.poisson.pmf(k, 1.0)
        self.assertAlmostEqual(poisson_kl(2.0, 1.0), float(np.sum(p * np.log(p / q))), delta=1e-9)
        rng = np.random.default_rng(0)
        for a, b in rng.uniform(0.01, 20.0, size=(100, 2)):
            self.assertAlmostEqual(poisson_kl(a, a), 0.0, delta=1e-12)
            self.assertGreaterEqual(poisson_kl(a, b), 0.0)

    def test_manager_reward_income(self):
        state = SimState.empty(self.world.n_grids)
        stats_ = compute_world_stats(state, self.world)
        self.assertEqual(stats_.areas, ())
        outcome = StepOutcome(served_real=[(Order(0, 1, 2, 3.0, 1), 1), (Order(1, 4, 2, 7.0, 1), 4)])
        self.assertEqual(manager_reward(state, outcome, self.world, 0, stats_), 10.0)

    def test_manager_reward_penalties(self):
        entropies = np.array([0.1, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0])
        mean = float(entropies.mean())
        mask = zeros(self.world.n_grids)
        mask[0] = 1
        world_stats = WorldStats(entropies, mean, (Area(mask, 2.0, 1.0),))
        outcome = StepOutcome(served_real=[(Order(0, 3, 2, 4.0, 1), 3)])
        expected = 4.0 - float(np.sum((entropies - mean) ** 2)) - (2 * math.log(2) - 1)
        reward = manager_reward(SimState.empty(7), outcome, self.world, 0, world_stats)
        self.assertAlmostEqual(reward, expected, delta=1e-9)
        balanced = WorldStats(np.zeros(7), 0.0, (Area(mask, 3.0, 3.0),))
        self.assertAlmostEqual(manager_reward(SimState.empty(7), outcome, self.world, 0, balanced), 4.0, delta=1e-12)

    def test_imbalanced_areas(self):
        world = build_world(WorldShape(radius=2))
        entropies = np.zeros(world.n_grids)
        a, b = world.grid_id((2, 0)), world.grid_id((-2, 0))
        entropies[[a, b]] = 0.35
        entropies[world.neighbors(a)[0]] = 0.35
        areas = imbalanced_areas(world, entropies)
        self.assertEqual(sorted(area.count() for area in areas), [1, 2])
        self.assertEqual(imbalanced_areas(world, np.zeros(world.n_grids)), [])

    def test_world_stats_with_rates(self):
        world = build_world(WorldShape(radius=2))
        state = SimState.empty(world.n_grids)
        corner = world.grid_id((2, 0))
        state.idle[corner] = 3
        state.pending_orders[corner] = [Order(i, corner, corner, 5.0, 1) for i in range(8)]
        order_rates = np.full((2, world.n_grids), 2.0)
        vehicle_rates = np.full((2, world.n_grids), 1.0)
        world_stats = compute_world_stats(state, world, order_rates, vehicle_rates)
        self.assertEqual(len(world_stats.areas), 1)
        self.assertEqual(world_stats.areas[0].order_rate, 2.0)
        self.assertEqual(world_stats.areas[0].vehicle_rate, 1.0)

    def test_fit_poisson_rates(self):
        history = MarketHistory(2, buckets=1)
        for _ in range(5):
            history.record(0, [4, 0], [1, 0])
        order_rates, vehicle_rates = fit_poisson_rates(history)
        np.testing.assert_array_equal(order_rates, [[4.0, RATE_FLOOR]])
        np.testing.assert_array_equal(vehicle_rates, [[1.0, RATE_FLOOR]])

        history = MarketHistory(1, buckets=1)
        history.record(0, [2], [0])
        history.record(0, [4], [0])
        self.assertEqual(fit_poisson_rates(history)[0][0, 0], 3.0)

        with self.assertRaises(ValueError):
            fit_poisson_rates(MarketHistory(1, buckets=1))
        partial = MarketHistory(1, buckets=2, steps_per_day=10)
        partial.record(0, [1], [1])
        with self.assertRaises(ValueError):
            fit_poisson_rates(partial)


if __name__ == "__main__":
    unittest.main()
