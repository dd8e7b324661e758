import unittest

import numpy as np

from ride_core.hexgrid import WorldShape, build_world
from ride_core.market import MarketSimulator
from ride_core.metric_tracker import ON_SERVICE_TOKEN, WAITING_TOKEN, MetricTracker, StepRecord, trace_vehicle
from ride_core.orders import Order, SyntheticOrderSource, build_fake_orders


def idle_records(n_grids, steps, decisions=None):
    decisions = decisions or {}
    return [StepRecord(t, (3,) * n_grids, decisions.get(t, {})) for t in range(steps)]


class TestMetricTracker(unittest.TestCase):

    def setUp(self):
        self.world = build_world(WorldShape(radius=1))
        silent = SyntheticOrderSource(self.world, np.zeros((1, self.world.n_grids)))
        self.simulator = MarketSimulator(self.world, silent, seed=0)
        self.simulator.reset()

    def test_hooks_and_unhooks(self):
        order = Order(0, 0, 5, 5.0, 2)
        self.simulator.state.pending_orders[0] = [order]
        with MetricTracker(self.simulator, record_decisions=True) as tracker:
            self.simulator.advance({0: [order]})
            self.simulator.advance({})
        self.assertEqual(tracker.steps, 2)
        self.assertEqual(tracker.adi, 5.0)
        self.assertEqual(tracker.orr, 1.0)
        self.assertEqual((tracker.ast, tracker.tnf), (2, 1))
        self.assertEqual(tracker.metrics(), {"ADI": 5.0, "ORR": 1.0, "AST": 2.0, "TNF": 1.0})
        self.assertIn("ADI: 5.00.", tracker.summary())
        self.assertNotIn("advance", vars(self.simulator))

        self.simulator.advance({})
        self.assertEqual(tracker.steps, 2)
        self.assertEqual(len(tracker.records), 2)
        self.assertEqual(tracker.records[0].decisions, {0: ((5, 2, False),)})
        self.assertEqual(tracker.records[1].decisions, {})
        self.assertEqual(tracker.records[0].idle, (3,) * self.world.n_grids)

    def test_no_orders(self):
        with MetricTracker(self.simulator) as tracker:
            for _ in range(3):
                self.simulator.advance({})
        self.assertEqual(tracker.orr, 0.0)
        self.assertEqual(tracker.records, [])

    def test_fleet_moves_counted(self):
        fake = build_fake_orders(self.world, 3)[0]
        with MetricTracker(self.simulator) as tracker:
            self.simulator.advance({3: [fake, build_fake_orders(self.world, 3)[-1]]})
        self.assertEqual(tracker.fleet_moves, 2)
        self.assertEqual(tracker.adi, 0.0)

    def test_trace_never_matched(self):
        records = idle_records(self.world.n_grids, 6)
        self.assertEqual(trace_vehicle(records, self.world, 2, 5), [WAITING_TOKEN] * 5)

    def test_trace_real_order(self):
        records = idle_records(self.world.n_grids, 5, {0: {0: ((5, 2, False),)}})
        self.assertEqual(trace_vehicle(records, self.world, 0, 5),
                         ["5", ON_SERVICE_TOKEN, WAITING_TOKEN, WAITING_TOKEN, WAITING_TOKEN])

    def test_trace_fleet_move(self):
        destination = self.world.neighbors(3)[0]
        records = idle_records(self.world.n_grids, 3, {0: {3: ((destination, 1, True),)}})
        self.assertEqual(trace_vehicle(records, self.world, 3, 3),
                         [f"_{destination}_", WAITING_TOKEN, WAITING_TOKEN])

    def test_trace_fleet_move_then_order(self):
        destination = self.world.neighbors(3)[0]
        alone = tuple(1 if g == destination else 0 for g in range(self.world.n_grids))
        records = [StepRecord(0, (0, 0, 0, 1, 0, 0, 0), {3: ((destination, 1, True),)}),
                   StepRecord(1, alone, {destination: ((6, 2, False),)}),
                   StepRecord(2, (0,) * self.world.n_grids, {}),
                   StepRecord(3, (0,) * self.world.n_grids, {})]
        self.assertEqual(trace_vehicle(records, self.world, 3, 4),
                         [f"_{destination}_", "6", ON_SERVICE_TOKEN, WAITING_TOKEN])

    def test_trace_queue_position(self):
        # the traced vehicle heads the queue, so the second dispatched vehicle is somebody else
        records = idle_records(self.world.n_grids, 2, {0: {1: ((4, 1, False), (6, 1, False))}})
        self.assertEqual(trace_vehicle(records, self.world, 1, 2)[0], "4")

    def test_trace_from_tracker(self):
        order = Order(0, 0, 5, 5.0, 2)
        self.simulator.state.pending_orders[0] = [order]
        with MetricTracker(self.simulator, record_decisions=True) as tracker:
            self.simulator.advance({0: [order]})
            self.simulator.advance({})
        self.assertEqual(trace_vehicle(tracker.records, self.world, 0, 2), ["5", ON_SERVICE_TOKEN])
        with self.assertRaises(ValueError):
            trace_vehicle(tracker.records, self.world, 0, 3)


if __name__ == "__main__":
    unittest.main()
