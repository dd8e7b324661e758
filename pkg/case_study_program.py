import re
import unittest

from ride_core.metric_tracker import ON_SERVICE_TOKEN, WAITING_TOKEN, trace_vehicle
from experiment.config import ExperimentConfig, with_overrides
from experiment.runner import build_environment, evaluate_rule_policy

DISCOUNT_RATE = 0.2
SEEDS = (0, 1, 2, 3, 4)
TRACE_GRID, TRACE_HORIZON = 12, 10
"""
This file contains the three-district case study: 21 grids where the yellow and green districts only see part
of the orders. It dispatches a full day with the response-rate rule (RES) and with the revenue rule (REV) under
matched seeds and follows one vehicle from grid 12 for ten timesteps. It contains a set of test cases.
"""

config = with_overrides(ExperimentConfig(), world={"discount_rate": DISCOUNT_RATE})
world, source = build_environment(config)


def day_with(token, seed):
    print(f"Dispatching one day with {token.upper()}, seed {seed}...")
    tracker, = evaluate_rule_policy(token, world, source, config, seed, record_decisions=True)
    print(tracker.summary())
    return tracker


class TestCaseStudy(unittest.TestCase):
    def test_revenue_rule_serves_longer_response_rule_serves_more(self):
        agreeing = 0
        for seed in SEEDS:
            res, rev = day_with("res", seed), day_with("rev", seed)
            if rev.ast >= res.ast and res.tnf >= rev.tnf:
                agreeing += 1
        self.assertGreaterEqual(agreeing, 4)

    def test_revenue_rule_earns_more_per_order(self):
        res, rev = day_with("res", 0), day_with("rev", 0)
        self.assertGreater(rev.adi / rev.tnf, res.adi / res.tnf)

    def test_trace(self):
        token_pattern = re.compile(rf"^(\d+|_\d+_|{ON_SERVICE_TOKEN}|{WAITING_TOKEN})$")
        for token in ("res", "rev"):
            tokens = trace_vehicle(day_with(token, 0).records, world, TRACE_GRID, TRACE_HORIZON)
            print(f"{token.upper()} trace from grid {TRACE_GRID}: {' '.join(tokens)}")
            self.assertEqual(len(tokens), TRACE_HORIZON)
            for t in tokens:
                self.assertRegex(t, token_pattern)
                # rule policies never move vehicles without an order
                self.assertFalse(t.startswith("_"))


if __name__ == "__main__":
    unittest.main()
