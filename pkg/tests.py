import unittest

# Import and run tests, including the case-study programs
from ride_core.hexgrid_test import TestHexGrid
from ride_core.orders_test import TestOrders
from ride_core.market_test import TestMarket
from ride_core.metric_tracker_test import TestMetricTracker
from coride.neural_test import TestNeural
from coride.ranking_test import TestRanking
from coride.agents_test import TestAgents
from coride.ddpg_test import TestDDPG, TestTraining
from coride.baselines_test import TestBaselines
from experiment.world_spec_test import TestWorldSpec
from experiment.config_test import TestConfig
from experiment.runner_test import TestRunner
from experiment.cli_test import TestCli
from case_study_program import TestCaseStudy
from learning_progress_program import TestLearningProgress

if __name__ == "__main__":
    unittest.main()
