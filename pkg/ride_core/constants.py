import numpy as np
from numpy import int64 as Int
from numpy import ndarray as Array

# Axial direction vectors for a pointy-top hex grid, (dq, dr)
HEX_DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))

# Lattice of disjoint 7-cell flowers: any integer combination of these is a flower centre
FLOWER_BASIS = ((2, 1), (-1, 3))
FLOWER_SIZE = 7

CELL_RADIUS_KM = 1.3
TIMESTEP_MINUTES = 10
STEPS_PER_DAY = 24 * 60 // TIMESTEP_MINUTES  # 144

BOLTZMANN_K = 1.0
RATE_FLOOR = 1e-6

# Order kinds, doubling as the ranking-feature kind flag
KIND_REAL = 0
KIND_FAKE = 1

FAKE_PRICE = 0.0
FAKE_DURATION = 1

# Layout of the per-worker observation vector
OBS_N_VEHICLES, OBS_N_ORDERS, OBS_ENTROPY, OBS_N_FLEET = 0, 1, 2, 3
ORDER_STATS_LENGTH = 5  # mean price, std price, mean duration, std duration, order count
OBSERVATION_LENGTH = 4 + ORDER_STATS_LENGTH

# Synthetic order shape, one entry per duration 1..len(DURATION_PROBS)
DURATION_PROBS = np.array([0.2, 0.2, 0.15, 0.15, 0.1, 0.1, 0.05, 0.04, 0.01])
PRICE_BY_DURATION = np.array([[10.17, 3.34],  # mean and std of price when duration is 1 step
                              [15.02, 6.90],
                              [23.22, 11.63],
                              [32.14, 16.20],
                              [40.99, 20.69],
                              [49.94, 25.61],
                              [58.98, 31.69],
                              [68.80, 37.25],
                              [79.40, 44.39]])
PRICE_FLOOR = 1.0

# Network sizes
HIDDEN_SIZE = 64
GOAL_SIZE = 16
EMBEDDING_SIZE = 8
MANAGER_DILATION = 4
ATTENTION_HEADS = 4
ZERO_GOAL_NORM = 1e-8

CHECKPOINT_FORMAT_VERSION = 1
OUTPUT_FORMAT_VERSION = 1


class WorldSpecError(Exception):
    pass


class UnknownGridError(Exception):
    pass


class OrderFormatError(Exception):
    pass


class DecisionError(Exception):
    pass


class ShapeError(Exception):
    pass


class ConfigError(Exception):
    pass
