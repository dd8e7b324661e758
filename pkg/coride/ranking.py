"""
This file contains the ranking side of a worker's action: ranking features for real and fake orders, linear scores
under a weight vector, and the temperature-annealed Boltzmann selector that samples Selected-k items without
replacement.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from ride_core.constants import *
from ride_core.market import SimState, entropy
from ride_core.orders import Order
from coride.neural import ParamStore

# Slots after the two embeddings
PRICE_SLOT, DURATION_SLOT, KIND_SLOT, ENTROPY_SLOT, GAP_SLOT = range(5)


@dataclass(frozen=True)
class RankingConfig:
    embedding_size: int = EMBEDDING_SIZE
    reference_price: float = 30.0
    max_duration: int = 3
    gap_scale: float = 10.0
    tau_start: float = 1.0
    tau_floor: float = 0.01
    tau_horizon: int = 2000


def feature_length(embedding_size: int = EMBEDDING_SIZE) -> int:
    return 2 * embedding_size + 5


class GridEmbedding:
    """ Learned table with one row of size d_e per grid. """

    def __init__(self, store: ParamStore, name: str, n_grids: int, size: int, rng: np.random.Generator):
        self.store = store
        self.n_grids, self.size = n_grids, size
        self.table = store.add(f"{name}.table", rng.normal(0.0, 0.1, size=(n_grids, size)))

    def lookup(self, grids) -> Array:
        grids = np.asarray(grids, dtype=Int)
        if np.any(grids < 0) or np.any(grids >= self.n_grids):
            raise UnknownGridError(f"Embedding table has no rows for grids {grids[(grids < 0) | (grids >= self.n_grids)]}.")
        return self.store[self.table][grids]

    def backward(self, grids, grad_rows: Array):
        grad = np.zeros_like(self.store[self.table])
        np.add.at(grad, np.asarray(grids, dtype=Int), grad_rows)
        self.store.accumulate(self.table, grad)


def featurize(order: Order, state: SimState, embeddings: Array, config: RankingConfig = RankingConfig()) -> Array:
    """
    [emb(origin), emb(destination), price / reference price, duration / max duration, kind flag,
     destination entropy, (destination orders - destination idle vehicles) / gap scale]
    """
    n_grids = len(embeddings)
    for grid in (order.origin, order.destination):
        if not 0 <= grid < n_grids:
            raise UnknownGridError(f"Order {order.id} references grid {grid}, outside the embedding table.")
    destination_orders = len(state.pending_orders[order.destination])
    destination_idle = int(state.idle[order.destination])
    tail = [order.price / config.reference_price,
            order.duration / config.max_duration,
            float(order.kind),
            entropy(destination_idle, destination_orders),
            (destination_orders - destination_idle) / config.gap_scale]
    return np.concatenate((embeddings[order.origin], embeddings[order.destination], tail))


def featurize_items(items: Sequence[Order], state: SimState, embeddings: Array,
                    config: RankingConfig = RankingConfig()) -> Array:
    if not items:
        return np.zeros((0, 2 * embeddings.shape[1] + 5))
    return np.stack([featurize(item, state, embeddings, config) for item in items])


def score(weights: Array, items: Array) -> Array:
    """ score_i = w . e_i """
    weights = np.asarray(weights, dtype=float)
    items = np.atleast_2d(np.asarray(items, dtype=float))
    if items.size == 0:
        return np.zeros(0)
    if items.shape[1] != weights.shape[-1]:
        raise ShapeError(f"Weights have length {weights.shape[-1]} but features have length {items.shape[1]}.")
    return items @ weights


def boltzmann_probabilities(scores: Array, temperature: float) -> Array:
    z = (np.asarray(scores, dtype=float) - np.max(scores)) / temperature
    p = np.exp(z)
    return p / p.sum()


def selected_k(scores: Sequence[float], k: int, temperature: float, rng: np.random.Generator,
               greedy: bool = False) -> List[int]:
    """
    Draw k distinct indices one after another, each from the softmax of the remaining scores at `temperature`.
    With greedy=True the highest remaining score is taken instead (lowest index on ties).
    """
    scores = np.asarray(scores, dtype=float)
    if k > len(scores):
        raise ValueError(f"Cannot select {k} items out of {len(scores)}.")
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}.")
    if not temperature > 0:
        raise ValueError(f"Temperature must be positive, got {temperature}.")
    remaining = list(range(len(scores)))
    chosen = []
    for _ in range(k):
        candidates = scores[remaining]
        if greedy:
            j = int(np.argmax(candidates))
        else:
            j = int(rng.choice(len(remaining), p=boltzmann_probabilities(candidates, temperature)))
        chosen.append(remaining.pop(j))
    return chosen


def anneal_temperature(step: int, config: RankingConfig = RankingConfig()) -> float:
    """ Exponential interpolation from tau_start at step 0 down to tau_floor at tau_horizon, flat afterwards. """
    if config.tau_horizon <= 0 or step >= config.tau_horizon:
        return config.tau_floor
    fraction = max(step, 0) / config.tau_horizon
    return float(config.tau_start * (config.tau_floor / config.tau_start) ** fraction)


def selection_rng(seed: int, episode: int, timestep: int, grid: int) -> np.random.Generator:
    """ Independent stream per (episode, timestep, grid), so per-grid selection order never changes the draws. """
    return np.random.default_rng([seed, episode, timestep, grid])
