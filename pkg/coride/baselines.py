"""
This file contains the rule-based reference policies. They only ever dispatch real orders (no fleet moves), and
each selects at most min(idle vehicles, pending orders) of them per grid.
"""

from abc import ABC, abstractmethod
from typing import Dict, List, Optional

import numpy as np

from ride_core.constants import *
from ride_core.market import MarketSimulator, SimState
from ride_core.metric_tracker import MetricTracker
from ride_core.orders import Order
from coride.ranking import selection_rng


class RulePolicy(ABC):

    @staticmethod
    @abstractmethod
    def token() -> str:
        """
        Return the name which identifies the policy in configs and on the command line.
        """
        pass

    @staticmethod
    @abstractmethod
    def rank(orders: List[Order], rng: np.random.Generator) -> List[Order]:
        """
        Return the pending orders of one grid in dispatch priority order.
        """
        pass


class RandomPolicy(RulePolicy):
    """ Uniformly random order, no information used. """

    @staticmethod
    def token() -> str:
        return 'ran'

    @staticmethod
    def rank(orders: List[Order], rng: np.random.Generator) -> List[Order]:
        return [orders[i] for i in rng.permutation(len(orders))]


class ResponsePolicy(RulePolicy):
    """ Shortest duration first; higher price breaks duration ties. """

    @staticmethod
    def token() -> str:
        return 'res'

    @staticmethod
    def rank(orders: List[Order], rng: np.random.Generator) -> List[Order]:
        return sorted(orders, key=lambda o: (o.duration, -o.price, o.id))


class RevenuePolicy(RulePolicy):
    """ Highest price first; shorter duration breaks price ties. """

    @staticmethod
    def token() -> str:
        return 'rev'

    @staticmethod
    def rank(orders: List[Order], rng: np.random.Generator) -> List[Order]:
        return sorted(orders, key=lambda o: (-o.price, o.duration, o.id))


rule_policies = [RandomPolicy, ResponsePolicy, RevenuePolicy]


def policy_from_token(token: str):
    for policy in rule_policies:
        if policy.token() == token.lower():
            return policy
    raise ValueError(f"Unknown rule policy {token}; expected one of {[p.token() for p in rule_policies]}.")


def decide(policy, state: SimState, grid, rng: np.random.Generator) -> List[Order]:
    orders = [o for o in state.pending_orders[grid] if not o.is_fake]
    k = min(int(state.idle[grid]), len(orders))
    if k == 0:
        return []
    return policy.rank(orders, rng)[:k]


def rule_decisions(policy, state: SimState, seed: int, episode: int) -> Dict[int, List[Order]]:
    decisions = {}
    for grid in range(state.n_grids):
        items = decide(policy, state, grid, selection_rng(seed, episode, state.clock, grid))
        if items:
            decisions[grid] = items
    return decisions


def run_rule_episode(policy, simulator: MarketSimulator, episode: int, seed: Optional[int] = None,
                     record_decisions=False) -> MetricTracker:
    """ Play one full episode with a rule policy and return the tracker holding its metrics. """
    seed = simulator.seed if seed is None else seed
    simulator.reset(episode)
    with MetricTracker(simulator, record_decisions=record_decisions, debug_mode=simulator.debug_mode) as tracker:
        while not simulator.done:
            simulator.advance(rule_decisions(policy, simulator.state, seed, episode))
    return tracker
