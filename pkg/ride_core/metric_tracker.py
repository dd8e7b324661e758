"""
This file contains a class which functions as a context manager whose job is to hook onto the simulator's advance
method in order to account an episode in terms of ADI, ORR, AST and TNF, and optionally to record the per-step
decisions needed to trace a single vehicle afterwards.

Like the hooks it is modelled on, it is a slightly 'hacky' approach, but it keeps the policies and the training
loop free of bookkeeping.
"""

from dataclasses import dataclass
from typing import Dict, List, Tuple

from ride_core.constants import *
from ride_core.market import MarketSimulator

WAITING_TOKEN = "W"
ON_SERVICE_TOKEN = "O"


@dataclass(frozen=True)
class StepRecord:
    clock: int
    idle: Tuple[int, ...]
    # grid -> [(destination, duration, is_fake)] in selection order
    decisions: Dict[int, Tuple[Tuple[int, int, bool], ...]]


class MetricTracker:

    def __init__(self, simulator: MarketSimulator, record_decisions=False, debug_mode=False):
        self.simulator = simulator
        self.record_decisions = record_decisions
        self.debug_mode = debug_mode
        self.steps = 0
        self.adi = 0.0
        self.orders_served = 0
        self.orders_generated = 0
        self.ast = 0
        self.tnf = 0
        self.fleet_moves = 0
        self.expired = 0
        self.online_delta = 0
        self.records: List[StepRecord] = []

    def __enter__(self):
        # Hook onto this simulator's advance (once per timestep)
        self._old_advance = self.simulator.advance

        def new_advance(decisions):
            state_before = self.simulator.state
            outcome = self._old_advance(decisions)
            self.log_step(state_before, decisions, outcome)
            return outcome
        self.simulator.advance = new_advance
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        # Unhook: drop the instance attribute so the class method shows through again
        del self.simulator.advance

    def log_step(self, state_before, decisions, outcome):
        self.steps += 1
        self.adi += outcome.adi_delta
        self.orders_served += outcome.orr_numerator
        self.orders_generated += outcome.orr_denominator
        self.ast += outcome.ast_delta
        self.tnf += outcome.tnf_delta
        self.fleet_moves += sum(count for _, _, count in outcome.fleet_moves)
        self.expired += outcome.expired
        self.online_delta += outcome.online_delta
        if self.debug_mode:
            print(f"Step {state_before.clock}: adi+={outcome.adi_delta:.2f}, served {outcome.orr_numerator}"
                  f"/{outcome.orr_denominator}, fleet moves {len(outcome.fleet_moves)}.")
        if self.record_decisions:
            self.records.append(StepRecord(
                state_before.clock, tuple(int(v) for v in state_before.idle),
                {int(g): tuple((o.destination, o.duration, o.is_fake) for o in items)
                 for g, items in decisions.items() if items}))

    @property
    def orr(self) -> float:
        return self.orders_served / self.orders_generated if self.orders_generated else 0.0

    def metrics(self) -> Dict[str, float]:
        return {"ADI": self.adi, "ORR": self.orr, "AST": float(self.ast), "TNF": float(self.tnf)}

    def summary(self):
        return \
f"""Timesteps simulated: {self.steps}.
Orders served: {self.orders_served} of {self.orders_generated} ({100 * self.orr:.1f}%)
Orders expired: {self.expired}
Fleet moves: {self.fleet_moves}
-----------------------------
ADI: {self.adi:.2f}.
ORR: {self.orr:.4f}.
AST: {self.ast} timesteps.
TNF: {self.tnf} orders.
-----------------------------"""


def trace_vehicle(records: List[StepRecord], world, start_grid, horizon: int) -> List[str]:
    """
    Follow one vehicle through recorded decisions. The vehicle starts at the head of the idle queue of
    `start_grid`; a grid's decisions consume idle vehicles from the head of its queue and arrivals join the back.
    Tokens per step: destination id when dispatched on a real order, `_<id>_` for a fleet move (including stay),
    O while on service and W while waiting.
    """
    start_grid = world.check_grid(start_grid)
    if horizon > len(records):
        raise ValueError(f"Only {len(records)} steps were recorded, cannot trace {horizon}.")
    tokens = []
    grid, position, busy_until, arrival_grid = start_grid, 0, None, None
    for record in records[:horizon]:
        if busy_until is not None:
            if record.clock < busy_until:
                tokens.append(ON_SERVICE_TOKEN)
                continue
            # arrived: join the back of the queue at the destination
            grid, busy_until = arrival_grid, None
            position = max(0, record.idle[grid] - 1)
        items = record.decisions.get(grid, ())
        if position < len(items):
            destination, duration, is_fake = items[position]
            tokens.append(f"_{destination}_" if is_fake else str(destination))
            busy_until, arrival_grid = record.clock + duration, destination
            if is_fake:
                # fleet moves are not on-service time; the vehicle is idle at the destination next step
                busy_until = record.clock + 1
        else:
            position -= len(items)
            tokens.append(WAITING_TOKEN)
    return tokens
