"""
This file contains orders and the sources they are generated from.

Real orders are either bootstrapped from a historical order table (sampled per timestep window) or drawn from a
synthetic per-grid Poisson rate table. Fake orders encode fleet control: moving an idle vehicle to a neighbour grid
or keeping it where it is. Both kinds share one type so they can be ranked together.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from ride_core.constants import *
from ride_core.hexgrid import GridWorld

logger = logging.getLogger(__name__)

ORDER_COLUMNS = ("timestep", "origin_grid", "dest_grid", "price", "duration")
WRONG_WIDTH = "<wrong number of fields>"


@dataclass(frozen=True)
class Order:
    id: int
    origin: int
    destination: int
    price: float
    duration: int
    kind: int = KIND_REAL

    def __post_init__(self):
        if self.kind == KIND_FAKE:
            if self.price != FAKE_PRICE or self.duration != FAKE_DURATION:
                raise ValueError(f"Fake order {self.id} must have price {FAKE_PRICE} and duration {FAKE_DURATION}.")
        elif self.kind == KIND_REAL:
            if not self.price > 0:
                raise ValueError(f"Real order {self.id} must have a positive price, got {self.price}.")
            if self.duration < 1:
                raise ValueError(f"Real order {self.id} must last at least one timestep, got {self.duration}.")
        else:
            raise ValueError(f"Unknown order kind {self.kind}.")

    @property
    def is_fake(self) -> bool:
        return self.kind == KIND_FAKE


def build_fake_orders(world: GridWorld, grid) -> List[Order]:
    """
    One fake order per neighbour (ascending id) followed by the 'stay' order. Fake ids are negative and only
    unique within a grid.
    """
    neighbors = world.neighbors(grid)
    destinations = list(neighbors) + [int(grid)]
    return [Order(-1 - j, int(grid), dest, FAKE_PRICE, FAKE_DURATION, KIND_FAKE) for j, dest in enumerate(destinations)]


def _sampling_array(world: GridWorld, sampling_rate: Union[float, Array]) -> Array:
    rates = np.broadcast_to(np.asarray(sampling_rate, dtype=float), (world.n_grids,)).copy()
    if np.any(rates < 0) or np.any(rates > 1):
        raise ValueError(f"Sampling rates must lie in [0, 1], got {rates}.")
    return rates


class OrderSource(ABC):
    """
    Something that produces the real orders appearing at a given clock.
    """

    @abstractmethod
    def generate(self, clock: int, rng: np.random.Generator, first_id: int) -> List[Order]:
        """
        Return the real orders for timestep `clock`, numbered consecutively from `first_id`.
        """
        pass


class HistoricalOrderSource(OrderSource):
    """
    Bootstraps orders from a historical table: at clock t every row of window t (mod steps_per_day) is kept with
    probability equal to the sampling rate of its origin grid.
    """

    def __init__(self, world: GridWorld, table: pd.DataFrame, sampling_rate: Union[float, Array] = 1.0,
                 steps_per_day: int = STEPS_PER_DAY):
        missing = [c for c in ORDER_COLUMNS if c not in table.columns]
        if missing:
            raise OrderFormatError(f"Order table is missing columns {missing}.")
        for column in ("origin_grid", "dest_grid"):
            bad = table[(table[column] < 0) | (table[column] >= world.n_grids)]
            if len(bad):
                row = bad.iloc[0]
                raise UnknownGridError(f"Order record at timestep {row['timestep']} references unknown grid "
                                       f"{row[column]} in column '{column}' ({len(bad)} such records).")
        self.world = world
        self.sampling_rate = _sampling_array(world, sampling_rate)
        self.steps_per_day = steps_per_day
        self._windows = {int(t): rows.reset_index(drop=True)
                         for t, rows in table.sort_values(list(ORDER_COLUMNS), kind="stable").groupby("timestep")}

    def generate(self, clock: int, rng: np.random.Generator, first_id: int) -> List[Order]:
        rows = self._windows.get(clock % self.steps_per_day)
        if rows is None:
            return []
        keep = rng.random(len(rows)) < self.sampling_rate[rows["origin_grid"].to_numpy()]
        kept = rows[keep]
        return [Order(first_id + i, int(r.origin_grid), int(r.dest_grid), float(r.price), int(r.duration))
                for i, r in enumerate(kept.itertuples(index=False))]


class SyntheticOrderSource(OrderSource):
    """
    Draws Poisson order counts per grid from a (time bucket x grid) rate table, thinned by per-grid sampling rates.
    Durations follow DURATION_PROBS truncated to `max_duration`, prices a per-duration truncated normal, and
    destinations are uniform over the cells within `duration` hops of the origin.
    """

    def __init__(self, world: GridWorld, rates: Array, sampling_rate: Union[float, Array] = 1.0,
                 max_duration: int = 3, steps_per_day: int = STEPS_PER_DAY):
        rates = np.atleast_2d(np.asarray(rates, dtype=float))
        if rates.shape[1] != world.n_grids:
            raise ShapeError(f"Rate table has {rates.shape[1]} columns but the world has {world.n_grids} grids.")
        if np.any(rates < 0):
            raise ValueError("Order rates must be non-negative.")
        if not 1 <= max_duration <= len(DURATION_PROBS):
            raise ValueError(f"max_duration must lie in 1..{len(DURATION_PROBS)}, got {max_duration}.")
        self.world = world
        self.rates = rates
        self.sampling_rate = _sampling_array(world, sampling_rate)
        self.max_duration = max_duration
        self.steps_per_day = steps_per_day
        self.duration_probs = DURATION_PROBS[:max_duration] / DURATION_PROBS[:max_duration].sum()

    def expected_rates(self, clock: int) -> Array:
        bucket = (clock % self.steps_per_day) * len(self.rates) // self.steps_per_day
        return self.rates[bucket] * self.sampling_rate

    def generate(self, clock: int, rng: np.random.Generator, first_id: int) -> List[Order]:
        counts = rng.poisson(self.expected_rates(clock))
        orders = []
        for grid, count in enumerate(counts):
            if count == 0:
                continue
            durations = rng.choice(np.arange(1, self.max_duration + 1), size=count, p=self.duration_probs)
            means, stds = PRICE_BY_DURATION[durations - 1].T
            prices = np.maximum(PRICE_FLOOR, rng.normal(means, stds))
            for duration, price in zip(durations, prices):
                reachable = np.flatnonzero(self.world.distances[grid] <= duration)
                destination = int(rng.choice(reachable))
                orders.append(Order(first_id + len(orders), grid, destination, round(float(price), 2), int(duration)))
        return orders


def generate_orders(state, source: OrderSource, rng: np.random.Generator) -> List[Order]:
    """ Real orders for the state's clock, numbered from the state's next free order id. """
    return source.generate(state.clock, rng, state.next_order_id)


def load_order_history(path, world: Optional[GridWorld] = None, strict: bool = False) -> pd.DataFrame:
    """
    Read an order history file with header `timestep, origin_grid, dest_grid, price, duration`.
    Malformed rows (wrong number of fields, unparseable fields, non-positive price or duration, unknown grids when a
    world is given) are reported with their line numbers and skipped, or raise OrderFormatError in strict mode.
    Blank lines are ignored.
    """
    try:
        width = len(pd.read_csv(path, nrows=0, engine="python").columns)
        # rows of the wrong width are kept as marker rows so the index keeps following file lines
        raw = pd.read_csv(path, dtype=str, skipinitialspace=True, keep_default_na=False, engine="python",
                          skip_blank_lines=False, on_bad_lines=lambda fields: [WRONG_WIDTH] * width)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise OrderFormatError(f"Could not read order history '{path}'.") from e

    raw.columns = [c.strip() for c in raw.columns]
    missing = [c for c in ORDER_COLUMNS if c not in raw.columns]
    if missing:
        raise OrderFormatError(f"Order history '{path}' is missing header columns {missing}.")

    lines = raw.index + 2  # +1 for the header, +1 for 1-based lines
    cells = raw[list(ORDER_COLUMNS)].fillna("").apply(lambda column: column.str.strip())
    blank = (cells == "").all(axis=1)
    wrong_width = (cells == WRONG_WIDTH).all(axis=1)
    if wrong_width.any():
        bad_lines = lines[wrong_width.to_numpy()].tolist()
        message = f"Rows with the wrong number of fields in '{path}' at lines {bad_lines}."
        if strict:
            raise OrderFormatError(message)
        logger.warning(message + " Skipping them.")

    parsed = pd.DataFrame({c: pd.to_numeric(cells[c], errors="coerce") for c in ORDER_COLUMNS})
    valid = parsed.notna().all(axis=1)
    valid &= (parsed["price"] > 0) & (parsed["duration"] >= 1) & (parsed["timestep"] >= 0)
    for column in ("timestep", "origin_grid", "dest_grid", "duration"):
        valid &= parsed[column] == parsed[column].round()
    if world is not None:
        for column in ("origin_grid", "dest_grid"):
            valid &= (parsed[column] >= 0) & (parsed[column] < world.n_grids)

    malformed = ~valid & ~blank & ~wrong_width
    if malformed.any():
        bad_lines = lines[malformed.to_numpy()].tolist()
        message = f"Malformed order rows in '{path}' at lines {bad_lines}."
        if strict:
            raise OrderFormatError(message)
        logger.warning(message + " Skipping them.")

    table = parsed[valid].astype({"timestep": Int, "origin_grid": Int, "dest_grid": Int, "duration": Int,
                                  "price": float})
    return table.reset_index(drop=True)
