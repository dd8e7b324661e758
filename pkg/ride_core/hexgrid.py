"""
This file contains the hexagonal grid world: cell topology, the neighbour relation, the district partition
(one manager per district, one worker per grid) and hop distances between grids.

Cells use axial coordinates (q, r) with a pointy-top orientation. Dense integer ids are assigned by a row-major
scan, i.e. sorted by (r, q), which keeps observation vectors in a stable order.
"""

from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from bitarray import bitarray
from bitarray.util import zeros

from ride_core.constants import *

Coord = Tuple[int, int]


@dataclass(frozen=True)
class WorldShape:
    """
    World-shape descriptor: either a hex-of-hexes radius, or an explicit cell list with optional district labels.
    """
    radius: Optional[int] = None
    cells: Optional[Tuple[Coord, ...]] = None
    district_labels: Optional[Tuple[str, ...]] = None


def hex_distance(a: Coord, b: Coord) -> int:
    dq, dr = a[0] - b[0], a[1] - b[1]
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2


def hex_of_hexes(radius: int) -> List[Coord]:
    return [(q, r) for r in range(-radius, radius + 1) for q in range(-radius, radius + 1)
            if hex_distance((q, r), (0, 0)) <= radius]


class GridWorld:
    """
    Immutable grid world. All lookups validate ids and raise UnknownGridError for anything outside the world.
    """

    def __init__(self, coords: Sequence[Coord], districts: Sequence[int], district_names: Sequence[str]):
        self.coords: Tuple[Coord, ...] = tuple(coords)
        self.n_grids = len(self.coords)
        self._index: Dict[Coord, int] = {c: i for i, c in enumerate(self.coords)}

        self.neighbor_table: Tuple[Tuple[int, ...], ...] = tuple(
            tuple(sorted(self._index[(q + dq, r + dr)] for dq, dr in HEX_DIRECTIONS if (q + dq, r + dr) in self._index))
            for q, r in self.coords)
        self._neighbor_masks = []
        for neighbors in self.neighbor_table:
            mask = zeros(self.n_grids)
            for n in neighbors:
                mask[n] = 1
            self._neighbor_masks.append(mask)

        self.districts: Tuple[int, ...] = tuple(districts)
        self.district_names: Tuple[str, ...] = tuple(district_names)
        self.n_districts = len(self.district_names)
        self.district_members: Tuple[Tuple[int, ...], ...] = tuple(
            tuple(g for g in range(self.n_grids) if self.districts[g] == d) for d in range(self.n_districts))
        self.max_district_size = max(len(m) for m in self.district_members)

        self._distances = self._all_pairs_hops()
        self._distances.setflags(write=False)

    def _all_pairs_hops(self) -> Array:
        distances = np.full((self.n_grids, self.n_grids), -1, dtype=Int)
        for source in range(self.n_grids):
            distances[source, source] = 0
            queue = deque([source])
            while queue:
                g = queue.popleft()
                for n in self.neighbor_table[g]:
                    if distances[source, n] < 0:
                        distances[source, n] = distances[source, g] + 1
                        queue.append(n)
        return distances

    def check_grid(self, grid) -> int:
        if not isinstance(grid, (int, np.integer)) or not 0 <= grid < self.n_grids:
            raise UnknownGridError(f"Grid {grid} is not in the world (valid ids 0..{self.n_grids - 1}).")
        return int(grid)

    def check_district(self, district) -> int:
        if not isinstance(district, (int, np.integer)) or not 0 <= district < self.n_districts:
            raise UnknownGridError(f"District {district} is not in the world (valid ids 0..{self.n_districts - 1}).")
        return int(district)

    def grid_id(self, coord: Coord) -> int:
        if coord not in self._index:
            raise UnknownGridError(f"No cell at axial coordinate {coord}.")
        return self._index[coord]

    def neighbors(self, grid) -> Tuple[int, ...]:
        return self.neighbor_table[self.check_grid(grid)]

    def neighbor_mask(self, grid) -> bitarray:
        return self._neighbor_masks[self.check_grid(grid)].copy()

    def district_of(self, grid) -> int:
        return self.districts[self.check_grid(grid)]

    def members(self, district) -> Tuple[int, ...]:
        return self.district_members[self.check_district(district)]

    def district_mask(self, district) -> bitarray:
        mask = zeros(self.n_grids)
        for g in self.members(district):
            mask[g] = 1
        return mask

    def adjacent_districts(self, district) -> List[int]:
        """ Districts sharing at least one cell edge with the given district (excluding itself). """
        own = self.district_mask(district)
        touching = zeros(self.n_grids)
        for g in self.members(district):
            touching |= self._neighbor_masks[g]
        touching &= ~own
        return sorted({self.districts[g] for g in range(self.n_grids) if touching[g]})

    def distance(self, a, b) -> int:
        return int(self._distances[self.check_grid(a), self.check_grid(b)])

    @property
    def distances(self) -> Array:
        return self._distances

    def describe(self) -> str:
        lines = [f"# grids={self.n_grids} districts={self.n_districts} cell_radius_km={CELL_RADIUS_KM}",
                 "grid q r district neighbors"]
        for g, (q, r) in enumerate(self.coords):
            neighbors = ",".join(str(n) for n in self.neighbor_table[g])
            lines.append(f"{g} {q} {r} {self.district_names[self.districts[g]]} {neighbors}")
        return "\n".join(lines)


def build_world(shape: WorldShape) -> GridWorld:
    """
    Build a connected grid world from a shape descriptor. Without explicit district labels, districts are 7-cell
    flowers centred on the flower lattice through the seed cell; cells whose flower centre lies outside the world
    join the district with the nearest member (ties to the lowest district id).
    """
    if shape.radius is not None:
        if shape.radius < 0:
            raise WorldSpecError(f"Radius must be non-negative, got {shape.radius}.")
        cells = hex_of_hexes(shape.radius)
        labels = None
    elif shape.cells:
        cells = list(shape.cells)
        labels = shape.district_labels
        if labels is not None and len(labels) != len(cells):
            raise WorldSpecError(f"Got {len(labels)} district labels for {len(cells)} cells.")
        if len(set(cells)) != len(cells):
            raise WorldSpecError("Duplicate cells in world spec.")
    else:
        raise WorldSpecError("Empty world spec: give a radius or at least one cell.")

    order = sorted(range(len(cells)), key=lambda i: (cells[i][1], cells[i][0]))
    coords = [tuple(cells[i]) for i in order]
    if labels is not None:
        labels = [labels[i] for i in order]

    _check_connected(coords)

    if labels is not None:
        names = []
        for label in labels:
            if label not in names:
                names.append(label)
        districts = [names.index(label) for label in labels]
    else:
        districts, names = _flower_districts(coords)
    return GridWorld(coords, districts, names)


def _check_connected(coords: List[Coord]):
    present = set(coords)
    seen = {coords[0]}
    queue = deque([coords[0]])
    while queue:
        q, r = queue.popleft()
        for dq, dr in HEX_DIRECTIONS:
            n = (q + dq, r + dr)
            if n in present and n not in seen:
                seen.add(n)
                queue.append(n)
    if len(seen) != len(present):
        raise WorldSpecError(f"World is disconnected: {len(present) - len(seen)} of {len(present)} cells "
                             f"cannot be reached from {coords[0]}.")


def _is_flower_centre(coord: Coord, seed: Coord) -> bool:
    (aq, ar), (bq, br) = FLOWER_BASIS
    dq, dr = coord[0] - seed[0], coord[1] - seed[1]
    det = aq * br - bq * ar
    return (dq * br - bq * dr) % det == 0 and (aq * dr - dq * ar) % det == 0


def _flower_districts(coords: List[Coord]) -> Tuple[List[int], List[str]]:
    seed = (0, 0) if (0, 0) in coords else coords[0]
    centres = [c for c in coords if _is_flower_centre(c, seed)]
    districts = [-1] * len(coords)
    index = {c: i for i, c in enumerate(coords)}
    for d, centre in enumerate(centres):
        districts[index[centre]] = d
        for dq, dr in HEX_DIRECTIONS:
            n = (centre[0] + dq, centre[1] + dr)
            if n in index:
                districts[index[n]] = d

    world = GridWorld(coords, [max(d, 0) for d in districts], [str(d) for d in range(len(centres))])
    flowered = [g for g in range(len(coords)) if districts[g] >= 0]
    for g in range(len(coords)):
        if districts[g] < 0:
            nearest = min(flowered, key=lambda m: (world.distances[g, m], districts[m]))
            districts[g] = districts[nearest]
    return districts, [f"d{d}" for d in range(len(centres))]


def grid_distance(world: GridWorld, a, b) -> int:
    return world.distance(a, b)
