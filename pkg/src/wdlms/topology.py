"""
Geometric network model: node placement, pairwise distances and the
static transmission-range neighbourhoods.

Node indices are 0-based inside the package. Documents and CSV files use
the same order as ``positions``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np


class TopologyError(ValueError):
    """Raised for malformed topology parameters or documents."""


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Immutable node layout with transmission-range neighbour sets.

    Parameters
    ----------
    positions : ndarray, shape (K, 2)
        Node coordinates inside the square ``[0, region_side]^2``.
    tx_range : float
        Transmission range ``r_o``; node ``l`` hears ``k`` iff their
        distance is at most ``tx_range``.
    region_side : float
        Side length of the deployment square.
    """

    positions: np.ndarray
    tx_range: float
    region_side: float = 1.0
    distances: np.ndarray = field(init=False, repr=False)
    adjacency: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise TopologyError("positions must be a non-empty (K, 2) array")
        if not np.all(np.isfinite(pos)):
            raise TopologyError("positions must be finite")
        if not (self.tx_range > 0 and math.isfinite(self.tx_range)):
            raise TopologyError("tx_range must be a positive finite number")
        if not self.region_side > 0:
            raise TopologyError("region_side must be positive")
        pos.setflags(write=False)
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        np.fill_diagonal(dist, 0.0)
        adj = dist <= self.tx_range
        np.fill_diagonal(adj, True)
        dist.setflags(write=False)
        adj.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "distances", dist)
        object.__setattr__(self, "adjacency", adj)

    @property
    def node_count(self) -> int:
        return self.positions.shape[0]

    @property
    def neighbors(self) -> tuple[frozenset[int], ...]:
        """Static neighbourhoods ``N_k`` (each contains ``k`` itself)."""
        return tuple(frozenset(np.flatnonzero(self.adjacency[:, k]).tolist())
                     for k in range(self.node_count))

    @property
    def link_mask(self) -> np.ndarray:
        """Boolean ``(K, K)`` mask of in-range links ``l != k``."""
        mask = self.adjacency.copy()
        np.fill_diagonal(mask, False)
        return mask

    def degrees(self) -> np.ndarray:
        """Neighbourhood sizes ``|N_k|`` including the node itself."""
        return self.adjacency.sum(axis=0)

    def to_document(self) -> dict:
        return {
            "r_o": float(self.tx_range),
            "region_side": float(self.region_side),
            "positions": [[float(x), float(y)] for x, y in self.positions],
        }


def generate_topology(seed, node_count: int, tx_range: float,
                      region_side: float = 1.0,
                      min_separation: float = 1e-6) -> NetworkTopology:
    """Place ``node_count`` nodes uniformly at random in a square.

    A draw closer than ``min_separation`` to an existing node is
    discarded and redrawn, so the path loss stays finite.
    """
    if not isinstance(node_count, (int, np.integer)) or node_count < 1:
        raise TopologyError("node_count must be a positive integer")
    if not tx_range > 0:
        raise TopologyError("tx_range must be positive")
    if not region_side > 0:
        raise TopologyError("region_side must be positive")
    rng = np.random.default_rng(seed)
    pts: list[np.ndarray] = []
    while len(pts) < node_count:
        p = rng.uniform(0.0, region_side, size=2)
        if all(np.hypot(*(p - q)) >= min_separation for q in pts):
            pts.append(p)
    return NetworkTopology(np.array(pts), float(tx_range), float(region_side))


def load_topology(document: Mapping[str, Any] | str) -> NetworkTopology:
    """Build a topology from a JSON document (or its text).

    The document is ``{"r_o": float, "positions": [[x, y], ...]}`` with an
    optional ``"region_side"`` (default 1). Positions may also be given as
    ``{"node": i, "x": x, "y": y}`` objects with 0-based unique ids.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise TopologyError(f"topology document is not valid JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise TopologyError("topology document must be a JSON object")
    if "r_o" not in document:
        raise TopologyError("topology document is missing 'r_o'")
    r_o = document["r_o"]
    if isinstance(r_o, bool) or not isinstance(r_o, (int, float)) or not r_o > 0:
        raise TopologyError("'r_o' must be a positive number")
    side = document.get("region_side", 1.0)
    if isinstance(side, bool) or not isinstance(side, (int, float)) or not side > 0:
        raise TopologyError("'region_side' must be a positive number")
    raw = document.get("positions")
    if not isinstance(raw, list) or not raw:
        raise TopologyError("'positions' must be a non-empty list")

    if all(isinstance(p, Mapping) for p in raw):
        ids = [p.get("node") for p in raw]
        if any(not isinstance(i, int) or isinstance(i, bool) for i in ids):
            raise TopologyError("every position object needs an integer 'node'")
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate node indices in 'positions'")
        if sorted(ids) != list(range(len(ids))):
            raise TopologyError("node indices must cover 0..K-1")
        order = sorted(raw, key=lambda p: p["node"])
        coords = [[p.get("x"), p.get("y")] for p in order]
    else:
        coords = raw
    try:
        pos = np.array(coords, dtype=float)
    except (TypeError, ValueError) as exc:
        raise TopologyError("positions must be numeric [x, y] pairs") from exc
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise TopologyError("positions must be [x, y] pairs")
    if np.any(pos < 0) or np.any(pos > side):
        raise TopologyError("positions must lie inside the declared region")
    return NetworkTopology(pos, float(r_o), float(side))


def dump_topology(topology: NetworkTopology) -> str:
    """Serialise to JSON; floats use shortest round-trip repr."""
    return json.dumps(topology.to_document(), indent=2)
