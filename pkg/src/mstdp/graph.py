"""Multi-scale heterogeneous geospatial graph.

Nodes are grid cells and admin regions. Edges:

* flow (directed, per level): hourly trip-count vectors ``(E, 24)``
* adjacency (undirected, per level): cells within 2 km, admins sharing a grid edge
* inclusion (undirected): each cell to its admin region

Everything is counted from the training split only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import dump_json, load_json
from .synth import CityGrid

HOURS = 24


@dataclass
class FlowEdges:
    src: np.ndarray
    dst: np.ndarray
    counts: np.ndarray  # (E, 24)

    def __len__(self):
        return len(self.src)

    def total(self) -> int:
        return int(self.counts.sum())

    def as_dict(self) -> dict:
        return {(int(p), int(q)): self.counts[i] for i, (p, q) in enumerate(zip(self.src, self.dst))}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowEdges":
        keys = sorted(k for k, v in d.items() if np.sum(v) > 0)
        if not keys:
            return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, HOURS), np.int64))
        src = np.array([k[0] for k in keys], dtype=np.int64)
        dst = np.array([k[1] for k in keys], dtype=np.int64)
        return cls(src, dst, np.stack([np.asarray(d[k], dtype=np.int64) for k in keys]))


@dataclass
class HeteroGraph:
    n_cells: int
    n_admins: int
    flow_cell: FlowEdges
    flow_adm: FlowEdges
    adj_cell: np.ndarray  # (E, 2) with p < q
    adj_adm: np.ndarray
    inclusion: np.ndarray  # (n_cells, 2): (cell, admin)

    @property
    def n_nodes(self) -> int:
        return self.n_cells + self.n_admins

    def admin_node(self, a):
        return np.asarray(a) + self.n_cells

    def sage_edges(self) -> tuple:
        """Directed (src, dst) message pairs over adjacency and inclusion edges, unified node ids."""
        und = [self.adj_cell, self.adj_adm + self.n_cells]
        inc = self.inclusion.copy()
        inc[:, 1] += self.n_cells
        und.append(inc)
        pairs = np.concatenate([u.reshape(-1, 2) for u in und]).astype(np.int64)
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        return src, dst

    def flow_edges(self) -> tuple:
        """Directed flow edges in unified node ids, self loops split off.

        Returns ``(src, dst, counts, self_counts)`` where ``self_counts`` is
        ``(n_nodes, 24)`` holding any self-loop flow (admin level only).
        """
        src = np.concatenate([self.flow_cell.src, self.flow_adm.src + self.n_cells])
        dst = np.concatenate([self.flow_cell.dst, self.flow_adm.dst + self.n_cells])
        counts = np.concatenate([self.flow_cell.counts, self.flow_adm.counts]).astype(float)
        loop = src == dst
        self_counts = np.zeros((self.n_nodes, HOURS))
        self_counts[src[loop]] = counts[loop]
        keep = ~loop
        return src[keep], dst[keep], counts[keep], self_counts


@dataclass
class NodeFeatures:
    region_ids: np.ndarray  # (n_nodes,)
    occupancy: np.ndarray  # (n_nodes, 24)


def adjacency_from_centroids(centroids: np.ndarray, threshold_km: float = 2.0) -> np.ndarray:
    """Undirected pairs ``p < q`` whose centroid distance is at most ``threshold_km``."""
    c = np.asarray(centroids, dtype=float)
    d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    p, q = np.nonzero(np.triu(d <= threshold_km + 1e-9, k=1))
    return np.stack([p, q], axis=1).astype(np.int64)


def build_adjacency(grid: CityGrid, threshold_km: float = 2.0, level: str = "cell") -> np.ndarray:
    if level == "cell":
        return adjacency_from_centroids(grid.centroids_km, threshold_km)
    if level != "admin":
        raise ValueError(f"unknown level {level!r}")
    a = grid.cell_admin.reshape(grid.height, grid.width)
    pairs = set()
    for x, y in ((a[:, :-1], a[:, 1:]), (a[:-1, :], a[1:, :])):
        diff = x != y
        for p, q in zip(x[diff], y[diff]):
            pairs.add((min(p, q), max(p, q)))
    if not pairs:
        return np.zeros((0, 2), np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def slot_hour(slot: int, T: int) -> int:
    return slot * HOURS // T


def build_flow(trajectories, level: str = "cell", grid: CityGrid = None) -> FlowEdges:
    """Hourly trip counts between distinct locations.

    A trip is a change between consecutive slots ``s-1 -> s`` of the same day;
    it is binned at the hour of slot ``s`` (the first slot at the destination).
    At admin level, trips between cells of the same admin become self loops.
    """
    if level not in ("cell", "admin"):
        raise ValueError(f"unknown level {level!r}")
    if level == "admin" and grid is None:
        raise ValueError("admin level flow needs the grid's admin map")
    acc = {}
    for traj in trajectories:
        s = np.asarray(traj.slots)
        moves = np.flatnonzero(s[1:] != s[:-1]) + 1
        for t in moves:
            p, q = int(s[t - 1]), int(s[t])
            if level == "admin":
                p, q = int(grid.cell_admin[p]), int(grid.cell_admin[q])
            vec = acc.get((p, q))
            if vec is None:
                vec = acc[(p, q)] = np.zeros(HOURS, np.int64)
            vec[slot_hour(t, len(s))] += 1
    return FlowEdges.from_dict(acc)


def build_inclusion(grid: CityGrid) -> np.ndarray:
    return np.stack([np.arange(grid.n_cells), grid.cell_admin], axis=1).astype(np.int64)


def aggregate_admin(cell_flow: FlowEdges, inclusion: np.ndarray) -> FlowEdges:
    """Sum cell-level flow by (admin of origin, admin of destination); intra-admin flow stays as self loops."""
    cell_admin = np.empty(inclusion[:, 0].max() + 1 if len(inclusion) else 0, np.int64)
    cell_admin[inclusion[:, 0]] = inclusion[:, 1]
    acc = {}
    for p, q, vec in zip(cell_flow.src, cell_flow.dst, cell_flow.counts):
        key = (int(cell_admin[p]), int(cell_admin[q]))
        acc[key] = acc.get(key, 0) + vec
    return FlowEdges.from_dict(acc)


def build_features(trajectories, grid: CityGrid) -> NodeFeatures:
    """Occupancy by hour (user-slot counts) for every cell and admin node."""
    n_nodes = grid.n_cells + grid.n_admins
    occ = np.zeros((n_nodes, HOURS), np.int64)
    for traj in trajectories:
        s = np.asarray(traj.slots)
        hours = np.arange(len(s)) * HOURS // len(s)
        np.add.at(occ, (s, hours), 1)
        np.add.at(occ, (grid.cell_admin[s] + grid.n_cells, hours), 1)
    return NodeFeatures(np.arange(n_nodes, dtype=np.int64), occ)


def build_graph(train_trajectories, grid: CityGrid, threshold_km: float = 2.0) -> tuple:
    """Full heterogeneous graph plus node features from training trajectories."""
    trajs = list(train_trajectories)
    inclusion = build_inclusion(grid)
    flow_cell = build_flow(trajs, "cell")
    graph = HeteroGraph(
        n_cells=grid.n_cells,
        n_admins=grid.n_admins,
        flow_cell=flow_cell,
        flow_adm=aggregate_admin(flow_cell, inclusion),
        adj_cell=build_adjacency(grid, threshold_km, "cell"),
        adj_adm=build_adjacency(grid, threshold_km, "admin"),
        inclusion=inclusion,
    )
    return graph, build_features(trajs, grid)


def _flow_to_json(f: FlowEdges) -> list:
    return [[int(p), int(q), [int(c) for c in v]] for p, q, v in zip(f.src, f.dst, f.counts)]


def _flow_from_json(rows: list) -> FlowEdges:
    return FlowEdges.from_dict({(r[0], r[1]): np.asarray(r[2], np.int64) for r in rows})


def save_graph(graph: HeteroGraph, features: NodeFeatures, path) -> None:
    dump_json({
        "format": "mstdp-graph/1",
        "n_cells": graph.n_cells,
        "n_admins": graph.n_admins,
        "nodes": {
            "region_ids": [int(i) for i in features.region_ids],
            "occupancy": [[int(c) for c in row] for row in features.occupancy],
        },
        "edges": {
            "flow_cell": _flow_to_json(graph.flow_cell),
            "flow_adm": _flow_to_json(graph.flow_adm),
            "adj_cell": graph.adj_cell.tolist(),
            "adj_adm": graph.adj_adm.tolist(),
            "inclusion": graph.inclusion.tolist(),
        },
    }, path)


def load_graph(path) -> tuple:
    d = load_json(path)
    if d.get("format") != "mstdp-graph/1":
        raise ValueError(f"{path}: not an mstdp graph file")
    e = d["edges"]
    graph = HeteroGraph(
        n_cells=d["n_cells"],
        n_admins=d["n_admins"],
        flow_cell=_flow_from_json(e["flow_cell"]),
        flow_adm=_flow_from_json(e["flow_adm"]),
        adj_cell=np.asarray(e["adj_cell"], np.int64).reshape(-1, 2),
        adj_adm=np.asarray(e["adj_adm"], np.int64).reshape(-1, 2),
        inclusion=np.asarray(e["inclusion"], np.int64).reshape(-1, 2),
    )
    feats = NodeFeatures(np.asarray(d["nodes"]["region_ids"], np.int64),
                         np.asarray(d["nodes"]["occupancy"], np.int64).reshape(-1, HOURS))
    return graph, feats
