"""Daily mobility motifs: the directed graph of distinct cells visited in a day, up to isomorphism."""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .trajectory import DailyTrajectory


@dataclass(frozen=True, order=True)
class MotifId:
    n_nodes: int
    edges: tuple  # sorted (i, j) pairs under the canonical labeling

    def __str__(self):
        return f"{self.n_nodes}:" + ",".join(f"{i}>{j}" for i, j in self.edges)


def daily_graph(traj) -> tuple:
    """``(n_nodes, edge_set)`` with nodes numbered by first visit, self loops excluded."""
    slots = traj.slots if isinstance(traj, DailyTrajectory) else traj
    index = {}
    for s in slots:
        index.setdefault(int(s), len(index))
    edges = set()
    for a, b in zip(slots, slots[1:]):
        if a != b:
            edges.add((index[int(a)], index[int(b)]))
    return len(index), frozenset(edges)


def canonical_form(n: int, edges) -> MotifId:
    """Lexicographically smallest relabelled edge list.

    Nodes are first grouped by (out-degree, in-degree), which any isomorphism
    preserves; only relabellings that respect the sorted grouping are tried,
    so the result is exact and a full search for graphs up to 8 nodes.
    """
    edges = list(edges)
    outd = np.zeros(n, int)
    ind = np.zeros(n, int)
    for a, b in edges:
        outd[a] += 1
        ind[b] += 1
    sig = sorted(set(zip(outd.tolist(), ind.tolist())))
    classes = [[v for v in range(n) if (outd[v], ind[v]) == s] for s in sig]
    best = None
    for perms in itertools.product(*(itertools.permutations(c) for c in classes)):
        order = [v for p in perms for v in p]
        label = {v: i for i, v in enumerate(order)}
        form = tuple(sorted((label[a], label[b]) for a, b in edges))
        if best is None or form < best:
            best = form
    return MotifId(n, best if best is not None else ())


def extract_motif(traj) -> MotifId:
    return canonical_form(*daily_graph(traj))


def motif_distribution(trajs, top: int = 10) -> list:
    """``[(MotifId, count, fraction)]`` sorted by frequency (ties by motif id), first ``top`` entries."""
    counts = Counter(extract_motif(t) for t in trajs)
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if top is not None:
        ranked = ranked[:top]
    return [(m, c, c / total) for m, c in ranked]
