"""Evaluation metrics and population-level mobility statistics.

Trips are changes of cell between consecutive slots of a day; a trip is
timed at the first slot spent at the destination. Distances are straight
line between cell centroids in km (great-circle for lat/lon coordinates).
JSD uses natural logs, so it lies in ``[0, ln 2]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .trajectory import DailyTrajectory

LN2 = math.log(2.0)


def _slots(t) -> np.ndarray:
    return np.asarray(t.slots if isinstance(t, DailyTrajectory) else t, dtype=np.int64)


def _stack(trajs) -> np.ndarray:
    return np.stack([_slots(t) for t in trajs]) if len(trajs) else np.zeros((0, 0), np.int64)


def accuracy(pred, actual) -> float:
    """Fraction of slots where the predicted cell equals the actual cell."""
    p, a = _stack(list(pred)), _stack(list(actual))
    if p.shape != a.shape:
        raise ValueError(f"prediction shape {p.shape} != actual shape {a.shape}")
    if p.size == 0:
        return float("nan")
    return float((p == a).mean())


def haversine_km(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lat1, lon1, lat2, lon2 = map(np.radians, (a[..., 0], a[..., 1], b[..., 0], b[..., 1]))
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * 6371.0088 * np.arcsin(np.sqrt(h))


def cell_distance(centroids: np.ndarray, a, b, latlon: bool = False) -> np.ndarray:
    ca, cb = centroids[np.asarray(a)], centroids[np.asarray(b)]
    if latlon:
        return haversine_km(ca, cb)
    return np.linalg.norm(ca - cb, axis=-1)


def deviation_distance(pred, actual, centroids: np.ndarray, latlon: bool = False) -> float:
    """Mean centroid distance (km) between predicted and actual cells over all slots."""
    p, a = _stack(list(pred)), _stack(list(actual))
    if p.shape != a.shape:
        raise ValueError(f"prediction shape {p.shape} != actual shape {a.shape}")
    if p.size == 0:
        return float("nan")
    return float(cell_distance(centroids, p, a, latlon).mean())


def jsd(p, q) -> float:
    """Jensen-Shannon divergence (natural log) between two histograms of equal length."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same support")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), LN2)


def trips(traj) -> tuple:
    """``(origins, destinations, slot_index)`` of every cell change within the day."""
    s = _slots(traj)
    t = np.flatnonzero(s[1:] != s[:-1]) + 1
    return s[t - 1], s[t], t


def _histogram_jsd(xs, ys, n_bins: int) -> float:
    if len(xs) == 0 and len(ys) == 0:
        return 0.0
    hx = np.bincount(xs, minlength=n_bins) if len(xs) else np.eye(n_bins)[0]
    hy = np.bincount(ys, minlength=n_bins) if len(ys) else np.eye(n_bins)[0]
    return jsd(hx, hy)


def _by_user(trajs) -> dict:
    out = {}
    for t in trajs:
        out.setdefault(t.user, []).append(t)
    return out


def user_trip_distances(trajs, centroids, latlon=False) -> np.ndarray:
    d = [cell_distance(centroids, *trips(t)[:2], latlon=latlon) for t in trajs]
    return np.concatenate(d) if d else np.zeros(0)


def travel_dist_jsd(pred, actual, centroids: np.ndarray, bin_km: float = 1.0, latlon: bool = False) -> float:
    """Per-user JSD of trip-distance histograms (``bin_km`` bins), averaged over users."""
    P, A = _by_user(pred), _by_user(actual)
    users = sorted(set(P) | set(A))
    vals = []
    for u in users:
        dp = np.floor(user_trip_distances(P.get(u, []), centroids, latlon) / bin_km).astype(np.int64)
        da = np.floor(user_trip_distances(A.get(u, []), centroids, latlon) / bin_km).astype(np.int64)
        n_bins = int(max(dp.max(initial=0), da.max(initial=0))) + 1
        vals.append(_histogram_jsd(dp, da, n_bins))
    return float(np.mean(vals)) if vals else float("nan")


def depart_time_jsd(pred, actual) -> float:
    """Per-user JSD of departure-slot histograms, averaged over users."""
    P, A = _by_user(pred), _by_user(actual)
    vals = []
    for u in sorted(set(P) | set(A)):
        tp = [trips(t)[2] for t in P.get(u, [])]
        ta = [trips(t)[2] for t in A.get(u, [])]
        T = max([len(t.slots) for t in P.get(u, []) + A.get(u, [])])
        xp = np.concatenate(tp) if tp else np.zeros(0, np.int64)
        xa = np.concatenate(ta) if ta else np.zeros(0, np.int64)
        vals.append(_histogram_jsd(xp, xa, T))
    return float(np.mean(vals)) if vals else float("nan")


def daily_travel_distance(traj, centroids: np.ndarray, latlon: bool = False) -> float:
    """Total km travelled in one day; 0 for a full-day stay."""
    o, d, _ = trips(traj)
    return float(cell_distance(centroids, o, d, latlon).sum())


def daily_distance_histogram(trajs, centroids, bin_km: float = 1.0, latlon: bool = False) -> tuple:
    """``(bin_lower_edges_km, counts)`` of daily travel distances; bin 0 holds full-day stays."""
    d = np.array([daily_travel_distance(t, centroids, latlon) for t in trajs])
    if d.size == 0:
        return np.zeros(0), np.zeros(0, np.int64)
    bins = np.floor(d / bin_km).astype(np.int64)
    counts = np.bincount(bins)
    return np.arange(len(counts)) * bin_km, counts


# OD flows -------------------------------------------------------------------

@dataclass
class FlowMatrix:
    level: str
    flows: dict = field(default_factory=dict)

    def total(self) -> int:
        return int(sum(self.flows.values()))


def od_flows(trajs, level: str = "cell", cell_admin: np.ndarray = None) -> FlowMatrix:
    """Trip counts by (origin, destination); admin level drops trips within one admin."""
    if level not in ("cell", "admin"):
        raise ValueError(f"unknown level {level!r}")
    if level == "admin" and cell_admin is None:
        raise ValueError("admin level needs the cell -> admin map")
    flows = {}
    for t in trajs:
        o, d, _ = trips(t)
        if level == "admin":
            o, d = cell_admin[o], cell_admin[d]
        for a, b in zip(o.tolist(), d.tolist()):
            if a != b:
                flows[(a, b)] = flows.get((a, b), 0) + 1
    return FlowMatrix(level, flows)


def _paired(actual: FlowMatrix, pred: FlowMatrix) -> tuple:
    keys = sorted(set(actual.flows) | set(pred.flows))
    y = np.array([actual.flows.get(k, 0) for k in keys], dtype=float)
    yh = np.array([pred.flows.get(k, 0) for k in keys], dtype=float)
    return keys, y, yh


def r_squared(actual: FlowMatrix, pred: FlowMatrix) -> float:
    """``1 - SS_res / SS_tot`` over the union of OD pairs, missing pairs counted as 0."""
    _, y, yh = _paired(actual, pred)
    if y.size == 0:
        return float("nan")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - yh) ** 2).sum())
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("-inf")
    return 1.0 - ss_res / ss_tot


def cpc(actual: FlowMatrix, pred: FlowMatrix) -> float:
    """Common part of commuters: ``2 sum(min(F, F')) / (sum(F) + sum(F'))``."""
    _, y, yh = _paired(actual, pred)
    denom = y.sum() + yh.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.minimum(y, yh).sum() / denom)


# forecasts ------------------------------------------------------------------

def seven_day_curves(pred_week, actual_week, centroids, latlon: bool = False) -> dict:
    """Per-horizon Acc and DevDist for iterative week forecasts.

    ``pred_week`` and ``actual_week`` are equal-length lists (one entry per
    user) of 7-day trajectory lists.
    """
    days = len(pred_week[0]) if pred_week else 0
    acc, dev = [], []
    for i in range(days):
        p = [w[i] for w in pred_week]
        a = [w[i] for w in actual_week]
        acc.append(accuracy(p, a))
        dev.append(deviation_distance(p, a, centroids, latlon))
    return {"day": list(range(1, days + 1)), "acc": acc, "dev_dist_km": dev}


@dataclass
class MetricReport:
    acc: float
    dev_dist_km: float
    travel_dist_jsd: float
    depart_time_jsd: float
    n_trajectories: int
    task: str = "day"
    curves: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, actual, centroids, task: str = "day", latlon: bool = False) -> MetricReport:
    """All four headline metrics on matched (user, day) pairs."""
    key = lambda t: (t.user, t.day)
    A = {key(t): t for t in actual}
    pairs = [(p, A[key(p)]) for p in sorted(pred, key=key) if key(p) in A]
    if not pairs:
        raise ValueError("no (user, day) overlap between predictions and actual trajectories")
    P = [p for p, _ in pairs]
    Q = [a for _, a in pairs]
    return MetricReport(
        acc=accuracy(P, Q),
        dev_dist_km=deviation_distance(P, Q, centroids, latlon),
        travel_dist_jsd=travel_dist_jsd(P, Q, centroids, latlon=latlon),
        depart_time_jsd=depart_time_jsd(P, Q),
        n_trajectories=len(pairs),
        task=task,
    )
