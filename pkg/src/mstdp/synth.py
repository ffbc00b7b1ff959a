"""Synthetic city grid, agent population and daily trajectories.

Agents follow a handful of template day patterns (stay home, commute,
commute plus an evening stop, midday errand). Weekday templates are sticky
from one weekday to the next (daily recurrence), weekends draw from a
separate mix and a fixed weekly activity recurs on one weekday (weekly
periodicity). Random short excursions near home add noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .trajectory import DailyTrajectory, UserHistory, weekday_of

TEMPLATES = ("stay", "commute", "commute_other", "errand")
DEFAULT_MOTIF_MIX = (0.05, 0.60, 0.25, 0.10)
DEFAULT_WEEKEND_MIX = (0.45, 0.05, 0.0, 0.50)
EXCURSION_RADIUS_KM = 5.0
KM_PER_DEG_LAT = 110.574


@dataclass
class CityGrid:
    width: int
    height: int
    n_admins: int
    cell_admin: np.ndarray
    admin_shape: tuple
    cell_size_km: float = 1.0
    origin: tuple = (42.30, -71.10)
    seed: int = 0

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def cell_xy(self, cell) -> np.ndarray:
        cell = np.asarray(cell)
        return np.stack([cell % self.width, cell // self.width], axis=-1)

    @property
    def centroids_km(self) -> np.ndarray:
        xy = self.cell_xy(np.arange(self.n_cells)).astype(float)
        return (xy + 0.5) * self.cell_size_km

    @property
    def centroids_latlon(self) -> np.ndarray:
        km = self.centroids_km
        lat0, lon0 = self.origin
        lat = lat0 + km[:, 1] / KM_PER_DEG_LAT
        lon = lon0 + km[:, 0] / (111.320 * math.cos(math.radians(lat0)))
        return np.stack([lat, lon], axis=1)

    def distance_km(self, a, b) -> np.ndarray:
        c = self.centroids_km
        return np.linalg.norm(c[np.asarray(a)] - c[np.asarray(b)], axis=-1)

    def admin_centroids_km(self) -> np.ndarray:
        c = self.centroids_km
        out = np.zeros((self.n_admins, 2))
        np.add.at(out, self.cell_admin, c)
        return out / np.bincount(self.cell_admin, minlength=self.n_admins)[:, None]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "n_admins": self.n_admins,
            "admin_shape": list(self.admin_shape),
            "cell_size_km": self.cell_size_km,
            "origin": list(self.origin),
            "seed": self.seed,
            "cell_admin": [int(a) for a in self.cell_admin],
            "centroids_km": [[round(float(x), 6), round(float(y), 6)] for x, y in self.centroids_km],
            "centroids_latlon": [[round(float(a), 8), round(float(b), 8)] for a, b in self.centroids_latlon],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CityGrid":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            n_admins=int(d["n_admins"]),
            cell_admin=np.asarray(d["cell_admin"], dtype=np.int64),
            admin_shape=tuple(d["admin_shape"]),
            cell_size_km=float(d["cell_size_km"]),
            origin=tuple(d["origin"]),
            seed=int(d.get("seed", 0)),
        )


def _admin_tiling(width: int, height: int, n_admins: int) -> tuple:
    best = None
    for nx_ in range(1, n_admins + 1):
        if n_admins % nx_:
            continue
        ny_ = n_admins // nx_
        if nx_ > width or ny_ > height:
            continue
        # prefer admins whose cells are closest to square
        score = abs(math.log((width / nx_) / (height / ny_)))
        if best is None or score < best[0]:
            best = (score, nx_, ny_)
    if best is None:
        raise ValueError(f"cannot tile a {width}x{height} grid into {n_admins} rectangular admins")
    return best[1], best[2]


def generate_city(seed: int, width: int = 20, height: int = 20, n_admins: int = 16,
                  cell_size_km: float = 1.0) -> CityGrid:
    """Grid of ``width x height`` cells tiled into ``n_admins`` rectangular admin regions."""
    if width < 1 or height < 1 or n_admins < 1:
        raise ValueError("grid dimensions and admin count must be positive")
    if width * height < n_admins:
        raise ValueError(f"{width}x{height} grid has fewer cells than {n_admins} admins")
    ax, ay = _admin_tiling(width, height, n_admins)
    col_block = np.concatenate([np.full(len(b), i) for i, b in enumerate(np.array_split(np.arange(width), ax))])
    row_block = np.concatenate([np.full(len(b), i) for i, b in enumerate(np.array_split(np.arange(height), ay))])
    cells = np.arange(width * height)
    cell_admin = row_block[cells // width] * ax + col_block[cells % width]
    return CityGrid(width, height, n_admins, cell_admin.astype(np.int64), (ax, ay), cell_size_km, seed=seed)


@dataclass
class AgentProfile:
    home: int
    work: int
    other: int
    motif_mix: np.ndarray
    weekend_mix: np.ndarray
    noise_rate: float
    start_hour: int = 8
    work_hours: int = 9
    errand_hour: int = 12
    stickiness: float = 0.5
    weekly_day: Optional[int] = None
    weekly_cell: Optional[int] = None

    def __post_init__(self):
        self.motif_mix = np.asarray(self.motif_mix, dtype=float)
        self.weekend_mix = np.asarray(self.weekend_mix, dtype=float)
        for name, v in (("motif_mix", self.motif_mix), ("weekend_mix", self.weekend_mix)):
            if v.shape != (len(TEMPLATES),) or np.any(v < 0) or not np.isclose(v.sum(), 1.0):
                raise ValueError(f"{name} must be a probability vector over {TEMPLATES}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be a probability")


def _cells_within(grid: CityGrid, cell: int, radius_km: float) -> np.ndarray:
    d = grid.distance_km(np.arange(grid.n_cells), cell)
    return np.flatnonzero((d <= radius_km) & (d > 0))


def generate_population(grid: CityGrid, n_agents: int, seed: int, noise_rate: float = 0.2,
                        stickiness: float = 0.7, n_hubs: int = 3) -> list:
    """Agent profiles with homes spread over the grid and workplaces clustered around a few hubs."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    hubs = rng.choice(grid.n_cells, size=n_hubs, replace=False)
    agents = []
    for _ in range(n_agents):
        home = int(rng.integers(grid.n_cells))
        hub = int(hubs[rng.integers(n_hubs)])
        work_pool = np.setdiff1d(np.append(_cells_within(grid, hub, 2.0), hub), [home])
        work = int(rng.choice(work_pool))
        other_pool = np.setdiff1d(_cells_within(grid, home, EXCURSION_RADIUS_KM), [work])
        other = int(rng.choice(other_pool))
        has_weekly = rng.random() < 0.5
        weekly_pool = np.setdiff1d(_cells_within(grid, work, 3.0), [home, other])
        agents.append(AgentProfile(
            home=home,
            work=work,
            other=other,
            motif_mix=rng.dirichlet(40 * np.asarray(DEFAULT_MOTIF_MIX) + 1e-3),
            weekend_mix=rng.dirichlet(40 * np.asarray(DEFAULT_WEEKEND_MIX) + 1e-3),
            noise_rate=noise_rate,
            start_hour=int(rng.integers(7, 10)),
            work_hours=int(rng.integers(8, 11)),
            errand_hour=int(rng.integers(10, 15)),
            stickiness=stickiness,
            weekly_day=int(rng.integers(0, 5)) if has_weekly else None,
            weekly_cell=int(rng.choice(weekly_pool)) if has_weekly else None,
        ))
    return agents


def template_day(agent: AgentProfile, template: str, T: int, weekly: bool = False) -> np.ndarray:
    """Noise-free slots for one template; ``weekly`` inserts the agent's weekly stop after work."""
    per_hour = T // 24
    slots = np.full(T, agent.home, dtype=np.int64)

    def fill(cell, h0, hours):
        a, b = h0 * per_hour, min(T, (h0 + hours) * per_hour)
        slots[a:b] = cell

    s, e = agent.start_hour, agent.start_hour + agent.work_hours
    if template == "stay":
        pass
    elif template in ("commute", "commute_other"):
        fill(agent.work, s, agent.work_hours)
        evening = e
        if weekly and agent.weekly_cell is not None:
            fill(agent.weekly_cell, evening, 1)
            evening += 1
        if template == "commute_other":
            fill(agent.other, evening, 2)
    elif template == "errand":
        fill(agent.other, agent.errand_hour, 3)
    else:
        raise ValueError(f"unknown template {template!r}")
    return slots


def _add_excursion(slots: np.ndarray, grid: CityGrid, agent: AgentProfile, T: int, rng) -> None:
    per_hour = T // 24
    pool = _cells_within(grid, agent.home, EXCURSION_RADIUS_KM)
    cell = int(pool[rng.integers(len(pool))])
    h0 = int(rng.integers(8, 21))
    length = int(rng.integers(1, 3))
    slots[h0 * per_hour:(h0 + length) * per_hour] = cell


def generate_trajectories(grid: CityGrid, agents: list, n_days: int = 28, T: int = 24, seed: int = 0,
                          epoch_weekday: int = 0) -> dict:
    """One ``UserHistory`` per agent (keyed by agent index) covering days ``0 .. n_days-1``."""
    if n_days < 14:
        raise ValueError("need at least 14 days so weekly structure exists")
    if T % 24:
        raise ValueError(f"T must be a multiple of 24, got {T}")
    streams = np.random.SeedSequence([seed, 2]).spawn(len(agents))
    histories = {}
    for u, (agent, ss) in enumerate(zip(agents, streams)):
        rng = np.random.default_rng(ss)
        hist = UserHistory(user=u, T=T)
        last_weekday_template = None
        for day in range(n_days):
            wd = weekday_of(day, epoch_weekday)
            if wd >= 5:
                template = TEMPLATES[rng.choice(len(TEMPLATES), p=agent.weekend_mix)]
            else:
                if last_weekday_template is not None and rng.random() < agent.stickiness:
                    template = last_weekday_template
                else:
                    template = TEMPLATES[rng.choice(len(TEMPLATES), p=agent.motif_mix)]
                last_weekday_template = template
            slots = template_day(agent, template, T, weekly=(wd == agent.weekly_day))
            if rng.random() < agent.noise_rate:
                _add_excursion(slots, grid, agent, T, rng)
            hist.add(DailyTrajectory(u, day, wd, slots))
        histories[u] = hist
    return histories


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple

    def part(self, name: str) -> tuple:
        return {"train": self.train, "validation": self.validation, "val": self.validation,
                "test": self.test}[name]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))


def split_dataset(histories: dict, ratio=(6, 1, 3)) -> DatasetSplit:
    """Chronological split of the covered day span into half-open ``[start, stop)`` day ranges."""
    days = [d for h in histories.values() for d in h.days]
    if not days:
        raise ValueError("no trajectories to split")
    first, last = min(days), max(days)
    span = last - first + 1
    total = sum(ratio)
    n_train = int(round(span * ratio[0] / total))
    n_val = int(round(span * ratio[1] / total))
    if n_train < 1 or n_val < 1 or n_train + n_val >= span:
        raise ValueError(f"day span {span} too short for split ratio {ratio}")
    a = first + n_train
    b = a + n_val
    return DatasetSplit((first, a), (a, b), (b, last + 1))


def select_days(histories: dict, day_range: tuple) -> dict:
    lo, hi = day_range
    out = {}
    for u, h in histories.items():
        sub = UserHistory(u, h.T, {d: t for d, t in h.days.items() if lo <= d < hi})
        if sub.days:
            out[u] = sub
    return out


def census(grid: CityGrid, agents_or_histories, multiplier: int = 500) -> np.ndarray:
    """Admin-level population: agents' home regions scaled by ``multiplier``.

    Accepts agent profiles, or histories (home = most frequent 00:00-06:00 cell).
    """
    counts = np.zeros(grid.n_admins, dtype=np.int64)
    items = agents_or_histories.values() if isinstance(agents_or_histories, dict) else agents_or_histories
    for item in items:
        if isinstance(item, AgentProfile):
            home = item.home
        else:
            night = [s for t in item.sorted_days() for s in t.slots[: max(1, t.T // 4)]]
            home = int(np.bincount(night).argmax())
        counts[grid.cell_admin[home]] += multiplier
    return counts
