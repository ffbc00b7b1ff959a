"""Trajectory value types and the run-length decoupler.

A daily trajectory is a dense sequence of ``T`` cell ids (one per timeslot).
Decoupling factorizes it into a location chain without consecutive repeats
and a duration chain of positive stay lengths that sums to ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import groupby
from typing import Optional, Sequence

import numpy as np

WINDOW = 7


@dataclass(frozen=True)
class DailyTrajectory:
    user: int
    day: int
    weekday: int
    slots: tuple

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(int(s) for s in self.slots))
        if not 0 <= self.weekday <= 6:
            raise ValueError(f"weekday must be in [0, 6], got {self.weekday}")
        if self.day < 0:
            raise ValueError(f"day must be >= 0, got {self.day}")
        if len(self.slots) == 0:
            raise ValueError("empty trajectory")
        if min(self.slots) < 0:
            raise ValueError("negative cell id")

    @property
    def T(self) -> int:
        return len(self.slots)


@dataclass
class UserHistory:
    user: int
    T: int
    days: dict = field(default_factory=dict)

    def add(self, traj: DailyTrajectory):
        if traj.T != self.T:
            raise ValueError(f"user {self.user} day {traj.day}: expected {self.T} slots, got {traj.T}")
        if traj.user != self.user:
            raise ValueError(f"trajectory of user {traj.user} added to history of user {self.user}")
        self.days[traj.day] = traj

    def sorted_days(self) -> list:
        return [self.days[d] for d in sorted(self.days)]


def decouple(traj) -> tuple:
    """Split a trajectory (or a bare slot sequence) into ``(locations, durations)``.

    >>> decouple([1, 1, 1, 2, 2, 3, 1, 1])
    ((1, 2, 3, 1), (3, 2, 1, 2))
    """
    slots = traj.slots if isinstance(traj, DailyTrajectory) else traj
    locations, durations = [], []
    for loc, run in groupby(slots):
        locations.append(int(loc))
        durations.append(sum(1 for _ in run))
    return tuple(locations), tuple(durations)


def recouple(locations: Sequence[int], durations: Sequence[int], T: int) -> tuple:
    """Expand paired chains back into ``T`` slots."""
    if len(locations) != len(durations):
        raise ValueError(f"chain length mismatch: {len(locations)} locations, {len(durations)} durations")
    if len(locations) == 0:
        raise ValueError("empty chains")
    if any(int(d) < 1 for d in durations):
        raise ValueError(f"durations must be positive: {list(durations)}")
    if sum(int(d) for d in durations) != T:
        raise ValueError(f"durations sum to {sum(durations)}, expected {T}")
    slots = []
    for loc, dur in zip(locations, durations):
        slots.extend([int(loc)] * int(dur))
    return tuple(slots)


def is_valid_chain_pair(locations, durations, T: int) -> bool:
    if len(locations) == 0 or len(locations) != len(durations):
        return False
    if any(a == b for a, b in zip(locations, locations[1:])):
        return False
    return all(d >= 1 for d in durations) and sum(durations) == T


def history_window(history: UserHistory, k: int) -> tuple:
    """Days ``k-6 .. k`` of ``history`` as a list of 7 optional trajectories plus presence mask.

    Position ``i`` holds day ``k - 6 + i``; the most recent day is last.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    days: list[Optional[DailyTrajectory]] = []
    for d in range(k - WINDOW + 1, k + 1):
        days.append(history.days.get(d) if d >= 0 else None)
    mask = np.array([d is not None for d in days], dtype=bool)
    return days, mask


def weekday_of(day: int, epoch_weekday: int) -> int:
    return (epoch_weekday + day) % 7
