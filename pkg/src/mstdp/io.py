"""Readers and writers for trajectory JSONL, city, split and dataset header files."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

from .trajectory import DailyTrajectory, UserHistory


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetHeader:
    T: int
    width: int
    height: int
    n_admins: int
    epoch_weekday: int = 0
    cell_size_km: float = 1.0

    def __post_init__(self):
        if self.T not in (24, 48):
            raise DataFormatError(f"T must be 24 or 48, got {self.T}")
        if not 0 <= self.epoch_weekday <= 6:
            raise DataFormatError(f"epoch_weekday must be in [0, 6], got {self.epoch_weekday}")

    @property
    def n_cells(self) -> int:
        return self.width * self.height


def dump_json(obj, path) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def load_json(path):
    with open(path) as f:
        return json.load(f)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_header(header: DatasetHeader, path) -> None:
    dump_json(asdict(header), path)


def read_header(path) -> DatasetHeader:
    d = load_json(path)
    try:
        return DatasetHeader(**d)
    except TypeError as e:
        raise DataFormatError(f"{path}: bad dataset header: {e}") from None


def trajectory_record(traj: DailyTrajectory, predicted: bool = False) -> dict:
    rec = {"user": traj.user, "day": traj.day, "weekday": traj.weekday, "slots": list(traj.slots)}
    if predicted:
        rec["predicted"] = True
    return rec


def write_trajectories(histories, path, predicted: bool = False) -> None:
    """Write histories (dict or iterable of ``UserHistory``) as JSONL sorted by user then day."""
    items = histories.values() if isinstance(histories, dict) else histories
    lines = []
    for h in sorted(items, key=lambda h: h.user):
        for t in h.sorted_days():
            lines.append(json.dumps(trajectory_record(t, predicted), separators=(",", ":")))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_trajectories(path, T: int = None, n_cells: int = None) -> dict:
    """Parse a trajectory JSONL file into ``{user: UserHistory}``.

    Malformed records raise ``DataFormatError`` naming the offending line.
    """
    histories = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                user, day, weekday, slots = int(rec["user"]), int(rec["day"]), int(rec["weekday"]), rec["slots"]
            except (ValueError, KeyError, TypeError) as e:
                raise DataFormatError(f"{path}:{lineno}: malformed record ({e})") from None
            if not isinstance(slots, list) or not all(isinstance(s, int) for s in slots):
                raise DataFormatError(f"{path}:{lineno}: slots must be a list of integers")
            if T is not None and len(slots) != T:
                raise DataFormatError(f"{path}:{lineno}: expected {T} slots, got {len(slots)}")
            if n_cells is not None and any(s < 0 or s >= n_cells for s in slots):
                raise DataFormatError(f"{path}:{lineno}: unknown cell id (grid has {n_cells} cells)")
            try:
                traj = DailyTrajectory(user, day, weekday, slots)
                hist = histories.setdefault(user, UserHistory(user, T if T is not None else len(slots)))
                hist.add(traj)
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
    return histories
