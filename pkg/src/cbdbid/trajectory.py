"""Trajectories, datasets, trajectory properties and dataset files."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .auction import BUDGET, STATE_DIM
from .errors import (
    ChecksumError,
    FileFormatError,
    ShapeError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)

STD_FLOOR = 1e-6
FORMAT_NAME = "cbd-dataset"
FORMAT_VERSION = 1


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, D)
    actions: np.ndarray  # (T, A)
    rewards: np.ndarray  # (T,)
    y: float = 0.0
    period: int = 0
    policy: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        a = np.asarray(self.actions, dtype=np.float64)
        self.actions = a[:, None] if a.ndim == 1 else a
        T = self.rewards.shape[0]
        if self.states.ndim != 2 or self.states.shape[0] != T + 1:
            raise ShapeError(f"need T+1={T + 1} states, got {self.states.shape}")
        if self.actions.shape[0] != T:
            raise ShapeError(f"need T={T} actions, got {self.actions.shape}")
        for name in ("states", "actions", "rewards"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite {name}")
        if not np.isfinite(self.y):
            raise ValidationError("non-finite condition")

    @property
    def T(self) -> int:
        return self.rewards.shape[0]

    @property
    def budget(self) -> float:
        return float(self.states[0, BUDGET])

    def costs(self) -> np.ndarray:
        return spend_per_interval(self.states)


def spend_per_interval(states) -> np.ndarray:
    """Budget consumed in each interval, read off the budget_left feature. Works on (..., T+1, D)."""
    b = np.asarray(states)[..., BUDGET]
    return b[..., :-1] - b[..., 1:]


# ---------------------------------------------------------------------------
# properties


@dataclass(frozen=True)
class PropertyFunctional:
    TAGS = ("return", "smoothness", "early_spend")
    tag: str = "return"

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValidationError(f"unknown property functional {self.tag!r}")


def early_spend(costs) -> float:
    """Share of total spend that happened in the first half of the period (0 if nothing spent)."""
    costs = np.asarray(costs, dtype=np.float64)
    total = costs.sum()
    if total == 0:
        return 0.0
    return float(costs[: costs.shape[0] // 2].sum() / total)


def spend_variance(costs, budget) -> float:
    """Variance of per-interval spend expressed as a fraction of the budget."""
    return float(np.var(np.asarray(costs, dtype=np.float64) / budget))


def raw_return(traj: Trajectory) -> float:
    return float(traj.rewards.sum())


def compute_condition(traj: Trajectory, f: PropertyFunctional = PropertyFunctional(), ret_range=None) -> float:
    """Scalar property of a trajectory.

    ``return``: summed reward min-max scaled with ``ret_range=(min, max)`` (raw
    sum if no range is given). ``early_spend``: first-half spend share.
    ``smoothness``: variance of per-interval spend / budget.
    """
    if f.tag == "return":
        r = raw_return(traj)
        if ret_range is None:
            return r
        lo, hi = ret_range
        return 0.0 if hi <= lo else float((r - lo) / (hi - lo))
    if f.tag == "early_spend":
        return early_spend(traj.costs())
    return spend_variance(traj.costs(), traj.budget)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: np.ndarray  # bool per feature: std was floored

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "clamped": self.clamped.tolist()}

    @classmethod
    def from_json(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), np.asarray(d["clamped"], bool))


def fit_stats(states: np.ndarray) -> NormStats:
    """Per-feature z-score statistics pooled over every state row of ``states`` (..., D)."""
    flat = np.asarray(states, dtype=np.float64).reshape(-1, states.shape[-1])
    if flat.shape[0] == 0:
        raise ValidationError("cannot fit normalisation on an empty dataset")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    clamped = std < STD_FLOOR
    return NormStats(mean, np.where(clamped, STD_FLOOR, std), clamped)


def apply_stats(states, stats: NormStats):
    return (np.asarray(states, dtype=np.float64) - stats.mean) / stats.std


def denormalize_states(states, stats: NormStats):
    return np.asarray(states, dtype=np.float64) * stats.std + stats.mean


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    stats: NormStats | None = None
    ret_min: float = 0.0
    ret_max: float = 1.0
    functional: str = "return"

    def __len__(self):
        return len(self.trajectories)

    @property
    def T(self) -> int:
        return self.trajectories[0].T

    def states(self) -> np.ndarray:
        return np.stack([t.states for t in self.trajectories])

    def actions(self) -> np.ndarray:
        return np.stack([t.actions for t in self.trajectories])

    def conditions(self) -> np.ndarray:
        return np.array([t.y for t in self.trajectories])

    @property
    def ret_range(self):
        return (self.ret_min, self.ret_max)

    def condition(self, traj: Trajectory, tag="return") -> float:
        return compute_condition(traj, PropertyFunctional(tag), self.ret_range)

    def normalized_states(self) -> np.ndarray:
        if self.stats is None:
            raise ValidationError("dataset has no normalisation statistics; call finalize()")
        return apply_stats(self.states(), self.stats)

    def finalize(self) -> "Dataset":
        """Fit normalisation and return-range statistics, recompute every stored y."""
        if not self.trajectories:
            raise ValidationError("empty dataset")
        T = {t.T for t in self.trajectories}
        if len(T) != 1:
            raise ShapeError(f"trajectories of differing lengths {sorted(T)}")
        rets = np.array([raw_return(t) for t in self.trajectories])
        self.ret_min, self.ret_max = float(rets.min()), float(rets.max())
        self.stats = fit_stats(self.states())
        for t in self.trajectories:
            t.y = compute_condition(t, PropertyFunctional(self.functional), self.ret_range)
        return self

    def subset(self, idx) -> "Dataset":
        return replace(self, trajectories=[self.trajectories[i] for i in idx])


def normalize_states(dataset: Dataset):
    """Fit stats on ``dataset`` and return ``(normalised states array, stats)``."""
    if not dataset.trajectories:
        raise ValidationError("empty dataset")
    stats = fit_stats(dataset.states())
    return apply_stats(dataset.states(), stats), stats


# ---------------------------------------------------------------------------
# files: JSON lines with a header line, statistics in a sidecar file


def _record(t: Trajectory) -> str:
    return json.dumps(
        {
            "period": t.period,
            "policy": t.policy,
            "states": t.states.tolist(),
            "actions": t.actions.tolist(),
            "rewards": t.rewards.tolist(),
            "y": t.y,
        },
        separators=(",", ":"),
    )


def stats_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".stats.json")


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    if path.suffix == ".npz":
        return _save_npz(dataset, path)
    lines = [_record(t) for t in dataset.trajectories]
    body = "".join(line + "\n" for line in lines)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "count": len(lines),
        "sha256": hashlib.sha256(body.encode()).hexdigest(),
    }
    path.write_text(json.dumps(header, sort_keys=True) + "\n" + body)
    stats_path(path).write_text(json.dumps(_sidecar(dataset), sort_keys=True))


def _sidecar(dataset: Dataset) -> dict:
    return {
        "stats": None if dataset.stats is None else dataset.stats.to_json(),
        "ret_min": dataset.ret_min,
        "ret_max": dataset.ret_max,
        "functional": dataset.functional,
    }


def _apply_sidecar(dataset: Dataset, side: dict) -> Dataset:
    dataset.stats = None if side.get("stats") is None else NormStats.from_json(side["stats"])
    dataset.ret_min = side.get("ret_min", 0.0)
    dataset.ret_max = side.get("ret_max", 1.0)
    dataset.functional = side.get("functional", "return")
    return dataset


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".npz":
        return _load_npz(path)
    text = path.read_text()
    head, _, body = text.partition("\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError:
        raise FileFormatError(f"{path}: unreadable header") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise FileFormatError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {header.get('version')}, expected {FORMAT_VERSION}")
    lines = body.split("\n")
    complete = body.endswith("\n") or body == ""
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < header["count"] or (not complete and len(lines) <= header["count"]):
        raise TruncatedFileError(f"{path}: expected {header['count']} records, file is cut short")
    if len(lines) > header["count"]:
        raise FileFormatError(f"{path}: more records than the header declares")
    if hashlib.sha256(body.encode()).hexdigest() != header["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch")
    trajs = []
    for line in lines:
        d = json.loads(line)
        trajs.append(
            Trajectory(
                np.array(d["states"], dtype=np.float64).reshape(-1, STATE_DIM),
                np.array(d["actions"], dtype=np.float64),
                np.array(d["rewards"], dtype=np.float64),
                d["y"],
                d["period"],
                d.get("policy", ""),
            )
        )
    ds = Dataset(trajs)
    side = stats_path(path)
    if side.exists():
        _apply_sidecar(ds, json.loads(side.read_text()))
    return ds


def _save_npz(dataset: Dataset, path: Path) -> None:
    n = len(dataset)
    side = json.dumps(_sidecar(dataset), sort_keys=True)
    arrays = {
        "format": np.array([FORMAT_NAME, str(FORMAT_VERSION)]),
        "sidecar": np.array(side),
        "policy": np.array([t.policy for t in dataset.trajectories] or [""])[:n],
    }
    if n:
        arrays.update(
            states=dataset.states(),
            actions=dataset.actions(),
            rewards=np.stack([t.rewards for t in dataset.trajectories]),
            y=dataset.conditions(),
            period=np.array([t.period for t in dataset.trajectories]),
        )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_npz(path: Path) -> Dataset:
    try:
        z = np.load(path, allow_pickle=False)
        fmt = z["format"]
    except Exception as exc:  # zipfile/ValueError/KeyError all mean "not ours"
        raise FileFormatError(f"{path}: not a binary dataset ({exc})") from None
    if str(fmt[0]) != FORMAT_NAME:
        raise FileFormatError(f"{path}: not a {FORMAT_NAME} file")
    if int(fmt[1]) != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {fmt[1]}, expected {FORMAT_VERSION}")
    trajs = []
    if "states" in z.files:
        # NpzFile re-reads a member on every subscript, so pull each array once
        a = {k: z[k] for k in ("states", "actions", "rewards", "y", "period", "policy")}
        for i in range(a["states"].shape[0]):
            trajs.append(
                Trajectory(a["states"][i], a["actions"][i], a["rewards"][i], float(a["y"][i]),
                           int(a["period"][i]), str(a["policy"][i]))
            )
    return _apply_sidecar(Dataset(trajs), json.loads(str(z["sidecar"])))
