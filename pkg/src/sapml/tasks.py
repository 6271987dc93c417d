"""Seeded episode samplers: sine regression, parameterized sine families and
synthetic N-way k-shot image classification.

All randomness flows from a master seed through :func:`episode_rng`, which
derives an independent generator per (stream, episode index), so meta-train,
meta-validation and meta-test streams never share draws.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

TRAIN, VALIDATION, TEST = 0, 1, 2
STREAMS = {"train": TRAIN, "val": VALIDATION, "test": TEST}

EPISODE_FORMAT = "sapml-episodes"
EPISODE_FORMAT_VERSION = 1


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


@dataclass
class Episode:
    """One task: a support set for adaptation and a query set for evaluation."""

    x_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    kind: str = "regression"
    n_way: int | None = None
    params: dict = field(default_factory=dict)

    @property
    def support(self) -> list[tuple]:
        return list(zip(self.x_support, self.y_support))

    @property
    def query(self) -> list[tuple]:
        return list(zip(self.x_query, self.y_query))

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "n_way": self.n_way,
            "params": self.params,
            "x_support": self.x_support.tolist(),
            "y_support": self.y_support.tolist(),
            "x_query": self.x_query.tolist(),
            "y_query": self.y_query.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        label_dtype = np.int64 if rec["kind"] == "classification" else np.float64
        return cls(
            x_support=np.asarray(rec["x_support"], dtype=np.float64),
            y_support=np.asarray(rec["y_support"], dtype=label_dtype),
            x_query=np.asarray(rec["x_query"], dtype=np.float64),
            y_query=np.asarray(rec["y_query"], dtype=label_dtype),
            kind=rec["kind"],
            n_way=rec["n_way"],
            params=rec["params"],
        )


# ---------------------------------------------------------------------------
# sine regression

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
INPUT_RANGE = (-5.0, 5.0)


@dataclass
class SineTaskSpec:
    """g(x) = amplitude * sin(frequency * x - phase) + offset."""

    amplitude: float = 1.0
    phase: float = 0.0
    frequency: float = 1.0
    offset: float = 0.0
    k_support: int = 5
    n_query: int = 50

    def __post_init__(self) -> None:
        if self.k_support < 1 or self.n_query < 1:
            raise ValueError("k_support and n_query must be >= 1")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.amplitude * np.sin(self.frequency * x - self.phase) + self.offset

    def episode(self, rng: np.random.Generator) -> Episode:
        xs = rng.uniform(*INPUT_RANGE, size=(self.k_support, 1))
        xq = rng.uniform(*INPUT_RANGE, size=(self.n_query, 1))
        params = {"amplitude": self.amplitude, "phase": self.phase,
                  "frequency": self.frequency, "offset": self.offset}
        return Episode(xs, self(xs), xq, self(xq), "regression", None, params)


def sample_sine_task(rng: np.random.Generator, k: int, n_query: int = 50,
                     amplitude: float | None = None, phase: float | None = None) -> Episode:
    """A * sin(x - p) with A ~ U[0.1, 5], p ~ U[0, pi]; either may be pinned."""
    if k < 1:
        raise ValueError("k must be >= 1")
    a = rng.uniform(*AMPLITUDE_RANGE) if amplitude is None else float(amplitude)
    p = rng.uniform(*PHASE_RANGE) if phase is None else float(phase)
    return SineTaskSpec(amplitude=a, phase=p, k_support=k, n_query=n_query).episode(rng)


# ---------------------------------------------------------------------------
# task families


@dataclass(frozen=True)
class FamilyRanges:
    amplitude: tuple[float, float] = AMPLITUDE_RANGE
    frequency: tuple[float, float] = (0.5, 2.0)
    phase: tuple[float, float] = PHASE_RANGE
    offset: tuple[float, float] = (-2.0, 2.0)


# values that leave the template g(x) = A sin(f x - p) + b equal to sin(x)
FIXED_VALUES = {"amplitude": 1.0, "frequency": 1.0, "phase": 0.0, "offset": 0.0}
FAMILY_PARAMS = ("amplitude", "frequency", "phase", "offset")


@dataclass(frozen=True)
class TaskFamily:
    vary_amplitude: bool = False
    vary_frequency: bool = False
    vary_phase: bool = False
    vary_offset: bool = False

    @property
    def varied(self) -> tuple[str, ...]:
        return tuple(name for name in FAMILY_PARAMS if getattr(self, f"vary_{name}"))

    @property
    def name(self) -> str:
        return "+".join(self.varied) or "none"

    @classmethod
    def from_name(cls, name: str) -> "TaskFamily":
        if name in ("", "none"):
            return cls()
        parts = name.split("+")
        unknown = set(parts) - set(FAMILY_PARAMS)
        if unknown:
            raise ValueError(f"unknown family parameters {sorted(unknown)}")
        return cls(**{f"vary_{p}": True for p in parts})


def enumerate_task_families() -> list[TaskFamily]:
    """All 16 combinations; bit i of the position varies FAMILY_PARAMS[i]."""
    out = []
    for i in range(16):
        flags = {f"vary_{name}": bool(i >> b & 1) for b, name in enumerate(FAMILY_PARAMS)}
        out.append(TaskFamily(**flags))
    return out


def sample_family_task(family: TaskFamily, rng: np.random.Generator, k: int = 20, n_query: int = 50,
                       ranges: FamilyRanges = FamilyRanges()) -> Episode:
    values = dict(FIXED_VALUES)
    for name in family.varied:
        values[name] = float(rng.uniform(*getattr(ranges, name)))
    spec = SineTaskSpec(values["amplitude"], values["phase"], values["frequency"], values["offset"],
                        k_support=k, n_query=n_query)
    ep = spec.episode(rng)
    ep.params["family"] = family.name
    return ep


# ---------------------------------------------------------------------------
# synthetic images


def _bar(side: int, angle: float, offset: float, width: float = 0.6) -> np.ndarray:
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    # signed distance to a line through the (shifted) center at ``angle``
    dist = -(xx - c) * np.sin(angle) + (yy - c) * np.cos(angle) - offset
    return np.exp(-0.5 * (dist / width) ** 2)


def _blob(side: int, cy: float, cx: float, sigma: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    return np.exp(-0.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / sigma ** 2)


def pattern_catalog(side: int) -> list[tuple[str, np.ndarray]]:
    """Class templates: 24 oriented bars (8 angles x 3 offsets) and a 4x4 grid of blobs."""
    pats = []
    for a, off in itertools.product(range(8), (-side / 5.0, 0.0, side / 5.0)):
        pats.append((f"bar{a}_{off:+.1f}", _bar(side, a * np.pi / 8, off)))
    grid = [(side - 1) * (i + 0.5) / 4 for i in range(4)]
    for cy, cx in itertools.product(grid, grid):
        pats.append((f"blob{cy:.1f}_{cx:.1f}", _blob(side, cy, cx)))
    return pats


_CATALOGS: dict[int, list] = {}


def _catalog(side: int):
    if side not in _CATALOGS:
        _CATALOGS[side] = pattern_catalog(side)
    return _CATALOGS[side]


def sample_synthetic_image_task(rng: np.random.Generator, n_way: int, k: int, side: int = 8,
                                n_query: int = 15, noise: float = 0.1) -> Episode:
    """N distinct templates, each rendered k (support) and n_query (query) times with
    additive gaussian noise; images are (n, 1, side, side), labels 0..N-1."""
    if n_way < 2:
        raise ValueError("need at least 2 classes")
    if side < 8:
        raise ValueError("side must be >= 8")
    catalog = _catalog(side)
    if n_way > len(catalog):
        raise ValueError(f"{n_way}-way exceeds the {len(catalog)} available patterns")
    chosen = rng.choice(len(catalog), size=n_way, replace=False)
    templates = np.stack([catalog[i][1] for i in chosen])

    def render(count):
        labels = np.repeat(np.arange(n_way), count)
        imgs = templates[labels] + noise * rng.normal(size=(labels.size, side, side))
        return imgs[:, None, :, :], labels

    xs, ys = render(k)
    xq, yq = render(n_query)
    params = {"patterns": [catalog[i][0] for i in chosen], "noise": noise}
    return Episode(xs, ys, xq, yq, "classification", n_way, params)


# ---------------------------------------------------------------------------
# episode dumps


def dump_episodes(episodes: Iterable[Episode], path: str | Path) -> int:
    """Write a versioned line-delimited JSON file; returns the episode count."""
    n = 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": EPISODE_FORMAT, "version": EPISODE_FORMAT_VERSION}) + "\n")
        for ep in episodes:
            fh.write(json.dumps(ep.to_record()) + "\n")
            n += 1
    return n


def load_episodes(path: str | Path) -> Iterator[Episode]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != EPISODE_FORMAT:
            raise ValueError(f"{path}: not an episode dump")
        if header.get("version") != EPISODE_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported episode format version {header.get('version')}")
        for line in fh:
            if line.strip():
                yield Episode.from_record(json.loads(line))


__all__ = [
    "Episode", "SineTaskSpec", "TaskFamily", "FamilyRanges", "episode_rng", "sample_sine_task",
    "enumerate_task_families", "sample_family_task", "sample_synthetic_image_task", "pattern_catalog",
    "dump_episodes", "load_episodes", "TRAIN", "VALIDATION", "TEST", "STREAMS",
]
