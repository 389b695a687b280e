"""Shoebox ground truth by the lattice image method, and dataset files.

The room occupies ``[0, Lx] x [0, Ly] x [0, Lz]``.  Walls are indexed
``0..5`` as ``x-, x+, y-, y+, z-, z+``.  Every image source of order up
to ``max_order`` is a virtual transmitter; in a convex shoebox each one
yields exactly one specular path and no visibility test is needed.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .encoding import SceneBounds
from .physics import (AIR, REFLECTION, Interaction, Material, PolarizationWeights, ReflectionEvent,
                      free_space_amplitude, path_phasor, path_zeta)
from .sampling import angles_from_direction, direction_from_angles

FORMAT_MAGIC = b"RFDS"
FORMAT_VERSION = 1
WALL_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")
SPLIT_NAMES = ("train", "val", "test")
_PATH_COLUMNS = ("sample", "distance", "theta", "phi", "noisy_theta", "noisy_phi", "order", "zeta",
                 "gain_re", "gain_im", "inc0", "inc1", "inc2", "wall0", "wall1", "wall2",
                 "image_x", "image_y", "image_z")
_MAX_STORED_ORDER = 3


class EmptyChannelError(RuntimeError):
    """Receiver has no propagation path; callers drop such receivers."""


@dataclass(frozen=True)
class Room:
    dims: tuple[float, float, float]
    wall_materials: tuple[Material, ...]
    carrier: float

    def __post_init__(self):
        dims = tuple(float(v) for v in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "wall_materials", tuple(self.wall_materials))
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dimensions must be positive, got {dims}")
        if len(self.wall_materials) != 6:
            raise ValueError("a shoebox room needs six wall materials")
        if self.carrier <= 0:
            raise ValueError("carrier frequency must be positive")

    @classmethod
    def uniform(cls, dims, material: Material, carrier: float) -> "Room":
        return cls(tuple(dims), (material,) * 6, carrier)

    @property
    def bounds(self) -> SceneBounds:
        return SceneBounds.from_dims(self.dims)

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dims) - margin))


@dataclass(frozen=True)
class PathRecord:
    distance: float
    doa: tuple[float, float]
    reflection_order: int
    incidence_angles: tuple[float, ...]
    walls: tuple[int, ...]
    zeta: float
    gain: complex
    image: tuple[float, float, float]

    @property
    def delay(self) -> float:
        from .physics import C0

        return self.distance / C0


@dataclass(frozen=True)
class ChannelSample:
    receiver: tuple[float, float, float]
    paths: tuple[PathRecord, ...]
    cfr: complex
    noisy_doas: tuple[tuple[float, float], ...]
    negative_doas: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class GenerationConfig:
    max_order: int = 3
    n_negatives: int = 10
    doa_noise_deg: float = 0.1
    negative_margin_deg: float = 1.0
    receiver_margin: float = 0.1
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # drop paths this many dB below the strongest one at the receiver (None keeps all)
    min_relative_power_db: float | None = None
    w_perp: float = 0.5

    def __post_init__(self):
        if not 0 <= self.max_order <= _MAX_STORED_ORDER:
            raise ValueError(f"max_order must lie in [0, {_MAX_STORED_ORDER}]")
        if self.n_negatives < 0:
            raise ValueError("n_negatives must be non-negative")
        if len(self.split) != 3 or min(self.split) < 0 or not np.isclose(sum(self.split), 1.0):
            raise ValueError("split fractions must be non-negative and sum to 1")

    @property
    def weights(self) -> PolarizationWeights:
        return PolarizationWeights(self.w_perp, 1.0 - self.w_perp)


@dataclass
class Dataset:
    room: Room
    tx: tuple[float, float, float]
    samples: list[ChannelSample]
    splits: tuple[int, ...]
    seed: int
    config: GenerationConfig = field(default_factory=GenerationConfig)
    n_requested: int = 0
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if len(self.splits) != len(self.samples):
            raise ValueError("every sample needs a split label")

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self.samples))
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}; choose from {SPLIT_NAMES + ('all',)}")
        code = SPLIT_NAMES.index(split)
        return np.flatnonzero(np.asarray(self.splits) == code)


def _image_coordinate(src: float, length: float, n: int) -> float:
    if n % 2 == 0:
        return n * length + src
    return (n + 1) * length - src


def _bounce_walls(img, rx, dims, n):
    """Wall indices hit along the unfolded segment, ordered from the source."""
    hits = []
    for axis in range(3):
        if n[axis] == 0:
            continue
        lo, hi = sorted((img[axis], rx[axis]))
        k_lo = int(np.floor(lo / dims[axis])) + 1
        k_hi = int(np.ceil(hi / dims[axis])) - 1
        for k in range(k_lo, k_hi + 1):
            s = (k * dims[axis] - img[axis]) / (rx[axis] - img[axis])
            hits.append((s, 2 * axis + (k % 2), axis))
    hits.sort()
    return hits


def image_method_paths(room: Room, tx, rx, max_order: int = 3,
                       weights: PolarizationWeights = PolarizationWeights()) -> list[PathRecord]:
    """Enumerate all specular paths with at most ``max_order`` reflections."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    if not room.contains(tx):
        raise ValueError(f"transmitter {tx.tolist()} outside the room")
    if not room.contains(rx):
        raise ValueError(f"receiver {rx.tolist()} outside the room")
    dims = room.dims
    paths = []
    orders = range(-max_order, max_order + 1)
    for n in itertools.product(orders, orders, orders):
        order = sum(abs(v) for v in n)
        if order > max_order:
            continue
        img = np.array([_image_coordinate(tx[a], dims[a], n[a]) for a in range(3)])
        vec = img - rx
        dist = float(np.linalg.norm(vec))
        hits = _bounce_walls(img, rx, dims, n)
        if len(hits) != order:
            raise AssertionError("lattice bookkeeping error")
        cos_axis = np.abs(vec) / dist
        angles = tuple(float(np.arccos(cos_axis[axis])) for _, _, axis in hits)
        walls = tuple(w for _, w, _ in hits)
        events = [Interaction(REFLECTION, ReflectionEvent(a, AIR, room.wall_materials[w], room.carrier))
                  for a, w in zip(angles, walls)]
        zeta = path_zeta(events, weights)
        theta, phi = angles_from_direction(vec / dist)
        gain = zeta * free_space_amplitude(dist, room.carrier) * path_phasor(dist, room.carrier)
        paths.append(PathRecord(dist, (float(theta), float(phi)), order, angles, walls, float(zeta),
                                complex(gain), tuple(float(v) for v in img)))
    paths.sort(key=lambda p: (p.distance, p.walls))
    return paths


def _angular_separation(theta1, phi1, theta2, phi2):
    d1 = direction_from_angles(theta1, phi1)
    d2 = direction_from_angles(theta2, phi2)
    return np.arccos(np.clip(d1 @ d2.T, -1.0, 1.0))


def draw_negative_doas(true_doas, count: int, margin_deg: float, rng) -> list[tuple[float, float]]:
    """Uniform directions on the sphere at least ``margin_deg`` from every true DoA."""
    true_doas = np.asarray(true_doas, dtype=float).reshape(-1, 2)
    margin = np.deg2rad(margin_deg)
    out = []
    while len(out) < count:
        z = rng.uniform(-1.0, 1.0)
        phi = rng.uniform(-np.pi, np.pi)
        theta = float(np.arccos(z))
        if true_doas.size:
            sep = _angular_separation(np.array([theta]), np.array([phi]), true_doas[:, 0], true_doas[:, 1])
            if np.min(sep) < margin:
                continue
        out.append((theta, float(phi)))
    return out


def build_sample(room: Room, tx, rx, rng, cfg: GenerationConfig = GenerationConfig()) -> ChannelSample:
    paths = image_method_paths(room, tx, rx, cfg.max_order, cfg.weights)
    if cfg.min_relative_power_db is not None and paths:
        strongest = max(abs(p.gain) for p in paths)
        keep = strongest * 10.0 ** (-cfg.min_relative_power_db / 20.0)
        paths = [p for p in paths if abs(p.gain) >= keep]
    if not paths:
        raise EmptyChannelError(f"no path reaches receiver {tuple(rx)}")
    cfr = complex(sum(p.gain for p in paths))
    doas = np.array([p.doa for p in paths])
    half = np.deg2rad(cfg.doa_noise_deg)
    noisy = doas + rng.uniform(-half, half, size=doas.shape) if half > 0 else doas.copy()
    negatives = draw_negative_doas(doas, cfg.n_negatives, cfg.negative_margin_deg, rng)
    return ChannelSample(tuple(float(v) for v in rx), tuple(paths), cfr,
                         tuple((float(a), float(b)) for a, b in noisy), tuple(negatives))


def split_labels(n: int, fractions, rng) -> tuple[int, ...]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    labels = np.full(n, 2, dtype=int)
    perm = rng.permutation(n)
    labels[perm[:n_train]] = 0
    labels[perm[n_train:n_train + n_val]] = 1
    return tuple(int(v) for v in labels)


def generate_dataset(room: Room, tx, n_receivers: int, seed: int,
                     cfg: GenerationConfig = GenerationConfig()) -> Dataset:
    """Receivers uniform in the room (minus a wall margin), one sample each."""
    if n_receivers < 1:
        raise ValueError("need at least one receiver")
    tx = tuple(float(v) for v in tx)
    if not room.contains(tx):
        raise ValueError(f"transmitter {tx} outside the room")
    master = np.random.default_rng([seed, 0])
    lo = cfg.receiver_margin
    hi = np.asarray(room.dims) - cfg.receiver_margin
    positions = master.uniform(lo, hi, size=(n_receivers, 3))
    samples = []
    for i, rx in enumerate(positions):
        try:
            samples.append(build_sample(room, tx, rx, np.random.default_rng([seed, 1, i]), cfg))
        except EmptyChannelError:
            continue
    splits = split_labels(len(samples), cfg.split, np.random.default_rng([seed, 2]))
    return Dataset(room, tx, samples, splits, int(seed), cfg, n_receivers)


# -- persistence ----------------------------------------------------------------------------


def _header(ds: Dataset) -> dict:
    cfg = asdict(ds.config)
    cfg["split"] = list(cfg["split"])
    return {
        "kind": "shoebox-channel-dataset",
        "room": {"dims": list(ds.room.dims), "carrier": ds.room.carrier,
                 "walls": [m.to_dict() for m in ds.room.wall_materials]},
        "tx": list(ds.tx),
        "seed": ds.seed,
        "n_requested": ds.n_requested,
        "n_samples": len(ds.samples),
        "generation": cfg,
    }


def dataset_arrays(ds: Dataset) -> dict[str, np.ndarray]:
    rows = []
    neg = []
    for i, s in enumerate(ds.samples):
        for p, noisy in zip(s.paths, s.noisy_doas):
            inc = list(p.incidence_angles) + [np.nan] * (_MAX_STORED_ORDER - p.reflection_order)
            walls = list(p.walls) + [-1] * (_MAX_STORED_ORDER - p.reflection_order)
            rows.append([i, p.distance, p.doa[0], p.doa[1], noisy[0], noisy[1], p.reflection_order,
                         p.zeta, p.gain.real, p.gain.imag, *inc, *walls, *p.image])
        for theta, phi in s.negative_doas:
            neg.append([i, theta, phi])
    return {
        "receivers": np.array([s.receiver for s in ds.samples], dtype=float).reshape(-1, 3),
        "cfr": np.array([[s.cfr.real, s.cfr.imag] for s in ds.samples], dtype=float).reshape(-1, 2),
        "splits": np.array(ds.splits, dtype=float),
        "paths": np.array(rows, dtype=float).reshape(-1, len(_PATH_COLUMNS)),
        "negatives": np.array(neg, dtype=float).reshape(-1, 3),
    }


def save_dataset(ds: Dataset, path) -> None:
    container.write(path, FORMAT_MAGIC, FORMAT_VERSION, _header(ds), dataset_arrays(ds))


def load_dataset(path) -> Dataset:
    header, arrays = container.read(path, FORMAT_MAGIC, FORMAT_VERSION)
    room_h = header["room"]
    room = Room(tuple(room_h["dims"]), tuple(Material(**m) for m in room_h["walls"]), room_h["carrier"])
    gen = dict(header["generation"])
    gen["split"] = tuple(gen["split"])
    cfg = GenerationConfig(**gen)
    n = header["n_samples"]
    paths = arrays["paths"]
    negs = arrays["negatives"]
    by_sample = [[] for _ in range(n)]
    for row in paths:
        by_sample[int(row[0])].append(row)
    neg_by_sample = [[] for _ in range(n)]
    for row in negs:
        neg_by_sample[int(row[0])].append((float(row[1]), float(row[2])))
    samples = []
    for i in range(n):
        recs = []
        noisy = []
        for row in by_sample[i]:
            order = int(row[6])
            recs.append(PathRecord(
                float(row[1]), (float(row[2]), float(row[3])), order,
                tuple(float(v) for v in row[10:10 + order]),
                tuple(int(v) for v in row[13:13 + order]),
                float(row[7]), complex(float(row[8]), float(row[9])),
                tuple(float(v) for v in row[16:19])))
            noisy.append((float(row[4]), float(row[5])))
        cfr = complex(float(arrays["cfr"][i, 0]), float(arrays["cfr"][i, 1]))
        samples.append(ChannelSample(tuple(float(v) for v in arrays["receivers"][i]), tuple(recs), cfr,
                                     tuple(noisy), tuple(neg_by_sample[i])))
    splits = tuple(int(v) for v in arrays["splits"])
    return Dataset(room, tuple(header["tx"]), samples, splits, int(header["seed"]), cfg,
                   int(header["n_requested"]))


def export_paths_csv(ds: Dataset, path) -> None:
    """One row per path, for inspection in external tools."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["receiver_id", "split", "rx_x", "rx_y", "rx_z", "distance_m", "delay_s", "order",
                         "walls", "theta", "phi", "noisy_theta", "noisy_phi", "zeta", "gain_re", "gain_im",
                         "gain_abs"])
        for i, s in enumerate(ds.samples):
            for p, noisy in zip(s.paths, s.noisy_doas):
                writer.writerow([i, SPLIT_NAMES[ds.splits[i]], *s.receiver, repr(p.distance), repr(p.delay),
                                 p.reflection_order, "|".join(WALL_NAMES[w] for w in p.walls),
                                 repr(p.doa[0]), repr(p.doa[1]), repr(noisy[0]), repr(noisy[1]),
                                 repr(p.zeta), repr(p.gain.real), repr(p.gain.imag), repr(abs(p.gain))])
