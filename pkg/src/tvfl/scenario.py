"""Synthetic cooperative-spectrum-sensing data.

Primary users (PUs) and secondary users (SUs) wander inside axis-aligned
rectangles on a hilly terrain. Every time slot yields one sample: each SU sees
its own 3D location plus ``minislots_per_slot`` received-signal-strength (RSS)
readings, and the label is ``[P_1, P_2, x_1, y_1, z_1, x_2, y_2, z_2]``.

Randomness is keyed by ``(seed, slot index)`` for the PU state and by
``(seed, slot index, SU index)`` for each SU, so datasets do not depend on how
generation is chunked and a dataset with more SUs extends one with fewer.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CoincidentPositionError,
    ConfigError,
    DimensionMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
)

LABEL_DIM_PER_PU = 4
MAX_RESAMPLE = 32

# Rectangles are (x_min, y_min, x_max, y_max) in meters.
DEFAULT_PU_REGIONS = (
    (160.0, 260.0, 180.0, 280.0),
    (220.0, 120.0, 240.0, 140.0),
)
DEFAULT_SU_REGIONS = (
    (180.0, 340.0, 220.0, 380.0),
    (180.0, 20.0, 220.0, 60.0),
    (60.0, 180.0, 100.0, 220.0),
    (300.0, 180.0, 340.0, 220.0),
    (60.0, 320.0, 100.0, 360.0),
    (300.0, 320.0, 340.0, 360.0),
    (60.0, 40.0, 100.0, 80.0),
    (300.0, 40.0, 340.0, 80.0),
)

SHADOWING_MODES = ("static", "per_slot")

_STREAM_SLOT = 0
_STREAM_SHADOW = 1


def terrain_height(x, y):
    """Terrain elevation ``10 (sin(x/100) + cos(y/100))`` in meters."""
    return 10.0 * (np.sin(np.asarray(x, dtype=float) / 100.0) + np.cos(np.asarray(y, dtype=float) / 100.0))


@dataclass(frozen=True)
class ScenarioConfig:
    area_side: float = 400.0
    num_su: int = 4
    num_pu: int = 2
    power_levels: tuple = (1.0, 2.0, 3.0)
    pathloss_exponent: float = 4.0
    shadowing_std_db: float = 3.0
    shadowing_mode: str = "static"
    minislots_per_slot: int = 200
    num_samples: int = 60000
    train_count: int = 50000
    rss_noise_floor: float = 1e-12
    su_regions: tuple | None = None
    pu_regions: tuple | None = None
    server_position: tuple = (200.0, 200.0)
    rng_seed: int = 0

    def __post_init__(self):
        su = self.su_regions
        if su is None:
            if self.num_su > len(DEFAULT_SU_REGIONS):
                raise ConfigError(f"no default regions for {self.num_su} SUs; give su_regions")
            su = DEFAULT_SU_REGIONS[: self.num_su]
        pu = self.pu_regions
        if pu is None:
            if self.num_pu > len(DEFAULT_PU_REGIONS):
                raise ConfigError(f"no default regions for {self.num_pu} PUs; give pu_regions")
            pu = DEFAULT_PU_REGIONS[: self.num_pu]
        object.__setattr__(self, "su_regions", tuple(tuple(float(v) for v in r) for r in su))
        object.__setattr__(self, "pu_regions", tuple(tuple(float(v) for v in r) for r in pu))
        object.__setattr__(self, "power_levels", tuple(float(v) for v in self.power_levels))
        object.__setattr__(self, "server_position", tuple(float(v) for v in self.server_position))
        self.validate()

    def validate(self) -> None:
        if not self.area_side > 0:
            raise ConfigError("area_side must be positive")
        if not self.pathloss_exponent > 0:
            raise ConfigError("pathloss_exponent must be positive")
        if self.minislots_per_slot < 1:
            raise ConfigError("minislots_per_slot must be at least 1")
        if not 0 < self.train_count < self.num_samples:
            raise ConfigError("need 0 < train_count < num_samples")
        if not self.power_levels or min(self.power_levels) <= 0:
            raise ConfigError("power_levels must be non-empty and positive")
        if self.shadowing_std_db < 0:
            raise ConfigError("shadowing_std_db must be non-negative")
        if self.shadowing_mode not in SHADOWING_MODES:
            raise ConfigError(f"shadowing_mode must be one of {SHADOWING_MODES}")
        if self.rss_noise_floor < 0:
            raise ConfigError("rss_noise_floor must be non-negative")
        if len(self.su_regions) != self.num_su:
            raise ConfigError(f"num_su={self.num_su} but {len(self.su_regions)} SU regions")
        if len(self.pu_regions) != self.num_pu:
            raise ConfigError(f"num_pu={self.num_pu} but {len(self.pu_regions)} PU regions")
        for name, regions in (("su_regions", self.su_regions), ("pu_regions", self.pu_regions)):
            for r in regions:
                if len(r) != 4:
                    raise ConfigError(f"{name}: rectangles need 4 numbers, got {r}")
                x0, y0, x1, y1 = r
                if not (0 <= x0 <= x1 <= self.area_side and 0 <= y0 <= y1 <= self.area_side):
                    raise ConfigError(f"{name}: rectangle {r} is not inside [0, {self.area_side}]^2")

    @property
    def feature_dim(self) -> int:
        return 3 + self.minislots_per_slot

    @property
    def label_dim(self) -> int:
        return LABEL_DIM_PER_PU * self.num_pu

    @property
    def test_count(self) -> int:
        return self.num_samples - self.train_count

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("su_regions", "pu_regions"):
            d[key] = [list(r) for r in d[key]]
        d["power_levels"] = list(d["power_levels"])
        d["server_position"] = list(d["server_position"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("su_regions", "pu_regions"):
            if kw.get(key) is not None:
                kw[key] = tuple(tuple(r) for r in kw[key])
        for key in ("power_levels", "server_position"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def slot_rng(seed: int, slot_index: int) -> np.random.Generator:
    """Generator for the PU state of one time slot."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(_STREAM_SLOT, slot_index))))


def su_rng(seed: int, slot_index: int, su_index: int) -> np.random.Generator:
    """Generator for SU ``su_index`` in one time slot (position, shadowing, fading).

    Keyed per SU so a dataset with more SUs extends one with fewer.
    """
    key = (_STREAM_SLOT, slot_index, su_index)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def sample_positions(regions: Sequence[Sequence[float]], rng: np.random.Generator) -> np.ndarray:
    """Draw one 3D position per rectangle, uniform in (x, y), on the terrain.

    A zero-area rectangle pins its entity to the rectangle's corner.
    """
    r = np.asarray(regions, dtype=float).reshape(-1, 4)
    x = rng.uniform(r[:, 0], r[:, 2])
    y = rng.uniform(r[:, 1], r[:, 3])
    return np.column_stack([x, y, terrain_height(x, y)])


def _received(pu_positions, pu_powers, su_positions, shadowing, fading, kappa, noise_floor):
    # shadowing: (J, K), fading: (K, J, m) -> rss (K, m)
    diff = su_positions[:, None, :] - pu_positions[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))  # (K, J)
    if np.any(dist == 0):
        raise CoincidentPositionError("a PU and an SU share a position")
    gain = np.asarray(pu_powers, float)[None, :] * shadowing.T * dist ** (-kappa)  # (K, J)
    return np.einsum("kj,kjm->km", gain, fading) + noise_floor


def synthesize_rss(pu_positions, pu_powers, su_position, slot_shadowing, rng=None, *,
                   pathloss_exponent=4.0, minislots=200, noise_floor=1e-12, fading=None):
    """RSS seen by one SU over one slot, in linear power.

    ``rss[m] = sum_j P_j phi_j d_j^-kappa |h_jm|^2 + noise_floor`` with
    ``|h_jm|^2 ~ Exp(1)`` per mini-slot and PU. Pass ``fading`` (shape
    ``(num_pu, minislots)``) to bypass the random draw.
    """
    pu_positions = np.asarray(pu_positions, dtype=float).reshape(-1, 3)
    su_position = np.asarray(su_position, dtype=float).reshape(1, 3)
    j = pu_positions.shape[0]
    shadow = np.asarray(slot_shadowing, dtype=float).reshape(j, 1)
    if fading is None:
        if rng is None:
            raise ValueError("either rng or fading must be given")
        fading = rng.standard_exponential((j, minislots))
    fading = np.asarray(fading, dtype=float).reshape(1, j, -1)
    return _received(pu_positions, pu_powers, su_position, shadow, fading,
                     pathloss_exponent, noise_floor)[0]


def static_shadowing(config: ScenarioConfig) -> np.ndarray:
    """Per PU-SU pair log-normal shadowing, fixed for the whole dataset.

    Column ``k`` only depends on ``(seed, k)``, so adding SUs keeps the
    existing pairs unchanged.
    """
    out = np.empty((config.num_pu, config.num_su))
    for k in range(config.num_su):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(config.rng_seed, spawn_key=(_STREAM_SHADOW, k))))
        out[:, k] = 10.0 ** (rng.normal(0.0, config.shadowing_std_db, config.num_pu) / 10.0)
    return out


@dataclass(frozen=True)
class Sample:
    su_features: tuple
    label: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Raw samples plus train-subset feature statistics.

    ``features[k]`` has shape ``(M, 3 + minislots)`` and holds SU ``k``'s
    location in meters followed by linear RSS. Model inputs come from
    :meth:`inputs`, which converts RSS to dB and standardises every feature with
    ``norm_mean``/``norm_std``.
    """

    config: ScenarioConfig
    features: tuple
    labels: np.ndarray
    train_count: int
    norm_mean: tuple = field(default=())
    norm_std: tuple = field(default=())

    def __post_init__(self):
        for a in (*self.features, self.labels, *self.norm_mean, *self.norm_std):
            a.flags.writeable = False

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(tuple(f[i] for f in self.features), self.labels[i])

    @property
    def num_su(self) -> int:
        return len(self.features)

    @property
    def feature_dims(self) -> tuple:
        return tuple(f.shape[1] for f in self.features)

    @property
    def test_count(self) -> int:
        return len(self) - self.train_count

    def _slice(self, part: str) -> slice:
        if part == "train":
            return slice(0, self.train_count)
        if part == "test":
            return slice(self.train_count, len(self))
        if part == "all":
            return slice(0, len(self))
        raise ValueError(f"unknown subset {part!r}")

    def inputs(self, part: str = "train") -> list:
        """Standardised model inputs, one ``(n, d_k)`` array per SU."""
        s = self._slice(part)
        return [(to_model_space(f[s]) - m) / sd for f, m, sd in zip(self.features, self.norm_mean, self.norm_std)]

    def targets(self, part: str = "train") -> np.ndarray:
        return np.array(self.labels[self._slice(part)])

    def equals(self, other: "Dataset") -> bool:
        if self.train_count != other.train_count or self.num_su != other.num_su:
            return False
        pairs = [(self.labels, other.labels), *zip(self.features, other.features),
                 *zip(self.norm_mean, other.norm_mean), *zip(self.norm_std, other.norm_std)]
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


def to_model_space(block: np.ndarray) -> np.ndarray:
    """Coordinates unchanged, RSS converted to dB."""
    out = np.array(block, dtype=float)
    out[:, 3:] = 10.0 * np.log10(out[:, 3:])
    return out


def normalization_stats(features: Sequence[np.ndarray], train_count: int):
    means, stds = [], []
    for f in features:
        z = to_model_space(f[:train_count])
        m = z.mean(axis=0)
        sd = z.std(axis=0)
        sd[sd == 0] = 1.0
        means.append(m)
        stds.append(sd)
    return tuple(means), tuple(stds)


def generate_dataset(config: ScenarioConfig) -> Dataset:
    """Generate ``num_samples`` slots; the first ``train_count`` form the train set."""
    cfg = config
    k_su, j_pu, m = cfg.num_su, cfg.num_pu, cfg.minislots_per_slot
    levels = np.asarray(cfg.power_levels)
    fixed_shadow = static_shadowing(cfg) if cfg.shadowing_mode == "static" else None
    feats = [np.empty((cfg.num_samples, cfg.feature_dim)) for _ in range(k_su)]
    labels = np.empty((cfg.num_samples, cfg.label_dim))

    for i in range(cfg.num_samples):
        rng = slot_rng(cfg.rng_seed, i)
        su_streams = [su_rng(cfg.rng_seed, i, k) for k in range(k_su)]
        for _ in range(MAX_RESAMPLE):
            pu = sample_positions(cfg.pu_regions, rng)
            su = np.vstack([sample_positions(cfg.su_regions[k:k + 1], g) for k, g in enumerate(su_streams)])
            if np.all(np.sqrt(((su[:, None] - pu[None]) ** 2).sum(-1)) > 0):
                break
        else:
            raise CoincidentPositionError(f"slot {i}: PU and SU positions coincide after {MAX_RESAMPLE} draws")
        powers = levels[rng.integers(0, levels.size, j_pu)]
        if fixed_shadow is None:
            shadow = np.column_stack([10.0 ** (g.normal(0.0, cfg.shadowing_std_db, j_pu) / 10.0)
                                      for g in su_streams])
        else:
            shadow = fixed_shadow
        fading = np.stack([g.standard_exponential((j_pu, m)) for g in su_streams])
        rss = _received(pu, powers, su, shadow, fading, cfg.pathloss_exponent, cfg.rss_noise_floor)
        for k in range(k_su):
            feats[k][i, :3] = su[k]
            feats[k][i, 3:] = rss[k]
        labels[i, :j_pu] = powers
        labels[i, j_pu:] = pu.reshape(-1)

    mean, std = normalization_stats(feats, cfg.train_count)
    return Dataset(cfg, tuple(feats), labels, cfg.train_count, mean, std)


# ---------------------------------------------------------------------------
# Binary file format
#
#   b"TVFLDS1"
#   <q  M, K, n_blocks, train_count, label_dim, minislots, seed
#   <Q  config digest (first 8 bytes of the sha256 digest)
#   <q  d_k for each of the n_blocks feature blocks
#   <d  M rows of [block_1 .. block_K, label]
#   <d  normalization means (all blocks) then stds (all blocks)
#   <q  length of config JSON, followed by the UTF-8 JSON
# ---------------------------------------------------------------------------

MAGIC = b"TVFLDS1"
_HEAD = struct.Struct("<7qQ")


def _digest64(config: ScenarioConfig) -> int:
    return int(config.digest()[:16], 16)


def persist_dataset(dataset: Dataset, path) -> None:
    cfg = dataset.config
    dims = dataset.feature_dims
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_HEAD.pack(len(dataset), dataset.num_su, len(dims), dataset.train_count,
                         dataset.labels.shape[1], cfg.minislots_per_slot, cfg.rng_seed, _digest64(cfg)))
    buf.write(struct.pack(f"<{len(dims)}q", *dims))
    rows = np.concatenate([*dataset.features, dataset.labels], axis=1)
    buf.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
    stats = np.concatenate([*dataset.norm_mean, *dataset.norm_std])
    buf.write(np.ascontiguousarray(stats, dtype="<f8").tobytes())
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<q", len(blob)))
    buf.write(blob)
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError(f"{path}: missing TVFLDS1 magic")
    pos = len(MAGIC)
    if len(raw) < pos + _HEAD.size:
        raise MalformedHeaderError(f"{path}: header is cut short")
    m, k, n_blocks, train_count, label_dim, minislots, seed, _digest = _HEAD.unpack_from(raw, pos)
    pos += _HEAD.size
    if min(m, k, n_blocks, label_dim, minislots) < 1 or not 0 < train_count < m:
        raise MalformedHeaderError(f"{path}: inconsistent header values")
    if len(raw) < pos + 8 * n_blocks:
        raise MalformedHeaderError(f"{path}: header is cut short")
    dims = struct.unpack_from(f"<{n_blocks}q", raw, pos)
    pos += 8 * n_blocks
    if n_blocks != k:
        raise DimensionMismatchError(f"{path}: header declares K={k} but {n_blocks} feature blocks are present")
    if any(d != 3 + minislots for d in dims):
        raise DimensionMismatchError(f"{path}: block widths {dims} disagree with {minislots} mini-slots")

    width = sum(dims) + label_dim
    need = 8 * (m * width + 2 * sum(dims))
    if len(raw) < pos + need + 8:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - pos} bytes, expected at least {need + 8}")
    rows = np.frombuffer(raw, dtype="<f8", count=m * width, offset=pos).reshape(m, width).astype(float)
    pos += 8 * m * width
    stats = np.frombuffer(raw, dtype="<f8", count=2 * sum(dims), offset=pos).astype(float)
    pos += 8 * 2 * sum(dims)
    (n_json,) = struct.unpack_from("<q", raw, pos)
    pos += 8
    if len(raw) < pos + n_json:
        raise TruncatedPayloadError(f"{path}: configuration block is cut short")
    cfg = ScenarioConfig.from_dict(json.loads(raw[pos: pos + n_json].decode()))
    if cfg.num_su != k or cfg.num_samples != m or cfg.rng_seed != seed:
        raise DimensionMismatchError(f"{path}: embedded configuration disagrees with the header")

    edges = np.cumsum((0,) + dims)
    feats = tuple(np.array(rows[:, a:b]) for a, b in zip(edges[:-1], edges[1:]))
    labels = np.array(rows[:, edges[-1]:])
    half = sum(dims)
    means = tuple(np.array(stats[a:b]) for a, b in zip(edges[:-1], edges[1:]))
    stds = tuple(np.array(stats[half + a: half + b]) for a, b in zip(edges[:-1], edges[1:]))
    return Dataset(cfg, feats, labels, train_count, means, stds)


def export_csv(dataset: Dataset, path) -> None:
    """One row per sample: split flag, every raw feature, then the label."""
    cfg = dataset.config
    header = ["sample", "split"]
    for k in range(dataset.num_su):
        header += [f"su{k + 1}_x", f"su{k + 1}_y", f"su{k + 1}_z"]
        header += [f"su{k + 1}_rss{m:03d}" for m in range(cfg.minislots_per_slot)]
    header += [f"pu{j + 1}_power" for j in range(cfg.num_pu)]
    for j in range(cfg.num_pu):
        header += [f"pu{j + 1}_x", f"pu{j + 1}_y", f"pu{j + 1}_z"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(dataset)):
            row = [i, "train" if i < dataset.train_count else "test"]
            for f in dataset.features:
                row.extend(repr(float(v)) for v in f[i])
            row.extend(repr(float(v)) for v in dataset.labels[i])
            w.writerow(row)
