"""Self-supervised grasp datasets: generation, record files, splits and batches.

A record file is little-endian: ``b"GRSP"``, u16 version, u16 reserved, then
fixed-size records of 4 x f32 command (x, y, theta, aperture), u8 label,
u8 reserved, f32 occlusion, and the before/during images as H*W u8 each
(``round(pixel * 255)``). Image size lives in ``manifest.json`` next to it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import worldsim as ws
from .worldsim import GraspCommand, WorldParams

MAGIC = b"GRSP"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHH")
RECORDS_FILE = "records.bin"
MANIFEST_FILE = "manifest.json"
# commands are snapped to this grid so mirroring is exact in float32
COMMAND_GRID = 2.0 ** -20


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class GenParams:
    n: int = 20000
    seed: int = 1
    image_size: int = 64
    # fraction of commands aimed near a randomly chosen object; the rest are
    # uniform over the bin
    target_fraction: float = 0.85
    target_radius: float = 0.03
    train_fraction: float = 0.9

    def validate(self) -> None:
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.image_size < 8 or self.image_size % 16:
            raise ValueError("image_size must be a positive multiple of 16")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise ValueError("target_fraction must be in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass(frozen=True)
class GraspRecord:
    command: GraspCommand
    label: bool
    occlusion: float
    before: np.ndarray = field(compare=False)
    during: np.ndarray = field(compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraspRecord):
            return NotImplemented
        return (self.command == other.command and self.label == other.label
                and self.occlusion == other.occlusion
                and np.array_equal(self.before, other.before) and np.array_equal(self.during, other.during))

    __hash__ = None


@dataclass
class DatasetManifest:
    format_version: int
    count: int
    image_h: int
    image_w: int
    seed: int
    world_params_digest: int
    positive_count: int
    split_boundary: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def world_params_digest(params: WorldParams, gen: Optional[GenParams] = None) -> int:
    """64-bit digest of everything that determines the generated records."""
    payload = {"world": asdict(params)}
    if gen is not None:
        payload["gen"] = {k: v for k, v in asdict(gen).items() if k not in ("n", "seed")}
    raw = json.dumps(payload, sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "little")


# --------------------------------------------------------------------------
# in-memory dataset


def record_dtype(h: int, w: int) -> np.dtype:
    return np.dtype([("command", "<f4", (4,)), ("label", "u1"), ("reserved", "u1"),
                     ("occlusion", "<f4"), ("before", "u1", (h, w)), ("during", "u1", (h, w))])


class GraspDataset:
    """Columnar view of a record file; cheap to subset and batch."""

    def __init__(self, table: np.ndarray):
        self.table = table

    @classmethod
    def empty(cls, h: int, w: int) -> "GraspDataset":
        return cls(np.zeros(0, dtype=record_dtype(h, w)))

    @classmethod
    def from_records(cls, records: Sequence[GraspRecord], h: int = 64, w: int = 64) -> "GraspDataset":
        if records:
            h, w = records[0].before.shape
        table = np.zeros(len(records), dtype=record_dtype(h, w))
        for i, r in enumerate(records):
            c = r.command
            table["command"][i] = (c.x, c.y, c.theta, c.aperture)
            table["label"][i] = int(r.label)
            table["occlusion"][i] = r.occlusion
            table["before"][i] = r.before
            table["during"][i] = r.during
        return cls(table)

    def __len__(self) -> int:
        return len(self.table)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.table.dtype["before"].shape

    @property
    def commands(self) -> np.ndarray:
        return self.table["command"]

    @property
    def labels(self) -> np.ndarray:
        return self.table["label"]

    @property
    def occlusion(self) -> np.ndarray:
        return self.table["occlusion"]

    @property
    def before(self) -> np.ndarray:
        return self.table["before"]

    @property
    def during(self) -> np.ndarray:
        return self.table["during"]

    def subset(self, indices) -> "GraspDataset":
        return GraspDataset(self.table[np.asarray(indices)])

    def record(self, i: int) -> GraspRecord:
        row = self.table[i]
        x, y, theta, a = (float(v) for v in row["command"])
        return GraspRecord(GraspCommand(x, y, theta, a), bool(row["label"]), float(row["occlusion"]),
                           row["before"].copy(), row["during"].copy())

    def records(self) -> list[GraspRecord]:
        return [self.record(i) for i in range(len(self))]


# --------------------------------------------------------------------------
# record files


def encode_records(data: Union[GraspDataset, Sequence[GraspRecord]]) -> bytes:
    ds = data if isinstance(data, GraspDataset) else GraspDataset.from_records(list(data))
    return HEADER.pack(MAGIC, FORMAT_VERSION, 0) + ds.table.tobytes()


def write_records(data: Union[GraspDataset, Sequence[GraspRecord]], path) -> int:
    blob = encode_records(data)
    Path(path).write_bytes(blob)
    return len(blob)


def decode_records(blob: bytes, h: int, w: int) -> GraspDataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < HEADER.size:
        raise TruncatedFileError("record file header is truncated")
    _, version, _ = HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"record format version {version}, expected {FORMAT_VERSION}")
    dtype = record_dtype(h, w)
    body = len(blob) - HEADER.size
    if body % dtype.itemsize:
        raise TruncatedFileError(
            f"record body of {body} bytes is not a multiple of the {dtype.itemsize}-byte record size")
    table = np.frombuffer(blob, dtype=dtype, offset=HEADER.size).copy()
    return GraspDataset(table)


def read_dataset(path, image_h: Optional[int] = None, image_w: Optional[int] = None) -> GraspDataset:
    """Load a record file; image size defaults to the sibling manifest's."""
    path = Path(path)
    if image_h is None or image_w is None:
        manifest = read_manifest(path.parent)
        image_h, image_w = manifest.image_h, manifest.image_w
    return decode_records(path.read_bytes(), image_h, image_w)


def read_records(path, image_h: Optional[int] = None, image_w: Optional[int] = None) -> list[GraspRecord]:
    return read_dataset(path, image_h, image_w).records()


def read_manifest(directory) -> DatasetManifest:
    return DatasetManifest.from_json((Path(directory) / MANIFEST_FILE).read_text())


def load_dataset_dir(directory) -> tuple[GraspDataset, DatasetManifest]:
    manifest = read_manifest(directory)
    ds = read_dataset(Path(directory) / RECORDS_FILE, manifest.image_h, manifest.image_w)
    return ds, manifest


# --------------------------------------------------------------------------
# generation


def _snap(v: float) -> float:
    return float(np.float32(round(v / COMMAND_GRID) * COMMAND_GRID))


def record_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def sample_grasp_command(rng: np.random.Generator, scene: ws.Scene, params: WorldParams,
                         gen: GenParams) -> GraspCommand:
    """Random command, aimed near an object with probability ``gen.target_fraction``.

    Values are snapped to a 2^-20 grid (float32-exact, mirror-exact) and
    redrawn until both fingertips are in frame.
    """
    half_pi = math.pi / 2
    while True:
        if scene.objects and rng.random() < gen.target_fraction:
            obj = scene.objects[int(rng.integers(len(scene.objects)))]
            r = gen.target_radius * math.sqrt(rng.random())
            phi = rng.uniform(0.0, 2 * math.pi)
            x, y = obj.center.x + r * math.cos(phi), obj.center.y + r * math.sin(phi)
        else:
            x, y = rng.uniform(params.bin_min, params.bin_max, size=2)
        theta = _snap(rng.uniform(-half_pi, half_pi))
        if not -half_pi < theta < half_pi:
            continue
        c = GraspCommand(_snap(x), _snap(y), theta, _snap(rng.uniform(*params.aperture_range)))
        if c.aperture <= 0:
            continue
        f1, f2 = ws.fingertips(c)
        if all(0.0 <= v <= 1.0 for v in (*f1, *f2)):
            return c


def generate_record(seed: int, index: int, params: WorldParams, gen: GenParams) -> GraspRecord:
    rng = np.random.default_rng(record_seed(seed, index))
    lo, hi = params.n_objects_range
    n_objects = int(rng.integers(lo, hi + 1))
    scene = ws.sample_scene(int(rng.integers(2 ** 63 - 1)), n_objects, params)
    c = sample_grasp_command(rng, scene, params, gen)
    obs = ws.observe(scene, c, gen.image_size, params)
    to_u8 = lambda img: np.round(img * 255).astype(np.uint8)
    return GraspRecord(c, obs.outcome.success, float(np.float32(obs.occlusion)),
                       to_u8(obs.before), to_u8(obs.during))


def regenerate_scene(seed: int, index: int, params: WorldParams, gen: GenParams) -> tuple[ws.Scene, GraspCommand]:
    """Rebuild the scene and command behind record ``index`` (for audits)."""
    rng = np.random.default_rng(record_seed(seed, index))
    lo, hi = params.n_objects_range
    n_objects = int(rng.integers(lo, hi + 1))
    scene = ws.sample_scene(int(rng.integers(2 ** 63 - 1)), n_objects, params)
    return scene, sample_grasp_command(rng, scene, params, gen)


def _generate_range(args) -> GraspDataset:
    seed, start, stop, params, gen = args
    return GraspDataset.from_records([generate_record(seed, i, params, gen) for i in range(start, stop)],
                                     gen.image_size, gen.image_size)


def worker_count() -> int:
    env = os.environ.get("GRASPSIGHT_THREADS")
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def generate_records(params: WorldParams, gen: GenParams, workers: Optional[int] = None) -> GraspDataset:
    params.validate()
    gen.validate()
    workers = workers or worker_count()
    if workers == 1 or gen.n < 256:
        return _generate_range((gen.seed, 0, gen.n, params, gen))
    bounds = np.linspace(0, gen.n, workers * 4 + 1).astype(int)
    jobs = [(gen.seed, int(a), int(b), params, gen) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_generate_range, jobs))
    return GraspDataset(np.concatenate([p.table for p in parts]))


def generate_dataset(params: WorldParams, gen: GenParams, out_dir, workers: Optional[int] = None) -> DatasetManifest:
    """Generate ``gen.n`` labelled records and write them with a manifest."""
    ds = generate_records(params, gen, workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(ds, out / RECORDS_FILE)
    manifest = DatasetManifest(
        format_version=FORMAT_VERSION, count=len(ds), image_h=gen.image_size, image_w=gen.image_size,
        seed=gen.seed, world_params_digest=world_params_digest(params, gen),
        positive_count=int(ds.labels.sum()), split_boundary=int(round(len(ds) * gen.train_fraction)))
    (out / MANIFEST_FILE).write_text(manifest.to_json())
    return manifest


# --------------------------------------------------------------------------
# splits, filters, augmentation, batching


def split(manifest_or_count: Union[DatasetManifest, int], train_fraction: float = 0.9,
          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split into disjoint, exhaustive (train, val) index arrays."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    count = manifest_or_count.count if isinstance(manifest_or_count, DatasetManifest) else int(manifest_or_count)
    perm = np.random.default_rng(seed).permutation(count)
    n_train = int(round(count * train_fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def filter_by_occlusion(records, tau: float = 0.25):
    """Keep records whose target object is at most ``tau`` occluded."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    if isinstance(records, GraspDataset):
        return records.subset(np.flatnonzero(records.occlusion <= tau))
    return [r for r in records if r.occlusion <= tau]


def mirror_command(c: GraspCommand, params: WorldParams = WorldParams()) -> GraspCommand:
    return GraspCommand(float(np.float32(params.bin_min + params.bin_max - c.x)), c.y, -c.theta + 0.0,
                        c.aperture)


def augment_record(record: GraspRecord, params: WorldParams = WorldParams()) -> GraspRecord:
    """Mirror both images left-right and remap the command to match."""
    return GraspRecord(mirror_command(record.command, params), record.label, record.occlusion,
                       record.before[:, ::-1].copy(), record.during[:, ::-1].copy())


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 64
    shuffle_seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Batch:
    before: np.ndarray    # (B, 1, H, W) float32 in [0, 1]
    during: np.ndarray
    commands: np.ndarray  # (B, 4) float32
    labels: np.ndarray    # (B,) float32
    indices: np.ndarray

    def __iter__(self):
        return iter((self.before, self.during, self.commands, self.labels))


def _images(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / np.float32(255.0))[:, None]


def batches(data: Union[GraspDataset, Sequence[GraspRecord]], spec: BatchSpec,
            params: WorldParams = WorldParams()) -> Iterator[Batch]:
    """Shuffled mini-batches; the last one may be short."""
    ds = data if isinstance(data, GraspDataset) else GraspDataset.from_records(list(data))
    if len(ds) == 0:
        raise ValueError("cannot batch an empty dataset")
    rng = np.random.default_rng(spec.shuffle_seed)
    order = rng.permutation(len(ds))
    flips = rng.random(len(ds)) < 0.5 if spec.augment else np.zeros(len(ds), bool)
    mirror_sum = np.float32(params.bin_min + params.bin_max)
    for start in range(0, len(ds), spec.batch_size):
        idx = order[start:start + spec.batch_size]
        rows = ds.table[idx]
        before, during = rows["before"].copy(), rows["during"].copy()
        cmd = rows["command"].copy()
        flip = flips[start:start + spec.batch_size]
        if flip.any():
            before[flip] = before[flip][:, :, ::-1]
            during[flip] = during[flip][:, :, ::-1]
            cmd[flip, 0] = mirror_sum - cmd[flip, 0]
            cmd[flip, 2] = -cmd[flip, 2]
        yield Batch(_images(before), _images(during), cmd, rows["label"].astype(np.float32), idx)


def as_arrays(ds: GraspDataset) -> Batch:
    """The whole dataset as one unshuffled batch."""
    return Batch(_images(ds.before), _images(ds.during), ds.commands.copy(),
                 ds.labels.astype(np.float32), np.arange(len(ds)))
