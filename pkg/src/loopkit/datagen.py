"""Seeded dataset generation and container I/O.

Every generator is a pure function of (seed, parameters): set ``i`` draws
from the Philox substream keyed by (seed, i), so datasets regenerate
byte-identically from their manifest alone and individual sets can be
rebuilt in isolation.

The on-disk container ("LOOPDATA") holds a structured-text manifest followed
by per-set records (elements or corpus indices, optional held-out points,
generating weights, solver targets) and a trailing CRC32.  Image-backed
datasets store indices into an IDX corpus instead of pixels; elements are
materialized on access.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import Field, Schema, parse_config, render_config
from .rng import make_rng
from .solvers import DispatchInstance, RidgeSpec, feature_matrix

log = logging.getLogger(__name__)

DATA_MAGIC = b"LOOPDATA"
DATA_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "LOOPKIT_DATA_DIR"

# substream offsets; set i uses stream BASE_SETS + i
_STREAM_SETS = 1 << 20
_STREAM_GENERATORS = 11
_STREAM_HOURS = 1 << 21

PROBLEMS = ("regression-linear", "regression-rbf", "pca", "coreset", "dispatch")


class CorruptDataError(IOError):
    """Dataset container failed digest or structure checks."""


class IngestError(IOError):
    """External file (IDX) could not be parsed."""


# ------------------------------------------------------------------- idx


def read_idx_images(path) -> np.ndarray:
    """Parse big-endian IDX image files into a (count, rows*cols) uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise IngestError(f"{path}: truncated header at offset {len(blob)}")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IngestError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    expected = 16 + count * rows * cols
    if len(blob) < expected:
        raise IngestError(f"{path}: truncated pixel data at offset {len(blob)}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols,
                           offset=16)
    return pixels.reshape(count, rows * cols).copy()


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise IngestError(f"{path}: truncated header at offset {len(blob)}")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IngestError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    if len(blob) < 8 + count:
        raise IngestError(f"{path}: truncated labels at offset {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=8).copy()


def write_idx_images(path, images: np.ndarray, side: int = 28) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, images.shape[0], side, side))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def _smooth_bump(rng, side=28):
    """Separable random blob: outer product of two 1-D Gaussian bumps."""
    t = np.arange(side)
    cx, cy = rng.uniform(6, side - 6, size=2)
    sx, sy = rng.uniform(2.0, 6.0, size=2)
    gx = np.exp(-((t - cx) ** 2) / (2 * sx * sx))
    gy = np.exp(-((t - cy) ** 2) / (2 * sy * sy))
    return np.outer(gx, gy)


def gen_synthetic_digit_corpus(seed: int, out_dir, per_class: int = 600,
                               classes: int = 10, side: int = 28):
    """Write a stand-in image corpus in IDX format.

    Each class mixes a fixed template with a few smooth variation bases, so
    class mixtures carry distinct dominant covariance directions.  Used by
    tests and as a fallback when no real handwritten-digit files are present.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = make_rng(seed, stream=_STREAM_GENERATORS)
    images = np.zeros((classes * per_class, side * side), dtype=np.uint8)
    labels = np.zeros(classes * per_class, dtype=np.uint8)
    row = 0
    for cls in range(classes):
        template = sum(_smooth_bump(rng) for _ in range(3))
        bases = [_smooth_bump(rng) - _smooth_bump(rng) for _ in range(3)]
        template /= template.max()
        for _ in range(per_class):
            amp = rng.uniform(0.6, 1.0)
            img = amp * template
            for basis in bases:
                img = img + rng.normal(0.0, 0.25) * basis
            img = img + rng.normal(0.0, 0.02, size=img.shape)
            images[row] = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).ravel()
            labels[row] = cls
            row += 1
    img_path = os.path.join(out_dir, "synthetic-images-idx3-ubyte")
    lab_path = os.path.join(out_dir, "synthetic-labels-idx1-ubyte")
    write_idx_images(img_path, images, side)
    write_idx_labels(lab_path, labels)
    return img_path, lab_path


# ------------------------------------------------------------- container


@dataclass
class SetRecord:
    elements: np.ndarray | None = None     # (N, d) float64
    indices: np.ndarray | None = None      # (N,) uint32 into an image corpus
    heldout: np.ndarray | None = None      # (H, d) float64
    gen_w: np.ndarray | None = None        # generating weights
    target: np.ndarray | None = None       # oracle solution
    objective: float | None = None         # oracle objective value

    @property
    def cardinality(self) -> int:
        arr = self.elements if self.elements is not None else self.indices
        return arr.shape[0]


_MANIFEST_SCHEMAS = {
    "regression-linear": {"regression": [
        Field("features", "str"), Field("interval_lo", "float"),
        Field("interval_hi", "float"), Field("rbf_centers", "int"),
        Field("bandwidth", "float"), Field("ridge", "float"),
        Field("noise", "float"), Field("nmin", "int"), Field("nmax", "int"),
        Field("heldout", "int"),
    ]},
    "pca": {"pca": [
        Field("images", "str"), Field("images_sha256", "str"),
        Field("components", "int"), Field("nmin", "int"), Field("nmax", "int"),
    ]},
    "coreset": {"coreset": [
        Field("atoms", "int"), Field("comp_min", "int"), Field("comp_max", "int"),
        Field("sigma", "float"), Field("samples_min", "int"),
        Field("samples_max", "int"),
    ]},
    "dispatch": {"dispatch": [
        Field("supply", "int"), Field("demand", "int"), Field("hours", "int"),
    ]},
}
_MANIFEST_SCHEMAS["regression-rbf"] = _MANIFEST_SCHEMAS["regression-linear"]


def manifest_schema(problem: str) -> Schema:
    if problem not in PROBLEMS:
        raise ValueError(f"unknown problem {problem!r}")
    sections = {"dataset": [
        Field("problem", "str"), Field("seed", "int"),
        Field("train_count", "int"), Field("test_count", "int"),
        Field("content_digest", "str", ""),
    ]}
    sections.update(_MANIFEST_SCHEMAS[problem])
    return Schema(sections)


@dataclass
class Dataset:
    manifest: dict
    records: list[SetRecord] = field(default_factory=list)
    images: np.ndarray | None = None       # uint8 corpus for index-backed sets

    @property
    def problem(self) -> str:
        return self.manifest["dataset"]["problem"]

    @property
    def seed(self) -> int:
        return self.manifest["dataset"]["seed"]

    @property
    def train_indices(self) -> range:
        return range(self.manifest["dataset"]["train_count"])

    @property
    def test_indices(self) -> range:
        start = self.manifest["dataset"]["train_count"]
        return range(start, start + self.manifest["dataset"]["test_count"])

    def set_elements(self, i: int) -> np.ndarray:
        rec = self.records[i]
        if rec.elements is not None:
            return rec.elements
        if self.images is None:
            raise CorruptDataError("index-backed dataset has no attached corpus")
        return self.images[rec.indices].astype(np.float64) / 255.0

    def ridge_spec(self) -> RidgeSpec:
        section = self.manifest["regression"]
        return RidgeSpec(
            features=section["features"],
            interval=(section["interval_lo"], section["interval_hi"]),
            rbf_centers=section["rbf_centers"], bandwidth=section["bandwidth"],
            ridge=section["ridge"])

    def dispatch_instance(self, i: int) -> DispatchInstance:
        section = self.manifest["dispatch"]
        template = dispatch_template(self.seed, section["supply"])
        return DispatchInstance(
            demands=self.set_elements(i).ravel(), **template)


def _serialize_records(records: list[SetRecord]) -> bytes:
    chunks = [struct.pack("<I", len(records))]
    for rec in records:
        chunks.append(struct.pack("<I", rec.cardinality))
        if rec.elements is not None:
            data = np.ascontiguousarray(rec.elements, dtype="<f8")
            chunks.append(b"E" + struct.pack("<I", data.shape[1]) + data.tobytes())
        if rec.indices is not None:
            data = np.ascontiguousarray(rec.indices, dtype="<u4")
            chunks.append(b"I" + data.tobytes())
        if rec.heldout is not None:
            data = np.ascontiguousarray(rec.heldout, dtype="<f8")
            chunks.append(b"H" + struct.pack("<II", *data.shape) + data.tobytes())
        if rec.gen_w is not None:
            data = np.ascontiguousarray(rec.gen_w, dtype="<f8")
            chunks.append(b"W" + struct.pack("<I", data.shape[0]) + data.tobytes())
        if rec.target is not None:
            data = np.ascontiguousarray(rec.target, dtype="<f8")
            chunks.append(b"T" + struct.pack("<I", data.ndim)
                          + struct.pack(f"<{data.ndim}I", *data.shape)
                          + data.tobytes())
        if rec.objective is not None:
            chunks.append(b"O" + struct.pack("<d", rec.objective))
        chunks.append(b"\x00")
    return b"".join(chunks)


def content_digest(dataset: Dataset) -> str:
    return hashlib.sha256(_serialize_records(dataset.records)).hexdigest()


def write_dataset(dataset: Dataset, path) -> str:
    """Write the container; returns the content digest recorded in the manifest."""
    records_blob = _serialize_records(dataset.records)
    digest = hashlib.sha256(records_blob).hexdigest()
    manifest = {k: dict(v) for k, v in dataset.manifest.items()}
    manifest["dataset"]["content_digest"] = digest
    text = render_config(manifest, manifest_schema(manifest["dataset"]["problem"]))
    encoded = text.encode()
    payload = b"".join([
        DATA_MAGIC, struct.pack("<I", DATA_VERSION),
        struct.pack("<I", len(encoded)), encoded, records_blob,
    ])
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    dataset.manifest["dataset"]["content_digest"] = digest
    return digest


def read_dataset(path, images_root=None) -> Dataset:
    """Read and verify a container; attaches the image corpus when referenced."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise CorruptDataError(f"{path}: truncated container")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CorruptDataError(f"{path}: CRC mismatch")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise CorruptDataError(f"{path}: truncated at offset {off}")
        out = payload[off:off + n]
        off += n
        return out

    if take(8) != DATA_MAGIC:
        raise CorruptDataError(f"{path}: bad magic")
    version = struct.unpack("<I", take(4))[0]
    if version != DATA_VERSION:
        raise CorruptDataError(f"{path}: unsupported version {version}")
    manifest_len = struct.unpack("<I", take(4))[0]
    manifest_text = take(manifest_len).decode()
    problem = None
    for line in manifest_text.splitlines():
        if line.startswith("problem"):
            problem = line.split("=", 1)[1].strip()
            break
    if problem is None:
        raise CorruptDataError(f"{path}: manifest lacks a problem tag")
    manifest = parse_config(manifest_text, manifest_schema(problem))

    records_blob = payload[off:]
    digest = hashlib.sha256(records_blob).hexdigest()
    if manifest["dataset"]["content_digest"] not in ("", digest):
        raise CorruptDataError(f"{path}: content digest mismatch")

    n_sets = struct.unpack("<I", take(4))[0]
    records = []
    for _ in range(n_sets):
        card = struct.unpack("<I", take(4))[0]
        rec = SetRecord()
        while True:
            tag = take(1)
            if tag == b"\x00":
                break
            if tag == b"E":
                dim = struct.unpack("<I", take(4))[0]
                rec.elements = np.frombuffer(
                    take(8 * card * dim), dtype="<f8").reshape(card, dim).copy()
            elif tag == b"I":
                rec.indices = np.frombuffer(
                    take(4 * card), dtype="<u4").copy()
            elif tag == b"H":
                h, dim = struct.unpack("<II", take(8))
                rec.heldout = np.frombuffer(
                    take(8 * h * dim), dtype="<f8").reshape(h, dim).copy()
            elif tag == b"W":
                n = struct.unpack("<I", take(4))[0]
                rec.gen_w = np.frombuffer(take(8 * n), dtype="<f8").copy()
            elif tag == b"T":
                rank = struct.unpack("<I", take(4))[0]
                dims = struct.unpack(f"<{rank}I", take(4 * rank))
                count = int(np.prod(dims))
                rec.target = np.frombuffer(
                    take(8 * count), dtype="<f8").reshape(dims).copy()
            elif tag == b"O":
                rec.objective = struct.unpack("<d", take(8))[0]
            else:
                raise CorruptDataError(f"{path}: unknown record tag {tag!r}")
        records.append(rec)

    dataset = Dataset(manifest=manifest, records=records)
    if problem == "pca":
        img_path = _resolve_path(manifest["pca"]["images"], path, images_root)
        images = read_idx_images(img_path)
        got = hashlib.sha256(images.tobytes()).hexdigest()
        if manifest["pca"]["images_sha256"] not in ("", got):
            raise CorruptDataError(f"{img_path}: corpus digest mismatch")
        dataset.images = images
    return dataset


def _resolve_path(name, dataset_path, images_root):
    candidates = []
    if os.path.isabs(name):
        candidates.append(name)
    if images_root:
        candidates.append(os.path.join(images_root, name))
    candidates.append(os.path.join(os.path.dirname(os.path.abspath(dataset_path)), name))
    env_root = os.environ.get(DATA_DIR_ENV)
    if env_root:
        candidates.append(os.path.join(env_root, name))
    candidates.append(name)
    for cand in candidates:
        if os.path.exists(cand):
            return cand
    raise IngestError(f"cannot locate image corpus {name!r}; "
                      f"searched {candidates}")


# ------------------------------------------------------------- generators


def gen_regression(seed: int, train_count: int, test_count: int,
                   spec: RidgeSpec | None = None, noise: float = 0.1,
                   nmin: int = 20, nmax: int = 100, heldout: int = 64,
                   features: str = "linear") -> Dataset:
    """Sets of (x, y) pairs from y = w . phi(x) + noise, plus held-out pairs."""
    spec = spec or RidgeSpec(features=features)
    if noise < 0:
        raise ValueError("noise must be non-negative")
    problem = "regression-linear" if spec.features == "linear" else "regression-rbf"
    manifest = {
        "dataset": {"problem": problem, "seed": seed,
                    "train_count": train_count, "test_count": test_count,
                    "content_digest": ""},
        "regression": {"features": spec.features,
                       "interval_lo": spec.interval[0],
                       "interval_hi": spec.interval[1],
                       "rbf_centers": spec.rbf_centers,
                       "bandwidth": spec.bandwidth, "ridge": spec.ridge,
                       "noise": noise, "nmin": nmin, "nmax": nmax,
                       "heldout": heldout},
    }
    records = []
    for i in range(train_count + test_count):
        rng = make_rng(seed, stream=_STREAM_SETS + i)
        n = int(rng.integers(nmin, nmax + 1))
        w = rng.standard_normal(spec.dim)
        x = rng.uniform(spec.interval[0], spec.interval[1], size=n)
        y = feature_matrix(x, spec) @ w + noise * rng.standard_normal(n)
        xt = rng.uniform(spec.interval[0], spec.interval[1], size=heldout)
        yt = feature_matrix(xt, spec) @ w + noise * rng.standard_normal(heldout)
        records.append(SetRecord(
            elements=np.column_stack([x, y]),
            heldout=np.column_stack([xt, yt]),
            gen_w=w))
    return Dataset(manifest=manifest, records=records)


def gen_pca(seed: int, train_count: int, test_count: int, images_path,
            labels_path, components: int = 5, nmin: int = 500,
            nmax: int = 1000) -> Dataset:
    """Index-backed sets sampled from random digit pairs of an IDX corpus."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IngestError("image and label counts disagree")
    classes = np.unique(labels)
    if classes.size < 2:
        raise IngestError("need at least two label classes")
    pools = {int(c): np.flatnonzero(labels == c) for c in classes}
    manifest = {
        "dataset": {"problem": "pca", "seed": seed,
                    "train_count": train_count, "test_count": test_count,
                    "content_digest": ""},
        "pca": {"images": os.path.basename(str(images_path)),
                "images_sha256": hashlib.sha256(images.tobytes()).hexdigest(),
                "components": components, "nmin": nmin, "nmax": nmax},
    }
    records = []
    for i in range(train_count + test_count):
        rng = make_rng(seed, stream=_STREAM_SETS + i)
        pair = rng.choice(classes, size=2, replace=False)
        pool = np.concatenate([pools[int(pair[0])], pools[int(pair[1])]])
        n = int(rng.integers(nmin, nmax + 1))
        take = rng.choice(pool, size=n, replace=pool.size < n)
        records.append(SetRecord(indices=np.sort(take).astype(np.uint32)))
    dataset = Dataset(manifest=manifest, records=records, images=images)
    return dataset


def gen_gmm(seed: int, train_count: int, test_count: int, atoms: int = 8,
            comp_range: tuple[int, int] = (2, 6), sigma: float = 0.05,
            samples_range: tuple[int, int] = (50, 200)) -> Dataset:
    """2-D Gaussian-mixture sets: random means in [-1,1]^2, fixed covariance."""
    manifest = {
        "dataset": {"problem": "coreset", "seed": seed,
                    "train_count": train_count, "test_count": test_count,
                    "content_digest": ""},
        "coreset": {"atoms": atoms, "comp_min": comp_range[0],
                    "comp_max": comp_range[1], "sigma": sigma,
                    "samples_min": samples_range[0],
                    "samples_max": samples_range[1]},
    }
    records = []
    for i in range(train_count + test_count):
        rng = make_rng(seed, stream=_STREAM_SETS + i)
        k = int(rng.integers(comp_range[0], comp_range[1] + 1))
        means = rng.uniform(-1.0, 1.0, size=(k, 2))
        counts = rng.integers(samples_range[0], samples_range[1] + 1, size=k)
        points = np.concatenate([
            means[j] + sigma * rng.standard_normal(size=(counts[j], 2))
            for j in range(k)])
        records.append(SetRecord(elements=points))
    return Dataset(manifest=manifest, records=records)


# dispatch template: fixed fleet of generating units shared by every hour
DISPATCH_SUPPLY = 544
DISPATCH_DEMAND = 1125

_WEEKDAY_SHAPE = np.array([
    0.62, 0.58, 0.56, 0.55, 0.56, 0.60, 0.68, 0.78, 0.86, 0.90, 0.92, 0.93,
    0.92, 0.91, 0.90, 0.91, 0.94, 0.98, 1.00, 0.97, 0.90, 0.82, 0.74, 0.67])
_WEEKEND_SHAPE = np.array([
    0.70, 0.66, 0.63, 0.61, 0.61, 0.63, 0.67, 0.72, 0.78, 0.84, 0.88, 0.91,
    0.92, 0.92, 0.91, 0.90, 0.91, 0.93, 0.95, 0.94, 0.90, 0.84, 0.78, 0.73])


def dispatch_template(seed: int, n_supply: int = DISPATCH_SUPPLY) -> dict:
    """Generator fleet parameters derived deterministically from the seed.

    Quadratic coefficients are sized against the self-supervised penalty
    weights: marginal costs stay O(1), so a quadratic balance penalty with a
    small coefficient still pins total output near total demand.
    """
    rng = make_rng(seed, stream=_STREAM_GENERATORS + 1)
    return {
        "cost_a": rng.uniform(0.002, 0.01, size=n_supply),
        "cost_b": rng.uniform(0.5, 2.0, size=n_supply),
        "cost_c": np.zeros(n_supply),
        "lower": np.zeros(n_supply),
        "upper": rng.uniform(20.0, 200.0, size=n_supply),
    }


def gen_dispatch(seed: int, hours: int = 168, n_supply: int = DISPATCH_SUPPLY,
                 m_demand: int = DISPATCH_DEMAND,
                 jitter: tuple[float, float] = (0.95, 1.05)) -> Dataset:
    """Hourly demand sets over one week, odd hours for training, even for test.

    Per node: a base amplitude, a weekday or weekend day-shape, and a
    uniform scaling in [jitter_lo, jitter_hi] drawn per hour.
    """
    rng = make_rng(seed, stream=_STREAM_GENERATORS + 2)
    base = rng.uniform(10.0, 40.0, size=m_demand)
    template = dispatch_template(seed, n_supply)
    capacity = template["upper"].sum()
    floor = template["lower"].sum()

    demands_by_hour = []
    for h in range(hours):
        day = h // 24
        shape = _WEEKEND_SHAPE if day % 7 in (5, 6) else _WEEKDAY_SHAPE
        scale = make_rng(seed, stream=_STREAM_HOURS + h).uniform(
            jitter[0], jitter[1], size=m_demand)
        demands_by_hour.append(base * shape[h % 24] * scale)

    worst = max(d.sum() for d in demands_by_hour)
    if worst > capacity or min(d.sum() for d in demands_by_hour) < floor:
        scale = 0.8 * capacity / worst
        log.warning("demand profile rescaled by %.4f to restore aggregate "
                    "feasibility", scale)
        demands_by_hour = [d * scale for d in demands_by_hour]

    odd = [h for h in range(hours) if h % 2 == 1]
    even = [h for h in range(hours) if h % 2 == 0]
    manifest = {
        "dataset": {"problem": "dispatch", "seed": seed,
                    "train_count": len(odd), "test_count": len(even),
                    "content_digest": ""},
        "dispatch": {"supply": n_supply, "demand": m_demand, "hours": hours},
    }
    records = [SetRecord(elements=demands_by_hour[h][:, None])
               for h in odd + even]
    return Dataset(manifest=manifest, records=records)


def generate(problem: str, seed: int, train_count: int, test_count: int,
             **kwargs) -> Dataset:
    """Dispatch table used by the CLI."""
    if problem == "regression-linear":
        return gen_regression(seed, train_count, test_count,
                              features="linear", **kwargs)
    if problem == "regression-rbf":
        return gen_regression(seed, train_count, test_count,
                              features="rbf-grid", **kwargs)
    if problem == "pca":
        return gen_pca(seed, train_count, test_count, **kwargs)
    if problem == "coreset":
        return gen_gmm(seed, train_count, test_count, **kwargs)
    if problem == "dispatch":
        return gen_dispatch(seed, **kwargs)
    raise ValueError(f"unknown problem {problem!r}")
