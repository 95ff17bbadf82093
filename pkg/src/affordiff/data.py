"""Affordance records, manifest files, splitting and the synthetic scene generator.

A record pairs one or two frames and a tokenized instruction with a chunk of
``T`` normalized 2-D waypoints; waypoint 0 is the contact point and the rest
trace the object's motion after contact.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netpbm

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

SOURCES = ("robotic", "human", "custom", "synthetic")
TASK_KINDS = ("touch", "push-line", "arc")

VOCAB: tuple[str, ...] = (
    "<pad>", "touch", "push", "move",
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle",
    "arc", "left", "right",
)
PAD_ID = 0
COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 235),
    "yellow": (230, 210, 40),
}
SHAPES = ("circle", "square", "triangle")
_ACTION_WORD = {"touch": "touch", "push-line": "push", "arc": "move"}


class ManifestError(ValueError):
    """A manifest record failed validation."""

    def __init__(self, message: str, record: int | None = None, field: str | None = None):
        super().__init__(message)
        self.record = record
        self.field = field


class GenerationError(RuntimeError):
    pass


def token_ids(words: Sequence[str], vocab: Sequence[str] = VOCAB) -> tuple[int, ...]:
    index = {w: i for i, w in enumerate(vocab)}
    try:
        return tuple(index[w] for w in words)
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} not in vocabulary") from None


def save_vocab(path, vocab: Sequence[str] = VOCAB) -> None:
    Path(path).write_text(json.dumps(list(vocab), indent=1) + "\n")


def load_vocab(path) -> tuple[str, ...]:
    words = json.loads(Path(path).read_text())
    if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
        raise ValueError(f"{path}: vocabulary must be a JSON list of strings")
    return tuple(words)


@dataclass(frozen=True, eq=False)
class AffordanceSample:
    image_current: np.ndarray  # HxWx3 uint8
    image_previous: np.ndarray | None
    instruction: tuple[int, ...]
    waypoints: np.ndarray  # Tx2 float64, normalized (u, v)
    supervise_mask: tuple[bool, ...]
    source: str = "synthetic"
    native_resolution: tuple[int, int] | None = None

    def __post_init__(self):
        validate_sample(self)

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.image_current.shape[:2]
        return w, h

    @property
    def pixel_resolution(self) -> tuple[int, int]:
        """Resolution used to express errors in pixels."""
        return self.native_resolution or self.resolution

    @property
    def chunk_size(self) -> int:
        return len(self.waypoints)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AffordanceSample):
            return NotImplemented
        prev_equal = (
            self.image_previous is None and other.image_previous is None
        ) or (
            self.image_previous is not None
            and other.image_previous is not None
            and np.array_equal(self.image_previous, other.image_previous)
        )
        return (
            np.array_equal(self.image_current, other.image_current)
            and prev_equal
            and self.instruction == other.instruction
            and np.array_equal(self.waypoints, other.waypoints)
            and self.supervise_mask == other.supervise_mask
            and self.source == other.source
            and self.pixel_resolution == other.pixel_resolution
        )

    __hash__ = None


def validate_sample(s: AffordanceSample) -> None:
    cur = s.image_current
    if not isinstance(cur, np.ndarray) or cur.ndim != 3 or cur.shape[2] != 3 or cur.dtype != np.uint8:
        raise ManifestError("image_current must be an HxWx3 uint8 raster", field="image_current")
    if s.image_previous is not None and s.image_previous.shape != cur.shape:
        raise ManifestError("frames must share one resolution", field="image_previous")
    if len(s.instruction) == 0:
        raise ManifestError("instruction is empty", field="instruction")
    wp = s.waypoints
    if not isinstance(wp, np.ndarray) or wp.ndim != 2 or wp.shape[1] != 2 or len(wp) == 0:
        raise ManifestError("waypoints must be a Tx2 array", field="waypoints")
    if not np.all(np.isfinite(wp)) or wp.min() < 0.0 or wp.max() > 1.0:
        raise ManifestError("waypoint out of range", field="waypoints")
    if len(s.supervise_mask) != len(wp) or not any(s.supervise_mask):
        raise ManifestError("supervise_mask must have T entries, at least one true", field="supervise_mask")
    if s.source not in SOURCES:
        raise ManifestError(f"unknown source {s.source!r}", field="source")


@dataclass
class DatasetManifest:
    records: list[AffordanceSample]
    splits: list[str | None] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if not self.splits:
            self.splits = [None] * len(self.records)
        if len(self.splits) != len(self.records):
            raise ManifestError("one split tag per record is required")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.records[0].resolution

    def subset(self, tag: str) -> list[AffordanceSample]:
        return [r for r, s in zip(self.records, self.splits) if s == tag]

    @property
    def train(self) -> list[AffordanceSample]:
        return self.subset("train")

    @property
    def test(self) -> list[AffordanceSample]:
        return self.subset("test")

    def digest(self) -> str:
        return corpus_digest(self)


def corpus_digest(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for rec, tag in zip(manifest.records, manifest.splits):
        h.update(rec.image_current.tobytes())
        h.update(b"\x00" if rec.image_previous is None else rec.image_previous.tobytes())
        h.update(np.asarray(rec.instruction, dtype="<i8").tobytes())
        h.update(rec.waypoints.astype("<f8").tobytes())
        h.update(bytes(rec.supervise_mask))
        h.update(f"{rec.source}|{rec.pixel_resolution}|{tag}".encode())
    return h.hexdigest()


# --------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "push-line"
    canvas: int = 64
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES
    chunk_size: int = 5
    seed: int = 0
    max_shapes: int = 4
    radius: float = 5.0
    # displacement of the target over the whole chunk, as a fraction of the canvas
    displacement: tuple[float, float] = (0.15, 0.35)
    arc_sweep: float = math.pi / 2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not self.colors or not self.shapes:
            raise ValueError("shape/color vocabulary must be nonempty")
        if self.chunk_size < 1 or self.max_shapes < 1:
            raise ValueError("chunk_size and max_shapes must be >= 1")
        unknown = set(self.colors) - set(COLORS) | set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown vocabulary entries {sorted(unknown)}")


@dataclass(frozen=True)
class PlacedShape:
    shape: str
    color: str
    center: tuple[float, float]  # pixels, x to the right, y down


def render(shapes: Sequence[PlacedShape], canvas: int, radius: float) -> np.ndarray:
    img = np.zeros((canvas, canvas, 3), dtype=np.uint8)
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    for s in shapes:
        dx, dy = xs - s.center[0], ys - s.center[1]
        if s.shape == "circle":
            inside = dx * dx + dy * dy <= radius * radius
        elif s.shape == "square":
            half = radius * 0.85
            inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        else:
            # upward equilateral triangle with its centroid at the center
            inside = (dy <= radius / 2) & (
                np.abs(dx) * math.sqrt(3) <= (dy + radius)
            )
        img[inside] = COLORS[s.color]
    return img


def _trajectory(spec: SyntheticTaskSpec, start: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    T = spec.chunk_size
    if spec.kind == "touch":
        return np.repeat(start[None], T, axis=0), []
    lo, hi = spec.displacement
    length = rng.uniform(lo, hi) * spec.canvas
    heading = rng.uniform(0.0, 2 * math.pi)
    frac = np.linspace(0.0, 1.0, T)
    if spec.kind == "push-line":
        d = length * np.array([math.cos(heading), math.sin(heading)])
        return start + frac[:, None] * d, []
    side = "left" if rng.random() < 0.5 else "right"
    sign = -1.0 if side == "left" else 1.0
    # arc length equals the sampled displacement
    r = length / spec.arc_sweep
    normal = sign * np.array([-math.sin(heading), math.cos(heading)])
    center = start + r * normal
    a0 = math.atan2(*(start - center)[::-1])
    # sweep in whichever direction leaves the start point along the heading
    tangent = np.array([-math.sin(a0), math.cos(a0)])
    direction = 1.0 if tangent @ np.array([math.cos(heading), math.sin(heading)]) > 0 else -1.0
    angles = a0 + direction * frac * spec.arc_sweep
    pts = center + r * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return pts, ["arc", side]


def build_sample(
    spec: SyntheticTaskSpec,
    shapes: Sequence[PlacedShape],
    target: int,
    path_px: np.ndarray,
    extra_words: Sequence[str] = (),
) -> AffordanceSample:
    """Render a record from an explicit scene layout and target path (pixels)."""
    c = spec.canvas
    tgt = shapes[target]
    words = [_ACTION_WORD[spec.kind], tgt.color, tgt.shape, *extra_words]
    waypoints = np.asarray(path_px, dtype=np.float64) / c
    T = len(waypoints)
    if spec.kind == "touch":
        return AffordanceSample(
            image_current=render(shapes, c, spec.radius),
            image_previous=None,
            instruction=token_ids(words),
            waypoints=waypoints,
            supervise_mask=(True,) + (False,) * (T - 1),
        )
    step = tuple(path_px[1]) if T > 1 else tuple(path_px[0])
    moved = list(shapes)
    moved[target] = replace(tgt, center=(float(step[0]), float(step[1])))
    return AffordanceSample(
        image_current=render(moved, c, spec.radius),
        image_previous=render(shapes, c, spec.radius),
        instruction=token_ids(words),
        waypoints=waypoints,
        supervise_mask=(True,) * T,
    )


def _generate_one(spec: SyntheticTaskSpec, index: int) -> AffordanceSample:
    rng = np.random.default_rng([spec.seed, index])
    c, r = spec.canvas, spec.radius
    margin = r + 1.0
    combos = [(col, shp) for col in spec.colors for shp in spec.shapes]
    n_shapes = int(rng.integers(1, spec.max_shapes + 1))
    for _ in range(100):
        picks = rng.choice(len(combos), size=min(n_shapes, len(combos)), replace=False)
        start = rng.uniform(margin, c - margin, size=2)
        path, extra = _trajectory(spec, start, rng)
        if path.min() < margin or path.max() > c - margin:
            continue
        centers = [start]
        ok = True
        for _pick in picks[1:]:
            placed = False
            for _ in range(100):
                p = rng.uniform(margin, c - margin, size=2)
                if all(np.hypot(*(p - q)) >= 2.6 * r for q in centers) and np.all(
                    np.hypot(*(path - p).T) >= 2.6 * r
                ):
                    centers.append(p)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        shapes = [
            PlacedShape(combos[k][1], combos[k][0], (float(p[0]), float(p[1])))
            for k, p in zip(picks, centers)
        ]
        return build_sample(spec, shapes, 0, path, extra)
    raise GenerationError(f"record {index}: no valid placement after 100 retries")


def _generate_range(args) -> list[AffordanceSample]:
    spec, lo, hi = args
    return [_generate_one(spec, i) for i in range(lo, hi)]


def generate_synthetic(spec: SyntheticTaskSpec, count: int, workers: int = 1) -> DatasetManifest:
    """Generate ``count`` records; record ``i`` depends only on ``(spec, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if workers <= 1:
        records = [_generate_one(spec, i) for i in range(count)]
    else:
        bounds = np.linspace(0, count, workers + 1).astype(int)
        jobs = [(spec, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [r for chunk in pool.map(_generate_range, jobs) for r in chunk]
    return DatasetManifest(records)


def merge(*manifests: DatasetManifest) -> DatasetManifest:
    records, splits = [], []
    for m in manifests:
        records.extend(m.records)
        splits.extend(m.splits)
    return DatasetManifest(records, splits)


def split(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Shuffle deterministically and tag ``round(ratio * n)`` records as train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(manifest)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    tags: list[str | None] = [None] * n
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else "test"
    return DatasetManifest(list(manifest.records), tags, manifest.version)


# --------------------------------------------------------------------------
# persistence


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write ``manifest.json`` plus one PPM per frame into directory ``path``."""
    root = Path(path)
    if root.suffix == ".json":
        root, name = root.parent, root.name
    else:
        name = MANIFEST_NAME
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(manifest.records):
        cur = f"images/{i:06d}_cur.ppm"
        netpbm.write_ppm(root / cur, rec.image_current)
        prev = None
        if rec.image_previous is not None:
            prev = f"images/{i:06d}_prev.ppm"
            netpbm.write_ppm(root / prev, rec.image_previous)
        entry = {
            "image_current": cur,
            "image_previous": prev,
            "instruction": list(rec.instruction),
            "waypoints": rec.waypoints.tolist(),
            "supervise_mask": list(rec.supervise_mask),
            "source": rec.source,
            "split": manifest.splits[i],
        }
        if rec.native_resolution is not None:
            entry["native_resolution"] = list(rec.native_resolution)
        entries.append(entry)
    doc = {
        "version": manifest.version,
        "resolution": list(manifest.resolution) if manifest.records else None,
        "records": entries,
    }
    out = root / name
    out.write_text(json.dumps(doc, indent=1) + "\n")
    return out


def _field(entry: dict, key: str, i: int):
    if key not in entry:
        raise ManifestError(f"missing field {key!r} at record {i}", i, key)
    return entry[key]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or "records" not in doc:
        raise ManifestError(f"{path}: not a manifest document")
    version = doc.get("version", MANIFEST_VERSION)
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {version}")
    resolution = doc.get("resolution")
    records, splits = [], []
    for i, entry in enumerate(doc["records"]):
        instruction = _field(entry, "instruction", i)
        if not isinstance(instruction, list) or not instruction or not all(
            isinstance(t, int) and t >= 0 for t in instruction
        ):
            raise ManifestError(f"invalid instruction at record {i}", i, "instruction")
        wp = _field(entry, "waypoints", i)
        try:
            waypoints = np.asarray(wp, dtype=np.float64)
        except (TypeError, ValueError):
            raise ManifestError(f"malformed waypoints at record {i}", i, "waypoints") from None
        if waypoints.ndim != 2 or waypoints.shape[1] != 2 or len(waypoints) == 0:
            raise ManifestError(f"malformed waypoints at record {i}", i, "waypoints")
        if not np.all(np.isfinite(waypoints)) or waypoints.min() < 0 or waypoints.max() > 1:
            raise ManifestError(f"waypoint out of range at record {i}", i, "waypoints")
        mask = _field(entry, "supervise_mask", i)
        if not isinstance(mask, list) or len(mask) != len(waypoints) or not all(
            isinstance(m, bool) for m in mask
        ):
            raise ManifestError(f"supervise_mask must hold {len(waypoints)} booleans at record {i}", i, "supervise_mask")
        source = _field(entry, "source", i)
        if source not in SOURCES:
            raise ManifestError(f"unknown source {source!r} at record {i}", i, "source")
        tag = entry.get("split")
        if tag not in (None, "train", "test"):
            raise ManifestError(f"unknown split {tag!r} at record {i}", i, "split")
        try:
            cur = netpbm.read_ppm(root / _field(entry, "image_current", i))
            prev_ref = _field(entry, "image_previous", i)
            prev = None if prev_ref is None else netpbm.read_ppm(root / prev_ref)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"unreadable image at record {i}: {exc}", i, "image_current") from None
        if resolution is not None and tuple(resolution) != (cur.shape[1], cur.shape[0]):
            raise ManifestError(f"image resolution differs from manifest at record {i}", i, "image_current")
        native = entry.get("native_resolution")
        try:
            rec = AffordanceSample(
                image_current=cur,
                image_previous=prev,
                instruction=tuple(instruction),
                waypoints=waypoints,
                supervise_mask=tuple(mask),
                source=source,
                native_resolution=tuple(native) if native is not None else None,
            )
        except ManifestError as exc:
            raise ManifestError(f"{exc} at record {i}", i, exc.field) from None
        records.append(rec)
        splits.append(tag)
    return DatasetManifest(records, splits, version)


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    image_current: np.ndarray  # B x H x W x 3 uint8
    image_previous: np.ndarray  # B x H x W x 3 uint8; current frame substituted when absent
    text_ids: np.ndarray  # B x L int64, PAD_ID padded
    text_mask: np.ndarray  # B x L bool
    waypoints: np.ndarray  # B x T x 2
    supervise_mask: np.ndarray  # B x T bool
    pixel_resolution: np.ndarray  # B x 2 (width, height)

    def __len__(self) -> int:
        return len(self.waypoints)


def collate(samples: Sequence[AffordanceSample]) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty batch")
    T = samples[0].chunk_size
    if any(s.chunk_size != T for s in samples):
        raise ValueError("all samples in a batch must share one chunk size")
    L = max(len(s.instruction) for s in samples)
    ids = np.full((len(samples), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(samples), L), dtype=bool)
    for i, s in enumerate(samples):
        ids[i, : len(s.instruction)] = s.instruction
        mask[i, : len(s.instruction)] = True
    cur = np.stack([s.image_current for s in samples])
    prev = np.stack([s.image_current if s.image_previous is None else s.image_previous for s in samples])
    return Batch(
        image_current=cur,
        image_previous=prev,
        text_ids=ids,
        text_mask=mask,
        waypoints=np.stack([s.waypoints for s in samples]),
        supervise_mask=np.array([s.supervise_mask for s in samples], dtype=bool),
        pixel_resolution=np.array([s.pixel_resolution for s in samples], dtype=np.float64),
    )
