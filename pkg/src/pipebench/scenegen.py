"""Synthetic map scenes: two squares, one triangle, and the square nearest to it.

Coordinates are normalized to the unit square with the origin at the bottom-left
corner, so ``y`` grows upward while image rows grow downward.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, GenerationError
from .pgm import read_pgm, write_pgm

MAX_ATTEMPTS = 10_000
COORD_SCALE = 1000  # scenes live on a 3-decimal grid so manifests are exact
REFERENCE_SIZE = 224
MANIFEST_HEADER = ["image", "sq0_x", "sq0_y", "sq1_x", "sq1_y", "tri_x", "tri_y", "tgt_x", "tgt_y"]
SPLITS = ("train", "eval", "test")


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"point ({self.x}, {self.y}) lies outside the unit square")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


def _sq_dist(a: Point, b: Point) -> float:
    dx = a.x - b.x
    dy = a.y - b.y
    return dx * dx + dy * dy


def nearest_square(squares: Sequence[Point], triangle: Point) -> tuple[int, Point]:
    """Index and position of the square closest to ``triangle``.

    Ties go to the lowest index.
    """
    if len(squares) == 0:
        raise ValueError("nearest_square needs at least one square")
    best = 0
    best_d = _sq_dist(squares[0], triangle)
    for i in range(1, len(squares)):
        d = _sq_dist(squares[i], triangle)
        if d < best_d:
            best, best_d = i, d
    return best, squares[best]


@dataclass(frozen=True)
class Scene:
    squares: tuple[Point, ...]
    triangle: Point
    target_index: int

    @classmethod
    def from_points(cls, squares: Sequence[Point], triangle: Point) -> "Scene":
        idx, _ = nearest_square(squares, triangle)
        return cls(tuple(squares), triangle, idx)

    @property
    def target(self) -> Point:
        return self.squares[self.target_index]

    @property
    def context(self) -> tuple[Point, ...]:
        """Points in manifest order: squares first, then the triangle."""
        return (*self.squares, self.triangle)

    def coordinates(self) -> list[float]:
        return [v for p in self.context for v in p.as_tuple()]


@dataclass(frozen=True)
class SampleRecord:
    image_path: str | None
    scene: Scene


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 1_001_000
    image_h: int = REFERENCE_SIZE
    image_w: int = REFERENCE_SIZE
    channels: int = 1
    seed: int = 0
    margin: float = 0.05
    min_separation: float = 0.05
    square_side_px: int | None = None
    triangle_side_px: int | None = None
    n_eval: int = 1000
    n_test: int = 1000
    tie_epsilon: float = 1e-3
    n_squares: int = 2
    stream: int = 0  # separate streams give independent scenes under one seed

    def __post_init__(self):
        if self.channels != 1:
            raise ValueError("only single-channel (grayscale) images are supported")
        if self.seed < 0 or self.stream < 0:
            raise ValueError("seed and stream must be non-negative integers")
        if min(self.n_eval, self.n_test) < 0 or self.n_eval + self.n_test > self.n_samples:
            raise ValueError(
                f"eval ({self.n_eval}) + test ({self.n_test}) exceed n_samples ({self.n_samples})"
            )
        if not 0.0 <= self.margin < 0.5:
            raise ValueError(f"margin must lie in [0, 0.5), got {self.margin}")
        if self.n_squares < 1:
            raise ValueError("need at least one square")
        need = max(self.square_px, self.triangle_px) / (2 * min(self.image_h, self.image_w))
        if self.margin < need:
            raise ValueError(f"margin {self.margin} too small for shape sizes, need >= {need:.4f}")
        self._check_footprints_fit()

    @property
    def square_px(self) -> int:
        if self.square_side_px is not None:
            return self.square_side_px
        return max(2, round(11 * min(self.image_h, self.image_w) / REFERENCE_SIZE))

    @property
    def triangle_px(self) -> int:
        if self.triangle_side_px is not None:
            return self.triangle_side_px
        return max(2, round(13 * min(self.image_h, self.image_w) / REFERENCE_SIZE))

    @property
    def n_train(self) -> int:
        return self.n_samples - self.n_eval - self.n_test

    def coord_range(self) -> tuple[int, int]:
        """Inclusive range of sampled coordinates, in thousandths."""
        lo = math.ceil(self.margin * COORD_SCALE - 1e-9)
        hi = math.floor((1 - self.margin) * COORD_SCALE + 1e-9)
        return lo, hi

    def _check_footprints_fit(self):
        lo, hi = self.coord_range()
        if lo > hi:
            raise ValueError("margin leaves no room to place shapes")
        for offsets in (square_offsets(self.square_px), triangle_offsets(self.triangle_px)):
            for k in (lo, hi):
                r, c = pixel_of(Point(k / COORD_SCALE, k / COORD_SCALE), self.image_h, self.image_w)
                rows = offsets[:, 0] + r
                cols = offsets[:, 1] + c
                if rows.min() < 0 or cols.min() < 0 or rows.max() >= self.image_h or cols.max() >= self.image_w:
                    raise ValueError("shapes placed at the margin would clip the image border")

    def to_dict(self) -> dict:
        return asdict(self)


def pixel_of(p: Point, h: int, w: int) -> tuple[int, int]:
    """(row, col) of a normalized point; rounds half up."""
    col = math.floor(p.x * (w - 1) + 0.5)
    row = math.floor((1.0 - p.y) * (h - 1) + 0.5)
    return row, col


@lru_cache(maxsize=None)
def _square_offsets(side: int) -> np.ndarray:
    span = np.arange(-((side - 1) // 2), side // 2 + 1)
    rr, cc = np.meshgrid(span, span, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def square_offsets(side: int) -> np.ndarray:
    return _square_offsets(side)


@lru_cache(maxsize=None)
def _triangle_offsets(base: int) -> np.ndarray:
    # Equilateral, apex up, centroid on the anchor pixel; pixel centers inside are filled.
    height = base * math.sqrt(3) / 2
    apex = -2 * height / 3
    bottom = height / 3
    eps = 1e-9
    out = []
    for dr in range(math.ceil(apex - eps), math.floor(bottom + eps) + 1):
        half = (base / 2) * (dr - apex) / height
        reach = math.floor(half + eps)
        for dc in range(-reach, reach + 1):
            out.append((dr, dc))
    return np.array(out, dtype=np.int64)


def triangle_offsets(base: int) -> np.ndarray:
    return _triangle_offsets(base)


def _bbox(offsets: np.ndarray, r: int, c: int) -> tuple[int, int, int, int]:
    return (
        r + int(offsets[:, 0].min()),
        r + int(offsets[:, 0].max()),
        c + int(offsets[:, 1].min()),
        c + int(offsets[:, 1].max()),
    )


def _boxes_touch(a, b) -> bool:
    # one pixel of background must separate shapes
    return not (a[1] + 1 < b[0] or b[1] + 1 < a[0] or a[3] + 1 < b[2] or b[3] + 1 < a[2])


def sample_scene(cfg: DatasetConfig, index: int) -> Scene:
    """Scene number ``index`` of the dataset described by ``cfg``.

    Each index owns an RNG stream derived from ``(cfg.seed, cfg.stream, index)``,
    so scenes do not depend on generation order.
    """
    if not 0 <= index < cfg.n_samples:
        raise IndexError(f"index {index} outside [0, {cfg.n_samples})")
    rng = np.random.default_rng([cfg.seed, cfg.stream, index])
    lo, hi = cfg.coord_range()
    n_pts = cfg.n_squares + 1
    sq_off = square_offsets(cfg.square_px)
    tri_off = triangle_offsets(cfg.triangle_px)
    min_sep2 = cfg.min_separation**2
    for _ in range(MAX_ATTEMPTS):
        k = rng.integers(lo, hi + 1, size=(n_pts, 2))
        pts = [Point(int(a) / COORD_SCALE, int(b) / COORD_SCALE) for a, b in k]
        if any(_sq_dist(pts[i], pts[j]) < min_sep2 for i in range(n_pts) for j in range(i + 1, n_pts)):
            continue
        boxes = [
            _bbox(sq_off if i < cfg.n_squares else tri_off, *pixel_of(p, cfg.image_h, cfg.image_w))
            for i, p in enumerate(pts)
        ]
        if any(_boxes_touch(boxes[i], boxes[j]) for i in range(n_pts) for j in range(i + 1, n_pts)):
            continue
        squares, triangle = pts[:-1], pts[-1]
        dists = sorted(math.dist(s.as_tuple(), triangle.as_tuple()) for s in squares)
        if len(dists) > 1 and dists[1] - dists[0] < cfg.tie_epsilon:
            continue
        return Scene.from_points(squares, triangle)
    raise GenerationError(
        f"no valid scene for index {index} after {MAX_ATTEMPTS} attempts; configuration is infeasible"
    )


def rasterize(scene: Scene, cfg: DatasetConfig) -> np.ndarray:
    """White 8-bit canvas with the scene's shapes filled in black."""
    img = np.full((cfg.image_h, cfg.image_w), 255, dtype=np.uint8)
    for p in scene.squares:
        r, c = pixel_of(p, cfg.image_h, cfg.image_w)
        off = square_offsets(cfg.square_px)
        img[off[:, 0] + r, off[:, 1] + c] = 0
    r, c = pixel_of(scene.triangle, cfg.image_h, cfg.image_w)
    off = triangle_offsets(cfg.triangle_px)
    img[off[:, 0] + r, off[:, 1] + c] = 0
    return img


@dataclass
class Manifest:
    """Train / eval / test sample records plus the directory images resolve against."""

    root: Path | None
    train: list[SampleRecord] = field(default_factory=list)
    eval: list[SampleRecord] = field(default_factory=list)
    test: list[SampleRecord] = field(default_factory=list)
    image_shape: tuple[int, int] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def split(self, name: str) -> list[SampleRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def load_images(self, split: str) -> np.ndarray:
        """``(N, H, W)`` uint8 images of a split, read once and cached."""
        if split not in self._cache:
            self._cache[split] = load_images(self.split(split), self.root)
        return self._cache[split]


def format_coord(v: float) -> str:
    return f"{v:.3f}"


def manifest_rows(records: Iterable[SampleRecord]) -> list[list[str]]:
    rows = []
    for rec in records:
        s = rec.scene
        if len(s.squares) != 2:
            raise DataError("the CSV manifest layout holds exactly two squares")
        coords = [*s.coordinates(), *s.target.as_tuple()]
        rows.append([rec.image_path or "", *(format_coord(v) for v in coords)])
    return rows


def write_manifest(path: str | Path, records: Iterable[SampleRecord]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    writer.writerows(manifest_rows(records))
    try:
        Path(path).write_text(buf.getvalue(), encoding="ascii")
    except OSError as e:
        raise DataError(f"cannot write manifest {path}: {e}") from e


def read_manifest(path: str | Path) -> list[SampleRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != MANIFEST_HEADER:
        raise DataError(f"{path}: unexpected header {header}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            vals = [float(v) for v in row[1:]]
            sq = (Point(vals[0], vals[1]), Point(vals[2], vals[3]))
            scene = Scene.from_points(sq, Point(vals[4], vals[5]))
        except (ValueError, IndexError) as e:
            raise DataError(f"{path}:{lineno}: malformed row ({e})") from e
        if scene.target.as_tuple() != (vals[6], vals[7]):
            raise DataError(f"{path}:{lineno}: stored target is not the nearest square")
        out.append(SampleRecord(row[0] or None, scene))
    return out


def load_manifest(root: str | Path) -> Manifest:
    root = Path(root)
    splits = {name: read_manifest(root / f"{name}.csv") for name in SPLITS}
    shape = None
    meta = root / "dataset.json"
    if meta.exists():
        d = json.loads(meta.read_text())
        shape = (d["image_h"], d["image_w"])
    return Manifest(root=root, image_shape=shape, **splits)


def load_images(records: Sequence[SampleRecord], root: str | Path | None) -> np.ndarray:
    """Stack the records' images into a ``(N, H, W)`` uint8 array."""
    if root is None:
        raise DataError("manifest has no image root; it holds coordinates only")
    imgs = []
    for rec in records:
        if rec.image_path is None:
            raise DataError("record without an image path")
        p = Path(root) / rec.image_path
        try:
            imgs.append(read_pgm(p))
        except OSError as e:
            raise DataError(f"cannot read image {p}: {e}") from e
    return np.stack(imgs) if imgs else np.zeros((0, 0, 0), dtype=np.uint8)


def image_name(index: int) -> str:
    return f"images/map_{index:07d}.pgm"


def _render_chunk(cfg: DatasetConfig, out_dir: str, indices: Sequence[int]) -> list[SampleRecord]:
    out = []
    for i in indices:
        scene = sample_scene(cfg, i)
        rel = image_name(i)
        path = Path(out_dir) / rel
        try:
            write_pgm(path, rasterize(scene, cfg))
        except OSError as e:
            raise DataError(f"cannot write image {path}: {e}") from e
        out.append(SampleRecord(rel, scene))
    return out


def split_indices(cfg: DatasetConfig) -> dict[str, range]:
    a = cfg.n_train
    b = a + cfg.n_eval
    return {"train": range(0, a), "eval": range(a, b), "test": range(b, cfg.n_samples)}


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path, workers: int = 1, chunk: int = 2000) -> Manifest:
    """Render every sample to ``out_dir/images`` and write the three split manifests.

    ``workers > 1`` fans rendering out over processes; output does not depend on it.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {out_dir}: {e}") from e
    chunks = [range(s, min(s + chunk, cfg.n_samples)) for s in range(0, cfg.n_samples, chunk)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_render_chunk, [cfg] * len(chunks), [str(out_dir)] * len(chunks), chunks))
    else:
        parts = [_render_chunk(cfg, str(out_dir), c) for c in chunks]
    records = [r for part in parts for r in part]
    manifest = Manifest(root=out_dir, image_shape=(cfg.image_h, cfg.image_w))
    for name, idx in split_indices(cfg).items():
        setattr(manifest, name, records[idx.start : idx.stop])
        write_manifest(out_dir / f"{name}.csv", manifest.split(name))
    try:
        (out_dir / "dataset.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    except OSError as e:
        raise DataError(f"cannot write {out_dir / 'dataset.json'}: {e}") from e
    return manifest


def coordinate_manifest(cfg: DatasetConfig) -> Manifest:
    """Scenes only, no images; enough to train the symbolic stage."""
    m = Manifest(root=None)
    for name, idx in split_indices(cfg).items():
        setattr(m, name, [SampleRecord(None, sample_scene(cfg, i)) for i in idx])
    return m
