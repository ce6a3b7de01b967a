"""Category x condition image datasets.

Two sources produce the same ``Dataset`` shape: a fully procedural
"Grid-Positions" generator (seven-segment glyphs placed on a cell grid) and
an ingestion path that builds a positions dataset from externally supplied
IDX digit files.

All images are single-channel floats in [0, 1], quantized to the 1/255 grid
so that IDX serialization round-trips exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, InvalidArgumentError

# Seven-segment layout on the unit square, y growing downward.
# Segments: A top, B upper-right, C lower-right, D bottom, E lower-left,
# F upper-left, G middle.
_SEGMENTS = {
    "A": ((0.22, 0.16), (0.78, 0.16)),
    "B": ((0.78, 0.16), (0.78, 0.50)),
    "C": ((0.78, 0.50), (0.78, 0.84)),
    "D": ((0.22, 0.84), (0.78, 0.84)),
    "E": ((0.22, 0.50), (0.22, 0.84)),
    "F": ((0.22, 0.16), (0.22, 0.50)),
    "G": ((0.22, 0.50), (0.78, 0.50)),
}

_GLYPH_TEMPLATES = [
    "ABCDEF",   # 0
    "BC",       # 1
    "ABGED",    # 2
    "ABGCD",    # 3
    "FGBC",     # 4
    "AFGCD",    # 5
    "AFGEDC",   # 6
    "ABC",      # 7
    "ABCDEFG",  # 8
    "ABCDFG",   # 9
]

MAX_GLYPH_CATEGORIES = len(_GLYPH_TEMPLATES)

# Stream tags keep the per-item RNG draws independent of each other.
_STYLE_TAG = 0x51
_NOISE_TAG = 0x52


@dataclass(frozen=True)
class GridSpec:
    """Geometry and size of a procedural Grid-Positions dataset.

    Conditions are cells of a ``rows x cols`` grid, numbered row-major;
    ``num_conditions`` may use only the first cells of the grid (it must not
    exceed ``rows * cols``; equality is the canonical 9-position layout).
    """

    num_categories: int
    num_conditions: int
    cell_grid: tuple[int, int]
    glyph_size: int
    canvas_size: int
    samples_per_combination: int
    noise_std: float = 0.0

    def validate(self):
        rows, cols = self.cell_grid
        if self.num_categories < 1 or self.num_categories > MAX_GLYPH_CATEGORIES:
            raise InvalidArgumentError(
                f"num_categories must be in [1, {MAX_GLYPH_CATEGORIES}], got {self.num_categories}"
            )
        if rows < 1 or cols < 1:
            raise InvalidArgumentError(f"cell_grid must be positive, got {self.cell_grid}")
        if self.num_conditions < 1 or self.num_conditions > rows * cols:
            raise InvalidArgumentError(
                f"num_conditions must be in [1, rows*cols={rows * cols}], got {self.num_conditions}"
            )
        if self.glyph_size < 3:
            raise InvalidArgumentError(f"glyph_size too small: {self.glyph_size}")
        if self.canvas_size < rows * self.glyph_size or self.canvas_size < cols * self.glyph_size:
            raise InvalidArgumentError(
                f"canvas {self.canvas_size} cannot hold {rows}x{cols} cells of {self.glyph_size}px glyphs"
            )
        if self.samples_per_combination < 0:
            raise InvalidArgumentError("samples_per_combination must be >= 0")
        if self.noise_std < 0:
            raise InvalidArgumentError("noise_std must be >= 0")


@dataclass(frozen=True)
class LabeledImage:
    """One image with its (category, condition) label."""

    pixels: np.ndarray  # H x W x 1 float32 in [0, 1]
    category: int
    condition: int


@dataclass
class Dataset:
    items: list[LabeledImage]
    num_categories: int
    num_conditions: int
    provenance: str  # "procedural" | "idx_ingested"

    def __len__(self):
        return len(self.items)

    def validate(self):
        if self.provenance not in ("procedural", "idx_ingested"):
            raise InvalidArgumentError(f"unknown provenance {self.provenance!r}")
        for k, item in enumerate(self.items):
            if not (0 <= item.category < self.num_categories):
                raise InvalidArgumentError(f"item {k}: category {item.category} out of range")
            if not (0 <= item.condition < self.num_conditions):
                raise InvalidArgumentError(f"item {k}: condition {item.condition} out of range")

    def labels(self) -> np.ndarray:
        """(N, 2) int array of (category, condition) per item."""
        return np.array([(it.category, it.condition) for it in self.items], dtype=np.int64).reshape(
            -1, 2
        )

    def stacked_pixels(self) -> np.ndarray:
        """(N, H, W, 1) float32 stack; requires a nonempty dataset."""
        if not self.items:
            raise InvalidArgumentError("empty dataset has no pixel stack")
        return np.stack([it.pixels for it in self.items])


def _quantize(pixels: np.ndarray) -> np.ndarray:
    """Clip to [0,1] and snap to the 1/255 grid (exact IDX round-trip)."""
    u8 = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return (u8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def render_glyph(category: int, style_seed: int, glyph_size: int) -> np.ndarray:
    """Rasterize the stroke template of ``category`` at ``glyph_size`` pixels.

    The same (category, style_seed) pair is bit-reproducible; the seed jitters
    sub-pixel translation, stroke thickness, and intensity so samples within a
    combination differ.
    """
    if not (0 <= category < MAX_GLYPH_CATEGORIES):
        raise InvalidArgumentError(
            f"category {category} out of range [0, {MAX_GLYPH_CATEGORIES})"
        )
    if glyph_size < 3:
        raise InvalidArgumentError(f"glyph_size too small: {glyph_size}")
    rng = np.random.default_rng(np.random.SeedSequence([_STYLE_TAG, category, int(style_seed)]))
    dx, dy = rng.uniform(-1.0, 1.0, size=2)  # pixels
    thickness = rng.uniform(1.4, 2.0)  # stroke full width, pixels
    intensity = rng.uniform(0.82, 1.0)

    g = glyph_size
    ys, xs = np.mgrid[0:g, 0:g]
    px = (xs + 0.5) + 0.0  # pixel centers
    py = (ys + 0.5) + 0.0
    out = np.zeros((g, g), dtype=np.float64)
    for name in _GLYPH_TEMPLATES[category]:
        (x0, y0), (x1, y1) = _SEGMENTS[name]
        ax, ay = x0 * g + dx, y0 * g + dy
        bx, by = x1 * g + dx, y1 * g + dy
        vx, vy = bx - ax, by - ay
        denom = vx * vx + vy * vy
        t = ((px - ax) * vx + (py - ay) * vy) / denom
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(px - (ax + t * vx), py - (ay + t * vy))
        # Soft-edged stroke: full intensity inside, ~0.7px falloff.
        cov = np.clip((thickness / 2.0 + 0.35 - dist) / 0.7, 0.0, 1.0)
        out = np.maximum(out, cov)
    return _quantize(out * intensity)


def _cell_origin(condition: int, spec_rows: int, spec_cols: int, canvas: int, glyph: int):
    row, col = divmod(condition, spec_cols)
    cell_h = canvas // spec_rows
    cell_w = canvas // spec_cols
    top = row * cell_h + (cell_h - glyph) // 2
    left = col * cell_w + (cell_w - glyph) // 2
    return top, left


def generate_grid_positions(spec: GridSpec, seed: int) -> Dataset:
    """Procedural dataset: one glyph per image, placed in its condition's cell.

    Produces exactly ``samples_per_combination`` items for every (category,
    condition) pair; Gaussian pixel noise of ``spec.noise_std`` is added and
    the result clipped back into [0, 1]. Deterministic per (spec, seed).
    """
    spec.validate()
    rows, cols = spec.cell_grid
    items = []
    for c in range(spec.num_categories):
        for n in range(spec.num_conditions):
            for s in range(spec.samples_per_combination):
                style_rng = np.random.default_rng(
                    np.random.SeedSequence([int(seed), c, n, s, _STYLE_TAG])
                )
                style_seed = int(style_rng.integers(0, 2**63 - 1))
                glyph = render_glyph(c, style_seed, spec.glyph_size)
                canvas = np.zeros((spec.canvas_size, spec.canvas_size), dtype=np.float32)
                top, left = _cell_origin(n, rows, cols, spec.canvas_size, spec.glyph_size)
                canvas[top : top + spec.glyph_size, left : left + spec.glyph_size] = glyph
                if spec.noise_std > 0:
                    noise_rng = np.random.default_rng(
                        np.random.SeedSequence([int(seed), c, n, s, _NOISE_TAG])
                    )
                    canvas = canvas + noise_rng.normal(
                        0.0, spec.noise_std, size=canvas.shape
                    ).astype(np.float32)
                pixels = _quantize(canvas)[..., None]
                items.append(LabeledImage(pixels=pixels, category=c, condition=n))
    return Dataset(
        items=items,
        num_categories=spec.num_categories,
        num_conditions=spec.num_conditions,
        provenance="procedural",
    )


# ---------------------------------------------------------------------------
# IDX binary format (big-endian; magic 0x00 0x00, type 0x08, rank byte,
# rank 4-byte dims, raw unsigned bytes).
# ---------------------------------------------------------------------------

_IDX_TYPE_UBYTE = 0x08


def write_idx(path, array: np.ndarray):
    """Write an unsigned-byte tensor of any rank as an IDX file."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim > 255:
        raise InvalidArgumentError("IDX rank must fit in one byte")
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, _IDX_TYPE_UBYTE, arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack(">I", dim))
        f.write(arr.tobytes())


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file; raises FormatError on malformed input."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    z0, z1, dtype, rank = struct.unpack(">BBBB", data[:4])
    if z0 != 0 or z1 != 0:
        raise FormatError(f"{path}: bad IDX magic bytes {z0:#04x} {z1:#04x}")
    if dtype != _IDX_TYPE_UBYTE:
        raise FormatError(f"{path}: unsupported IDX type byte {dtype:#04x} (expected 0x08)")
    header_len = 4 + 4 * rank
    if len(data) < header_len:
        raise FormatError(f"{path}: truncated IDX dimension list")
    dims = struct.unpack(f">{rank}I", data[4:header_len]) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = data[header_len:]
    if len(payload) != count:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, dimensions require {count}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def load_idx(images_path, labels_path) -> list[tuple[np.ndarray, int]]:
    """Load an IDX image/label file pair as [(H x W float grid in [0,1], class)].

    Image file must be rank 3 (count, rows, cols); label file rank 1. Counts
    must agree. Pixels are mapped to [0, 1] by division by 255.
    """
    images = read_idx(images_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected rank-3 image file, got rank {images.ndim}")
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected rank-1 label file, got rank {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    grids = images.astype(np.float32) / np.float32(255.0)
    return [(grids[k], int(labels[k])) for k in range(images.shape[0])]


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-D grid (pixel-center aligned, edges clamped)."""
    in_h, in_w = image.shape
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError("output size must be positive")
    img = image.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def build_positions_dataset(
    base: list[tuple[np.ndarray, int]],
    grid: tuple[int, int],
    glyph_size: int,
    canvas_size: int,
    classes_kept: int,
) -> Dataset:
    """Positions dataset from base digit images (the MNIST-Positions recipe).

    Each kept image is resized to ``glyph_size`` (bilinear) and placed in one
    grid cell; cells are assigned round-robin within each class so that the
    per-(category, condition) counts differ by at most one. To keep that
    balance exact across categories, every kept class is truncated to the
    smallest kept-class count.
    """
    if not base:
        raise InvalidArgumentError("base image list is empty")
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"grid must be positive, got {grid}")
    if canvas_size < rows * glyph_size or canvas_size < cols * glyph_size:
        raise InvalidArgumentError(
            f"canvas {canvas_size} cannot hold {rows}x{cols} cells of {glyph_size}px glyphs"
        )
    distinct = sorted({cls for _, cls in base})
    if classes_kept < 1 or classes_kept > len(distinct):
        raise InvalidArgumentError(
            f"classes_kept={classes_kept} but base has {len(distinct)} distinct classes"
        )
    kept = distinct[:classes_kept]
    class_to_category = {cls: i for i, cls in enumerate(kept)}
    by_class = {cls: [] for cls in kept}
    for pixels, cls in base:
        if cls in by_class:
            by_class[cls].append(pixels)
    min_count = min(len(v) for v in by_class.values())
    if min_count == 0:
        raise InvalidArgumentError("a kept class has no images")

    num_conditions = rows * cols
    items = []
    for cls in kept:
        category = class_to_category[cls]
        for j, pixels in enumerate(by_class[cls][:min_count]):
            condition = (j + category) % num_conditions
            glyph = resize_bilinear(pixels, glyph_size, glyph_size)
            canvas = np.zeros((canvas_size, canvas_size), dtype=np.float64)
            top, left = _cell_origin(condition, rows, cols, canvas_size, glyph_size)
            canvas[top : top + glyph_size, left : left + glyph_size] = glyph
            items.append(
                LabeledImage(pixels=_quantize(canvas)[..., None], category=category, condition=condition)
            )
    return Dataset(
        items=items,
        num_categories=classes_kept,
        num_conditions=num_conditions,
        provenance="idx_ingested",
    )


# ---------------------------------------------------------------------------
# Dataset persistence: images.idx (rank-3 ubyte) + manifest.jsonl + meta.json.
# ---------------------------------------------------------------------------

_IMAGES_FILE = "images.idx"
_MANIFEST_FILE = "manifest.jsonl"
_META_FILE = "meta.json"


def save_dataset(dataset: Dataset, directory):
    """Persist as one rank-3 IDX file plus a JSON-lines label manifest.

    meta.json carries the counts/provenance so empty datasets round-trip.
    """
    dataset.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if dataset.items:
        stack = dataset.stacked_pixels()
        height, width = stack.shape[1], stack.shape[2]
        u8 = np.rint(stack[..., 0] * 255.0).astype(np.uint8)
    else:
        height = width = 0
        u8 = np.zeros((0, 0, 0), dtype=np.uint8)
    write_idx(directory / _IMAGES_FILE, u8)
    with open(directory / _MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as f:
        for i, item in enumerate(dataset.items):
            f.write(json.dumps({"i": i, "c": item.category, "n": item.condition}) + "\n")
    meta = {
        "num_categories": dataset.num_categories,
        "num_conditions": dataset.num_conditions,
        "provenance": dataset.provenance,
        "height": height,
        "width": width,
    }
    with open(directory / _META_FILE, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(meta, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    """Exact inverse of :func:`save_dataset`."""
    directory = Path(directory)
    images = read_idx(directory / _IMAGES_FILE)
    if images.ndim != 3:
        raise FormatError(f"{directory / _IMAGES_FILE}: expected rank-3 image file")
    with open(directory / _META_FILE, encoding="utf-8") as f:
        meta = json.load(f)
    records = []
    with open(directory / _MANIFEST_FILE, encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if sorted(obj.keys()) != ["c", "i", "n"]:
                raise FormatError(
                    f"{directory / _MANIFEST_FILE}:{line_no + 1}: expected keys i, c, n"
                )
            records.append(obj)
    if len(records) != images.shape[0]:
        raise ConsistencyError(
            f"manifest has {len(records)} lines but IDX holds {images.shape[0]} images"
        )
    items = []
    for k, obj in enumerate(records):
        if obj["i"] != k:
            raise ConsistencyError(f"manifest line {k + 1} has index {obj['i']}, expected {k}")
        pixels = (images[k].astype(np.float32) / np.float32(255.0))[..., None]
        items.append(LabeledImage(pixels=pixels, category=int(obj["c"]), condition=int(obj["n"])))
    dataset = Dataset(
        items=items,
        num_categories=int(meta["num_categories"]),
        num_conditions=int(meta["num_conditions"]),
        provenance=str(meta["provenance"]),
    )
    dataset.validate()
    return dataset


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Field-by-field equality (exact pixel comparison)."""
    if (
        a.num_categories != b.num_categories
        or a.num_conditions != b.num_conditions
        or a.provenance != b.provenance
        or len(a.items) != len(b.items)
    ):
        return False
    return all(
        x.category == y.category
        and x.condition == y.condition
        and x.pixels.shape == y.pixels.shape
        and np.array_equal(x.pixels, y.pixels)
        for x, y in zip(a.items, b.items)
    )
