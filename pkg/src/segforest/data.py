"""Class masks: PGM/PPM I/O, block padding and synthetic mask generators.

A class mask is a 2-D ``uint8`` array of class indices; 255 marks ignored
pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE = 255


class MaskFormatError(ValueError):
    """Unreadable PGM/PPM data."""


def check_mask(mask: np.ndarray, class_count: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    bad = (mask >= class_count) & (mask != IGNORE)
    if bad.any():
        raise ValueError(f"mask has values >= {class_count} that are not the ignore index")
    return mask


def palette_color(c: int) -> tuple[int, int, int]:
    """RGB-cube corner of class ``c``: bit 0 red, bit 1 green, bit 2 blue."""
    return (255 * (c & 1), 255 * ((c >> 1) & 1), 255 * ((c >> 2) & 1))


PALETTE = np.array([palette_color(c) for c in range(8)], dtype=np.uint8)


def colorize(mask: np.ndarray) -> np.ndarray:
    """RGB image of a mask; ignored pixels are drawn mid-gray."""
    lut = np.full((256, 3), 128, dtype=np.uint8)
    lut[:8] = PALETTE
    return lut[np.asarray(mask)]


def _read_header(data: bytes, magic: bytes):
    """Parse a binary netpbm header; returns ``(width, height, maxval, offset)``."""
    if data[:2] != magic:
        raise MaskFormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MaskFormatError(f"truncated header at byte {pos}")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise MaskFormatError(f"bad header field {data[start:pos]!r} at byte {start}") from None
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MaskFormatError(f"missing whitespace after header at byte {pos}")
    return fields[0], fields[1], fields[2], pos + 1


def load_mask(data: bytes) -> np.ndarray:
    """Decode a binary PGM (P5, maxval 255); pixel values are class indices."""
    width, height, maxval, offset = _read_header(data, b"P5")
    if maxval != 255:
        raise MaskFormatError(f"maxval must be 255, got {maxval}")
    need = width * height
    body = data[offset:offset + need]
    if len(body) < need:
        raise MaskFormatError(f"truncated body at byte {offset + len(body)}: "
                              f"expected {need} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def save_mask(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError("mask values must fit in a byte")
    h, w = mask.shape
    return b"P5\n%d %d\n255\n" % (w, h) + mask.astype(np.uint8).tobytes()


def save_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must have shape (H, W, 3)")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + image.astype(np.uint8).tobytes()


def load_ppm(data: bytes) -> np.ndarray:
    width, height, maxval, offset = _read_header(data, b"P6")
    if maxval != 255:
        raise MaskFormatError(f"maxval must be 255, got {maxval}")
    need = 3 * width * height
    body = data[offset:offset + need]
    if len(body) < need:
        raise MaskFormatError(f"truncated body at byte {offset + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def pad_to_blocks(mask: np.ndarray, block_size: int) -> np.ndarray:
    """Pad right and bottom with the ignore index up to multiples of ``block_size``."""
    mask = np.asarray(mask)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError("cannot pad an empty mask")
    h, w = mask.shape
    H = -(-h // block_size) * block_size
    W = -(-w // block_size) * block_size
    out = np.full((H, W), IGNORE, dtype=np.uint8)
    out[:h, :w] = mask
    return out


def to_blocks(mask: np.ndarray, block_size: int) -> np.ndarray:
    """``(H, W)`` -> ``(H_b, W_b, S*S)`` with blocks in row-major order."""
    h, w = mask.shape
    if h % block_size or w % block_size:
        raise ValueError(f"mask {w}x{h} is not a multiple of block size {block_size}")
    S = block_size
    return (np.asarray(mask).reshape(h // S, S, w // S, S).transpose(0, 2, 1, 3)
            .reshape(h // S, w // S, S * S))


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 128
    classes: int = 8
    circle_count: tuple[int, int] = (5, 12)
    radius: tuple[float, float] = (8.0, 32.0)
    split_range: tuple[float, float] = (0.25, 0.75)

    def __post_init__(self):
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")
        if not 2 <= self.classes <= 8:
            raise ValueError("classes must be between 2 and 8 (RGB cube corners)")


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    radius: float
    label: int


def draw_circles(size: int, circles, background: int = 0) -> np.ndarray:
    """Rasterize circles in order at pixel centers; later circles overdraw earlier ones."""
    mask = np.full((size, size), background, dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for c in circles:
        inside = (xx - c.cx) ** 2 + (yy - c.cy) ** 2 <= c.radius ** 2
        mask[inside] = c.label
    return mask


def circle_params(config: ToyConfig, seed: int) -> list[Circle]:
    rng = np.random.default_rng(seed)
    lo, hi = config.circle_count
    n = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0, config.image_size, size=2)
        r = rng.uniform(*config.radius)
        out.append(Circle(float(cx), float(cy), float(r), int(rng.integers(1, config.classes))))
    return out


def gen_circles_toy(config: ToyConfig = ToyConfig(), seed: int = 0):
    """Random circles over background class 0; returns ``(mask, rgb image)``."""
    mask = draw_circles(config.image_size, circle_params(config, seed))
    return mask, colorize(mask)


@dataclass(frozen=True)
class Partition:
    """Vertical split at column ``split_x``; row splits ``split_left``/``split_right``.

    ``labels`` are the classes of top-left, bottom-left, top-right, bottom-right.
    """

    split_x: int
    split_left: int
    split_right: int
    labels: tuple[int, int, int, int]


def partition_params(config: ToyConfig, seed: int) -> Partition:
    rng = np.random.default_rng(seed)
    n = config.image_size
    lo, hi = config.split_range
    xs, yl, yr = (int(round(v)) for v in rng.uniform(lo * n, hi * n, size=3))
    labels = [int(c) for c in rng.choice(config.classes, size=4, replace=False)]
    if rng.random() < 0.5:
        # top-left and bottom-right share a class: 3 distinct classes
        labels[3] = labels[0]
    return Partition(xs, yl, yr, tuple(labels))


def draw_partition(size: int, part: Partition) -> np.ndarray:
    mask = np.empty((size, size), dtype=np.uint8)
    tl, bl, tr, br = part.labels
    mask[:part.split_left, :part.split_x] = tl
    mask[part.split_left:, :part.split_x] = bl
    mask[:part.split_right, part.split_x:] = tr
    mask[part.split_right:, part.split_x:] = br
    return mask


def gen_partition_toy(config: ToyConfig = ToyConfig(), seed: int = 0) -> np.ndarray:
    """One vertical split, then an independent horizontal split on each side."""
    return draw_partition(config.image_size, partition_params(config, seed))


def convex_polygon(rng, center, radius, n_vertices):
    """Vertices on a circle at sorted random angles, which is always convex."""
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
    return np.stack([center[0] + radius * np.cos(angles),
                     center[1] + radius * np.sin(angles)], axis=1)


def fill_convex(mask: np.ndarray, vertices: np.ndarray, label: int):
    """Set pixels whose centers lie inside a counter-clockwise convex polygon."""
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = np.ones((h, w), dtype=bool)
    n = len(vertices)
    for i in range(n):
        (x0, y0), (x1, y1) = vertices[i], vertices[(i + 1) % n]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    mask[inside] = label


def gen_polygon_scene(size: int = 256, classes: int = 6, seed: int = 0,
                      polygons: tuple[int, int] = (4, 8),
                      radius: tuple[float, float] = (24.0, 72.0)) -> np.ndarray:
    """Random convex polygons overdrawn on background class 0."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(polygons[0], polygons[1] + 1))):
        center = rng.uniform(0, size, size=2)
        verts = convex_polygon(rng, center, rng.uniform(*radius), int(rng.integers(3, 8)))
        fill_convex(mask, verts, int(rng.integers(1, classes)))
    return mask


def gen_partition_composite(size: int = 256, classes: int = 6, seed: int = 0) -> np.ndarray:
    """2x2 tiling of independent partition toys."""
    half = size // 2
    config = ToyConfig(image_size=half, classes=classes)
    seeds = np.random.SeedSequence(seed).generate_state(4)
    tiles = [gen_partition_toy(config, int(s)) for s in seeds]
    return np.block([[tiles[0], tiles[1]], [tiles[2], tiles[3]]]).astype(np.uint8)


def polygon_suite(n: int = 20, size: int = 256, classes: int = 6, seed: int = 0):
    """Half partition composites, half convex-polygon scenes."""
    out = []
    for i in range(n):
        s = seed * 1000 + i
        if i % 2 == 0:
            out.append(gen_partition_composite(size, classes, s))
        else:
            out.append(gen_polygon_scene(size, classes, s))
    return out
