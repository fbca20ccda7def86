"""Overlapping tile decomposition and feathered stitching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TileSpec:
    """Low-resolution rectangle; ``overlap`` is shared with each interior neighbor."""

    x: int
    y: int
    w: int
    h: int
    overlap: int
    index: int = 0

    def slices(self, scale: int = 1) -> tuple[slice, slice]:
        return (slice(self.y * scale, (self.y + self.h) * scale),
                slice(self.x * scale, (self.x + self.w) * scale))


def _axis_starts(length: int, tile: int, overlap: int) -> list[tuple[int, int]]:
    step = tile - overlap
    spans = []
    start = 0
    while True:
        end = min(start + tile, length)
        spans.append((start, end - start))
        if end >= length:
            return spans
        start += step


def split_tiles(width: int, height: int, tile_w: int, tile_h: int, overlap: int) -> list[TileSpec]:
    """Cover a ``width`` x ``height`` image with tiles overlapping by exactly ``overlap``.

    Tiles advance by ``tile - overlap``; the last tile along an axis is
    clipped at the image border. Tiles are ordered row-major.
    """
    if min(width, height, tile_w, tile_h) < 1:
        raise ValueError("image and tile dimensions must be positive")
    if tile_w > width or tile_h > height:
        raise ValueError(f"tile {tile_w}x{tile_h} is larger than the image {width}x{height}")
    if overlap < 0 or overlap >= min(tile_w, tile_h):
        raise ValueError(f"overlap {overlap} must be nonnegative and smaller than the tile size")
    xs = _axis_starts(width, tile_w, overlap)
    ys = _axis_starts(height, tile_h, overlap)
    tiles = []
    for y, h in ys:
        for x, w in xs:
            tiles.append(TileSpec(x, y, w, h, overlap, len(tiles)))
    return tiles


def _ramp(start: int, size: int, total: int, overlap: int) -> np.ndarray:
    """Per-pixel weights along one axis for a tile spanning ``[start, start + size)``."""
    w = np.ones(size)
    if overlap == 0:
        return w
    rise = (np.arange(overlap) + 0.5) / overlap
    if start > 0:
        w[:overlap] = np.minimum(w[:overlap], rise)
    if start + size < total:
        w[size - overlap:] = np.minimum(w[size - overlap:], rise[::-1])
    return w


def stitch_weights(tiles: list[TileSpec], scale: int = 1) -> list[np.ndarray]:
    """Linear feathering weights for each tile, on the ``scale``-times finer grid."""
    width = max(t.x + t.w for t in tiles) * scale
    height = max(t.y + t.h for t in tiles) * scale
    out = []
    for t in tiles:
        wx = _ramp(t.x * scale, t.w * scale, width, t.overlap * scale)
        wy = _ramp(t.y * scale, t.h * scale, height, t.overlap * scale)
        out.append(np.outer(wy, wx))
    return out


def stitch(tiles: list[TileSpec], results: list[np.ndarray], scale: int = 1) -> np.ndarray:
    """Blend per-tile arrays into one image.

    Pixels covered by a single tile are copied; in overlaps the tiles are
    mixed with linear ramps. Weights are renormalized per pixel, so constant
    inputs stay constant whatever the geometry.
    """
    if len(tiles) != len(results):
        raise ValueError("need one result per tile")
    if not tiles:
        raise ValueError("no tiles to stitch")
    width = max(t.x + t.w for t in tiles) * scale
    height = max(t.y + t.h for t in tiles) * scale
    acc = np.zeros((height, width))
    wsum = np.zeros((height, width))
    for t, r, w in zip(tiles, results, stitch_weights(tiles, scale)):
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (t.h * scale, t.w * scale):
            raise ValueError(f"tile {t.index} result has shape {r.shape}, expected {(t.h * scale, t.w * scale)}")
        rs, cs = t.slices(scale)
        acc[rs, cs] += w * r
        wsum[rs, cs] += w
    if np.any(wsum <= 0):
        raise ValueError("tiles do not cover the image")
    return acc / wsum


def owns(tile: TileSpec, tiles_extent: tuple[int, int], x: float, y: float, scale: int = 1) -> bool:
    """Whether high-res point ``(x, y)`` lies in the tile's share of the image.

    Overlaps are split at their midline so every point has exactly one owner.
    """
    width, height = tiles_extent
    half = tile.overlap * scale / 2.0
    x0 = tile.x * scale + (half if tile.x > 0 else 0.0)
    x1 = (tile.x + tile.w) * scale - (half if tile.x + tile.w < width else 0.0)
    y0 = tile.y * scale + (half if tile.y > 0 else 0.0)
    y1 = (tile.y + tile.h) * scale - (half if tile.y + tile.h < height else 0.0)
    return x0 <= x < x1 and y0 <= y < y1
