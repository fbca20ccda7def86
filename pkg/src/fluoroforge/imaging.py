"""Image and frame-stack containers, PNG I/O, binning, noise and temporal means.

Intensities are stored as float64 on a normalized scale where 1.0 corresponds
to the 16-bit saturation value 65535.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

RAW_MAX = 65535
MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_{:04d}.png"


class StackError(ValueError):
    """Raised when a stack directory is malformed or inconsistent."""


@dataclass(frozen=True)
class Image:
    """A single-channel image; ``pixels`` has shape (height, width)."""

    pixels: np.ndarray
    pixel_size_nm: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image intensities must be finite")
        if np.any(px < 0):
            raise ValueError("image intensities must be nonnegative")
        if not self.pixel_size_nm > 0:
            raise ValueError("pixel_size_nm must be positive")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class StackManifest:
    frame_count: int
    width: int
    height: int
    pixel_size_nm: float
    exposure_ms: float
    scale_factor: int = 1
    rng_seed: int | None = None
    profile_digest: str | None = None

    def to_json(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "width": self.width,
            "height": self.height,
            "pixel_size_nm": self.pixel_size_nm,
            "exposure_ms": self.exposure_ms,
            "scale_factor": self.scale_factor,
            "rng_seed": self.rng_seed,
            "profile_digest": self.profile_digest,
        }

    @classmethod
    def from_json(cls, data: dict) -> "StackManifest":
        try:
            return cls(
                frame_count=int(data["frame_count"]),
                width=int(data["width"]),
                height=int(data["height"]),
                pixel_size_nm=float(data["pixel_size_nm"]),
                exposure_ms=float(data["exposure_ms"]),
                scale_factor=int(data.get("scale_factor", 1)),
                rng_seed=data.get("rng_seed"),
                profile_digest=data.get("profile_digest"),
            )
        except KeyError as exc:
            raise StackError(f"manifest missing key {exc}") from None


@dataclass(frozen=True)
class FrameStack:
    """An ordered time series of equally sized frames."""

    frames: tuple[Image, ...]
    exposure_ms: float = 1.0
    scale_factor: int = 1
    rng_seed: int | None = None
    profile_digest: str | None = None
    _array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise StackError("a frame stack needs at least one frame")
        first = frames[0]
        for i, f in enumerate(frames):
            if f.shape != first.shape or f.pixel_size_nm != first.pixel_size_nm:
                raise StackError(
                    f"heterogeneous frames: frame 0 is {first.shape}, frame {i} is {f.shape}"
                )
        if not self.exposure_ms > 0:
            raise StackError("exposure_ms must be positive")
        object.__setattr__(self, "frames", frames)
        arr = np.stack([f.pixels for f in frames])
        arr.setflags(write=False)
        object.__setattr__(self, "_array", arr)

    @classmethod
    def from_array(cls, data: np.ndarray, pixel_size_nm: float = 1.0, **kwargs) -> "FrameStack":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise StackError(f"expected a (T, H, W) array, got shape {data.shape}")
        return cls(tuple(Image(d, pixel_size_nm) for d in data), **kwargs)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def pixel_size_nm(self) -> float:
        return self.frames[0].pixel_size_nm

    def as_array(self) -> np.ndarray:
        """Read-only (T, H, W) view of all frames."""
        return self._array

    def manifest(self) -> StackManifest:
        return StackManifest(
            frame_count=self.frame_count,
            width=self.width,
            height=self.height,
            pixel_size_nm=self.pixel_size_nm,
            exposure_ms=self.exposure_ms,
            scale_factor=self.scale_factor,
            rng_seed=self.rng_seed,
            profile_digest=self.profile_digest,
        )


def load_image(path, pixel_size_nm: float = 1.0) -> Image:
    """Load a 16-bit single-channel PNG as a normalized :class:`Image`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with PILImage.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise ValueError(f"{path}: expected 16-bit grayscale PNG, got mode {im.mode!r}")
        raw = np.array(im, dtype=np.uint16)
    if raw.size == 0:
        raise ValueError(f"{path}: zero-size image")
    return Image(raw.astype(np.float64) / RAW_MAX, pixel_size_nm)


def to_raw(pixels: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to uint16."""
    return np.round(np.clip(pixels, 0.0, 1.0) * RAW_MAX).astype(np.uint16)


def save_image(image: Image | np.ndarray, path) -> None:
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    PILImage.fromarray(to_raw(pixels)).save(Path(path), format="PNG")


def save_stack(stack: FrameStack, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(stack.frames):
        save_image(frame, directory / FRAME_PATTERN.format(i))
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(stack.manifest().to_json(), fh, indent=2)


def load_stack(directory) -> FrameStack:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise StackError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = StackManifest.from_json(json.load(fh))

    present = sorted(p.name for p in directory.glob("frame_*.png"))
    expected = [FRAME_PATTERN.format(i) for i in range(manifest.frame_count)]
    if present != expected:
        raise StackError(
            f"frame count mismatch: manifest says {manifest.frame_count}, "
            f"found {len(present)} frame files"
        )
    frames = tuple(load_image(directory / name, manifest.pixel_size_nm) for name in expected)
    if frames[0].shape != (manifest.height, manifest.width):
        raise StackError(
            f"manifest dimensions {manifest.width}x{manifest.height} do not match "
            f"frames {frames[0].width}x{frames[0].height}"
        )
    return FrameStack(
        frames,
        exposure_ms=manifest.exposure_ms,
        scale_factor=manifest.scale_factor,
        rng_seed=manifest.rng_seed,
        profile_digest=manifest.profile_digest,
    )


def block_mean(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor`` x ``factor`` blocks of a 2-D (or stacked 3-D) array."""
    h, w = pixels.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image shape {w}x{h}")
    lead = pixels.shape[:-2]
    blocks = pixels.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


def downsample(image: Image, factor: int) -> Image:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    return Image(block_mean(image.pixels, factor), image.pixel_size_nm * factor)


def add_gaussian_noise(image: Image, sigma: float, rng: np.random.Generator) -> Image:
    """Add i.i.d. N(0, sigma^2) noise and clamp at zero."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return image
    noisy = image.pixels + rng.normal(0.0, sigma, size=image.shape)
    return Image(np.maximum(noisy, 0.0), image.pixel_size_nm)


def temporal_mean(stack: FrameStack) -> Image:
    if stack.frame_count < 1:
        raise StackError("empty stack")
    return Image(stack.as_array().mean(axis=0), stack.pixel_size_nm)


def ensure_dir_writable(directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"directory not writable: {directory}")
    return directory
