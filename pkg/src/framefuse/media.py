"""Core raster types and on-disk formats.

Conventions used throughout the package:

* Frame: float32 array of shape (H, W, 3), RGB, values in [0, 1].
* FlowField: float32 array of shape (H, W, 2), channels (dx, dy) in pixels.
  The value at pixel p is an offset; p + offset is the sample location in
  the field's source image.
* Mask: float32 array of shape (H, W), values in [0, 1], 1 = valid.

Disk formats: 8-bit PNG frame directories (%06d.png), Middlebury ``.flo``
flow files, JSON project configuration.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, fields

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """A file does not conform to its expected on-disk format."""


class ConfigError(ValueError):
    """Invalid project configuration."""


FLO_MAGIC = b"PIEH"

FUSION_SPACES = ("image", "feature", "hybrid")
FUSION_FUNCTIONS = ("mean", "gaussian", "argmax", "flow_error", "learned")

_FRAME_RE = re.compile(r"^(\d{6})\.png$")


def validate_frame(frame: np.ndarray, name: str = "frame") -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise FormatError(f"{name}: expected (H, W, 3) array, got {frame.shape}")
    if not np.isfinite(frame).all():
        raise FormatError(f"{name}: non-finite pixel values")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise FormatError(f"{name}: pixel values outside [0, 1]")
    return frame


def validate_flow(flow: np.ndarray, name: str = "flow") -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"{name}: expected (H, W, 2) array, got {flow.shape}")
    if not np.isfinite(flow).all():
        raise FormatError(f"{name}: non-finite flow values")
    return flow


def read_frame(path: str) -> np.ndarray:
    """Load one 8-bit RGB PNG as a float frame in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_frame(path: str, frame: np.ndarray) -> None:
    """Quantize a frame to 8 bits and write it as PNG."""
    frame = np.asarray(frame, dtype=np.float32)
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_frame_sequence(dir: str) -> list[np.ndarray]:
    """Read a directory of consecutively numbered %06d.png frames.

    Raises on index gaps (naming the first missing index) and on mixed
    frame dimensions (naming the offending file).
    """
    indices = {}
    for name in os.listdir(dir):
        m = _FRAME_RE.match(name)
        if m:
            indices[int(m.group(1))] = name
    if not indices:
        raise FormatError(f"no %06d.png frames found in {dir}")
    count = max(indices) + 1
    for i in range(count):
        if i not in indices:
            raise FormatError(f"missing frame {i:06d} in {dir}")
    frames = []
    shape = None
    for i in range(count):
        frame = read_frame(os.path.join(dir, indices[i]))
        if shape is None:
            shape = frame.shape
        elif frame.shape != shape:
            raise FormatError(
                f"frame {indices[i]} has shape {frame.shape[:2]}, expected {shape[:2]}"
            )
        frames.append(validate_frame(frame, indices[i]))
    return frames


def write_frame_sequence(dir: str, frames) -> None:
    os.makedirs(dir, exist_ok=True)
    for i, frame in enumerate(frames):
        write_frame(os.path.join(dir, f"{i:06d}.png"), frame)


def read_flo(path: str) -> np.ndarray:
    """Read a Middlebury .flo file into an (H, W, 2) float32 field."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLO_MAGIC:
            raise FormatError(f"{path}: bad .flo magic {magic!r}")
        header = f.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated .flo header")
        width, height = struct.unpack("<ii", header)
        if width <= 0 or height <= 0:
            raise FormatError(f"{path}: invalid .flo dimensions {width}x{height}")
        payload = f.read(height * width * 2 * 4)
    expected = height * width * 2 * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated .flo payload, expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2)
    return np.ascontiguousarray(data)


def write_flo(path: str, flow: np.ndarray) -> None:
    """Write an (H, W, 2) field as a Middlebury .flo file (bit-exact round trip)."""
    flow = validate_flow(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes())


@dataclass
class ProjectConfig:
    """Project configuration; a single JSON document, CLI flags override keys."""

    frame_dir: str
    warp_dir: str
    output_dir: str
    flow_dir: str | None = None
    neighborhood_radius: int = 3
    fusion_space: str = "hybrid"
    fusion_function: str = "learned"
    checkpoint: str | None = None
    sharpness_threshold: float = 0.6
    lambda_s: float = 100.0
    detail_transfer: bool = True

    def validate(self) -> "ProjectConfig":
        if self.neighborhood_radius < 1:
            raise ConfigError("neighborhood_radius must be >= 1")
        if self.fusion_space not in FUSION_SPACES:
            raise ConfigError(
                f"fusion_space must be one of {FUSION_SPACES}, got {self.fusion_space!r}"
            )
        if self.fusion_function not in FUSION_FUNCTIONS:
            raise ConfigError(
                f"fusion_function must be one of {FUSION_FUNCTIONS}, "
                f"got {self.fusion_function!r}"
            )
        if not (0.0 < self.sharpness_threshold <= 1.0):
            raise ConfigError("sharpness_threshold must be in (0, 1]")
        if self.lambda_s < 0:
            raise ConfigError("lambda_s must be >= 0")
        return self


def load_config(path: str) -> ProjectConfig:
    """Load and validate a JSON project configuration; unknown keys rejected."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(ProjectConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    required = ("frame_dir", "warp_dir", "output_dir")
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"{path}: missing required keys {missing}")
    return ProjectConfig(**raw).validate()
