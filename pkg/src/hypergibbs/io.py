"""File formats: raw float64 arrays with JSON sidecars, 16-bit PGM previews, images."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import BadImageFormat


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_f64(path, array: np.ndarray, **meta) -> None:
    """Raw little-endian float64 in row-major order plus a ``.json`` sidecar."""
    array = np.ascontiguousarray(array, dtype="<f8")
    Path(path).write_bytes(array.tobytes())
    doc = {"shape": list(array.shape), "dtype": "f64", "order": "row-major"}
    doc.update(meta)
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_f64(path) -> np.ndarray:
    doc = json.loads(sidecar_path(path).read_text())
    if doc.get("dtype") != "f64" or doc.get("order") != "row-major":
        raise BadImageFormat(f"{path}: unsupported layout {doc}")
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f8").astype(np.float64)
    shape = tuple(doc["shape"])
    if data.size != int(np.prod(shape)):
        raise BadImageFormat(f"{path}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def write_pgm16(path, image: np.ndarray) -> None:
    """Binary 16-bit PGM, min-max rescaled to ``0..65535``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM output needs a 2-D image")
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros(image.shape) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 65535.0).astype(">u2")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_image(path) -> np.ndarray:
    """Grayscale image as float64 from ``.f64`` (with sidecar) or any format Pillow reads."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".f64":
        img = read_f64(path)
    else:
        from PIL import Image, UnidentifiedImageError
        try:
            with Image.open(path) as im:
                if im.mode not in ("L", "I", "I;16", "I;16B", "F"):
                    im = im.convert("L")
                img = np.asarray(im, dtype=np.float64)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise BadImageFormat(f"{path}: {exc}") from None
    if img.ndim != 2:
        raise BadImageFormat(f"{path}: expected a 2-D grayscale image, got shape {img.shape}")
    return img


def builtin_image(name: str, size: int | None = None) -> np.ndarray:
    """A standard test image from scikit-image, optionally resized to ``size x size``."""
    from skimage import data, transform
    loaders = {"camera": data.camera, "cameraman": data.camera, "moon": data.moon,
               "brick": data.brick, "grass": data.grass}
    if name not in loaders:
        raise BadImageFormat(f"unknown builtin image {name!r}; choose from {sorted(loaders)}")
    img = np.asarray(loaders[name](), dtype=np.float64)
    if size is None or img.shape == (size, size):
        return img
    if img.shape[0] % size == 0 and img.shape[1] % size == 0 and img.shape[0] == img.shape[1]:
        f = img.shape[0] // size
        return img.reshape(size, f, size, f).mean(axis=(1, 3))
    return transform.resize(img, (size, size), order=1, anti_aliasing=True, preserve_range=True)


def load_truth(source: str, size: int | None = None) -> np.ndarray:
    """``builtin:<name>`` or a path to an image file."""
    if source.startswith("builtin:"):
        return builtin_image(source.split(":", 1)[1], size)
    return read_image(source)
