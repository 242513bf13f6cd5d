"""Volume and image containers, fluoroscopy preprocessing and raw I/O.

On-disk format: a JSON header ``<stem>.json`` next to a raw payload
``<stem>.raw``. Axes are listed x-first (for 2D images x is the column
axis) and the payload is written x-fastest, little endian::

    {"dims": [nx, ny, nz], "spacing_mm": [...], "origin_mm": [...],
     "dtype": "f32" | "u8", "order": "x-fastest-le", "data_file": "<stem>.raw"}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

N_LABELS = 7
LABEL_NAMES = ("background", "hemipelvis_L", "hemipelvis_R", "femur_L", "femur_R",
               "vertebrae", "sacrum")
BACKGROUND, HEMIPELVIS_L, HEMIPELVIS_R, FEMUR_L, FEMUR_R, VERTEBRAE, SACRUM = range(7)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Voxel grid indexed ``[ix, iy, iz]``; voxel ``i`` sits at ``origin + i * spacing``."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or v.size == 0:
            raise ValueError("volume must be a non-empty 3D array")
        if v.dtype != np.uint8:
            v = v.astype(np.float64, copy=False)
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError("spacing must be three positive values")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def is_label(self) -> bool:
        return self.voxels.dtype == np.uint8

    @property
    def extent(self) -> np.ndarray:
        """Physical size spanned by the voxel centres (mm)."""
        return (np.array(self.dims) - 1) * np.array(self.spacing)

    def index_to_physical(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * np.asarray(self.spacing)

    def physical_to_index(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)


@dataclass(frozen=True, eq=False)
class Image2D:
    pixels: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("image must be 2D")
        object.__setattr__(self, "pixels", p)
        object.__setattr__(self, "pixel_spacing", tuple(float(s) for s in self.pixel_spacing))

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class LabelImage2D:
    labels: np.ndarray
    pixel_spacing: tuple[float, float] = field(default=(1.0, 1.0))

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("label image must be 2D")
        if lab.size and int(lab.max()) >= N_LABELS:
            raise ValueError(f"labels must be < {N_LABELS}")
        object.__setattr__(self, "labels", lab.astype(np.uint8, copy=False))

    @property
    def shape(self):
        return self.labels.shape


# --------------------------------------------------------------------------


def resample_isotropic(v: Volume3D, spacing: float) -> Volume3D:
    """Resample onto an isotropic grid sharing the volume's origin.

    Intensities use trilinear interpolation, labels nearest neighbour.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    dims = np.floor(v.extent / spacing + 1e-9).astype(int) + 1
    axes = [np.arange(n) * spacing / s for n, s in zip(dims, v.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 0 if v.is_label else 1
    out = ndimage.map_coordinates(v.voxels, coords, order=order, mode="nearest")
    return Volume3D(out.astype(v.voxels.dtype, copy=False), (spacing,) * 3, v.origin)


def preprocess_fluoro(img: Image2D, crop_px: int = 50, epsilon: float = 1e-6) -> Image2D:
    """Border crop followed by log correction so that bone appears bright.

    Output is ``-log(max(I / I_max, epsilon))``.
    """
    rows, cols = img.shape
    if crop_px < 0 or rows - 2 * crop_px <= 0 or cols - 2 * crop_px <= 0:
        raise ValueError(f"cropping {crop_px} px leaves no pixels of a {rows}x{cols} image")
    p = img.pixels[crop_px:rows - crop_px, crop_px:cols - crop_px]
    peak = p.max()
    if peak <= 0:
        raise ValueError("fluoroscopy intensities must have a positive maximum")
    out = -np.log(np.maximum(p / peak, epsilon))
    return Image2D(out + 0.0, img.pixel_spacing)


def downsample(img: Image2D, factor: int) -> Image2D:
    """Block average; trailing partial blocks average only their valid pixels."""
    f = int(factor)
    if f < 1:
        raise ValueError("factor must be >= 1")
    if f == 1:
        return img
    return Image2D(_block_mean(img.pixels, f),
                   (img.pixel_spacing[0] * f, img.pixel_spacing[1] * f))


def _block_mean(a: np.ndarray, f: int) -> np.ndarray:
    rows, cols = a.shape
    R, C = -(-rows // f), -(-cols // f)
    pad = np.zeros((R * f, C * f))
    cnt = np.zeros((R * f, C * f))
    pad[:rows, :cols] = a
    cnt[:rows, :cols] = 1.0
    s = pad.reshape(R, f, C, f).sum(axis=(1, 3))
    n = cnt.reshape(R, f, C, f).sum(axis=(1, 3))
    return s / n


def downsample_labels(lbl: LabelImage2D, factor: int) -> LabelImage2D:
    """Nearest-neighbour decimation matching :func:`downsample`'s block centres."""
    f = int(factor)
    if f == 1:
        return lbl
    rows, cols = lbl.shape
    r = np.minimum(np.arange(-(-rows // f)) * f + (f - 1) // 2, rows - 1)
    c = np.minimum(np.arange(-(-cols // f)) * f + (f - 1) // 2, cols - 1)
    return LabelImage2D(lbl.labels[np.ix_(r, c)],
                        (lbl.pixel_spacing[0] * f, lbl.pixel_spacing[1] * f))


def sobel_gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel derivatives ``(gx, gy)`` along columns and rows, replicate padding."""
    a = img.pixels if isinstance(img, Image2D) else np.asarray(img, dtype=float)
    if min(a.shape) < 3:
        raise ValueError("Sobel needs an image of at least 3x3 pixels")
    gx = ndimage.sobel(a, axis=1, mode="nearest")
    gy = ndimage.sobel(a, axis=0, mode="nearest")
    return gx, gy


# --------------------------------------------------------------------------
# raw + JSON header I/O


def _stem(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext in (".json", ".raw") else path


def write_raw(path: str, array: np.ndarray, spacing, origin=None) -> str:
    """Write an array indexed x-first (``[x, y(, z)]``); returns the header path."""
    stem = _stem(path)
    arr = np.asarray(array)
    code = "u8" if arr.dtype == np.uint8 else "f32"
    header = {
        "dims": list(arr.shape),
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in (origin if origin is not None else [0.0] * arr.ndim)],
        "dtype": code,
        "order": "x-fastest-le",
        "data_file": os.path.basename(stem) + ".raw",
    }
    arr.astype(_DTYPES[code]).ravel(order="F").tofile(stem + ".raw")
    with open(stem + ".json", "w") as fh:
        json.dump(header, fh, indent=2)
    return stem + ".json"


def read_raw(path: str) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    with open(stem + ".json") as fh:
        header = json.load(fh)
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in header:
            raise KeyError(f"{stem}.json: missing header key '{key}'")
    if header.get("order", "x-fastest-le") != "x-fastest-le":
        raise ValueError(f"{stem}.json: unsupported voxel order {header['order']!r}")
    data_file = os.path.join(os.path.dirname(stem + ".json"), header.get("data_file", os.path.basename(stem) + ".raw"))
    dt = _DTYPES[header["dtype"]]
    flat = np.fromfile(data_file, dtype=dt)
    dims = tuple(int(d) for d in header["dims"])
    if flat.size != int(np.prod(dims)):
        raise ValueError(f"{data_file}: expected {np.prod(dims)} values, found {flat.size}")
    arr = flat.reshape(dims, order="F")
    arr = arr.astype(np.uint8) if dt == np.uint8 else arr.astype(np.float64)
    return arr, header


def write_volume(path: str, v: Volume3D) -> str:
    return write_raw(path, v.voxels, v.spacing, v.origin)


def read_volume(path: str) -> Volume3D:
    arr, h = read_raw(path)
    if arr.ndim != 3:
        raise ValueError("expected a 3D volume")
    return Volume3D(arr, tuple(h["spacing_mm"]), tuple(h.get("origin_mm", (0, 0, 0))))


def write_image(path: str, img: Image2D | LabelImage2D) -> str:
    a = img.labels if isinstance(img, LabelImage2D) else img.pixels
    sp = img.pixel_spacing
    return write_raw(path, a.T, (sp[1], sp[0]))


def read_image(path: str) -> Image2D | LabelImage2D:
    arr, h = read_raw(path)
    if arr.ndim != 2:
        raise ValueError("expected a 2D image")
    sx, sy = h["spacing_mm"]
    if arr.dtype == np.uint8:
        return LabelImage2D(arr.T.copy(), (sy, sx))
    return Image2D(arr.T.copy(), (sy, sx))
