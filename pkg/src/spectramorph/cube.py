"""Raster cube data model, container I/O and spectral projection.

A cube is stored on disk as a ``<name>.hdr`` / ``<name>.bin`` pair. The header
is UTF-8 ``key = value`` text; the payload is little-endian IEEE-754, row-major
and band-interleaved-by-pixel (band index fastest).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

PathLike = Union[str, os.PathLike]

_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
_RESERVED_KEYS = ("height", "width", "bands", "dtype", "wavelengths")
ALIGN = 32


class CubeFormatError(ValueError):
    """Raised for malformed cube headers or payloads."""


@dataclass(frozen=True, eq=False)
class DataCube:
    """An ``H x W x B`` raster with optional per-band wavelengths (nm).

    ``values`` is kept as a numpy array of shape ``(height, width, bands)``;
    its C-order flattening is the row-major, band-fastest layout used on disk.
    """

    values: np.ndarray
    wavelengths: Optional[tuple] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError(f"cube values must be 3-D, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        object.__setattr__(self, "values", v)
        if self.wavelengths is not None:
            wl = tuple(float(w) for w in self.wavelengths)
            if len(wl) != v.shape[2]:
                raise ValueError(
                    f"{len(wl)} wavelengths given for a cube with {v.shape[2]} bands"
                )
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise ValueError("wavelengths must be strictly increasing")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def with_values(self, values: np.ndarray, keep_wavelengths: bool = True) -> "DataCube":
        wl = self.wavelengths if keep_wavelengths else None
        return DataCube(values, wavelengths=wl)


@dataclass(frozen=True)
class CropSpec:
    row0: int
    col0: int
    rows: int
    cols: int

    def fits(self, cube: DataCube) -> bool:
        return (
            self.row0 >= 0
            and self.col0 >= 0
            and self.rows > 0
            and self.cols > 0
            and self.row0 + self.rows <= cube.height
            and self.col0 + self.cols <= cube.width
        )

    def overlaps(self, other: "CropSpec") -> bool:
        return not (
            self.row0 + self.rows <= other.row0
            or other.row0 + other.rows <= self.row0
            or self.col0 + self.cols <= other.col0
            or other.col0 + other.cols <= self.col0
        )

    def scaled(self, factor: int) -> "CropSpec":
        """Same region on a grid ``factor`` times finer."""
        return CropSpec(self.row0 * factor, self.col0 * factor, self.rows * factor, self.cols * factor)

    def to_text(self) -> str:
        return f"{self.row0},{self.col0},{self.rows},{self.cols}"

    @classmethod
    def parse(cls, text: str) -> "CropSpec":
        parts = [int(p) for p in text.replace(" ", "").split(",")]
        if len(parts) != 4:
            raise ValueError(f"crop must be 'row0,col0,rows,cols', got {text!r}")
        return cls(*parts)


# --------------------------------------------------------------------------- I/O


def _pair_paths(path: PathLike) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".hdr", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".hdr"), p.with_name(p.name + ".bin")


def save_cube(cube: DataCube, path: PathLike, dtype: str = "f32le", meta: Optional[dict] = None) -> None:
    """Write ``cube`` as a header/payload pair.

    ``meta`` entries are written as extra header keys (e.g. provenance hashes).
    Float64 cubes written as ``f32le`` are rounded to single precision; use
    ``dtype="f64le"`` for a lossless round trip.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    hdr_path, bin_path = _pair_paths(path)
    lines = [
        f"height = {cube.height}",
        f"width = {cube.width}",
        f"bands = {cube.bands}",
        f"dtype = {dtype}",
    ]
    if cube.wavelengths is not None:
        lines.append("wavelengths = " + ",".join(repr(w) for w in cube.wavelengths))
    extra = dict(cube.meta)
    extra.update(meta or {})
    for key in sorted(extra):
        if key in _RESERVED_KEYS or "=" in key or "\n" in str(extra[key]):
            raise ValueError(f"bad header key/value: {key!r}")
        lines.append(f"{key} = {extra[key]}")
    payload = np.ascontiguousarray(cube.values, dtype=_DTYPES[dtype]).tobytes(order="C")
    hdr_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    bin_path.write_bytes(payload)


def _parse_header(text: str) -> dict:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CubeFormatError(f"header line {lineno} is not key = value: {raw!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def load_cube(path: PathLike) -> DataCube:
    """Read a cube container written by :func:`save_cube`."""
    hdr_path, bin_path = _pair_paths(path)
    fields = _parse_header(hdr_path.read_text(encoding="utf-8"))
    try:
        h, w, b = (int(fields[k]) for k in ("height", "width", "bands"))
    except KeyError as exc:
        raise CubeFormatError(f"header missing required key {exc}") from None
    except ValueError:
        raise CubeFormatError("height/width/bands must be integers") from None
    if min(h, w, b) < 1:
        raise CubeFormatError(f"non-positive dimensions {h}x{w}x{b}")
    dtype_name = fields.get("dtype", "f32le")
    if dtype_name not in _DTYPES:
        raise CubeFormatError(f"unsupported dtype {dtype_name!r}; expected f32le or f64le")
    dt = _DTYPES[dtype_name]
    raw = bin_path.read_bytes()
    expected = h * w * b * dt.itemsize
    if len(raw) != expected:
        raise CubeFormatError(
            f"payload has {len(raw)} bytes, header declares {h}x{w}x{b} {dtype_name} ({expected} bytes)"
        )
    values = np.frombuffer(raw, dtype=dt).reshape(h, w, b).astype(dt.newbyteorder("="))
    wavelengths = None
    if fields.get("wavelengths"):
        wavelengths = [float(x) for x in fields["wavelengths"].split(",")]
    meta = {k: v for k, v in fields.items() if k not in _RESERVED_KEYS}
    try:
        return DataCube(values, wavelengths=wavelengths, meta=meta)
    except ValueError as exc:
        raise CubeFormatError(str(exc)) from None


def load_srf(path: PathLike) -> np.ndarray:
    """Read a ``C x c`` spectral response matrix from CSV (header row optional)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(x.strip() for x in r)]
    if not rows:
        raise ValueError(f"{path}: empty SRF file")
    try:
        [float(x) for x in rows[0]]
    except ValueError:
        rows = rows[1:]
    srf = np.array([[float(x) for x in r] for r in rows], dtype=np.float64)
    return check_srf(srf)


def save_srf(srf: np.ndarray, path: PathLike) -> None:
    srf = check_srf(srf)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"b{m}" for m in range(srf.shape[1])])
        writer.writerows([[repr(float(x)) for x in row] for row in srf])


def check_srf(srf: np.ndarray) -> np.ndarray:
    srf = np.asarray(srf, dtype=np.float64)
    if srf.ndim == 1:
        srf = srf[:, None]
    if srf.ndim != 2:
        raise ValueError(f"SRF must be a 2-D matrix, got shape {srf.shape}")
    if np.any(srf < 0) or not np.all(np.isfinite(srf)):
        raise ValueError("SRF entries must be finite and nonnegative")
    if np.any(srf.max(axis=0) <= 0):
        raise ValueError("every SRF column needs a strictly positive entry")
    return srf


def gaussian_srf(bands: int, msi_bands: int, fwhm_fraction: float = 1.0) -> np.ndarray:
    """Broad Gaussian band responses evenly tiling ``bands`` HSI channels.

    Columns are normalized to unit sum so a flat spectrum maps to itself.
    """
    if msi_bands < 1 or bands < msi_bands:
        raise ValueError("need 1 <= msi_bands <= bands")
    idx = np.arange(bands, dtype=np.float64)
    width = bands / msi_bands
    centers = (np.arange(msi_bands) + 0.5) * width - 0.5
    sigma = fwhm_fraction * width / 2.3548
    if msi_bands == 1:
        centers = np.array([(bands - 1) / 2.0])
        sigma = bands / 2.0
    srf = np.exp(-0.5 * ((idx[:, None] - centers[None, :]) / sigma) ** 2)
    return srf / srf.sum(axis=0, keepdims=True)


# ----------------------------------------------------------------- operations


def normalize_unit(cube: DataCube) -> DataCube:
    """Global min-max scaling to [0, 1] (one min/max for the whole cube)."""
    v = cube.values.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise ValueError("cannot normalize a constant cube")
    return cube.with_values((v - lo) / (hi - lo))


def flatten(cube: DataCube) -> np.ndarray:
    """Pixel matrix ``(H*W, B)``; row ``n`` is the spectrum of pixel ``n`` in row-major order."""
    return cube.values.reshape(-1, cube.bands)


def unflatten(pixels: np.ndarray, height: int, width: int) -> DataCube:
    pixels = np.asarray(pixels)
    if pixels.shape[0] != height * width:
        raise ValueError(f"{pixels.shape[0]} pixels cannot fill {height}x{width}")
    return DataCube(pixels.reshape(height, width, -1))


def apply_srf(cube: DataCube, srf: np.ndarray) -> DataCube:
    """Project every pixel spectrum through the ``C x c`` response matrix."""
    srf = np.asarray(srf, dtype=np.float64)
    if srf.ndim != 2 or srf.shape[0] != cube.bands:
        raise ValueError(f"SRF has {srf.shape[0] if srf.ndim else 0} rows, cube has {cube.bands} bands")
    out = flatten(cube).astype(np.float64) @ srf
    return DataCube(out.reshape(cube.height, cube.width, srf.shape[1]))


def crop(cube: DataCube, spec: CropSpec) -> DataCube:
    if not spec.fits(cube):
        raise ValueError(f"crop {spec} does not fit a {cube.height}x{cube.width} cube")
    v = cube.values[spec.row0 : spec.row0 + spec.rows, spec.col0 : spec.col0 + spec.cols]
    return cube.with_values(v.copy())


def _floor_align(n: float, align: int) -> int:
    return int(n // align) * align


def split_train_test(
    cube_or_shape: Union[DataCube, Sequence[int]], fraction: float = 0.75, align: int = ALIGN
) -> tuple[CropSpec, CropSpec]:
    """Disjoint train/test rectangles along the longer spatial axis.

    Both extents are truncated to the nearest lower multiple of ``align``.
    """
    if isinstance(cube_or_shape, DataCube):
        height, width = cube_or_shape.height, cube_or_shape.width
    else:
        height, width = int(cube_or_shape[0]), int(cube_or_shape[1])
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    along_rows = height >= width
    long_len, short_len = (height, width) if along_rows else (width, height)
    n_train = _floor_align(fraction * long_len, align)
    n_test = _floor_align(min((1.0 - fraction) * long_len, long_len - n_train), align)
    n_short = _floor_align(short_len, align)
    if min(n_train, n_test, n_short) < align:
        raise ValueError(
            f"a {height}x{width} cube is too small for {align}-aligned "
            f"{fraction:.0%}/{1 - fraction:.0%} crops"
        )
    if along_rows:
        return CropSpec(0, 0, n_train, n_short), CropSpec(n_train, 0, n_test, n_short)
    return CropSpec(0, 0, n_short, n_train), CropSpec(0, n_train, n_short, n_test)
