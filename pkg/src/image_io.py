"""Read and write images (PGM, f64-matrix-csv) and sparse-coefficient sidecars."""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
import warnings
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from models import GrayImage, ImageFormat, InputError, SigmaBand, SparseCoeffImage

log = logging.getLogger(__name__)

PGM_MAXVAL = 65535
CSV_FMT = "%.17g"

_PGM_MODE_MAX = {"L": 255, "I": 65535}


def load_image(
    path: str | Path,
    fmt: ImageFormat | str | None = None,
    levels: int | None = None,
) -> GrayImage:
    """Parse *path* as PGM (P2/P5) or f64-matrix-csv.

    PGM levels are mapped to [0, 1] by dividing by maxval.  When *levels* is
    given, both dimensions must be divisible by ``2**levels``.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    fmt = _resolve_format(path, fmt)

    if fmt == ImageFormat.PGM:
        img = GrayImage(_read_pgm(path))
    else:
        img = GrayImage(_read_csv(path))

    if levels is not None:
        check_dyadic(img.n1, img.n2, levels)
    return img


def save_image(img: GrayImage, path: str | Path, fmt: ImageFormat | str | None = None,
               plain: bool = False) -> None:
    """Write *img*; PGM quantizes to ``PGM_MAXVAL`` levels (P5 unless *plain*)."""
    path = Path(path)
    fmt = _resolve_format(path, fmt)
    if fmt == ImageFormat.PGM:
        payload = _encode_pgm(img.data, plain=plain)
        _atomic_write(path, payload)
    else:
        _atomic_write(path, _encode_csv(img.data))


def check_dyadic(n1: int, n2: int, levels: int) -> None:
    step = 2 ** levels
    if n1 < step or n2 < step or n1 % step or n2 % step:
        raise InputError(
            f"Image {n1}x{n2} is not divisible by {step} (needed for {levels} wavelet levels)"
        )


# ── Sparse coefficient images ────────────────────────────────────────

def save_sparse_coeffs(sci: SparseCoeffImage, csv_path: str | Path) -> Path:
    """Write the coefficient CSV plus a JSON sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    sidecar = csv_path.with_suffix(".json")
    n1, n2 = sci.coeffs.shape
    meta = {
        "threshold_used": sci.threshold_used,
        "sigma_hat": sci.sigma_hat,
        "s": sci.s,
        "n_pixels": sci.n_pixels,
        "n1": n1,
        "n2": n2,
        "levels": sci.levels,
        "sigma_band": sci.sigma_band.value,
    }
    _atomic_write(csv_path, _encode_csv(sci.coeffs))
    _atomic_write(sidecar, (json.dumps(meta, indent=2) + "\n").encode("utf-8"))
    return sidecar


def load_sparse_coeffs(csv_path: str | Path) -> SparseCoeffImage:
    """Read a coefficient CSV; the sidecar, when present, supplies metadata."""
    csv_path = Path(csv_path)
    img = load_image(csv_path, ImageFormat.CSV)
    sidecar = csv_path.with_suffix(".json")
    meta: dict = {}
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text())
        except json.JSONDecodeError as e:
            raise InputError(f"Malformed sidecar {sidecar}: {e}") from e
        if "s" in meta and int(meta["s"]) != int(np.count_nonzero(img.data)):
            log.warning("Sidecar s=%s disagrees with %d non-zero coefficients",
                        meta["s"], np.count_nonzero(img.data))
    else:
        log.info("No sidecar next to %s; threshold recorded as 0", csv_path)
    return SparseCoeffImage(
        coeffs=img.data,
        threshold_used=float(meta.get("threshold_used", 0.0)),
        levels=int(meta.get("levels", 3)),
        sigma_hat=meta.get("sigma_hat"),
        sigma_band=SigmaBand(meta.get("sigma_band", SigmaBand.POOLED.value)),
    )


def save_vector_csv(values: np.ndarray, shape: tuple[int, int], path: str | Path) -> None:
    """Write a per-pixel vector as an n1 x n2 f64-matrix-csv."""
    _atomic_write(Path(path), _encode_csv(np.asarray(values).reshape(shape)))


# ── PGM ──────────────────────────────────────────────────────────────

def _read_pgm(path: Path) -> np.ndarray:
    """Decode P2/P5 with Pillow; 8-bit rasters open as mode L, deeper ones as mode I."""
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode not in _PGM_MODE_MAX:
                raise InputError(f"Not a PGM file ({im.format} {im.mode}) in {path}")
            levels = np.asarray(im, dtype=np.float64)
            top = _PGM_MODE_MAX[im.mode]
    except UnidentifiedImageError as e:
        raise InputError(f"Not a PGM file in {path}") from e
    except (OSError, ValueError, SyntaxError) as e:
        raise InputError(f"PGM {path} raster is truncated or short of samples: {e}") from e

    if levels.min() < 0 or levels.max() > top:
        raise InputError(f"PGM {path} has samples outside [0, {top}]")
    return levels / top


def _encode_pgm(data: np.ndarray, plain: bool) -> bytes:
    if data.min() < 0.0 or data.max() > 1.0:
        log.warning("Clipping image to [0, 1] for PGM output")
    levels = np.rint(np.clip(data, 0.0, 1.0) * PGM_MAXVAL).astype(np.int32)
    n1, n2 = levels.shape
    if plain:
        # Pillow only writes the binary variant
        buf = io.StringIO()
        np.savetxt(buf, levels, fmt="%d", delimiter=" ", header=f"P2\n{n2} {n1}\n{PGM_MAXVAL}", comments="")
        return buf.getvalue().encode("ascii")
    buf = io.BytesIO()
    Image.fromarray(levels).save(buf, format="PPM")
    return buf.getvalue()


# ── CSV ──────────────────────────────────────────────────────────────

def _read_csv(path: Path) -> np.ndarray:
    with path.open() as f:
        first = f.readline()
    declared: tuple[int, int] | None = None
    if first.startswith("#"):
        parts = first.lstrip("#").split()
        if len(parts) == 2:
            try:
                declared = (int(parts[0]), int(parts[1]))
            except ValueError as e:
                raise InputError(f"Malformed CSV header in {path}: {first.strip()!r}") from e
    try:
        with warnings.catch_warnings():
            # an empty file is reported below
            warnings.simplefilter("ignore", UserWarning)
            data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise InputError(f"Malformed matrix CSV {path}: {e}") from e
    if data.size == 0:
        raise InputError(f"Empty matrix file: {path}")
    if declared is not None and data.shape != declared:
        raise InputError(f"CSV {path} header declares {declared}, found {data.shape}")
    if not np.all(np.isfinite(data)):
        raise InputError(f"CSV {path} contains non-finite values")
    return data


def _encode_csv(data: np.ndarray) -> bytes:
    n1, n2 = data.shape
    buf = io.StringIO()
    np.savetxt(buf, data, fmt=CSV_FMT, delimiter=",", header=f"{n1} {n2}", comments="# ")
    return buf.getvalue().encode("ascii")


# ── Helpers ──────────────────────────────────────────────────────────

def _resolve_format(path: Path, fmt: ImageFormat | str | None) -> ImageFormat:
    if isinstance(fmt, ImageFormat):
        return fmt
    if fmt is not None:
        return ImageFormat.parse(fmt)
    if not path.suffix:
        raise InputError(f"Cannot infer image format of {path}; pass it explicitly")
    return ImageFormat.parse(path.suffix)


def _atomic_write(path: Path, payload: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
