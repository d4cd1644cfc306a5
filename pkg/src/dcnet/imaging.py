"""Hyperspectral cubes, sensor degradation operators and scene simulation.

Cubes are stored band-interleaved-by-pixel: a C-ordered ``height x width x
bands`` float64 array, so each pixel spectrum is contiguous.  The unfolded
``bands x pixels`` matrix view used by the mixing model is ``cube.matrix``.

The two observation operators are

* spectral: ``Y = H Z``, a per-pixel convex combination of bands;
* spatial:  ``X = Z R``, a per-band strided convolution with a PSF.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, DimensionError

MAGIC = b"HSCUBE1\n"


class FormatError(ValueError):
    """Malformed cube or SRF file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream derived from ``seed`` and a stable stream name."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class HsiCube:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"cube must be height x width x bands, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cube contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def matrix(self) -> np.ndarray:
        """Unfolded ``bands x (height*width)`` view, pixels in row-major order."""
        return self.data.reshape(-1, self.bands).T

    def chw(self) -> np.ndarray:
        """Channels-first copy (bands x height x width) for the network."""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))

    @classmethod
    def from_chw(cls, arr) -> "HsiCube":
        return cls(np.asarray(arr).transpose(1, 2, 0))

    @classmethod
    def from_matrix(cls, mat, height, width) -> "HsiCube":
        mat = np.asarray(mat)
        return cls(mat.T.reshape(height, width, mat.shape[0]))


@dataclass(frozen=True)
class Srf:
    """Spectral response matrix, ``l x L``, nonnegative with unit row sums."""

    weights: np.ndarray
    band_grid: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise DimensionError(f"SRF must be a matrix, got shape {w.shape}")
        if np.any(w < 0):
            raise ValueError("SRF weights must be nonnegative")
        if not np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("SRF rows must sum to 1; use Srf.normalized")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if self.band_grid is None:
            object.__setattr__(self, "band_grid", np.arange(w.shape[1], dtype=np.float64))

    @classmethod
    def normalized(cls, weights, band_grid=None) -> "Srf":
        w = np.array(weights, dtype=np.float64)
        return cls(w / w.sum(axis=1, keepdims=True), band_grid)

    @property
    def rows(self):
        return self.weights.shape[0]

    @property
    def cols(self):
        return self.weights.shape[1]


@dataclass(frozen=True)
class Psf:
    """Blur kernel applied with stride ``stride`` and no padding."""

    kernel: np.ndarray
    stride: int

    def __post_init__(self):
        k = np.array(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise DimensionError(f"PSF kernel must be square, got {k.shape}")
        if self.stride < 1:
            raise ContractError("PSF stride must be >= 1")
        if np.any(k < 0) or abs(k.sum() - 1.0) > 1e-12:
            raise ValueError("PSF kernel must be nonnegative and sum to 1")
        k.flags.writeable = False
        object.__setattr__(self, "kernel", k)

    @property
    def ratio(self):
        return self.stride

    @classmethod
    def box(cls, r: int) -> "Psf":
        return cls(np.full((r, r), 1.0 / (r * r)), r)

    @classmethod
    def gaussian(cls, r: int) -> "Psf":
        sigma = r / 2.355
        ax = np.arange(r) - (r - 1) / 2.0
        g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
        return cls(g / g.sum(), r)


@dataclass
class ScenePair:
    lrhs: HsiCube
    hrms: HsiCube
    truth: Optional[HsiCube] = None
    true_srf: Optional[Srf] = None
    true_psf: Optional[Psf] = None
    true_factors: Optional[tuple] = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def ratio(self):
        return self.hrms.height // self.lrhs.height

    def __post_init__(self):
        r = self.hrms.height // max(self.lrhs.height, 1)
        if self.lrhs.height * r != self.hrms.height or self.lrhs.width * r != self.hrms.width:
            raise DimensionError(
                f"HrMS {self.hrms.shape[:2]} is not an integer multiple of LrHS {self.lrhs.shape[:2]}"
            )
        if self.truth is not None and self.truth.bands != self.lrhs.bands:
            raise DimensionError("truth and LrHS band counts differ")
        if self.true_srf is not None and self.true_srf.rows != self.hrms.bands:
            raise DimensionError("SRF rows differ from HrMS band count")


# ---------------------------------------------------------------------- I/O


def write_cube(path, cube: HsiCube) -> None:
    """Write ``cube`` in the HSC1 format (float32 little-endian payload)."""
    header = f"h={cube.height} w={cube.width} b={cube.bands} dtype=f32\n".encode("ascii")
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    Path(path).write_bytes(MAGIC + header + payload)


def read_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, not an HSC1 cube", 0)
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise FormatError("unterminated header", len(MAGIC))
    try:
        fields = dict(item.split("=", 1) for item in raw[len(MAGIC) : end].decode("ascii").split())
        h, w, b = int(fields["h"]), int(fields["w"]), int(fields["b"])
        dtype = fields["dtype"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"unparseable header: {exc}", len(MAGIC)) from None
    if dtype != "f32":
        raise FormatError(f"unsupported dtype {dtype!r}", len(MAGIC))
    start = end + 1
    expected = h * w * b * 4
    got = len(raw) - start
    if got != expected:
        kind = "truncated payload" if got < expected else "trailing bytes after payload"
        raise FormatError(f"{kind}: header says {expected} bytes, found {got}", start + min(got, expected))
    data = np.frombuffer(raw, dtype="<f4", offset=start).astype(np.float64).reshape(h, w, b)
    return HsiCube(data)


def cube_io(path, cube: Optional[HsiCube] = None, mode: str = "read"):
    if mode == "write":
        if cube is None:
            raise ContractError("write mode needs a cube")
        write_cube(path, cube)
        return None
    if mode == "read":
        return read_cube(path)
    raise ContractError(f"mode must be 'read' or 'write', got {mode!r}")


def parse_srf(text: str) -> Srf:
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        idx = len(rows)
        try:
            vals = [float(v) for v in next(csv.reader([line]))]
        except ValueError as exc:
            raise FormatError(f"row {idx} (line {lineno + 1}): {exc}") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise FormatError(f"row {idx} (line {lineno + 1}) has {len(vals)} columns, expected {width}")
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise FormatError(f"row {idx} (line {lineno + 1}) has a negative or non-finite entry")
        if sum(vals) == 0:
            raise FormatError(f"row {idx} (line {lineno + 1}) is all zero")
        rows.append(vals)
    if not rows:
        raise FormatError("SRF file has no data rows")
    return Srf.normalized(np.array(rows))


def load_srf(path) -> Srf:
    """Read an ``l x L`` CSV response matrix and normalize each row to sum 1."""
    return parse_srf(Path(path).read_text(encoding="utf-8"))


def save_srf(path, srf: Srf, comment: Optional[str] = None) -> None:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    for row in srf.weights:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def gaussian_srf(L=31, centers=(460.0, 540.0, 610.0), fwhm=95.0, wavelengths=None) -> Srf:
    """Gaussian bandpass responses sampled on an evenly spaced 400-700 nm grid."""
    grid = np.linspace(400.0, 700.0, L) if wavelengths is None else np.asarray(wavelengths, float)
    sigma = fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    w = np.exp(-((grid[None, :] - np.asarray(centers)[:, None]) ** 2) / (2 * sigma**2))
    return Srf.normalized(w, grid)


def default_srf() -> Srf:
    """Bundled synthetic 3 x 31 RGB-like SRF."""
    return load_srf(Path(__file__).with_name("data") / "srf_gauss_3x31.csv")


# -------------------------------------------------------------- degradation


def spectral_degrade(cube: HsiCube, srf: Srf) -> HsiCube:
    """Per-pixel ``y = H z``, i.e. a 1x1 convolution with the SRF rows."""
    if srf.cols != cube.bands:
        raise DimensionError(f"SRF expects {srf.cols} bands, cube has {cube.bands}")
    return HsiCube(cube.data @ srf.weights.T)


def _strided_filter(planes: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    # planes: ... x H x W ; valid correlation, stride in both directions
    win = sliding_window_view(planes, kernel.shape, axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return np.tensordot(win, kernel, axes=([-2, -1], [0, 1]))


def spatial_degrade(cube: HsiCube, psf: Psf) -> HsiCube:
    """Per-band strided convolution with the PSF kernel, no padding."""
    r = psf.stride
    k = psf.kernel.shape[0]
    if cube.height % r or cube.width % r:
        raise DimensionError(
            f"{cube.height}x{cube.width} not divisible by ratio {r}; crop to "
            f"{cube.height - cube.height % r}x{cube.width - cube.width % r}"
        )
    if k > cube.height or k > cube.width:
        raise DimensionError(f"PSF kernel {k}x{k} larger than the image")
    out = _strided_filter(cube.chw(), psf.kernel, r)
    return HsiCube.from_chw(out)


def add_noise(cube: HsiCube, snr_db: float, seed) -> HsiCube:
    """Additive white Gaussian noise at a per-cube SNR; the result is not clipped."""
    if math.isinf(snr_db) and snr_db > 0:
        return cube
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    power = float(np.mean(cube.data**2))
    var = power / 10.0 ** (snr_db / 10.0)
    return HsiCube(cube.data + rng.normal(0.0, math.sqrt(var), size=cube.shape))


def simulate_pair(truth: HsiCube, srf: Srf, psf: Psf, snr_hs=math.inf, snr_ms=math.inf, seed=0,
                  true_factors=None) -> ScenePair:
    lrhs = add_noise(spatial_degrade(truth, psf), snr_hs, substream(seed, "noise/hs"))
    hrms = add_noise(spectral_degrade(truth, srf), snr_ms, substream(seed, "noise/ms"))
    return ScenePair(
        lrhs=lrhs,
        hrms=hrms,
        truth=truth,
        true_srf=srf,
        true_psf=psf,
        true_factors=true_factors,
        seed=seed,
        meta={"snr_hs": snr_hs, "snr_ms": snr_ms},
    )


def _interp_matrix(n: int, r: int) -> np.ndarray:
    # corner-aligned linear interpolation from n to n*r samples
    m = n * r
    out = np.zeros((m, n))
    if n == 1:
        out[:, 0] = 1.0
        return out
    pos = np.arange(m) * (n - 1) / (m - 1) if m > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    out[np.arange(m), lo] = 1.0 - frac
    out[np.arange(m), lo + 1] += frac
    return out


def resample(cube: HsiCube, direction: str, r: int) -> HsiCube:
    """``up_bilinear`` (corner-aligned) or ``down_area`` (r x r box mean)."""
    if r < 1:
        raise ContractError("ratio must be >= 1")
    if r == 1:
        return cube
    if direction == "down_area":
        return spatial_degrade(cube, Psf.box(r))
    if direction == "up_bilinear":
        uh = _interp_matrix(cube.height, r)
        uw = _interp_matrix(cube.width, r)
        return HsiCube(np.einsum("ih,hwb,jw->ijb", uh, cube.data, uw))
    raise ContractError(f"unknown resampling direction {direction!r}")


# --------------------------------------------------------------- synthetic


def _box_blur(field: np.ndarray, passes: int, size: int = 5) -> np.ndarray:
    pad = size // 2
    for _ in range(passes):
        p = np.pad(field, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        field = sliding_window_view(p, (size, size), axis=(1, 2)).mean(axis=(-2, -1))
    return field


def synth_spectra(rng, L: int, n: int) -> np.ndarray:
    """``L x n`` smooth spectra, each rescaled to span [0.05, 1]."""
    raw = rng.normal(size=(n, L + 8))
    kernel = np.ones(5) / 5.0
    for _ in range(3):
        raw = np.stack([np.convolve(row, kernel, mode="same") for row in raw])
    raw = raw[:, 4 : 4 + L]
    lo = raw.min(axis=1, keepdims=True)
    hi = raw.max(axis=1, keepdims=True)
    return (0.05 + 0.95 * (raw - lo) / (hi - lo)).T


def synth_abundances(rng, H: int, W: int, n: int, smoothness: int, contrast: float = 50.0) -> np.ndarray:
    """``n x HW`` abundances: softmax of blurred, standardized Gaussian fields.

    A large ``contrast`` makes most pixels nearly pure, which is what lets
    a nonnegative factorization recover the endmembers.
    """
    fields = _box_blur(rng.normal(size=(n, H, W)), smoothness)
    fields = fields - fields.mean(axis=(1, 2), keepdims=True)
    fields = contrast * fields / fields.std(axis=(1, 2), keepdims=True)
    fields = fields - fields.max(axis=0, keepdims=True)
    e = np.exp(fields)
    return (e / e.sum(axis=0, keepdims=True)).reshape(n, H * W)


def synth_scene(seed=0, H=64, W=64, L=31, n=5, smoothness=8, contrast=50.0):
    """Scene that satisfies the linear mixing model exactly.

    Returns ``(truth, S, A)`` with ``truth.matrix == S @ A``.
    """
    if n > L:
        raise ContractError(f"endmember count {n} exceeds band count {L}")
    if H < 4 or W < 4:
        raise ContractError("scene must be at least 4x4")
    rng = substream(seed, "scene")
    S = synth_spectra(rng, L, n)
    A = synth_abundances(rng, H, W, n, smoothness, contrast)
    truth = HsiCube.from_matrix(S @ A, H, W)
    return truth, S, A


def default_pair(seed=0, ratio=8, H=64, W=64, L=31, n=5, snr_hs=math.inf, snr_ms=math.inf, psf=None):
    """Desk-scale synthetic scene degraded with the bundled SRF."""
    truth, S, A = synth_scene(seed, H, W, L, n)
    srf = default_srf() if L == 31 else gaussian_srf(L)
    psf = Psf.box(ratio) if psf is None else psf
    return simulate_pair(truth, srf, psf, snr_hs, snr_ms, seed, true_factors=(S, A))
