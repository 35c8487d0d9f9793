"""Spectrum containers, band segmentation/shuffling, synthetic data, file I/O.

Band layout convention: a patch is a cube of shape (H, W, B) with bands
last; datasets stack patches into (n, H, W, B). Segmentation splits the
first N*l bands into N contiguous segments of length l = floor(B/N); the
trailing B mod N bands are the "tail". The tail never moves during
shuffling, so the model input keeps constant width B across curriculum
phases; it is simply excluded from the reordering task.

The binary container holds one float32 array:

    magic "SBPP" | version u16 LE | rank u8 | dims u32 LE each |
    payload float32 LE row-major | optional labels block
    (count u32 LE + count * float32 LE) | optional metadata block
    (length u32 LE + UTF-8 JSON)

The metadata block discloses synthetic-data provenance (generator
parameters, target construction) so downstream experiments are honest
about where their numbers come from.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .perms import Permutation

__all__ = [
    "DataFormatError",
    "Spectrum",
    "Patch",
    "SegmentedSpectrum",
    "LabeledSpectrum",
    "SpectraDataset",
    "segment",
    "apply_permutation",
    "reassemble",
    "permute_bands_batch",
    "generate_synthetic",
    "write_dataset",
    "read_dataset",
    "read_csv_dataset",
    "split_dataset",
    "pack_array",
    "unpack_array",
]

MAGIC = b"SBPP"
FORMAT_VERSION = 1
MIN_SEGMENTS = 3
MAX_SEGMENTS = 8

# Elements, not bytes; guards against absurd headers before allocating.
_MAX_ELEMENTS = 1 << 38


class DataFormatError(ValueError):
    """Malformed container, CSV, or dataset structure."""


@dataclass(frozen=True)
class Spectrum:
    """Single reflectance spectrum with wavelength metadata."""

    bands: np.ndarray
    wavelength_start_nm: float = 420.0
    wavelength_end_nm: float = 2450.0

    def __post_init__(self):
        b = np.asarray(self.bands, dtype=np.float32)
        if b.ndim != 1 or b.size < 3:
            raise ValueError(f"spectrum needs >= 3 bands in one axis, got shape {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("spectrum contains non-finite values")
        object.__setattr__(self, "bands", b)

    @property
    def n_bands(self) -> int:
        return self.bands.size


@dataclass(frozen=True)
class Patch:
    """H x W grid of spectra sharing a band axis: cube (H, W, B)."""

    cube: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cube, dtype=np.float32)
        if c.ndim != 3 or c.shape[2] < 3 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ValueError(f"patch cube must be (H, W, B>=3), got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("patch contains non-finite values")
        object.__setattr__(self, "cube", c)

    @property
    def height(self) -> int:
        return self.cube.shape[0]

    @property
    def width(self) -> int:
        return self.cube.shape[1]

    @property
    def n_bands(self) -> int:
        return self.cube.shape[2]


@dataclass(frozen=True)
class LabeledSpectrum:
    """Patch plus its scalar regression target (e.g. SOC mass %)."""

    patch: Patch
    target: float

    def __post_init__(self):
        t = float(self.target)
        if not np.isfinite(t):
            raise ValueError("target must be finite")
        object.__setattr__(self, "target", t)


@dataclass(frozen=True)
class SegmentedSpectrum:
    """Contiguous band segments plus the unshuffled tail.

    ``segments[i]`` is a (..., segment_len) slice along the band axis;
    ``tail`` holds the trailing ``dropped_tail`` bands that stay in
    place. Invariant: n_segments * segment_len + dropped_tail = B.
    """

    n_segments: int
    segment_len: int
    segments: tuple
    tail: np.ndarray
    spatial: bool = field(default=False)

    @property
    def dropped_tail(self) -> int:
        return self.tail.shape[-1]

    @property
    def n_bands(self) -> int:
        return self.n_segments * self.segment_len + self.dropped_tail


def _band_array(x) -> tuple:
    if isinstance(x, Spectrum):
        return x.bands, False
    if isinstance(x, Patch):
        return x.cube, True
    arr = np.asarray(x)
    if arr.ndim == 1:
        return arr, False
    if arr.ndim == 3:
        return arr, True
    raise ValueError(f"expected Spectrum, Patch, or 1-D/3-D array, got shape {arr.shape}")


def segment(x, n: int) -> SegmentedSpectrum:
    """Split the band axis into n contiguous segments of floor(B/n) bands."""
    if not MIN_SEGMENTS <= n <= MAX_SEGMENTS:
        raise ValueError(f"n_segments must be in {MIN_SEGMENTS}..{MAX_SEGMENTS}, got {n}")
    arr, spatial = _band_array(x)
    b = arr.shape[-1]
    seg_len = b // n
    if seg_len < 1:
        raise ValueError(f"{b} bands cannot form {n} segments")
    used = n * seg_len
    parts = tuple(arr[..., i * seg_len : (i + 1) * seg_len] for i in range(n))
    return SegmentedSpectrum(n, seg_len, parts, arr[..., used:], spatial)


def apply_permutation(s: SegmentedSpectrum, p: Permutation) -> SegmentedSpectrum:
    """Reorder segments: output position i carries input segment p(i)."""
    if p.n != s.n_segments:
        raise ValueError(f"permutation size {p.n} != segment count {s.n_segments}")
    parts = tuple(s.segments[p.map[i]] for i in range(s.n_segments))
    return SegmentedSpectrum(s.n_segments, s.segment_len, parts, s.tail, s.spatial)


def reassemble(s: SegmentedSpectrum) -> np.ndarray:
    """Concatenate segments and tail back into a full-width band axis."""
    return np.concatenate(s.segments + (s.tail,), axis=-1)


def permute_bands_batch(cubes: np.ndarray, perm_maps: np.ndarray, n_segments: int) -> np.ndarray:
    """Apply one permutation per sample to a (n, H, W, B) stack in one gather.

    ``perm_maps`` is (n, N) of int maps; trailing B mod N bands stay put.
    Equivalent to segment/apply_permutation/reassemble per sample.
    """
    n, _, _, b = cubes.shape
    if perm_maps.shape != (n, n_segments):
        raise ValueError(f"perm_maps must be ({n}, {n_segments}), got {perm_maps.shape}")
    seg_len = b // n_segments
    used = seg_len * n_segments
    band_idx = (perm_maps[:, :, None] * seg_len + np.arange(seg_len)[None, None, :]).reshape(n, used)
    if used < b:
        tail = np.broadcast_to(np.arange(used, b), (n, b - used))
        band_idx = np.concatenate([band_idx, tail], axis=1)
    return np.take_along_axis(cubes, band_idx[:, None, None, :], axis=3)


class SpectraDataset:
    """Immutable stack of patches with optional targets.

    Behaves as a sequence of LabeledSpectrum (or Patch when unlabeled);
    bulk access goes through ``.cubes`` (n, H, W, B) and ``.targets``.
    """

    def __init__(self, cubes: np.ndarray, targets=None, meta: dict | None = None):
        cubes = np.ascontiguousarray(cubes, dtype=np.float32)
        if cubes.ndim != 4:
            raise ValueError(f"cubes must be (n, H, W, B), got shape {cubes.shape}")
        if not np.all(np.isfinite(cubes)):
            raise ValueError("dataset contains non-finite reflectance values")
        if targets is not None:
            targets = np.ascontiguousarray(targets, dtype=np.float32)
            if targets.shape != (cubes.shape[0],):
                raise ValueError(f"targets must be ({cubes.shape[0]},), got {targets.shape}")
            if not np.all(np.isfinite(targets)):
                raise ValueError("dataset contains non-finite targets")
            targets.setflags(write=False)
        cubes.setflags(write=False)
        self.cubes = cubes
        self.targets = targets
        self.meta = dict(meta or {})

    @property
    def n_bands(self) -> int:
        return self.cubes.shape[3]

    @property
    def labeled(self) -> bool:
        return self.targets is not None

    def __len__(self) -> int:
        return self.cubes.shape[0]

    def __getitem__(self, i: int):
        patch = Patch(self.cubes[i])
        if self.targets is None:
            return patch
        return LabeledSpectrum(patch, float(self.targets[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "SpectraDataset":
        idx = np.asarray(indices, dtype=np.int64)
        t = self.targets[idx] if self.targets is not None else None
        return SpectraDataset(self.cubes[idx], t, self.meta)


# ------------------------------------------------------------ synthetic

# Band window treated as the "organic" absorption region; target depth
# is integrated here.
_WINDOW_LO_FRAC = 0.30
_WINDOW_HI_FRAC = 0.55
_TARGET_LO = 0.5
_TARGET_HI = 23.8


def generate_synthetic(
    count: int,
    n_bands: int,
    rng: np.random.Generator,
    height: int = 8,
    width: int = 8,
    noise: float = 0.005,
) -> SpectraDataset:
    """Synthetic hyperspectral patches with an absorption-depth target.

    Each base spectrum is a smooth low-order continuum minus 2-5
    Gaussian absorption dips, with one dip forced into a designated
    "organic" window. The regression target is an affine map of the
    total dip depth inside that window (plus mild noise), spanning
    0.5-23.8 so it behaves like a mass-percent quantity. Pixels within a
    patch share the base spectrum up to a small spatial gain jitter plus
    independent noise, clipped to [0, 1].
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if n_bands < 16:
        raise ValueError(f"n_bands must be >= 16, got {n_bands}")
    grid = np.linspace(0.0, 1.0, n_bands, dtype=np.float64)
    idx = np.arange(n_bands, dtype=np.float64)
    lo = int(n_bands * _WINDOW_LO_FRAC)
    hi = int(n_bands * _WINDOW_HI_FRAC)
    # Dips stay clear of the window edges so the in-window deficit is
    # recomputable from the spectra with a simple edge-anchored baseline.
    margin = max(1, min(4, (hi - lo) // 4))
    guard = margin + 2

    cubes = np.empty((count, height, width, n_bands), dtype=np.float32)
    depths = np.empty(count, dtype=np.float64)
    for i in range(count):
        # Continuum: gentle cubic kept well inside [0, 1].
        coeffs = rng.uniform(-0.35, 0.35, size=3)
        continuum = 0.55 + coeffs[0] * (grid - 0.5) + coeffs[1] * (grid - 0.5) ** 2 + coeffs[2] * (grid - 0.5) ** 3
        base = continuum.copy()
        n_dips = int(rng.integers(2, 6))
        # One dip pinned inside the organic window so every sample has
        # a well-defined target signal; the rest land anywhere outside
        # the guarded zone around the window.
        for d in range(n_dips):
            if d == 0:
                center = rng.uniform(lo + margin, hi - 1 - margin)
            else:
                center = rng.uniform(1.0, n_bands - 2.0)
                for _ in range(50):
                    if not (lo - guard <= center <= hi + guard):
                        break
                    center = rng.uniform(1.0, n_bands - 2.0)
                else:
                    continue
            sigma = max(rng.uniform(0.7, 1.6), 0.5)
            depth = rng.uniform(0.05, 0.30)
            base -= depth * np.exp(-0.5 * ((idx - center) / sigma) ** 2)
        base = np.clip(base, 0.02, 0.98)
        # Depth = realized in-window deficit below the continuum, so the
        # target stays recomputable from the emitted spectra.
        depths[i] = float((continuum[lo:hi] - base[lo:hi]).sum())

        gain = 1.0 + rng.uniform(-0.02, 0.02, size=(height, width, 1))
        cube = base[None, None, :] * gain + rng.normal(0.0, noise, size=(height, width, n_bands))
        cubes[i] = np.clip(cube, 0.0, 1.0)

    # Affine map of depth onto the SOC-like range, plus noise small
    # enough to keep the corr(target, depth) > 0.9 contract meaningful.
    dmin = float(depths.min())
    dspan = max(float(depths.max()) - dmin, 1e-9)
    targets = _TARGET_LO + (_TARGET_HI - _TARGET_LO) * ((depths - dmin) / dspan)
    targets = targets + rng.normal(0.0, 0.10, size=count)
    targets = np.clip(targets, _TARGET_LO, _TARGET_HI).astype(np.float32)

    meta = {
        "source": "synthetic",
        "generator": "continuum+gaussian-dips",
        "target_rule": f"affine(total dip depth in bands [{lo},{hi}))->[{_TARGET_LO},{_TARGET_HI}] + N(0,0.1)",
        "window": [lo, hi],
        "noise_sigma": noise,
        "n_bands": n_bands,
        "height": height,
        "width": width,
    }
    return SpectraDataset(cubes, targets, meta)


def window_absorption_depth(ds: SpectraDataset) -> np.ndarray:
    """Recompute per-sample dip depth inside the organic window.

    Independent of the generator's bookkeeping: takes the spatial-mean
    spectrum, fits a line across the window from its edge values, and
    integrates the deficit below that line.
    """
    lo, hi = ds.meta.get("window", (int(ds.n_bands * _WINDOW_LO_FRAC), int(ds.n_bands * _WINDOW_HI_FRAC)))
    spectra = ds.cubes.mean(axis=(1, 2)).astype(np.float64)
    edge_w = 3
    left = spectra[:, max(lo - edge_w, 0) : lo + 1].mean(axis=1)
    right = spectra[:, hi - 1 : hi + edge_w].mean(axis=1)
    t = np.linspace(0.0, 1.0, hi - lo)
    baseline = left[:, None] * (1 - t)[None, :] + right[:, None] * t[None, :]
    deficit = np.clip(baseline - spectra[:, lo:hi], 0.0, None)
    return deficit.sum(axis=1)


# ------------------------------------------------------------ container


def pack_array(arr: np.ndarray) -> bytes:
    """Serialize one float32 array in the container layout (no labels/meta)."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    head = MAGIC + struct.pack("<HB", FORMAT_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4", copy=False).tobytes()


def unpack_array(buf: bytes, offset: int = 0) -> tuple:
    """Parse one packed array; returns (array, next_offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise DataFormatError("unrecognized container: bad magic bytes")
    offset += 4
    if len(buf) < offset + 3:
        raise DataFormatError("truncated container header")
    version, rank = struct.unpack_from("<HB", buf, offset)
    offset += 3
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported container version {version}")
    if rank > 8:
        raise DataFormatError(f"implausible rank {rank}")
    if len(buf) < offset + 4 * rank:
        raise DataFormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n_elems = 1
    for d in dims:
        n_elems *= int(d)
    if n_elems > _MAX_ELEMENTS:
        raise DataFormatError(f"dimension overflow: {dims} claims {n_elems} elements")
    nbytes = 4 * n_elems
    if len(buf) < offset + nbytes:
        raise DataFormatError(
            f"truncated payload: header claims {nbytes} bytes, {len(buf) - offset} available"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=n_elems, offset=offset).reshape(dims)
    return arr.astype(np.float32, copy=True), offset + nbytes


def write_dataset(path, ds: SpectraDataset) -> None:
    """Write cubes + optional labels + metadata block to one container file."""
    blob = pack_array(ds.cubes)
    if ds.targets is not None:
        blob += struct.pack("<I", len(ds.targets))
        blob += ds.targets.astype("<f4", copy=False).tobytes()
    if ds.meta:
        encoded = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
        blob += struct.pack("<I", len(encoded)) + encoded
    with open(path, "wb") as f:
        f.write(blob)


def read_dataset(path) -> SpectraDataset:
    """Read a dataset container; accepts rank-4 cubes or rank-2 (n, B) rows."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read dataset {path}: {e}") from e
    arr, offset = unpack_array(buf)
    if arr.ndim == 2:
        arr = arr.reshape(arr.shape[0], 1, 1, arr.shape[1])
    if arr.ndim != 4:
        raise DataFormatError(f"dataset container must hold a rank-2 or rank-4 array, got rank {arr.ndim}")

    targets = None
    if offset < len(buf):
        if len(buf) < offset + 4:
            raise DataFormatError("truncated labels block")
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if count != arr.shape[0]:
            raise DataFormatError(f"labels count {count} != sample count {arr.shape[0]}")
        if len(buf) < offset + 4 * count:
            raise DataFormatError("truncated labels payload")
        targets = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).copy()
        offset += 4 * count

    meta = {}
    if offset < len(buf):
        if len(buf) < offset + 4:
            raise DataFormatError("truncated metadata block")
        (mlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) < offset + mlen:
            raise DataFormatError("truncated metadata payload")
        try:
            meta = json.loads(buf[offset : offset + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataFormatError(f"bad metadata block: {e}") from e
        offset += mlen
    if offset != len(buf):
        raise DataFormatError(f"{len(buf) - offset} trailing bytes after dataset content")
    return SpectraDataset(arr, targets, meta)


def read_csv_dataset(path) -> SpectraDataset:
    """CSV ingestion: header row required, one spectrum per row.

    All columns are reflectance bands unless the final column header is
    named ``target`` (case-insensitive), which becomes the label.
    """
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty CSV file") from None
        header = [h.strip() for h in header]
        if not header or _all_numeric(header):
            raise DataFormatError("CSV header row required (first line looks numeric)")
        has_target = header[-1].lower() == "target"
        n_cols = len(header)
        n_band_cols = n_cols - 1 if has_target else n_cols
        if n_band_cols < 3:
            raise DataFormatError(f"need >= 3 band columns, got {n_band_cols}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise DataFormatError(f"line {lineno}: expected {n_cols} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise DataFormatError(f"line {lineno}: {e}") from None
    if not rows:
        raise DataFormatError("CSV contains a header but no data rows")
    table = np.asarray(rows, dtype=np.float32)
    if has_target:
        cubes = table[:, :-1].reshape(len(table), 1, 1, n_band_cols)
        return SpectraDataset(cubes, table[:, -1], {"source": f"csv:{path}"})
    return SpectraDataset(table.reshape(len(table), 1, 1, n_band_cols), None, {"source": f"csv:{path}"})


def _all_numeric(tokens) -> bool:
    try:
        for t in tokens:
            float(t)
    except ValueError:
        return False
    return True


# ------------------------------------------------------------ splitting

_N_BINS = 10


def split_dataset(ds: SpectraDataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> tuple:
    """Deterministic train/val/test split, stratified on target quantiles.

    Labeled data is bucketed into 10 quantile bins and each bin is
    divided by largest-remainder allocation, so bin proportions track
    the global fractions within one sample. Unlabeled data (and data
    averaging under five samples per stratum, with a warning) falls
    back to a plain shuffled split; thinner bins would starve the
    smallest fraction of samples entirely. The three parts partition
    the input exactly.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(ds)
    rng = np.random.default_rng(seed)

    if ds.targets is None:
        bins = [np.arange(n)]
    elif n < 5 * _N_BINS:
        warnings.warn(f"only {n} samples for {_N_BINS} strata; falling back to a plain random split")
        bins = [np.arange(n)]
    else:
        edges = np.quantile(ds.targets, np.linspace(0, 1, _N_BINS + 1)[1:-1])
        bin_ids = np.searchsorted(edges, ds.targets, side="left")
        bins = [np.flatnonzero(bin_ids == b) for b in range(_N_BINS)]

    parts = ([], [], [])
    for idx in bins:
        if idx.size == 0:
            continue
        shuffled = idx[rng.permutation(idx.size)]
        counts = _largest_remainder(idx.size, fractions)
        stops = np.cumsum(counts)
        parts[0].append(shuffled[: stops[0]])
        parts[1].append(shuffled[stops[0] : stops[1]])
        parts[2].append(shuffled[stops[1] : stops[2]])

    out = []
    for chunk in parts:
        merged = np.concatenate(chunk) if chunk else np.empty(0, dtype=np.int64)
        out.append(ds.subset(np.sort(merged)))
    return tuple(out)


def _largest_remainder(total: int, fractions) -> list:
    raw = [total * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    short = total - sum(counts)
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(short):
        counts[remainders[i]] += 1
    return counts
