"""Dataset container format and synthetic generators with solve-time oracles.

Generators work in 64-bit and verify their own ground truth (a discrete
residual bound for the Darcy solver, exact summation for the kernel task)
before a sample is accepted. Datasets persist as a directory holding
manifest.json plus one little-endian float32 blob file; round-trips are
bit-exact and every sample blob carries a checksum.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.sparse
import scipy.sparse.linalg

from .errors import DataFormatError, GenerationError, ShapeError

DATASET_FORMAT = "mspt-dataset"
DARCY_CONTRAST = (1.0, 10.0)
POINTCLOUD_SIGMA = 0.25


@dataclass
class SampleRecord:
    """One sample: geometry, input fields, targets, optional point tags."""

    coords: np.ndarray
    in_fields: np.ndarray
    targets: np.ndarray
    groups: np.ndarray | None = None
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        self.in_fields = np.asarray(self.in_fields)
        self.targets = np.asarray(self.targets)
        n = self.coords.shape[0]
        if self.coords.ndim != 2:
            raise ShapeError(f"coords must be (N, D), got {self.coords.shape}")
        for name in ("in_fields", "targets"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ShapeError(f"{name} must be ({n}, *), got {arr.shape}")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.uint8)
            if self.groups.shape != (n,):
                raise ShapeError(f"groups must be ({n},), got {self.groups.shape}")
        if self.grid_shape is not None:
            gh, gw = self.grid_shape
            if gh * gw != n:
                raise ShapeError(f"grid {self.grid_shape} does not hold {n} points")
            self.grid_shape = (int(gh), int(gw))
        for name in ("coords", "in_fields", "targets"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataFormatError(f"{name} contains non-finite values")

    @property
    def n_points(self):
        return self.coords.shape[0]


def grid_coords(gh, gw):
    """Row-major unit-square grid coordinates, boundary included."""
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, gh), np.linspace(0.0, 1.0, gw), indexing="ij"
    )
    return np.stack([ys.ravel(), xs.ravel()], axis=1)


# ---------------------------------------------------------------------------
# Darcy flow on a grid
# ---------------------------------------------------------------------------


def permeability_field(rng, gh, gw, smoothing=None):
    """Two-valued coefficient field from thresholded smoothed noise.

    White noise is blurred, then split at its median, mimicking a porous
    medium with a 10:1 permeability contrast.
    """
    if smoothing is None:
        smoothing = max(1.0, min(gh, gw) / 8.0)
    noise = rng.normal(size=(gh, gw))
    smooth = scipy.ndimage.gaussian_filter(noise, sigma=smoothing)
    lo, hi = DARCY_CONTRAST
    return np.where(smooth > np.median(smooth), hi, lo)


def solve_darcy(a, f=1.0):
    """Solve -div(a grad u) = f, u = 0 on the boundary, on a(x)'s grid.

    Five-point fluxes with arithmetic face means and spacing h = 1/(H-1);
    the interior system goes through direct sparse elimination.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 3 or a.shape[1] < 3:
        raise ShapeError(f"coefficient grid must be at least 3x3, got {a.shape}")
    if np.any(a <= 0):
        raise GenerationError("coefficient field must be strictly positive")
    gh, gw = a.shape
    h = 1.0 / (gh - 1)
    ih, iw = gh - 2, gw - 2

    def face(side):
        # Mean of a at the interior block and its shifted neighbor.
        if side == "n":
            return 0.5 * (a[1:-1, 1:-1] + a[:-2, 1:-1])
        if side == "s":
            return 0.5 * (a[1:-1, 1:-1] + a[2:, 1:-1])
        if side == "w":
            return 0.5 * (a[1:-1, 1:-1] + a[1:-1, :-2])
        return 0.5 * (a[1:-1, 1:-1] + a[1:-1, 2:])

    an, aso, aw, ae = face("n"), face("s"), face("w"), face("e")
    inv_h2 = 1.0 / (h * h)

    idx = np.arange(ih * iw).reshape(ih, iw)
    rows, cols, vals = [], [], []

    def link(mask_rows, mask_cols, coeff, shifted):
        rows.append(idx[mask_rows].ravel())
        cols.append(shifted.ravel())
        vals.append(coeff[mask_cols].ravel())

    diag = (an + aso + aw + ae) * inv_h2
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    # Neighbor couplings only where the neighbor is itself interior.
    link((slice(1, None), slice(None)), (slice(1, None), slice(None)),
         -an * inv_h2, idx[:-1, :])
    link((slice(None, -1), slice(None)), (slice(None, -1), slice(None)),
         -aso * inv_h2, idx[1:, :])
    link((slice(None), slice(1, None)), (slice(None), slice(1, None)),
         -aw * inv_h2, idx[:, :-1])
    link((slice(None), slice(None, -1)), (slice(None), slice(None, -1)),
         -ae * inv_h2, idx[:, 1:])

    mat = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ih * iw, ih * iw),
    ).tocsr()
    rhs = np.full(ih * iw, float(f))
    interior = scipy.sparse.linalg.spsolve(mat, rhs)
    if not np.all(np.isfinite(interior)):
        raise GenerationError("sparse solve produced non-finite values")
    u = np.zeros((gh, gw))
    u[1:-1, 1:-1] = interior.reshape(ih, iw)
    return u


def darcy_residual(a, u, f=1.0):
    """Max interior residual of the five-point discretization.

    Written as a direct stencil application, separate from the matrix
    assembly, so it can vouch for the solver.
    """
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    gh, gw = a.shape
    h = 1.0 / (gh - 1)
    uc = u[1:-1, 1:-1]
    flux = (
        0.5 * (a[1:-1, 1:-1] + a[:-2, 1:-1]) * (uc - u[:-2, 1:-1])
        + 0.5 * (a[1:-1, 1:-1] + a[2:, 1:-1]) * (uc - u[2:, 1:-1])
        + 0.5 * (a[1:-1, 1:-1] + a[1:-1, :-2]) * (uc - u[1:-1, :-2])
        + 0.5 * (a[1:-1, 1:-1] + a[1:-1, 2:]) * (uc - u[1:-1, 2:])
    )
    return float(np.max(np.abs(flux / (h * h) - f)))


def gen_darcy(grid_shape, n_samples, seed, residual_tol=1e-8):
    """Generate Darcy samples; every solution is residual-checked.

    Returns (samples, provenance). Inputs are the coefficient field, targets
    the solved pressure, both as per-point columns on the raveled grid.
    """
    gh, gw = grid_shape
    if gh < 3 or gw < 3:
        raise GenerationError(f"grid {grid_shape} is too small to have an interior")
    if n_samples < 0:
        raise GenerationError(f"n_samples must be nonnegative, got {n_samples}")
    rng = np.random.default_rng(seed)
    coords = grid_coords(gh, gw)
    samples = []
    for _ in range(n_samples):
        a = permeability_field(rng, gh, gw)
        u = solve_darcy(a)
        res = darcy_residual(a, u)
        if res >= residual_tol:
            raise GenerationError(f"solver residual {res:.3e} exceeds {residual_tol}")
        samples.append(
            SampleRecord(
                coords=coords,
                in_fields=a.reshape(-1, 1),
                targets=u.reshape(-1, 1),
                grid_shape=(gh, gw),
            )
        )
    provenance = {
        "name": "darcy",
        "seed": int(seed),
        "parameters": {
            "grid": [int(gh), int(gw)],
            "n_samples": int(n_samples),
            "contrast": list(DARCY_CONTRAST),
            "residual_tol": residual_tol,
        },
    }
    return samples, provenance


# ---------------------------------------------------------------------------
# Point-cloud kernel operator
# ---------------------------------------------------------------------------


def kernel_smooth(coords, source, sigma=POINTCLOUD_SIGMA):
    """Gaussian-kernel smoothing by exact pairwise summation.

    t_i = sum_j exp(-|x_i - x_j|^2 / (2 sigma^2)) s_j, all pairs included.
    """
    coords = np.asarray(coords, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    kernel = np.exp(-d2 / (2.0 * sigma * sigma))
    return kernel @ source


def gen_pointcloud_operator(n_points, n_samples, seed):
    """Random 2-D clouds with a nonlocal smoothed-source target.

    The mapping from source field to target is linear but couples every pair
    of points, so locality shortcuts cannot express it.
    """
    if n_points < 16:
        raise GenerationError(f"n_points must be at least 16, got {n_points}")
    if n_samples < 0:
        raise GenerationError(f"n_samples must be nonnegative, got {n_samples}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        coords = rng.uniform(0.0, 1.0, size=(n_points, 2))
        source = rng.normal(size=(n_points, 1))
        target = kernel_smooth(coords, source)
        samples.append(SampleRecord(coords=coords, in_fields=source, targets=target))
    provenance = {
        "name": "pointcloud",
        "seed": int(seed),
        "parameters": {
            "n_points": int(n_points),
            "n_samples": int(n_samples),
            "sigma": POINTCLOUD_SIGMA,
        },
    }
    return samples, provenance


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------


def _sample_blob(s):
    parts = [
        np.ascontiguousarray(s.coords, dtype="<f4").tobytes(),
        np.ascontiguousarray(s.in_fields, dtype="<f4").tobytes(),
        np.ascontiguousarray(s.targets, dtype="<f4").tobytes(),
    ]
    if s.groups is not None:
        parts.append(np.ascontiguousarray(s.groups, dtype=np.uint8).tobytes())
    return b"".join(parts)


def write_dataset(out_dir, samples, generator=None):
    """Write manifest.json plus data.bin; storage is little-endian float32."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for s in samples:
        blob = _sample_blob(s)
        entries.append(
            {
                "n_points": int(s.n_points),
                "coords_dim": int(s.coords.shape[1]),
                "in_dim": int(s.in_fields.shape[1]),
                "out_dim": int(s.targets.shape[1]),
                "grid_shape": list(s.grid_shape) if s.grid_shape else None,
                "has_groups": s.groups is not None,
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    if samples:
        # Stats describe the stored values, so they see the float32 cast.
        stacked = np.concatenate(
            [s.in_fields.astype("<f4") for s in samples], axis=0
        )
        in_mean = stacked.mean(axis=0, dtype=np.float64).tolist()
        in_std = np.maximum(stacked.std(axis=0, dtype=np.float64), 1e-8).tolist()
    else:
        in_mean, in_std = [], []

    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "n_samples": len(samples),
        "precision": "f32",
        "generator": generator or {},
        "in_mean": in_mean,
        "in_std": in_std,
        "samples": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "data.bin"), "wb") as f:
        for blob in blobs:
            f.write(blob)


def read_dataset(in_dir):
    """Load a dataset directory; returns (samples, manifest)."""
    manifest_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataFormatError(f"{in_dir} has no manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"manifest.json is not valid JSON: {e}") from e
    if manifest.get("format") != DATASET_FORMAT:
        raise DataFormatError(f"unknown dataset format {manifest.get('format')!r}")

    data_path = os.path.join(in_dir, "data.bin")
    try:
        with open(data_path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read data.bin: {e}") from e

    prev_end = 0
    samples = []
    for i, e in enumerate(manifest["samples"]):
        start, nbytes = e["offset"], e["nbytes"]
        if start < prev_end:
            raise DataFormatError(f"sample {i} offset {start} is not increasing")
        prev_end = start + nbytes
        blob = data[start:start + nbytes]
        if len(blob) != nbytes:
            raise DataFormatError(f"data.bin is truncated at sample {i}")
        if zlib.crc32(blob) != e["crc32"]:
            raise DataFormatError(f"sample {i} failed its checksum")
        n, d = e["n_points"], e["coords_dim"]
        fin, fout = e["in_dim"], e["out_dim"]
        pos = 0

        def take(count, dtype, shape):
            nonlocal pos
            width = np.dtype(dtype).itemsize * count
            arr = np.frombuffer(blob[pos:pos + width], dtype=dtype).reshape(shape)
            pos += width
            return arr.copy()

        coords = take(n * d, "<f4", (n, d))
        in_fields = take(n * fin, "<f4", (n, fin))
        targets = take(n * fout, "<f4", (n, fout))
        groups = take(n, np.uint8, (n,)) if e["has_groups"] else None
        samples.append(
            SampleRecord(
                coords=coords,
                in_fields=in_fields,
                targets=targets,
                groups=groups,
                grid_shape=tuple(e["grid_shape"]) if e["grid_shape"] else None,
            )
        )
    return samples, manifest
