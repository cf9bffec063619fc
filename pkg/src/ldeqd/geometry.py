"""AFM height maps, nanohole statistics and voxelized quantum-dot geometries.

Heights are in nm. A ``HeightMap`` stores rows along y and columns along x.
After :func:`flatten` the undisturbed surface sits at height zero, so holes
are negative and a depth is simply ``-min``.

Triangular nanoholes follow the convention used for the AFM analysis: the
``lateral_size`` of a :class:`ShapeSpec` is the side length of the
equilateral base triangle, oriented (at 0 deg) with one altitude along x, so
the x extent measured by :func:`detect_nanoholes` is ``side * sqrt(3) / 2``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

BARRIER, DOT, CAP = 0, 1, 2
LABEL_NAMES = {BARRIER: "barrier", DOT: "dot", CAP: "cap"}

NM2_TO_CM2 = 1e-14
# smallest depression treated as a feature on noiseless maps
_DEPTH_FLOOR = 1e-3

_UNIT_SCALE = {"nm": 1.0, "um": 1e3, "µm": 1e3, "pm": 1e-3, "m": 1e9}


class GeometryError(ValueError):
    pass


class HeightMapFormatError(GeometryError):
    pass


@dataclass
class HeightMap:
    values: np.ndarray
    pitch_x: float
    pitch_y: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.size == 0:
            raise GeometryError("height map must be a non-empty 2D array")
        if not (self.pitch_x > 0 and self.pitch_y > 0):
            raise GeometryError("pixel pitch must be positive")
        if not np.all(np.isfinite(self.values)):
            raise GeometryError("height map contains non-finite values")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def shape(self):
        return self.values.shape

    @property
    def extent(self) -> tuple[float, float]:
        """Image size (x, y) in nm."""
        ny, nx = self.values.shape
        return nx * self.pitch_x, ny * self.pitch_y

    @property
    def area_cm2(self) -> float:
        ex, ey = self.extent
        return ex * ey * NM2_TO_CM2

    def coords(self):
        ny, nx = self.values.shape
        x = self.origin[0] + (np.arange(nx) + 0.5) * self.pitch_x
        y = self.origin[1] + (np.arange(ny) + 0.5) * self.pitch_y
        return x, y

    def shifted(self, dx_px: int, dy_px: int) -> HeightMap:
        """Translate the content by whole pixels (periodic wrap)."""
        return HeightMap(np.roll(self.values, (dy_px, dx_px), axis=(0, 1)), self.pitch_x, self.pitch_y, self.origin)


@dataclass
class Nanohole:
    center: tuple[float, float]
    depth: float
    lateral_size: float
    n_pixels: int


@dataclass
class NanoholeStats:
    holes: list[Nanohole]
    density: float
    area_cm2: float
    threshold: float
    rms_roughness: float
    low_confidence: bool = False

    @property
    def count(self) -> int:
        return len(self.holes)

    def _stat(self, attr, fn):
        vals = np.array([getattr(h, attr) for h in self.holes])
        if vals.size == 0:
            return float("nan")
        return float(fn(vals))

    @property
    def mean_depth(self):
        return self._stat("depth", np.mean)

    @property
    def std_depth(self):
        return self._stat("depth", lambda v: np.std(v, ddof=1) if v.size > 1 else 0.0)

    @property
    def mean_lateral(self):
        return self._stat("lateral_size", np.mean)

    @property
    def std_lateral(self):
        return self._stat("lateral_size", lambda v: np.std(v, ddof=1) if v.size > 1 else 0.0)

    @property
    def density_error(self) -> float:
        """Poisson counting error on the density, cm^-2."""
        return math.sqrt(self.count) / self.area_cm2

    def summary(self) -> dict:
        return {
            "count": self.count,
            "density_cm2": self.density,
            "density_err_cm2": self.density_error,
            "area_cm2": self.area_cm2,
            "depth_mean_nm": self.mean_depth,
            "depth_std_nm": self.std_depth,
            "lateral_mean_nm": self.mean_lateral,
            "lateral_std_nm": self.std_lateral,
            "threshold_nm": self.threshold,
            "rms_roughness_nm": self.rms_roughness,
            "low_confidence": self.low_confidence,
        }


# --------------------------------------------------------------------------
# file I/O


def load_heightmap(path) -> HeightMap:
    """Read a height map.

    Two layouts are accepted: a text file whose ``#``-prefixed header lines
    carry ``key: value`` metadata (nx, ny, pitch_x, pitch_y, origin_x,
    origin_y, units) followed by a row-major matrix, or a plain ``.csv``
    matrix with a JSON sidecar ``<file>.json`` holding the same keys.
    """
    path = Path(path)
    text = path.read_text()
    meta: dict[str, str] = {}
    sidecar = path.with_name(path.name + ".json")
    if path.suffix.lower() == ".csv" and sidecar.exists():
        try:
            meta = {k: str(v) for k, v in json.loads(sidecar.read_text()).items()}
        except json.JSONDecodeError as exc:
            raise HeightMapFormatError(f"{sidecar}: invalid JSON ({exc})") from None

    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s.lstrip("#").strip()
            if ":" in body:
                k, v = body.split(":", 1)
                meta[k.strip().lower()] = v.strip()
            continue
        try:
            rows.append([float(t) for t in s.replace(",", " ").split()])
        except ValueError:
            raise HeightMapFormatError(f"{path}:{lineno}: non-numeric entry in data row") from None
        if len(rows[-1]) != len(rows[0]):
            raise HeightMapFormatError(
                f"{path}:{lineno}: row has {len(rows[-1])} values, expected {len(rows[0])}"
            )
    if not rows:
        raise HeightMapFormatError(f"{path}: no height data")
    data = np.array(rows)
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise HeightMapFormatError(f"{path}: non-finite height at row {bad[0]}, column {bad[1]}")

    def num(key, default=None):
        if key not in meta:
            if default is None:
                raise HeightMapFormatError(f"{path}: header is missing {key!r}")
            return default
        try:
            return float(meta[key])
        except ValueError:
            raise HeightMapFormatError(f"{path}: header field {key!r} is not a number") from None

    pitch_x = num("pitch_x", meta.get("pitch") and num("pitch"))
    pitch_y = num("pitch_y", pitch_x)
    for key, n in (("nx", data.shape[1]), ("ny", data.shape[0])):
        if key in meta and int(num(key)) != n:
            raise HeightMapFormatError(f"{path}: header {key}={meta[key]} but data has {n}")
    units = meta.get("units", "nm")
    if units not in _UNIT_SCALE:
        raise HeightMapFormatError(f"{path}: unknown height unit {units!r}")
    return HeightMap(
        data * _UNIT_SCALE[units],
        pitch_x,
        pitch_y,
        (num("origin_x", 0.0), num("origin_y", 0.0)),
    )


def save_heightmap(hm: HeightMap, path, precision: int = 10) -> None:
    ny, nx = hm.values.shape
    header = [
        "# ldeqd height map v1",
        f"# nx: {nx}",
        f"# ny: {ny}",
        f"# pitch_x: {hm.pitch_x!r}",
        f"# pitch_y: {hm.pitch_y!r}",
        f"# origin_x: {hm.origin[0]!r}",
        f"# origin_y: {hm.origin[1]!r}",
        "# units: nm",
    ]
    fmt = f"%.{precision}g"
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, hm.values, fmt=fmt)


# --------------------------------------------------------------------------
# surface processing


def _robust_sigma(v: np.ndarray) -> float:
    med = np.median(v)
    return 1.4826 * float(np.median(np.abs(v - med)))


def flatten(hm: HeightMap, n_iter: int = 4) -> HeightMap:
    """Subtract a least-squares plane fitted to the undisturbed surface.

    Pixels deviating by more than 3 robust sigma (holes, rims) are excluded
    from the fit on each pass; the surface level is then set to zero.
    """
    ny, nx = hm.values.shape
    yy, xx = np.mgrid[0:ny, 0:nx]
    A = np.column_stack([xx.ravel(), yy.ravel(), np.ones(xx.size)]).astype(float)
    z = hm.values.ravel()
    mask = np.ones(z.size, dtype=bool)
    for _ in range(n_iter):
        coef, *_ = np.linalg.lstsq(A[mask], z[mask], rcond=None)
        resid = z - A @ coef
        sig = _robust_sigma(resid[mask])
        new = np.abs(resid - np.median(resid[mask])) <= max(3 * sig, 1e-12)
        if new.sum() < 3 or np.array_equal(new, mask):
            break
        mask = new
    resid = z - A @ coef
    resid -= np.median(resid[mask])
    return HeightMap(resid.reshape(ny, nx), hm.pitch_x, hm.pitch_y, hm.origin)


def rms_roughness(hm: HeightMap) -> float:
    """Robust RMS of the surface, insensitive to sparse deep holes."""
    return _robust_sigma(hm.values.ravel())


def subtract_heightmaps(h0: HeightMap, hf: HeightMap) -> HeightMap:
    """Fill-thickness field ``hf - h0`` of two co-registered maps."""
    if h0.values.shape != hf.values.shape:
        raise GeometryError(f"dimension mismatch: {h0.values.shape} vs {hf.values.shape}")
    if not (math.isclose(h0.pitch_x, hf.pitch_x) and math.isclose(h0.pitch_y, hf.pitch_y)):
        raise GeometryError("pixel pitch mismatch between height maps")
    return HeightMap(hf.values - h0.values, h0.pitch_x, h0.pitch_y, h0.origin)


def effective_qd_heights(diff: HeightMap, stats: NanoholeStats) -> np.ndarray:
    """Maximum fill thickness inside each detected hole of the unfilled map."""
    x, y = diff.coords()
    out = []
    for h in stats.holes:
        r = max(h.lateral_size / 2, 2 * max(diff.pitch_x, diff.pitch_y))
        ix = np.abs(x - h.center[0]) <= r
        iy = np.abs(y - h.center[1]) <= r
        out.append(float(diff.values[np.ix_(iy, ix)].max()))
    return np.array(out)


def effective_height_from_stats(unfilled: NanoholeStats, filled: NanoholeStats) -> float:
    """Statistics-level estimate: mean hole depth minus mean residual-pit depth.

    Valid for two different samples, where a per-pixel difference is not.
    """
    return unfilled.mean_depth - filled.mean_depth


def detect_nanoholes(
    hm: HeightMap,
    depth_threshold: float | None = None,
    *,
    flatten_first: bool = True,
) -> NanoholeStats:
    """Find nanoholes by marker-controlled watershed on the depression map.

    Markers are regional minima whose depth below the surface exceeds the
    threshold (default twice the RMS roughness). Each hole reports its depth
    (surface level minus minimum) and lateral size (x extent of the
    footprint, i.e. the triangle altitude along the scan direction).
    """
    from skimage.morphology import h_maxima
    from skimage.segmentation import watershed

    m = flatten(hm) if flatten_first else hm
    rms = rms_roughness(m)
    low_conf = False
    if depth_threshold is None:
        depth_threshold = max(2 * rms, _DEPTH_FLOOR)
    elif depth_threshold <= rms:
        warnings.warn(
            f"depth threshold {depth_threshold:.3g} nm is below the noise floor (RMS {rms:.3g} nm)",
            stacklevel=2,
        )
        low_conf = True
    depth_threshold = max(float(depth_threshold), _DEPTH_FLOOR)

    d = -m.values
    # markers and footprints come from a 1-pixel Gaussian smoothing so that
    # single-pixel noise spikes cannot seed holes; depths use the raw map
    ds = ndimage.gaussian_filter(d, 1.0, mode="nearest")
    rms_s = _robust_sigma(ds.ravel())
    footprint = ds > max(2 * rms_s, _DEPTH_FLOOR)
    # regional maxima of the depression with dynamic above the threshold
    peaks = h_maxima(np.where(footprint, ds, 0.0), depth_threshold) > 0
    peaks &= ds > depth_threshold
    markers, n = ndimage.label(peaks)
    holes: list[Nanohole] = []
    if n:
        regions = watershed(-d, markers, mask=footprint)
        x, y = m.coords()
        for lab, sl in enumerate(ndimage.find_objects(regions), start=1):
            if sl is None:
                continue
            sub = regions[sl] == lab
            dd = np.where(sub, d[sl], -np.inf)
            iy, ix = np.unravel_index(np.argmax(dd), dd.shape)
            # lateral extent from raw depths clearly below the surface
            inside = sub & (d[sl] > max(3 * rms, _DEPTH_FLOOR))
            cols = np.nonzero((inside if inside.any() else sub).any(axis=0))[0]
            holes.append(
                Nanohole(
                    center=(float(x[sl[1].start + ix]), float(y[sl[0].start + iy])),
                    depth=float(dd[iy, ix]),
                    lateral_size=float((cols[-1] - cols[0] + 1) * m.pitch_x),
                    n_pixels=int(sub.sum()),
                )
            )
    holes = [h for h in holes if h.depth > depth_threshold]
    return NanoholeStats(
        holes=holes,
        density=len(holes) / m.area_cm2,
        area_cm2=m.area_cm2,
        threshold=depth_threshold,
        rms_roughness=rms,
        low_confidence=low_conf,
    )


# --------------------------------------------------------------------------
# parametric shapes


def _tri_norm(px, py, orientation_deg):
    """Triangular gauge: max projection on the three outward side normals.

    The base triangle (orientation 0) has a vertex on +x, so one altitude is
    parallel to x. A point is inside the triangle of inradius r iff the
    gauge is <= r.
    """
    th = math.radians(orientation_deg)
    out = None
    for k in range(3):
        a = th + math.pi + 2 * math.pi * k / 3
        proj = px * math.cos(a) + py * math.sin(a)
        out = proj if out is None else np.maximum(out, proj)
    return out


def pyramid_profile(px, py, depth, side, orientation_deg=0.0):
    """Surface height of an inverted triangular pyramid (apex at -depth)."""
    r_in = side / (2 * math.sqrt(3))
    rho = _tri_norm(np.asarray(px, float), np.asarray(py, float), orientation_deg)
    return -depth * np.clip(1.0 - rho / r_in, 0.0, None)


def gaussian_profile(px, py, depth, fwhm):
    s = fwhm / (2 * math.sqrt(2 * math.log(2)))
    return -depth * np.exp(-(np.asarray(px) ** 2 + np.asarray(py) ** 2) / (2 * s * s))


SHAPE_KINDS = ("inverted-triangular-pyramid", "afm-derived", "sloped-lde-dot")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    depth: float
    lateral_size: float
    orientation: float = 0.0
    residual_depth: float = 0.0
    residual_lateral: float | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise GeometryError(f"unknown shape kind {self.kind!r}")
        if not (self.depth > 0 and self.lateral_size > 0):
            raise GeometryError("shape depth and lateral size must be positive")
        if not 0 <= self.residual_depth < self.depth:
            raise GeometryError("residual pit depth must lie in [0, depth)")

    @property
    def height(self) -> float:
        """Dot height: hole depth minus the residual pit left after filling."""
        return self.depth - self.residual_depth

    @property
    def aspect_ratio(self) -> float:
        return self.height / self.lateral_size

    @property
    def altitude(self) -> float:
        return self.lateral_size * math.sqrt(3) / 2

    def analytic_volume(self) -> float:
        base = math.sqrt(3) / 4 * self.lateral_size**2
        vol = base * self.depth / 3
        if self.residual_depth:
            rl = self.residual_lateral or self.lateral_size
            vol -= math.sqrt(3) / 4 * rl**2 * self.residual_depth / 3
        return vol

    def surfaces(self, px, py):
        """Lower and upper bounding surfaces of the dot at column (px, py)."""
        lower = pyramid_profile(px, py, self.depth, self.lateral_size, self.orientation)
        if self.residual_depth > 0:
            rl = self.residual_lateral or self.lateral_size
            upper = pyramid_profile(px, py, self.residual_depth, rl, self.orientation)
        else:
            upper = np.zeros_like(lower)
        return lower, upper


def parametric_nanohole(depth: float, lateral: float, orientation: float = 0.0) -> ShapeSpec:
    """Inverted triangular pyramid completely filled by the dot material."""
    return ShapeSpec("inverted-triangular-pyramid", float(depth), float(lateral), float(orientation))


def sloped_lde_dot(depth, lateral, residual_depth, orientation=0.0, residual_lateral=None) -> ShapeSpec:
    """Partially filled hole: dot between the hole facets and a residual pit.

    Both surfaces have linear sidewalls; the slope profile of real dots is
    not known here and should be calibrated against measured cross sections.
    """
    return ShapeSpec("sloped-lde-dot", depth, lateral, orientation, residual_depth, residual_lateral)


def synthetic_heightmap(
    n: int,
    pitch: float,
    holes=(),
    *,
    noise_rms: float = 0.0,
    tilt: tuple[float, float] = (0.0, 0.0),
    seed: int | None = 0,
    ny: int | None = None,
) -> HeightMap:
    """Build a test surface with planted holes.

    Each hole is a dict with keys x, y (nm), depth, lateral (side length for
    pyramids, FWHM for Gaussians), optional orientation and kind
    ('pyramid' or 'gaussian'). ``tilt`` is the surface slope (dz/dx, dz/dy).
    """
    ny = ny or n
    x = (np.arange(n) + 0.5) * pitch
    y = (np.arange(ny) + 0.5) * pitch
    X, Y = np.meshgrid(x, y)
    z = np.zeros_like(X)
    for h in holes:
        kind = h.get("kind", "pyramid")
        px, py = X - h["x"], Y - h["y"]
        if kind == "pyramid":
            prof = pyramid_profile(px, py, h["depth"], h["lateral"], h.get("orientation", 0.0))
        elif kind == "gaussian":
            prof = gaussian_profile(px, py, h["depth"], h["lateral"])
        else:
            raise GeometryError(f"unknown planted hole kind {kind!r}")
        z = np.minimum(z, prof)
    z = z + tilt[0] * X + tilt[1] * Y
    if noise_rms > 0:
        z = z + np.random.default_rng(seed).normal(0.0, noise_rms, z.shape)
    return HeightMap(z, pitch, pitch)


# --------------------------------------------------------------------------
# voxelization


@dataclass
class CompositionGrid:
    """Regular voxel grid with a region label and alloy fraction per voxel.

    ``origin`` is the centre of voxel (0, 0, 0) in nm; z is the growth axis.
    Axes with a single voxel are treated as absent (no kinetic term), which
    gives 1D and 2D models on the same data structure.
    """

    labels: np.ndarray
    alloy_x: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ternaries: dict = field(default_factory=lambda: {BARRIER: "InAlAs", DOT: "InGaAs", CAP: "InAlAs"})

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.alloy_x = np.asarray(self.alloy_x, dtype=float)
        if self.labels.ndim != 3 or self.labels.shape != self.alloy_x.shape:
            raise GeometryError("labels and alloy_x must be 3D arrays of equal shape")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise GeometryError("grid spacing must be three positive numbers")
        self.origin = tuple(float(o) for o in self.origin)
        unknown = set(np.unique(self.labels).tolist()) - set(self.ternaries)
        if unknown:
            raise GeometryError(f"voxel labels {sorted(unknown)} have no material")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def n_nodes(self) -> int:
        return self.labels.size

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def dot_volume(self) -> float:
        return float(np.count_nonzero(self.labels == DOT)) * self.voxel_volume

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def dot_height(self) -> float:
        """Tallest vertical run of dot voxels (nm)."""
        dot = self.labels == DOT
        if not dot.any():
            return 0.0
        return float(dot.sum(axis=2).max()) * self.spacing[2]

    def materials(self):
        """Unique (ternary, x) pairs and the per-voxel index into them."""
        keys = []
        index = np.empty(self.labels.shape, dtype=np.int32)
        for lab in np.unique(self.labels):
            sel = self.labels == lab
            xs, inv = np.unique(self.alloy_x[sel], return_inverse=True)
            base = len(keys)
            keys.extend((self.ternaries[int(lab)], float(x)) for x in xs)
            index[sel] = base + inv.ravel()
        return keys, index

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(np.ascontiguousarray(self.alloy_x).tobytes())
        h.update(json.dumps([self.dims, self.spacing, self.origin, sorted(self.ternaries.items())]).encode())
        return h.hexdigest()

    def save(self, path) -> None:
        header = {
            "format": "ldeqd-voxels-v1",
            "dims": list(self.dims),
            "spacing_nm": list(self.spacing),
            "origin_nm": list(self.origin),
            "labels": {str(k): LABEL_NAMES.get(k, str(k)) for k in self.ternaries},
            "ternaries": {str(k): v for k, v in self.ternaries.items()},
        }
        np.savez_compressed(path, header=json.dumps(header), labels=self.labels, alloy_x=self.alloy_x)

    @classmethod
    def load(cls, path) -> CompositionGrid:
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != "ldeqd-voxels-v1":
                raise GeometryError(f"{path}: not an ldeqd voxel file")
            return cls(
                z["labels"],
                z["alloy_x"],
                tuple(header["spacing_nm"]),
                tuple(header["origin_nm"]),
                {int(k): v for k, v in header["ternaries"].items()},
            )


def uniform_grid(dims, spacing, ternary="InAlAs", x=0.7) -> CompositionGrid:
    labels = np.zeros(dims, dtype=np.uint8)
    return CompositionGrid(labels, np.full(dims, float(x)), spacing, ternaries={BARRIER: ternary})


def layered_grid(n, spacing, regions) -> CompositionGrid:
    """1D stack along z: ``regions`` is a list of (thickness_nm, ternary, x).

    Region i gets label i. Handy for quantum-well tests.
    """
    z = (np.arange(n) + 0.5) * spacing
    bounds = np.cumsum([r[0] for r in regions])
    idx = np.minimum(np.searchsorted(bounds, z, side="right"), len(regions) - 1)
    labels = idx.astype(np.uint8).reshape(1, 1, n)
    xs = np.array([regions[i][2] for i in idx], dtype=float).reshape(1, 1, n)
    tern = {i: r[1] for i, r in enumerate(regions)}
    return CompositionGrid(labels, xs, (1.0, 1.0, spacing), (0.0, 0.0, spacing / 2), tern)


def _resample(hm: HeightMap, px, py):
    """Bilinear height at physical positions (nm); zero outside the map."""
    ix = (px - hm.origin[0]) / hm.pitch_x - 0.5
    iy = (py - hm.origin[1]) / hm.pitch_y - 0.5
    return ndimage.map_coordinates(hm.values, [iy, ix], order=1, mode="constant", cval=0.0)


def rasterize(
    shape,
    dims,
    spacing,
    dot_x: float = 0.7,
    barrier_x: float = 0.7,
    *,
    center: tuple[float, float] | None = None,
    min_margin: float = 10.0,
    dot_ternary: str = "InGaAs",
    barrier_ternary: str = "InAlAs",
) -> CompositionGrid:
    """Voxelize a dot into a barrier box.

    ``shape`` is either a :class:`ShapeSpec` or a pair ``(h0, hf)`` of
    co-registered, flattened height maps (unfilled / filled), in which case
    the dot is the material between them and ``center`` selects the hole.
    A voxel belongs to the dot when its centre lies between the lower and
    upper dot surfaces; everything above the filled surface is cap.
    """
    nx, ny, nz = (int(d) for d in dims)
    dx, dy, dz = (float(s) for s in spacing)
    xc = (np.arange(nx) + 0.5 - nx / 2) * dx
    yc = (np.arange(ny) + 0.5 - ny / 2) * dy
    X, Y = np.meshgrid(xc, yc, indexing="ij")

    if isinstance(shape, ShapeSpec):
        lower, upper = shape.surfaces(X, Y)
    else:
        h0, hf = shape
        diff = subtract_heightmaps(h0, hf)
        if center is None:
            iy, ix = np.unravel_index(np.argmax(diff.values), diff.values.shape)
            x_, y_ = diff.coords()
            center = (x_[ix], y_[iy])
        lower = _resample(h0, X + center[0], Y + center[1])
        upper = _resample(hf, X + center[0], Y + center[1])
    upper = np.maximum(upper, lower)

    top, bottom = float(upper.max()), float(lower.min())
    zmid = 0.5 * (top + bottom)
    zc = (np.arange(nz) + 0.5 - nz / 2) * dz + zmid
    Z = zc[None, None, :]
    dot = (Z >= lower[..., None]) & (Z < upper[..., None])
    if not dot.any():
        raise GeometryError("dot volume is zero after voxelization")

    lab, n = ndimage.label(dot)
    if n > 1:
        sizes = ndimage.sum(dot, lab, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        log.warning("dropping %d detached dot fragment(s)", n - 1)
        dot = lab == keep

    if dot[0].any() or dot[-1].any() or dot[:, 0].any() or dot[:, -1].any() or dot[..., 0].any() or dot[..., -1].any():
        raise GeometryError("dot touches the simulation box boundary")
    idx = np.nonzero(dot)
    margins = (
        xc[idx[0].min()] - xc[0],
        xc[-1] - xc[idx[0].max()],
        yc[idx[1].min()] - yc[0],
        yc[-1] - yc[idx[1].max()],
        zc[idx[2].min()] - zc[0],
        zc[-1] - zc[idx[2].max()],
    )
    if min(margins) < min_margin - 1e-9:
        raise GeometryError(
            f"barrier margin {min(margins):.2f} nm is below the required {min_margin} nm; enlarge the box"
        )

    labels = np.full((nx, ny, nz), BARRIER, dtype=np.uint8)
    labels[Z >= np.broadcast_to(upper[..., None], labels.shape)] = CAP
    labels[dot] = DOT
    alloy = np.where(labels == DOT, float(dot_x), float(barrier_x))
    return CompositionGrid(
        labels,
        alloy,
        (dx, dy, dz),
        (xc[0], yc[0], zc[0]),
        {BARRIER: barrier_ternary, DOT: dot_ternary, CAP: barrier_ternary},
    )


def box_dims_for(shape: ShapeSpec, spacing, margin: float = 10.0, pad: float = 1.0):
    """Smallest grid that holds ``shape`` plus ``margin`` nm of barrier."""
    dx, dy, dz = spacing
    # circumradius bounds the triangle for any orientation
    r = shape.lateral_size / math.sqrt(3)
    nx = int(math.ceil((2 * (r + margin + pad)) / dx))
    ny = int(math.ceil((2 * (r + margin + pad)) / dy))
    nz = int(math.ceil((shape.height + 2 * (margin + pad)) / dz))
    return nx, ny, nz
