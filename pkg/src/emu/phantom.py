"""Synthetic segmented head phantoms, tissue tables and antenna placement.

Phantoms are nested, randomly perturbed ellipses standing in for segmented
head slices.  Label 0 is air; labels 1-12 are the tissues in ``TISSUES``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    ExhaustionError,
    GeometryError,
    MaterialLookupError,
    PreconditionError,
)

EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6
C0 = 1.0 / math.sqrt(EPS0 * MU0)

BACKGROUND = 0
CSF = 1
GREY_MATTER = 2
WHITE_MATTER = 3
FAT = 4
MUSCLE = 5
MUSCLE_SKIN = 6
SKULL = 7
VESSELS = 8
CONNECTIVE = 9
DURA = 10
BONE_MARROW = 11
SKIN = 12
MAX_LABEL = 12

TISSUES = {
    BACKGROUND: "background",
    CSF: "csf",
    GREY_MATTER: "grey_matter",
    WHITE_MATTER: "white_matter",
    FAT: "fat",
    MUSCLE: "muscle",
    MUSCLE_SKIN: "muscle_skin",
    SKULL: "skull",
    VESSELS: "vessels",
    CONNECTIVE: "connective_tissue",
    DURA: "dura_mater",
    BONE_MARROW: "bone_marrow",
    SKIN: "skin",
}

# outside -> in
LAYER_ORDER = (MUSCLE_SKIN, FAT, SKULL, DURA, CSF, GREY_MATTER, WHITE_MATTER)

# (fraction of the short semi-axis, minimum cells); white matter fills the rest
_LAYER_THICKNESS = {
    MUSCLE_SKIN: (0.08, 2.0),
    FAT: (0.05, 1.0),
    SKULL: (0.09, 1.0),
    DURA: (0.03, 1.0),
    CSF: (0.05, 1.0),
    GREY_MATTER: (0.15, 2.0),
}
_MIN_WHITE = 2.0
_MAX_PERTURB = 0.06
_MIN_FILL = 0.88
PHANTOM_MARGIN = 16
RING_OFFSET = 3.0
BUNDLED_FREQUENCIES = (4.0e8, 9.0e8, 1.5e9)


def _min_semi_axis():
    return sum(m for _, m in _LAYER_THICKNESS.values()) * 1.25 + _MIN_WHITE


def minimum_phantom_side(margin=PHANTOM_MARGIN):
    """Smallest grid side (cells) that fits every tissue layer."""
    r = _min_semi_axis() * (1 + _MAX_PERTURB) / _MIN_FILL
    return int(2 * (margin + math.ceil(r)) + 1)


@dataclass
class TissueLabelGrid:
    """Integer tissue raster of shape (height, width), row 0 at the top."""

    labels: np.ndarray
    spacing: float

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise PreconditionError(f"labels must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > MAX_LABEL):
            raise PreconditionError(f"labels must lie in 0..{MAX_LABEL}")
        self.labels = np.ascontiguousarray(labels, dtype=np.uint8)
        if not self.spacing > 0:
            raise PreconditionError(f"spacing must be positive, got {self.spacing}")
        if self.width < 16 or self.height < 16:
            raise PreconditionError(
                f"grid must be at least 16x16, got {self.height}x{self.width}")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.labels.shape

    def has_tissue(self):
        return bool(np.any(self.labels != BACKGROUND))

    def validate(self):
        """Check the full phantom invariants, including non-empty tissue."""
        if not self.has_tissue():
            raise PreconditionError("phantom has no tissue cells")
        return self

    def to_bytes(self):
        return self.labels.tobytes(order="C")


@dataclass(frozen=True)
class AntennaPlacement:
    i: int
    j: int
    current: complex = 1.0 + 0.0j

    def __post_init__(self):
        if abs(self.current) == 0:
            raise PreconditionError("antenna current must be nonzero")

    @property
    def index(self):
        return (self.i, self.j)


@dataclass
class MaterialTable:
    """Dielectric rows ``tissue_id -> (eps_r, sigma, mu_r)`` at one frequency."""

    frequency: float
    rows: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frequency > 0:
            raise PreconditionError("frequency must be positive")
        rows = {}
        for tid, (eps_r, sigma, mu_r) in self.rows.items():
            tid = int(tid)
            if eps_r < 1 or sigma < 0 or mu_r <= 0:
                raise PreconditionError(
                    f"invalid dielectric row for tissue {tid}: "
                    f"eps_r={eps_r}, sigma={sigma}, mu_r={mu_r}")
            rows[tid] = (float(eps_r), float(sigma), float(mu_r))
        if BACKGROUND in rows and rows[BACKGROUND] != (1.0, 0.0, 1.0):
            raise PreconditionError("background row must be (1, 0, 1)")
        rows.setdefault(BACKGROUND, (1.0, 0.0, 1.0))
        self.rows = rows

    @property
    def omega(self):
        return 2 * math.pi * self.frequency

    def row(self, tissue_id):
        try:
            return self.rows[int(tissue_id)]
        except KeyError:
            raise MaterialLookupError(
                f"no material row for tissue {int(tissue_id)} at {self.frequency:g} Hz"
            ) from None

    def complex_permittivity(self, tissue_id):
        """Absolute complex permittivity eps0*eps_r - j*sigma/omega (F/m)."""
        eps_r, sigma, _ = self.row(tissue_id)
        return EPS0 * eps_r - 1j * sigma / self.omega

    def check_covers(self, labels):
        for tid in np.unique(labels):
            self.row(tid)

    def lookup_arrays(self, labels):
        """Per-cell (relative complex permittivity, mu_r) arrays for a label raster."""
        self.check_covers(labels)
        lut_eps = np.zeros(MAX_LABEL + 1, dtype=complex)
        lut_mu = np.ones(MAX_LABEL + 1)
        for tid, (eps_r, sigma, mu_r) in self.rows.items():
            if tid <= MAX_LABEL:
                lut_eps[tid] = eps_r - 1j * sigma / (self.omega * EPS0)
                lut_mu[tid] = mu_r
        return lut_eps[labels], lut_mu[labels]


def load_material_table(source, frequency):
    """Load the row set for ``frequency`` from a materials JSON file or dict."""
    if isinstance(source, (str, Path)):
        doc = json.loads(Path(source).read_text())
    else:
        doc = source
    rows = {}
    available = set()
    for entry in doc["tissues"]:
        for p in entry["properties"]:
            available.add(float(p["f_hz"]))
            if math.isclose(float(p["f_hz"]), frequency, rel_tol=1e-9):
                rows[int(entry["tissue_id"])] = (p["eps_r"], p["sigma_s_per_m"], p["mu_r"])
    if not rows:
        listed = ", ".join(f"{f:g}" for f in sorted(available))
        raise MaterialLookupError(
            f"no material data at {frequency:g} Hz; available frequencies: {listed}")
    return MaterialTable(frequency=float(frequency), rows=rows)


def bundled_materials():
    return json.loads(resources.files("emu").joinpath("materials.json").read_text())


def default_material_table(frequency):
    if not any(math.isclose(frequency, f, rel_tol=1e-9) for f in BUNDLED_FREQUENCIES):
        listed = ", ".join(f"{f:g}" for f in BUNDLED_FREQUENCIES)
        raise MaterialLookupError(
            f"no bundled material table at {frequency:g} Hz "
            f"(bundled: {listed}); supply a user table")
    return load_material_table(bundled_materials(), frequency)


def _perturbation(rng, amplitude):
    orders = np.arange(2, 6)
    coef = rng.uniform(-1, 1, size=orders.size) / orders
    phase = rng.uniform(0, 2 * np.pi, size=orders.size)
    norm = np.sum(np.abs(coef))

    def delta(theta):
        theta = np.asarray(theta)[..., None]
        return amplitude * np.sum(coef * np.cos(orders * theta + phase), axis=-1) / norm

    return delta


def generate_phantom(seed, width, height, spacing, margin=PHANTOM_MARGIN):
    """Layered elliptical head phantom, deterministic in ``seed``."""
    if width < 32 or height < 32:
        raise PreconditionError(f"phantom must be at least 32x32, got {height}x{width}")
    need = minimum_phantom_side(margin)
    if min(width, height) < need:
        raise PreconditionError(
            f"{height}x{width} is too small to fit all tissue layers with a "
            f"{margin}-cell margin; minimum side is {need} cells")
    rng = np.random.default_rng(seed)

    amp = rng.uniform(0.5, 1.0) * _MAX_PERTURB
    room_x = (width - 1) / 2 - margin
    room_y = (height - 1) / 2 - margin
    ax = room_x * rng.uniform(_MIN_FILL, 0.97) / (1 + _MAX_PERTURB)
    ay = room_y * rng.uniform(_MIN_FILL, 0.97) / (1 + _MAX_PERTURB)
    cx = (width - 1) / 2 + rng.uniform(-1, 1) * (room_x - ax * (1 + amp))
    cy = (height - 1) / 2 + rng.uniform(-1, 1) * (room_y - ay * (1 + amp))
    delta = _perturbation(rng, amp)

    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    dx, dy = xx - cx, cy - yy
    theta = np.arctan2(dy / ay, dx / ax)
    r = np.hypot(dx, dy)
    # radius of the outer boundary along the ray through each cell
    r_ell = 1.0 / np.sqrt((np.cos(np.arctan2(dy, dx)) / ax) ** 2
                          + (np.sin(np.arctan2(dy, dx)) / ay) ** 2)
    r_outer = r_ell * (1 + delta(theta))
    depth = r_outer - r

    short = min(ax, ay)
    labels = np.zeros((height, width), dtype=np.uint8)
    labels[depth >= 0] = WHITE_MATTER
    edge = 0.0
    for tissue in LAYER_ORDER[:-1]:
        frac, min_cells = _LAYER_THICKNESS[tissue]
        thick = max(min_cells, frac * short * rng.uniform(0.85, 1.25))
        labels[(depth >= edge) & (depth < edge + thick)] = tissue
        edge += thick
    inner_edges = edge

    def sprinkle(host, tissue, count, radius):
        cells = np.argwhere(labels == host)
        if len(cells) == 0:
            return
        for _ in range(count):
            ci, cj = cells[rng.integers(len(cells))]
            rr = radius * rng.uniform(0.6, 1.0)
            disk = (yy - ci) ** 2 + (xx - cj) ** 2 <= rr ** 2
            labels[disk & (labels == host)] = tissue

    scale = max(1, round(short / 12))
    sprinkle(WHITE_MATTER, VESSELS, 2 * scale, 1.0 + 0.3 * scale)
    sprinkle(GREY_MATTER, VESSELS, scale, 1.0)
    sprinkle(SKULL, BONE_MARROW, 2 * scale, 1.0 + 0.3 * scale)
    sprinkle(FAT, CONNECTIVE, 2 * scale, 1.0 + 0.2 * scale)
    sprinkle(MUSCLE_SKIN, MUSCLE, 2 * scale, 1.0 + 0.3 * scale)

    if not np.any(labels == WHITE_MATTER):  # pragma: no cover - guarded by the size check
        raise PreconditionError(
            f"layers ({inner_edges:.1f} cells) do not fit; minimum side is {need} cells")
    return TissueLabelGrid(labels=labels, spacing=float(spacing))


def _ring_ellipse(grid):
    """Center and semi-axes (rows, cols) of the ellipse enclosing all tissue."""
    tissue = np.argwhere(grid.labels != BACKGROUND)
    if len(tissue) == 0:
        raise PreconditionError("phantom has no tissue cells")
    (i0, j0), (i1, j1) = tissue.min(axis=0), tissue.max(axis=0)
    ci, cj = (i0 + i1) / 2, (j0 + j1) / 2
    hi, hj = (i1 - i0) / 2 + 0.5, (j1 - j0) / 2 + 0.5
    q = np.sqrt(((tissue[:, 0] - ci) / hi) ** 2 + ((tissue[:, 1] - cj) / hj) ** 2)
    s = q.max()
    return ci, cj, s * hi + RING_OFFSET, s * hj + RING_OFFSET


def _on_ellipse(ci, cj, bi, bj, theta):
    i = int(round(ci - bi * math.sin(theta)))
    j = int(round(cj + bj * math.cos(theta)))
    return i, j


def antenna_ring(grid, count):
    """``count`` placements evenly spaced in angle, counter-clockwise from +x."""
    if count < 1:
        raise PreconditionError("antenna count must be >= 1")
    ci, cj, bi, bj = _ring_ellipse(grid)
    if ci - bi < 0 or ci + bi > grid.height - 1 or cj - bj < 0 or cj + bj > grid.width - 1:
        raise GeometryError(
            f"antenna ellipse (semi-axes {bi:.1f}x{bj:.1f} cells) exits the "
            f"{grid.height}x{grid.width} grid")
    out = []
    for k in range(count):
        i, j = _on_ellipse(ci, cj, bi, bj, 2 * math.pi * k / count)
        if grid.labels[i, j] != BACKGROUND:
            raise GeometryError(f"ring position ({i}, {j}) falls on tissue")
        out.append(AntennaPlacement(i, j))
    return out


def random_antenna_locations(grid, seed, count, ring_count=43, exclude=(),
                             jitter=2.0, max_tries=None):
    """Random off-ring placements near the antenna ellipse.

    Locations coinciding with ``antenna_ring(grid, ring_count)`` or with any
    ``(i, j)`` in ``exclude`` are rejected, as are duplicates.
    """
    if count < 1:
        raise PreconditionError("antenna count must be >= 1")
    ci, cj, bi, bj = _ring_ellipse(grid)
    taken = {a.index for a in antenna_ring(grid, ring_count)} if ring_count else set()
    taken |= {tuple(e) for e in exclude}
    rng = np.random.default_rng(seed)
    out = []
    tries = max_tries if max_tries is not None else 1000 * count
    for _ in range(tries):
        if len(out) == count:
            break
        theta = rng.uniform(0, 2 * math.pi)
        off = rng.uniform(-jitter, jitter)
        i, j = _on_ellipse(ci, cj, bi + off, bj + off, theta)
        if not (0 <= i < grid.height and 0 <= j < grid.width):
            continue
        if grid.labels[i, j] != BACKGROUND or (i, j) in taken:
            continue
        taken.add((i, j))
        out.append(AntennaPlacement(i, j))
    if len(out) < count:
        raise ExhaustionError(
            f"found only {len(out)} of {count} free antenna cells after {tries} tries")
    return out
