"""Finite-difference frequency-domain solver for the 2D TMz wave equation.

The unknown is the out-of-plane phasor E_z at cell centers (e^{+jwt}
convention).  The discretized equation is

    d/dx(mu_r^-1 dE/dx) + d/dy(mu_r^-1 dE/dy) + k0^2 eps_c E = j w mu0 J

with ``eps_c = eps_r - j sigma / (w eps0)``.  Open space is emulated with a
stretched-coordinate PML; the operator is multiplied through by ``sx * sy``
so that it stays complex symmetric, which gives exact discrete reciprocity.
Cells outside the grid are held at E = 0.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, ConvergenceError, GeometryError, PreconditionError, ShapeError, SizeError
from .phantom import BACKGROUND, C0, EPS0, MU0, AntennaPlacement, TissueLabelGrid
from .special import hankel2_0

DENSE_LIMIT = 4096


@dataclass
class FieldMap:
    """Complex E_z phasor raster (V/m), shape (height, width)."""

    values: np.ndarray
    frequency: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"field must be 2-D, got shape {values.shape}")
        self.values = values.astype(np.complex128, copy=False)
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("field values must be finite")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def to_bytes(self):
        """Interleaved little-endian float32 (re, im), row-major, top row first."""
        out = np.empty(self.values.shape + (2,), dtype="<f4")
        out[..., 0] = self.values.real
        out[..., 1] = self.values.imag
        return out.tobytes(order="C")

    @classmethod
    def from_bytes(cls, data, width, height, frequency):
        expected = width * height * 8
        if len(data) != expected:
            raise ShapeError(f"field data has {len(data)} bytes, expected {expected}")
        pairs = np.frombuffer(data, dtype="<f4").reshape(height, width, 2)
        return cls(pairs[..., 0].astype(np.float64) + 1j * pairs[..., 1].astype(np.float64),
                   frequency)


@dataclass(frozen=True)
class PmlConfig:
    thickness: int = 10
    order: float = 3.0
    reflection: float = 1e-6

    def __post_init__(self):
        if self.thickness < 4:
            raise PreconditionError("PML thickness must be >= 4 cells")
        if self.order < 1:
            raise PreconditionError("PML polynomial order must be >= 1")
        if not 0 < self.reflection < 1:
            raise PreconditionError("PML target reflection must lie in (0, 1)")


@dataclass
class SolveStats:
    iterations: int
    residual: float
    wall_time: float
    method: str = "bicgstab"

    def to_dict(self):
        return {"iterations": self.iterations, "residual": self.residual,
                "wall_time": self.wall_time, "method": self.method}


@dataclass
class HelmholtzSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    shape: tuple
    spacing: float
    frequency: float
    pml: PmlConfig
    source: AntennaPlacement | None = None
    info: dict = field(default_factory=dict)

    @property
    def k0(self):
        return 2 * math.pi * self.frequency / C0

    @property
    def wavelength(self):
        return C0 / self.frequency


def _stretch(n, thickness, order, reflection, omega, spacing):
    """Stretch factors at cell centers (n) and at interior faces (n - 1).

    Face ``k`` sits between cells ``k`` and ``k + 1``.
    """
    centers = np.arange(n) + 0.5
    faces = np.arange(1, n, dtype=float)
    length = thickness * spacing
    sigma_max = -(order + 1) * math.log(reflection) * EPS0 * C0 / (2 * length)

    def profile(x):
        d = np.maximum(thickness - x, 0) + np.maximum(x - (n - thickness), 0)
        return 1 - 1j * sigma_max * (d / thickness) ** order / (omega * EPS0)

    return profile(centers), profile(faces)


def assemble(grid: TissueLabelGrid, materials, frequency, source: AntennaPlacement,
             pml: PmlConfig | None = None) -> HelmholtzSystem:
    """Build the 5-point operator and line-current right-hand side."""
    pml = pml or PmlConfig()
    h, w = grid.shape
    if 2 * pml.thickness >= min(h, w):
        raise GeometryError(
            f"PML of {pml.thickness} cells does not fit a {h}x{w} grid")
    if not math.isclose(materials.frequency, frequency, rel_tol=1e-9):
        raise AssemblyError(
            f"material table is for {materials.frequency:g} Hz, not {frequency:g} Hz")
    if not (0 <= source.i < h and 0 <= source.j < w):
        raise GeometryError(f"source ({source.i}, {source.j}) outside the grid")
    t = pml.thickness
    if not (t <= source.i < h - t and t <= source.j < w - t):
        raise GeometryError(f"source ({source.i}, {source.j}) lies inside the PML border")
    if grid.labels[source.i, source.j] != BACKGROUND:
        raise GeometryError(f"source ({source.i}, {source.j}) is not on a background cell")
    try:
        eps_c, mu_r = materials.lookup_arrays(grid.labels)
    except KeyError as exc:
        raise AssemblyError(str(exc)) from None

    omega = 2 * math.pi * frequency
    k0 = omega / C0
    dh = grid.spacing
    sx_c, sx_f = _stretch(w, t, pml.order, pml.reflection, omega, dh)
    sy_c, sy_f = _stretch(h, t, pml.order, pml.reflection, omega, dh)

    inv_mu = 1.0 / mu_r
    # harmonic mean of mu_r^-1 on interior faces; outer faces see the edge cell
    fx = 2 * inv_mu[:, :-1] * inv_mu[:, 1:] / (inv_mu[:, :-1] + inv_mu[:, 1:])
    fy = 2 * inv_mu[:-1, :] * inv_mu[1:, :] / (inv_mu[:-1, :] + inv_mu[1:, :])
    ax = fx * sy_c[:, None] / sx_f[None, :] / dh ** 2  # (h, w-1)
    ay = fy * sx_c[None, :] / sy_f[:, None] / dh ** 2  # (h-1, w)
    # boundary faces against the E = 0 ghost ring
    sx_edge = _stretch_edge(w, t, pml, omega, dh)
    sy_edge = _stretch_edge(h, t, pml, omega, dh)
    ax_left = inv_mu[:, 0] * sy_c / sx_edge[0] / dh ** 2
    ax_right = inv_mu[:, -1] * sy_c / sx_edge[1] / dh ** 2
    ay_top = inv_mu[0, :] * sx_c / sy_edge[0] / dh ** 2
    ay_bottom = inv_mu[-1, :] * sx_c / sy_edge[1] / dh ** 2

    diag = np.outer(sy_c, sx_c) * k0 ** 2 * eps_c
    diag[:, :-1] -= ax
    diag[:, 1:] -= ax
    diag[:-1, :] -= ay
    diag[1:, :] -= ay
    diag[:, 0] -= ax_left
    diag[:, -1] -= ax_right
    diag[0, :] -= ay_top
    diag[-1, :] -= ay_bottom

    idx = np.arange(h * w).reshape(h, w)
    rows = [idx.ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel(),
            idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx.ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel(),
            idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals = [diag.ravel(), ax.ravel(), ax.ravel(), ay.ravel(), ay.ravel()]
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, h * w))

    rhs = np.zeros(h * w, dtype=complex)
    rhs[idx[source.i, source.j]] = (sx_c[source.j] * sy_c[source.i]
                                    * 1j * omega * MU0 * source.current / dh ** 2)
    return HelmholtzSystem(matrix=matrix, rhs=rhs, shape=(h, w), spacing=dh,
                           frequency=float(frequency), pml=pml, source=source)


def _stretch_edge(n, t, pml, omega, dh):
    length = t * dh
    sigma_max = -(pml.order + 1) * math.log(pml.reflection) * EPS0 * C0 / (2 * length)
    s = 1 - 1j * sigma_max / (omega * EPS0)
    return (s, s)


def relative_residual(system, x):
    bnorm = np.linalg.norm(system.rhs)
    r = system.rhs - system.matrix @ x
    return float(np.linalg.norm(r) / bnorm) if bnorm > 0 else float(np.linalg.norm(r))


def solve(system: HelmholtzSystem, tolerance=1e-8, max_iterations=2000,
          drop_tol=1e-5, fill_factor=20):
    """ILU-preconditioned BiCGSTAB; raises ConvergenceError above ``tolerance``."""
    if not 0 < tolerance < 1:
        raise PreconditionError("tolerance must lie in (0, 1)")
    start = time.perf_counter()
    h, w = system.shape
    if not np.any(system.rhs):
        x = np.zeros(h * w, dtype=complex)
        stats = SolveStats(0, 0.0, time.perf_counter() - start)
        return FieldMap(x.reshape(h, w), system.frequency), stats

    ilu = spla.spilu(system.matrix.tocsc(), drop_tol=drop_tol, fill_factor=fill_factor,
                     permc_spec="MMD_AT_PLUS_A")
    precond = spla.LinearOperator(system.matrix.shape, ilu.solve, dtype=complex)
    count = [0]

    def tick(_):
        count[0] += 1

    x, _ = spla.bicgstab(system.matrix, system.rhs, rtol=tolerance, atol=0.0,
                         maxiter=max_iterations, M=precond, callback=tick)
    res = relative_residual(system, x)
    # BiCGSTAB's recurrence residual can drift from the true one; polish once
    if res > tolerance and np.all(np.isfinite(x)):
        x2, _ = spla.bicgstab(system.matrix, system.rhs, x0=x, rtol=tolerance, atol=0.0,
                              maxiter=max_iterations, M=precond, callback=tick)
        res2 = relative_residual(system, x2)
        if res2 < res:
            x, res = x2, res2
    elapsed = time.perf_counter() - start
    if not res <= tolerance or not np.all(np.isfinite(x)):
        raise ConvergenceError(
            f"BiCGSTAB stopped at relative residual {res:.3e} after {count[0]} "
            f"iterations (tolerance {tolerance:.1e})", best_residual=res,
            iterations=count[0])
    stats = SolveStats(count[0], res, elapsed)
    return FieldMap(x.reshape(h, w), system.frequency), stats


def dense_solve(system: HelmholtzSystem) -> FieldMap:
    """Direct dense LU solve of the same operator (reference path)."""
    h, w = system.shape
    if h * w > DENSE_LIMIT:
        raise SizeError(f"dense solve limited to {DENSE_LIMIT} unknowns, got {h * w}")
    x = np.linalg.solve(system.matrix.toarray(), system.rhs)
    return FieldMap(x.reshape(h, w), system.frequency)


def analytic_line_source(distance, frequency, current=1.0):
    """Free-space E_z of an infinite line current: -(w mu0 / 4) H0^(2)(k0 r) I."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise PreconditionError("distance must be positive")
    omega = 2 * math.pi * frequency
    k0 = omega / C0
    out = -(omega * MU0 / 4) * hankel2_0(k0 * distance) * current
    return out if out.ndim else complex(out)


def refine_grid(grid: TissueLabelGrid, factor: int) -> TissueLabelGrid:
    if factor == 1:
        return grid
    labels = np.repeat(np.repeat(grid.labels, factor, axis=0), factor, axis=1)
    return TissueLabelGrid(labels, grid.spacing / factor)


def compute_field(grid, materials, frequency, source, pml=None, tolerance=1e-8,
                  max_iterations=2000, refine=1):
    """Assemble and solve; ``refine > 1`` solves on a subdivided mesh and
    samples the field back at the raster cell centers."""
    pml = pml or PmlConfig()
    if refine == 1:
        return solve(assemble(grid, materials, frequency, source, pml),
                     tolerance, max_iterations)
    if refine < 1 or refine % 2 == 0:
        raise PreconditionError("refinement factor must be a positive odd integer")
    fine = refine_grid(grid, refine)
    half = refine // 2
    fine_src = AntennaPlacement(source.i * refine + half, source.j * refine + half,
                                source.current)
    fine_pml = PmlConfig(pml.thickness * refine, pml.order, pml.reflection)
    fmap, stats = solve(assemble(fine, materials, frequency, fine_src, fine_pml),
                        tolerance, max_iterations)
    coarse = fmap.values[half::refine, half::refine]
    return FieldMap(coarse, frequency), stats


def auto_refinement(grid, materials, frequency, min_cells_per_wavelength=20):
    """Smallest odd mesh subdivision giving ``min_cells_per_wavelength`` cells
    per wavelength in the densest material present."""
    eps_c, mu_r = materials.lookup_arrays(grid.labels)
    n_max = float(np.max(np.real(np.sqrt(eps_c * mu_r))))
    cells = C0 / frequency / n_max / grid.spacing
    factor = 1
    while cells * factor < min_cells_per_wavelength:
        factor += 2
    return factor
