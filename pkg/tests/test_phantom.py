import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from emu.errors import ExhaustionError, GeometryError, MaterialLookupError, PreconditionError
from emu.phantom import (
    BACKGROUND,
    BUNDLED_FREQUENCIES,
    LAYER_ORDER,
    MUSCLE,
    MUSCLE_SKIN,
    AntennaPlacement,
    MaterialTable,
    TissueLabelGrid,
    antenna_ring,
    bundled_materials,
    default_material_table,
    generate_phantom,
    load_material_table,
    minimum_phantom_side,
    random_antenna_locations,
)


def background_margin(labels):
    rows = np.flatnonzero(labels.any(axis=1))
    cols = np.flatnonzero(labels.any(axis=0))
    h, w = labels.shape
    return min(rows[0], cols[0], h - 1 - rows[-1], w - 1 - cols[-1])


def check_layer_constraints(grid):
    labels = grid.labels
    assert background_margin(labels) >= 12
    tissue = labels != BACKGROUND
    # outermost tissue ring is muscle/skin (or a muscle inclusion inside it)
    outer = tissue & ~ndimage.binary_erosion(tissue, border_value=0)
    assert set(np.unique(labels[outer])) <= {MUSCLE_SKIN, MUSCLE}
    for t in LAYER_ORDER:
        assert np.any(labels == t), f"layer {t} missing"
    depth = ndimage.distance_transform_edt(tissue)
    means = [depth[labels == t].mean() for t in LAYER_ORDER]
    assert all(a < b for a, b in zip(means, means[1:])), means


def test_layers_seed1(phantom64):
    check_layer_constraints(phantom64)
    assert phantom64.shape == (64, 64)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generated_phantoms_satisfy_invariants(seed):
    g = generate_phantom(seed, 64, 64, 1.5e-3)
    assert g.labels.dtype == np.uint8 and g.labels.max() <= 12
    g.validate()
    check_layer_constraints(g)


def test_phantom_deterministic():
    a = generate_phantom(1, 64, 64, 1.5e-3)
    b = generate_phantom(1, 64, 64, 1.5e-3)
    assert a.to_bytes() == b.to_bytes()


def test_seeds_differ():
    a = generate_phantom(1, 64, 64, 1.5e-3).labels
    b = generate_phantom(2, 64, 64, 1.5e-3).labels
    assert np.mean(a != b) >= 0.01


def test_rectangular_and_large_phantoms():
    g = generate_phantom(3, 133, 158, 1.5e-3)
    assert g.shape == (158, 133)
    check_layer_constraints(g)


def test_too_small_names_minimum():
    need = minimum_phantom_side()
    with pytest.raises(PreconditionError, match=str(need)):
        generate_phantom(0, 40, 40, 1e-3)
    with pytest.raises(PreconditionError):
        generate_phantom(0, 31, 64, 1e-3)
    generate_phantom(0, need, need, 1e-3).validate()


@pytest.mark.parametrize("labels, spacing", [
    (np.zeros((16, 15), np.uint8), 1e-3),
    (np.full((16, 16), 13), 1e-3),
    (np.zeros((16, 16), np.uint8), 0.0),
    (np.zeros(256, np.uint8), 1e-3),
])
def test_grid_rejects_invalid(labels, spacing):
    with pytest.raises(PreconditionError):
        TissueLabelGrid(labels, spacing)


def test_empty_grid_fails_validate():
    g = TissueLabelGrid(np.zeros((16, 16), np.uint8), 1e-3)
    with pytest.raises(PreconditionError):
        g.validate()


def test_antenna_current_nonzero():
    with pytest.raises(PreconditionError):
        AntennaPlacement(1, 1, 0j)


def ring_angles(grid, ring):
    tissue = np.argwhere(grid.labels != BACKGROUND)
    ci = (tissue[:, 0].min() + tissue[:, 0].max()) / 2
    cj = (tissue[:, 1].min() + tissue[:, 1].max()) / 2
    return np.array([math.atan2(ci - a.i, a.j - cj) for a in ring])


def test_ring_43(phantom64):
    ring = antenna_ring(phantom64, 43)
    assert len(ring) == 43
    assert len({a.index for a in ring}) == 43
    assert all(phantom64.labels[a.i, a.j] == BACKGROUND for a in ring)
    ang = np.unwrap(ring_angles(phantom64, ring))
    assert np.all(np.diff(ang) > 0)


def test_ring_single_at_angle_zero(phantom64):
    (a,) = antenna_ring(phantom64, 1)
    tissue = np.argwhere(phantom64.labels != BACKGROUND)
    assert abs(a.i - (tissue[:, 0].min() + tissue[:, 0].max()) / 2) <= 0.5
    assert a.j > tissue[:, 1].max()


def test_ring_quarter_gaps(phantom64):
    ring = antenna_ring(phantom64, 4)
    ang = np.degrees(np.unwrap(ring_angles(phantom64, ring)))
    gaps = np.diff(np.append(ang, ang[0] + 360))
    tissue = np.argwhere(phantom64.labels != BACKGROUND)
    ci = (tissue[:, 0].min() + tissue[:, 0].max()) / 2
    cj = (tissue[:, 1].min() + tissue[:, 1].max()) / 2
    r = min(math.hypot(a.i - ci, a.j - cj) for a in ring)
    # each index is rounded by at most half a cell diagonal
    tol = 2 * math.degrees(math.atan(math.sqrt(0.5) / r))
    assert np.all(np.abs(gaps - 90) <= tol)


def test_ring_regeneration_invariant(phantom64):
    again = generate_phantom(1, 64, 64, 1.5e-3)
    assert antenna_ring(phantom64, 43) == antenna_ring(again, 43)


def test_ring_exits_grid():
    labels = np.zeros((32, 32), np.uint8)
    labels[2:30, 2:30] = MUSCLE_SKIN
    with pytest.raises(GeometryError):
        antenna_ring(TissueLabelGrid(labels, 1e-3), 8)


def test_random_locations(phantom64):
    locs = random_antenna_locations(phantom64, 7, 20)
    assert len(locs) == 20 and len({a.index for a in locs}) == 20
    ring = {a.index for a in antenna_ring(phantom64, 43)}
    assert not ring & {a.index for a in locs}
    assert all(phantom64.labels[a.i, a.j] == BACKGROUND for a in locs)
    assert locs == random_antenna_locations(phantom64, 7, 20)
    with pytest.raises(PreconditionError):
        random_antenna_locations(phantom64, 7, 0)


def test_random_locations_exhaustion(phantom64):
    with pytest.raises(ExhaustionError):
        random_antenna_locations(phantom64, 7, 5000, max_tries=2000)


def test_bundled_table_rows():
    t = default_material_table(4e8)
    assert sorted(t.rows) == list(range(13))
    assert t.row(0) == (1.0, 0.0, 1.0)


def test_bundled_tables_physical():
    tables = [default_material_table(f) for f in BUNDLED_FREQUENCIES]
    for t in tables:
        for tid, (eps_r, sigma, mu_r) in t.rows.items():
            assert eps_r >= 1 and sigma >= 0 and mu_r > 0
            assert t.complex_permittivity(tid).imag <= 0
    for tid in range(1, 13):
        eps = [t.row(tid)[0] for t in tables]
        assert eps[0] > eps[1] > eps[2], tid


def test_unknown_frequency_lists_bundled():
    with pytest.raises(MaterialLookupError, match="4e\\+08"):
        default_material_table(2.45e9)


def test_user_table_and_missing_row():
    doc = bundled_materials()
    doc["tissues"] = [t for t in doc["tissues"] if t["tissue_id"] != 7]
    t = load_material_table(doc, 9e8)
    with pytest.raises(MaterialLookupError, match="7"):
        t.row(7)


def test_table_rejects_bad_rows():
    with pytest.raises(PreconditionError):
        MaterialTable(4e8, {1: (0.5, 0.0, 1.0)})
    with pytest.raises(PreconditionError):
        MaterialTable(4e8, {0: (2.0, 0.0, 1.0)})
