"""Figure-style PPM rendering of field maps and difference maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import metrics
from .errors import PreconditionError
from .solver import FieldMap

MODES = ("amplitude-log", "phase", "AD", "RD", "PD")
LOG_FLOOR = 1e-12

# dark blue -> cyan -> yellow -> dark red
_RAMP = np.array([
    [0.00, 0, 0, 128],
    [0.15, 0, 0, 255],
    [0.40, 0, 255, 255],
    [0.60, 255, 255, 0],
    [0.85, 255, 0, 0],
    [1.00, 128, 0, 0],
])


def ramp(t):
    """Map values in [0, 1] to uint8 RGB along the linear ramp."""
    t = np.clip(np.nan_to_num(np.asarray(t, float), nan=0.0), 0.0, 1.0)
    rgb = [np.interp(t, _RAMP[:, 0], _RAMP[:, c]) for c in (1, 2, 3)]
    return np.rint(np.stack(rgb, axis=-1)).astype(np.uint8)


def cyclic(phase):
    """Hue wheel over [0, 2*pi); equal phases modulo 2*pi get equal colors."""
    h = np.mod(np.nan_to_num(np.asarray(phase, float)), 2 * np.pi) / (2 * np.pi) * 6.0
    k = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    one, zero = np.ones_like(f), np.zeros_like(f)
    q, t = 1 - f, f
    r = np.choose(k, [one, q, zero, zero, t, one])
    g = np.choose(k, [t, one, one, q, zero, zero])
    b = np.choose(k, [zero, zero, t, one, one, q])
    return np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def _normalize(v):
    lo, hi = np.nanmin(v), np.nanmax(v)
    if not np.isfinite(lo) or hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def to_rgb(field, mode="amplitude-log", reference=None):
    """RGB image for ``field``; difference modes compare ``reference`` (truth) to it."""
    if mode not in MODES:
        raise PreconditionError(f"unknown render mode {mode!r}; choose from {MODES}")
    v = field.values if isinstance(field, FieldMap) else np.asarray(field, complex)
    if mode == "amplitude-log":
        return ramp(_normalize(np.log10(np.maximum(np.abs(v), LOG_FLOOR))))
    if mode == "phase":
        return cyclic(np.angle(v))
    if reference is None:
        raise PreconditionError(f"mode {mode} needs a reference field")
    if mode == "AD":
        d = metrics.absolute_difference(reference, v)
    elif mode == "RD":
        d = metrics.relative_difference(reference, v)
    else:
        d = metrics.phase_difference(reference, v) / np.pi
        return ramp(d)
    return ramp(_normalize(d))


def ppm_bytes(rgb):
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes()


def write_ppm(rgb, path):
    Path(path).write_bytes(ppm_bytes(rgb))
    return Path(path)


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w, 3)
