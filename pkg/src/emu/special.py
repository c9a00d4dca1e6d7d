"""Order-zero Bessel functions from the classic Hart-style rational fits.

Absolute error is below 1e-7 on (0, inf) for both J0 and Y0.
"""
import numpy as np

from .errors import PreconditionError

_J0_NUM = (57568490574.0, -13362590354.0, 651619640.7, -11214424.18, 77392.33017, -184.9052456)
_J0_DEN = (57568490411.0, 1029532985.0, 9494680.718, 59272.64853, 267.8532712, 1.0)
_Y0_NUM = (-2957821389.0, 7062834065.0, -512359803.6, 10879881.29, -86327.92757, 228.4622733)
_Y0_DEN = (40076544269.0, 745249964.8, 7189466.438, 47447.26470, 226.1030244, 1.0)
_P0 = (1.0, -0.1098628627e-2, 0.2734510407e-4, -0.2073370639e-5, 0.2093887211e-6)
_Q0 = (-0.1562499995e-1, 0.1430488765e-3, -0.6911147651e-5, 0.7621095161e-6, -0.934935152e-7)
_TWO_OVER_PI = 0.636619772367581343
_QUARTER_PI = 0.785398163397448310


def _poly(y, coef):
    # ascending coefficients, Horner
    out = np.full_like(y, coef[-1])
    for c in reversed(coef[:-1]):
        out = out * y + c
    return out


def _asymptotic(x):
    z = 8.0 / x
    y = z * z
    return z, _poly(y, _P0), _poly(y, _Q0), x - _QUARTER_PI


def j0(x):
    x = np.abs(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    small = x < 8.0
    xs = x[small]
    y = xs * xs
    out[small] = _poly(y, _J0_NUM) / _poly(y, _J0_DEN)
    xl = x[~small]
    z, p, q, xx = _asymptotic(xl)
    out[~small] = np.sqrt(_TWO_OVER_PI / xl) * (np.cos(xx) * p - z * np.sin(xx) * q)
    return out if out.ndim else out[()]


def y0(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise PreconditionError("y0 is defined for x > 0 only")
    out = np.empty_like(x)
    small = x < 8.0
    xs = x[small]
    y = xs * xs
    out[small] = _poly(y, _Y0_NUM) / _poly(y, _Y0_DEN) + _TWO_OVER_PI * j0(xs) * np.log(xs)
    xl = x[~small]
    z, p, q, xx = _asymptotic(xl)
    out[~small] = np.sqrt(_TWO_OVER_PI / xl) * (np.sin(xx) * p + z * np.cos(xx) * q)
    return out if out.ndim else out[()]


def hankel2_0(x):
    """Hankel function of the second kind, order zero: J0(x) - j Y0(x)."""
    return j0(x) - 1j * y0(x)
