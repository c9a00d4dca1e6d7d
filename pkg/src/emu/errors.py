"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
first token of its one-line failure message.
"""


class EmuError(Exception):
    category = "error"


class PreconditionError(EmuError, ValueError):
    category = "precondition"


class GeometryError(EmuError, ValueError):
    category = "geometry"


class MaterialLookupError(EmuError, KeyError):
    category = "lookup"

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class AssemblyError(EmuError, ValueError):
    category = "assembly"


class ConvergenceError(EmuError, RuntimeError):
    category = "convergence"

    def __init__(self, message, best_residual=float("nan"), iterations=0):
        super().__init__(message)
        self.best_residual = best_residual
        self.iterations = iterations


class SizeError(EmuError, ValueError):
    category = "size"


class ShapeError(EmuError, ValueError):
    category = "shape"


class DegenerateError(EmuError, ValueError):
    category = "degenerate"


class ExhaustionError(EmuError, RuntimeError):
    category = "exhaustion"


class ConfigError(EmuError, ValueError):
    category = "config"


class DivergenceError(EmuError, RuntimeError):
    category = "divergence"

    def __init__(self, message, epoch=-1):
        super().__init__(message)
        self.epoch = epoch


class ValidationError(EmuError, ValueError):
    category = "validation"


class LabelImportError(EmuError, ValueError):
    category = "import"

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
