"""Exception types raised across the package."""


class SketchRetError(Exception):
    """Base class for all package errors."""


class DegenerateGeometryError(SketchRetError, ValueError):
    pass


class PointCloudParseError(SketchRetError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class CoverageError(SketchRetError, ValueError):
    """A point falls outside the deformation cage."""


class DivergenceError(SketchRetError, ArithmeticError):
    pass


class StaleCacheError(SketchRetError):
    """A fit-gap cache does not match the requested computation or is unreadable."""


class DegenerateBatchError(SketchRetError, ArithmeticError):
    """Every negative in a batch has zero gap to the anchor's shape."""


class IncompleteMatrixError(SketchRetError, KeyError):
    pass


class NumericError(SketchRetError, ArithmeticError):
    pass


class ConfigError(SketchRetError, ValueError):
    pass


class InvalidSpecError(SketchRetError, ValueError):
    pass
