"""Exception hierarchy shared across the package."""


class ScalrError(Exception):
    """Base class for all package errors."""


class ShapeError(ScalrError, ValueError):
    pass


class ConfigError(ScalrError, ValueError):
    pass


class InputError(ScalrError, ValueError):
    pass


class GeometryError(ScalrError, ValueError):
    pass


class AlignmentError(GeometryError):
    """Raised when chunk alignment has too few usable correspondences."""


class GraphError(ScalrError, ValueError):
    pass


class ProtocolError(ScalrError, RuntimeError):
    """Violation of the gradient synchronization protocol."""


class ParseError(ScalrError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
