"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A visibility row allows no key position."""


class LabelError(ValueError):
    """A class label falls outside the vocabulary."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced by a forward op or found in a gradient."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (detached loss, repeated backward, ...)."""


class CorpusFormatError(ValueError):
    """Malformed corpus line; carries the 1-based line number."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupted or of the wrong kind."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""
