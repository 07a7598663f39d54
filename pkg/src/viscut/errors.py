"""Exception types shared across the package."""


class FormatError(ValueError):
    """Raised for corrupt or unsupported file contents (images, model files)."""


class RepresentabilityError(ValueError):
    """Raised when an energy cannot be expressed as an s-t mincut.

    Carries the name of the violated constraint (negative pairwise weight or
    non-concave clique-potential weights).
    """


class QPConvergenceError(RuntimeError):
    """Raised when the working-set QP fails to reach tolerance; carries the residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class GenerationError(RuntimeError):
    """Raised when the synthetic-scene generator cannot satisfy its constraints."""
