"""Exception types shared across the package."""


class ConvergenceError(RuntimeError):
    """A numerical basis or step size is too coarse for the requested run."""


class EstimationError(RuntimeError):
    """Inference cannot proceed with the given data and model."""
