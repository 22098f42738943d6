"""Exception types shared across the package."""


class DensityLabError(Exception):
    """Base class for package errors."""


class IllPosedModelError(DensityLabError):
    """The spectral model fails an integrability requirement.

    Raised instead of returning a number when a variance integral
    diverges; carries the well-posedness diagnostics when available.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class NyquistError(DensityLabError):
    """Lattice Nyquist frequency does not cover the requested spectral cutoff."""


class SolverBlowupError(DensityLabError):
    """A path produced non-finite values during time stepping."""

    def __init__(self, step, max_abs):
        super().__init__(
            f"non-finite field values at time step {step} (max |u| before failure: {max_abs:.3e})"
        )
        self.step = step
        self.max_abs = max_abs


class ValidationError(DensityLabError):
    """Experiment configuration failed validation; nothing was computed."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))
