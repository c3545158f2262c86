"""Exception types shared across the package.

Validation problems (bad shapes, bad layouts, out-of-range parameters) raise
plain ``ValueError``; this module only adds the numerical-failure family,
which the CLI maps to a distinct exit code.
"""

from __future__ import annotations


class NumericalError(RuntimeError):
    """A linear-algebra or optimisation step failed numerically.

    Carries an optional partial fit report (``report``) and the outer
    iteration index (``iteration``) when raised from inside an EM loop.
    """

    def __init__(self, message: str, *, iteration: int | None = None, report=None):
        if iteration is not None:
            message = f"{message} (outer iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
        self.report = report
