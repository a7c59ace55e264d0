"""Exception types raised by the estimation routines."""

import numpy as np


class ImpossibleEvidenceError(ValueError):
    """The observation record has zero probability under the model."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ModelBlowupError(FloatingPointError):
    """A drift or density evaluation produced non-finite values."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix that must be inverted is (numerically) singular."""

    def __init__(self, message, matrix=None, rank=None):
        super().__init__(message)
        self.matrix = matrix
        self.rank = rank
