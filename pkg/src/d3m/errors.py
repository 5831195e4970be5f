"""Exception hierarchy shared by every stage of the monitor."""


class D3MError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(D3MError, ValueError):
    pass


class InputError(D3MError, ValueError):
    pass


class NumericError(D3MError, FloatingPointError):
    """A loss or statistic became non-finite.

    ``index`` is the position in the offending batch, when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ArtifactError(D3MError):
    """An artifact on disk could not be read (truncated, bad JSON, wrong version)."""


class IntegrityError(D3MError):
    """Artifacts do not belong together (fingerprint or hyperparameter mismatch)."""


class ConfigMismatchError(IntegrityError):
    """Deployment hyperparameters differ from the ones used at calibration."""


class GateError(D3MError):
    """The in-distribution false-positive gate failed and was not overridden."""
