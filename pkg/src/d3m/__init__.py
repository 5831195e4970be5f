"""Label-free monitoring of post-deployment model deterioration via last-layer disagreement."""
__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArtifactError,
    ConfigMismatchError,
    D3MError,
    GateError,
    InputError,
    IntegrityError,
    NumericError,
    ShapeError,
)

__all__ = [
    "ArtifactError",
    "ConfigMismatchError",
    "D3MError",
    "GateError",
    "InputError",
    "IntegrityError",
    "NumericError",
    "ShapeError",
    "__version__",
]
