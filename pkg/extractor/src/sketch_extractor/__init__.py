"""sketch-extractor: pretrained-backbone embedding extraction for sketchlab."""

__version__ = "0.1.0"

from .extract import (
    BACKBONE_DIMS,
    ExtractorConfig,
    WeightsUnavailableError,
    extract,
    list_inputs,
)

__all__ = [
    "__version__",
    "BACKBONE_DIMS",
    "ExtractorConfig",
    "WeightsUnavailableError",
    "extract",
    "list_inputs",
]
