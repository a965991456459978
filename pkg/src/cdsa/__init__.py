"""Cross-dimensional self-attention for imputing geo-tagged multivariate time series."""

from .attention import AttentionDims, Variant
from .data import DataCube, MissingSpec, MetricsReport
from .model import EncoderConfig, Model
from .tensor_core import Dim, Shape3

__version__ = "0.1.0"

__all__ = ["AttentionDims", "DataCube", "Dim", "EncoderConfig", "MetricsReport", "MissingSpec",
           "Model", "Shape3", "Variant", "__version__"]
