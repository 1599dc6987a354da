"""People counting on 8x8 infrared arrays: tiny trainable models, int8
quantization, cost proxies, a deterministic blob-counting baseline, and a
Pareto architecture explorer."""

from .models import ModelSpec, Prediction, build_model, parse_arch
from .costs import cost_report, count_macs, count_params, size_bytes
from .estimators import BlobCountingBaseline, InfraredPeopleCounter

__all__ = [
    "ModelSpec",
    "Prediction",
    "build_model",
    "parse_arch",
    "cost_report",
    "count_macs",
    "count_params",
    "size_bytes",
    "InfraredPeopleCounter",
    "BlobCountingBaseline",
]

__version__ = "0.1.0"
