"""Secure vertical federated split-learning simulator."""

from ._core import (
    ConfigError,
    Pool,
    VfedsecError,
    auc,
    dequantize_sum,
    mask,
    run_cli,
    train,
    unmask_sum,
    quantize,
)

__all__ = [
    "ConfigError",
    "Pool",
    "VfedsecError",
    "auc",
    "dequantize_sum",
    "mask",
    "quantize",
    "run_cli",
    "train",
    "unmask_sum",
]
