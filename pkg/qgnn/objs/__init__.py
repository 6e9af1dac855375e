from .qg_packing import PackedTensor, pack, unpack
from .qg_quantizer import (
    QuantConfig,
    QuantParams,
    dequantize,
    fake_quantize,
    gamma_sweep,
    mse_decomposition,
    observe_range,
    quantize,
)
from .qg_truncation import TruncationSpec, moments, truncate_bt, truncate_bt_star
from .qg_ureg import ureg

__all__ = [
    "PackedTensor",
    "pack",
    "unpack",
    "QuantConfig",
    "QuantParams",
    "dequantize",
    "fake_quantize",
    "gamma_sweep",
    "mse_decomposition",
    "observe_range",
    "quantize",
    "TruncationSpec",
    "moments",
    "truncate_bt",
    "truncate_bt_star",
    "ureg",
]
