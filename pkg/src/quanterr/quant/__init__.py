from .awq import awq_search_scales
from .gptq import gptq_quantize, proxy_loss
from .grids import QuantizedLinear, nf_codebook, nf_quantize, pack_codes, rtn_quantize, unpack_codes
from .qmodel import (QuantizedModel, QuantSpec, load_any, load_quantized, quantize_model,
                     restore_layers, restore_projection, save_quantized)

__all__ = [
    "QuantSpec", "QuantizedLinear", "QuantizedModel", "awq_search_scales", "gptq_quantize",
    "load_any", "load_quantized", "nf_codebook", "nf_quantize", "pack_codes", "proxy_loss",
    "quantize_model", "restore_layers", "restore_projection", "rtn_quantize", "save_quantized",
    "unpack_codes",
]
