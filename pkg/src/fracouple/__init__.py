"""Asymptotic coupling of SDEs driven by fractional Brownian motion (H > 1/2)."""
from .fractional_kernels import (FbmPath, KernelParams, UniformGrid, WienerPath, alpha_h, gb_to_gw,
                                 gw_to_gb, mvn_map, r_operator, sample_fgn)
from .sde_models import ModelSpec, get_model, integrate

__version__ = "0.1.0"

__all__ = ["FbmPath", "KernelParams", "UniformGrid", "WienerPath", "alpha_h", "gb_to_gw", "gw_to_gb",
           "mvn_map", "r_operator", "sample_fgn", "ModelSpec", "get_model", "integrate", "__version__"]
