"""Numeric settings shared across the package."""

import os

import numpy as np

#: Lower clamp applied before ``log`` / division and inside the sqrt guard.
CLAMP_DELTA = 1e-12

_DTYPES = {"float64": np.float64, "float32": np.float32}

DTYPE = _DTYPES[os.environ.get("FALCONLAB_DTYPE", "float64")]


def set_dtype(name: str) -> None:
    """Switch the default float type ("float64" or "float32") for new tensors."""
    global DTYPE
    try:
        DTYPE = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}") from None
