"""Input validation helpers shared across the package."""
from __future__ import annotations

import numpy as np


def check_array(
    x,
    name: str = "array",
    *,
    ndim: int | None = None,
    length: int | None = None,
    finite: bool = True,
) -> np.ndarray:
    """Coerce ``x`` to a float64 ndarray and validate basic properties.

    Raises ``ValueError`` on dimensionality/length mismatch or, when
    ``finite`` is set, on NaN/Inf entries.
    """
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if length is not None and arr.shape[-1] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[-1]}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_batch(x, name: str = "batch", *, width: int | None = None) -> np.ndarray:
    """Validate a non-empty 2-D sample batch with finite entries."""
    arr = check_array(x, name, ndim=2)
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if width is not None and arr.shape[1] != width:
        raise ValueError(f"{name} must have {width} columns, got {arr.shape[1]}")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def check_positive_int(value: int, name: str) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return int(value)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    if n < 1:
        raise ValueError(f"expected a positive integer, got {n}")
    return 1 << (n - 1).bit_length() if n > 1 else 1


class ParamsMixin:
    """Minimal get_params/set_params support (scikit-learn protocol).

    Parameter names are taken from the ``__init__`` signature, so classes
    using this mixin must store each constructor argument under the same
    attribute name (derived attributes may exist alongside).
    """

    @classmethod
    def _param_names(cls) -> list[str]:
        import inspect

        sig = inspect.signature(cls.__init__)
        return [
            p.name
            for p in sig.parameters.values()
            if p.name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        unknown = set(params) - valid
        if unknown:
            raise ValueError(f"unknown parameters: {sorted(unknown)}")
        merged = {**self.get_params(), **params}
        self.__init__(**merged)
        return self
