"""Structured random projection from a small search space into weight-offset space.

The projector expands a ``d``-dimensional vector into a ``D``-dimensional
offset through stacked Fastfood blocks.  Each block applies the factor chain

    diag(s) . (1 / (d_padded * sqrt(d))) . H . diag(g) . P . H . diag(b)

where ``H`` is the (unnormalized) Walsh-Hadamard matrix, applied via the fast
transform and never materialized, ``b`` holds random signs, ``P`` is a random
permutation, ``g`` holds standard-normal draws, and ``s`` rescales rows so
their norms follow the chi distribution of a true Gaussian matrix.  With the
leading scale factor the composite behaves like a dense matrix with
N(0, 1/d) entries, so projecting a standard-normal input yields roughly
unit-variance outputs.

All randomness is drawn from counter-based Philox streams keyed by
``(seed, block_index, component_tag)``: blocks are mutually independent,
reproducible across platforms, and regenerable from the seed alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .validation import (
    ParamsMixin,
    check_array,
    check_positive_int,
    is_power_of_two,
    next_power_of_two,
)

SCHEMA_VERSION = 1

# component tags for the per-block random streams
_TAG_SIGNS = 0
_TAG_GAUSS = 1
_TAG_PERM = 2
_TAG_SCALE = 3


def fwht(x) -> np.ndarray:
    """Walsh-Hadamard transform along the last axis (unnormalized, in Sylvester order).

    Input length must be a power of two.  Returns ``H @ x`` computed with the
    O(n log n) butterfly; applying it twice yields ``n * x``.
    """
    arr = np.asarray(x, dtype=np.float64)
    n = arr.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"fwht length must be a power of two, got {n}")
    out = arr.reshape(-1, n).copy()
    h = 1
    while h < n:
        y = out.reshape(-1, n // (2 * h), 2, h)
        even = y[:, :, 0, :].copy()
        odd = y[:, :, 1, :]
        y[:, :, 0, :] = even + odd
        y[:, :, 1, :] = even - odd
        h *= 2
    return out.reshape(arr.shape)


def _component_rng(seed: int, block_index: int, tag: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) % (1 << 64), spawn_key=(block_index, tag))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class FastfoodBlock:
    """Frozen per-block factors: signs, Gaussian diagonal, permutation, row scaling."""

    b_signs: np.ndarray  # int8, entries in {-1, +1}
    g_gauss: np.ndarray  # float64
    perm: np.ndarray  # uint32, a bijection on range(size)
    s_scale: np.ndarray  # float64, strictly positive

    def __post_init__(self):
        n = self.b_signs.shape[0]
        if not is_power_of_two(n):
            raise ValueError(f"block size must be a power of two, got {n}")
        for name in ("g_gauss", "perm", "s_scale"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if not np.all(np.abs(self.b_signs) == 1):
            raise ValueError("b_signs entries must be +/-1")
        if not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ValueError("perm is not a permutation")
        if not np.all(self.s_scale > 0):
            raise ValueError("s_scale entries must be positive")

    @property
    def size(self) -> int:
        return self.b_signs.shape[0]

    @property
    def nbytes(self) -> int:
        return int(
            self.b_signs.nbytes + self.g_gauss.nbytes + self.perm.nbytes + self.s_scale.nbytes
        )


def _build_block(seed: int, block_index: int, size: int) -> FastfoodBlock:
    signs_rng = _component_rng(seed, block_index, _TAG_SIGNS)
    gauss_rng = _component_rng(seed, block_index, _TAG_GAUSS)
    perm_rng = _component_rng(seed, block_index, _TAG_PERM)
    scale_rng = _component_rng(seed, block_index, _TAG_SCALE)

    b_signs = (signs_rng.integers(0, 2, size=size) * 2 - 1).astype(np.int8)
    g_gauss = gauss_rng.standard_normal(size)
    perm = perm_rng.permutation(size).astype(np.uint32)
    # chi(size)-distributed row norms, compensated by the RMS of g so the
    # composite rows keep the target norm distribution
    chi = np.sqrt(scale_rng.chisquare(df=size, size=size))
    g_rms = np.sqrt(np.sum(g_gauss**2) / size)
    s_scale = chi / g_rms
    return FastfoodBlock(b_signs=b_signs, g_gauss=g_gauss, perm=perm, s_scale=s_scale)


class FastfoodProjector(ParamsMixin):
    """Deterministic linear map from R^d to R^D built from stacked Fastfood blocks.

    The input is zero-padded to the next power of two, pushed through
    ``ceil(D / d_padded)`` independent blocks, and the concatenated output is
    truncated to exactly ``D`` entries.  Immutable after construction and safe
    to share across threads.
    """

    def __init__(self, d: int, D: int, seed: int = 0):
        self.d = check_positive_int(d, "d")
        self.D = check_positive_int(D, "D")
        self.seed = int(seed)
        self.d_padded = next_power_of_two(self.d)
        n_blocks = -(-self.D // self.d_padded)  # ceil
        self.blocks = tuple(_build_block(self.seed, i, self.d_padded) for i in range(n_blocks))
        # makes the composite approximately entrywise N(0, 1/d)
        self._output_scale = 1.0 / (self.d_padded * np.sqrt(self.d))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def stored_nbytes(self) -> int:
        """Bytes held by the block factors (the dense equivalent is D*d floats)."""
        return sum(block.nbytes for block in self.blocks)

    def dense_equivalent_nbytes(self, itemsize: int = 4) -> int:
        return self.D * self.d * itemsize

    def transform(self, V) -> np.ndarray:
        """Project each row of ``V`` (shape ``(n, d)``) to shape ``(n, D)``."""
        V = check_array(V, "input", ndim=2, length=self.d)
        n = V.shape[0]
        padded = np.zeros((n, self.d_padded), dtype=np.float64)
        padded[:, : self.d] = V
        pieces = []
        for block in self.blocks:
            u = padded * block.b_signs
            u = fwht(u)
            u = u[:, block.perm]
            u = u * block.g_gauss
            u = fwht(u)
            u = u * (block.s_scale * self._output_scale)
            pieces.append(u)
        return np.concatenate(pieces, axis=1)[:, : self.D]

    def project(self, v) -> np.ndarray:
        """Project a single vector of length ``d`` to length ``D``."""
        v = check_array(v, "v", ndim=1, length=self.d)
        return self.transform(v[None, :])[0]

    def to_json(self) -> str:
        return json.dumps(
            {"schema_version": SCHEMA_VERSION, "d": self.d, "D": self.D, "seed": self.seed}
        )

    @classmethod
    def from_json(cls, text: str) -> "FastfoodProjector":
        record = json.loads(text)
        if record.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported projector schema: {record.get('schema_version')}")
        return cls(d=record["d"], D=record["D"], seed=record["seed"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "FastfoodProjector":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def __repr__(self) -> str:
        return f"FastfoodProjector(d={self.d}, D={self.D}, seed={self.seed})"


def build_projector(d: int, D: int, seed: int = 0) -> FastfoodProjector:
    return FastfoodProjector(d=d, D=D, seed=seed)


def project(projector: FastfoodProjector, v) -> np.ndarray:
    return projector.project(v)
