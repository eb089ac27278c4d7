"""Domain types and the pure field / objective / metric arithmetic.

Everything here works on 64-bit complex data. The core quantities are

* ``forward_field``: the coil-combined field ``A @ w`` on every voxel,
* ``shim_objective``: masked magnitude misfit plus a power penalty,
  ``sum_v (|A w|_v - m_v)^2 + lam * ||w||^2``,
* ``rmse``: the root-mean-square magnitude misfit over masked voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DimensionError, DomainError

DEFAULT_LAMBDA = 1e-3


@dataclass(frozen=True, eq=False)
class ComplexImage:
    """Per-coil complex B1+ maps of one slice, stored as ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DimensionError(f"ComplexImage needs a (H, W, C) array, got shape {data.shape}")
        data = data.astype(np.complex128, copy=False)
        if not np.all(np.isfinite(data)):
            raise DomainError("ComplexImage contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, ComplexImage) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary region of interest, usually ``density > source_threshold``."""

    bits: np.ndarray
    source_threshold: float = float("nan")

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise DimensionError(f"Mask needs a (H, W) array, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, Mask) or not np.array_equal(self.bits, other.bits):
            return False
        a, b = self.source_threshold, other.source_threshold
        return a == b or (np.isnan(a) and np.isnan(b))


@dataclass(frozen=True, eq=False)
class ShimWeights:
    """One complex drive weight per transmit coil."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128).reshape(-1)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    def __eq__(self, other):
        return isinstance(other, ShimWeights) and np.array_equal(self.values, other.values)

    def to_real(self) -> np.ndarray:
        """Interleaved ``[re0, im0, re1, im1, ...]`` representation."""
        return np.column_stack([self.values.real, self.values.imag]).reshape(-1)

    @classmethod
    def from_real(cls, x) -> "ShimWeights":
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size % 2:
            raise DimensionError("interleaved real/imag weights need an even length")
        return cls(x[0::2] + 1j * x[1::2])


@dataclass(frozen=True)
class TargetProfile:
    """Target magnitude (scalar or one value per masked voxel) and power penalty."""

    magnitude: Any = 1.0
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        mag = np.asarray(self.magnitude, dtype=np.float64)
        if np.any(mag < 0) or not np.all(np.isfinite(mag)):
            raise DomainError("target magnitude must be finite and non-negative")
        if not (self.lam >= 0):
            raise DomainError(f"lambda must be >= 0, got {self.lam}")

    def values(self, n: int) -> np.ndarray:
        mag = np.asarray(self.magnitude, dtype=np.float64)
        if mag.ndim == 0:
            return np.full(n, float(mag))
        if mag.shape != (n,):
            raise DimensionError(f"target has {mag.size} values for {n} masked voxels")
        return mag


@dataclass
class SliceSample:
    """One training example plus its provenance (phantom, slice index, rotation)."""

    b1: ComplexImage
    mask: Mask
    target: TargetProfile = field(default_factory=TargetProfile)
    ref_weights: ShimWeights | None = None
    ref_rmse: float | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        p = self.provenance
        return f"p{p.get('phantom', 0):02d}_s{p.get('slice', 0):03d}_a{p.get('aug', 0):02d}"

    @property
    def parent(self) -> tuple:
        """Identity shared by all augmented variants of one simulated slice."""
        return (self.provenance.get("phantom", 0), self.provenance.get("slice", 0))

    def system(self):
        return masked_system(self.b1, self.mask, self.target)

    def __eq__(self, other):
        if not isinstance(other, SliceSample):
            return NotImplemented
        return (
            self.b1 == other.b1
            and self.mask == other.mask
            and np.array_equal(np.asarray(self.target.magnitude), np.asarray(other.target.magnitude))
            and self.target.lam == other.target.lam
            and self.ref_weights == other.ref_weights
            and self.ref_rmse == other.ref_rmse
            and self.provenance == other.provenance
        )


def _values(w) -> np.ndarray:
    if isinstance(w, ShimWeights):
        return w.values
    return np.asarray(w, dtype=np.complex128).reshape(-1)


def _check_pair(b1: ComplexImage, mask: Mask | None, w) -> np.ndarray:
    values = _values(w)
    if values.shape[0] != b1.channels:
        raise DimensionError(f"{values.shape[0]} weights for {b1.channels} coils")
    if mask is not None and mask.bits.shape != b1.data.shape[:2]:
        raise DimensionError(f"mask {mask.bits.shape} does not match field {b1.data.shape[:2]}")
    return values


def masked_system(b1: ComplexImage, mask: Mask, target: TargetProfile):
    """Return ``(A, m, lam)``: masked field rows ``(N, C)``, target magnitudes ``(N,)``, penalty."""
    if mask.bits.shape != b1.data.shape[:2]:
        raise DimensionError(f"mask {mask.bits.shape} does not match field {b1.data.shape[:2]}")
    n = mask.count
    if n == 0:
        raise DomainError("mask is empty")
    a = b1.data[mask.bits]
    return a, target.values(n), float(target.lam)


def forward_field(b1: ComplexImage, w) -> np.ndarray:
    """Coil-combined complex field ``sum_c b1[..., c] * w[c]`` with shape ``(H, W)``."""
    values = _check_pair(b1, None, w)
    out = np.zeros(b1.data.shape[:2], dtype=np.complex128)
    for c in range(values.shape[0]):
        out += b1.data[:, :, c] * values[c]
    return out


def objective_terms(a: np.ndarray, m: np.ndarray, lam: float, w: np.ndarray):
    """Misfit sum and penalty for an already-masked system."""
    resid = np.abs(a @ w) - m
    return float(resid @ resid), float(lam * np.vdot(w, w).real)


def shim_objective(b1: ComplexImage, mask: Mask, target: TargetProfile, w) -> float:
    values = _check_pair(b1, mask, w)
    a, m, lam = masked_system(b1, mask, target)
    misfit, power = objective_terms(a, m, lam, values)
    return misfit + power


def rmse(b1: ComplexImage, mask: Mask, target: TargetProfile, w) -> float:
    """Magnitude RMSE over the masked voxels, as a fraction of the target (x100 for percent)."""
    values = _check_pair(b1, mask, w)
    a, m, _ = masked_system(b1, mask, target)
    misfit, _ = objective_terms(a, m, 0.0, values)
    return float(np.sqrt(misfit / a.shape[0]))


def canonicalize_phase(w) -> ShimWeights:
    """Remove the global phase so the first nonzero weight is real and positive."""
    values = _values(w)
    nonzero = np.flatnonzero(values != 0)
    if nonzero.size == 0:
        return ShimWeights(values.copy())
    ref = values[nonzero[0]]
    out = values * (np.conj(ref) / abs(ref))
    out[nonzero[0]] = abs(ref)
    return ShimWeights(out)


def quadrature_weights(n_coils: int) -> ShimWeights:
    """Unit drive with phase ``2*pi*c/C`` on coil ``c`` (45 degree steps for eight coils)."""
    if n_coils < 1:
        raise DomainError("need at least one coil")
    phases = 2 * np.pi * np.arange(n_coils) / n_coils
    values = np.exp(1j * phases)
    # exact values at multiples of 90 degrees
    values.real[np.isclose(values.real, 0, atol=1e-15)] = 0.0
    values.imag[np.isclose(values.imag, 0, atol=1e-15)] = 0.0
    return ShimWeights(values)
