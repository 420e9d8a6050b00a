"""Selecting the most relevant features and corrupting them."""
from __future__ import annotations

import collections
import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from columbus import tensor as T
from columbus.attribution import AttributionMap, MapKind
from columbus.errors import ConfigError, UsageError
from columbus.tensor import Tensor

CALLS: collections.Counter = collections.Counter()


class CorruptionKind(enum.Enum):
    RANDOM_VALUE = "random_value"
    ZERO = "zero"
    FGSM = "fgsm"
    GAUSSIAN_BLUR = "gaussian_blur"
    TARGETED_DROPOUT = "targeted_dropout"


INPUT_KINDS = (CorruptionKind.RANDOM_VALUE, CorruptionKind.ZERO, CorruptionKind.FGSM, CorruptionKind.GAUSSIAN_BLUR)
REPR_KINDS = (CorruptionKind.TARGETED_DROPOUT,)


@dataclass(frozen=True)
class CorruptionMethod:
    kind: CorruptionKind
    epsilon: float = 0.1
    sigma: float = 2.0
    kernel: int = 5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("FGSM epsilon must be nonnegative")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ConfigError("blur kernel must be odd and at least 3")
        if self.sigma <= 0:
            raise ConfigError("blur sigma must be positive")


@dataclass
class FeatureMask:
    """Selected units per example.

    ``selected`` has the level's full shape (N,C,H,W) for elementwise maps
    and (N,H,W) for spatial maps, where a position covers every channel.
    """

    level: int
    kind: MapKind
    selected: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        n = self.selected.shape[0]
        return self.selected.reshape(n, -1).sum(axis=1)

    def expand(self, shape: tuple[int, ...]) -> np.ndarray:
        """Boolean mask over a representation of ``shape`` (N,C,H,W)."""
        if self.kind is MapKind.SPATIAL:
            if self.selected.shape != (shape[0],) + tuple(shape[2:]):
                raise UsageError(f"spatial mask {self.selected.shape} does not fit {shape}")
            return np.broadcast_to(self.selected[:, None, :, :], shape)
        if self.selected.shape != tuple(shape):
            raise UsageError(f"mask {self.selected.shape} does not fit {shape}")
        return self.selected


def count_for(p: float, units: int) -> int:
    """ceil(p * units), exact on the shortest decimal spelling of ``p``.

    Using ``repr`` means ``p=0.4`` behaves as 2/5 rather than as the binary
    double just above it, so ``count_for(0.4, 5) == 2``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction {p} outside [0, 1]")
    return min(units, math.ceil(Fraction(repr(float(p))) * units))


def ranking_key(amap: AttributionMap) -> np.ndarray:
    # Signed gradient maps rank by magnitude; Grad-CAM maps are already >= 0.
    if amap.kind is MapKind.ELEMENTWISE:
        return np.abs(amap.values)
    return amap.values


def top_p_mask(amap: AttributionMap, p: float) -> FeatureMask:
    """Per example, select the ceil(p*U) units with the largest ranking key.

    Ties go to the lowest row-major index.
    """
    CALLS["top_p_mask"] += 1
    key = ranking_key(amap)
    n = key.shape[0]
    flat = key.reshape(n, -1)
    units = flat.shape[1]
    k = count_for(p, units)
    selected = np.zeros(flat.shape, dtype=bool)
    if k:
        order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
        np.put_along_axis(selected, order, True, axis=1)
    return FeatureMask(amap.level, amap.kind, selected.reshape(key.shape))


def gaussian_kernel1d(sigma: float, size: int) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(X: np.ndarray, sigma: float, size: int) -> np.ndarray:
    """Separable Gaussian blur of (N,C,H,W) images with edge-replicate padding."""
    g = gaussian_kernel1d(sigma, size)
    r = size // 2
    h, w = X.shape[2], X.shape[3]
    padded = np.pad(X, ((0, 0), (0, 0), (r, r), (0, 0)), mode="edge")
    rows = np.zeros(X.shape)
    for i in range(size):
        rows += g[i] * padded[:, :, i:i + h, :]
    padded = np.pad(rows, ((0, 0), (0, 0), (0, 0), (r, r)), mode="edge")
    out = np.zeros(X.shape)
    for j in range(size):
        out += g[j] * padded[:, :, :, j:j + w]
    return out


def corrupt_input(
    X: np.ndarray,
    mask: FeatureMask,
    method: CorruptionMethod,
    grad_at_input: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Perturb the masked pixels of images in [0,1]; unmasked pixels are copied verbatim."""
    CALLS[method.kind.value] += 1
    if mask.level != 0:
        raise UsageError(f"corrupt_input needs a level-0 mask, got level {mask.level}")
    X = np.asarray(X, dtype=np.float64)
    m = mask.expand(X.shape)
    kind = method.kind
    if kind is CorruptionKind.ZERO:
        return np.where(m, 0.0, X)
    if kind is CorruptionKind.RANDOM_VALUE:
        if rng is None:
            raise UsageError("random-value corruption needs an rng")
        out = X.copy()
        out[m] = rng.random(int(m.sum()))
        return out
    if kind is CorruptionKind.FGSM:
        if grad_at_input is None:
            raise UsageError("FGSM corruption needs the input gradient")
        stepped = np.clip(X + method.epsilon * np.sign(grad_at_input), 0.0, 1.0)
        return np.where(m, stepped, X)
    if kind is CorruptionKind.GAUSSIAN_BLUR:
        return np.where(m, gaussian_blur(X, method.sigma, method.kernel), X)
    raise UsageError(f"{kind.value} is not an input corruption")


def corrupt_repr(R: Tensor, mask: FeatureMask) -> Tensor:
    """Targeted dropout: zero the masked units of an intermediate representation, no rescaling."""
    CALLS[CorruptionKind.TARGETED_DROPOUT.value] += 1
    if mask.level < 1:
        raise UsageError("corrupt_repr needs a mask at level >= 1")
    return T.masked(R, ~mask.expand(R.shape))
