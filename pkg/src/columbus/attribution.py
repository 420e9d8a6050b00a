"""Relevance maps at any representation level of a :class:`ModelGraph`.

All methods differentiate the summed true-class probability
``sum(softmax(logits) * y)``; since examples do not interact in the forward
pass this equals the per-example attribution of each true-class probability.
"""
from __future__ import annotations

import collections
import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from columbus import tensor as T
from columbus.errors import UsageError
from columbus.model import ModelGraph
from columbus.tensor import ReluMode, Tensor

# Call counts per method; the trainer tests use these to prove that
# evaluation never touches attribution machinery.
CALLS: collections.Counter = collections.Counter()


class MapKind(enum.Enum):
    ELEMENTWISE = "elementwise"
    SPATIAL = "spatial"


class Method(enum.Enum):
    SALIENCY = "saliency"
    GUIDED_BACKPROP = "guided_backprop"
    GRAD_CAM = "grad_cam"
    GUIDED_GRAD_CAM = "guided_grad_cam"


@dataclass
class AttributionMap:
    level: int
    kind: MapKind
    values: np.ndarray
    method: Method
    # Standard-mode gradient of the target w.r.t. the raw input, kept so the
    # FGSM corruption can reuse it instead of running another backward pass.
    input_gradient: Optional[np.ndarray] = None


@dataclass
class _Gradients:
    activations: dict[int, np.ndarray]
    standard: dict[int, np.ndarray]
    guided: dict[int, np.ndarray]


def _check_level(model: ModelGraph, level: int) -> None:
    if not 0 <= level <= model.num_blocks:
        raise UsageError(f"level {level} outside 0..{model.num_blocks}")


def _gradients(model: ModelGraph, X: np.ndarray, y: np.ndarray, levels, modes) -> _Gradients:
    """One forward pass, then one backward per requested ReLU mode."""
    x = Tensor(np.array(X, dtype=np.float64), requires_grad=True)
    out = _Gradients({}, {}, {})
    with model.frozen():
        tr = model.trace(x)
        target = T.sum_all(T.mul_const(T.softmax(tr.logits), np.asarray(y, dtype=np.float64)))
        for mode in modes:
            x.grad = None
            T.backward(target, mode)
            store = out.guided if mode is ReluMode.GUIDED else out.standard
            for lv in levels:
                g = tr.levels[lv].grad
                store[lv] = np.zeros(tr.levels[lv].shape) if g is None else g.copy()
            store[0] = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    for lv in levels:
        out.activations[lv] = tr.levels[lv].data.copy()
    return out


def _cam(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ReLU of the channel sum weighted by spatially averaged gradients; (N,C,H,W) -> (N,H,W)."""
    alpha = grad.mean(axis=(2, 3))
    return np.maximum((alpha[:, :, None, None] * activation).sum(axis=1), 0.0)


def grad_cam_from(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return _cam(np.asarray(activation, dtype=np.float64), np.asarray(grad, dtype=np.float64))


def upsample_nearest(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour upsampling of (N,h,w) maps by integer factors."""
    n, h, w = maps.shape
    if height % h or width % w:
        raise UsageError(f"cannot upsample {h}x{w} to {height}x{width} by an integer factor")
    return np.repeat(np.repeat(maps, height // h, axis=1), width // w, axis=2)


def saliency(model: ModelGraph, X: np.ndarray, y: np.ndarray, level: int) -> AttributionMap:
    _check_level(model, level)
    CALLS[Method.SALIENCY] += 1
    g = _gradients(model, X, y, [level], [ReluMode.STANDARD])
    return AttributionMap(level, MapKind.ELEMENTWISE, g.standard[level], Method.SALIENCY, g.standard[0])


def guided_backprop(model: ModelGraph, X: np.ndarray, y: np.ndarray, level: int) -> AttributionMap:
    _check_level(model, level)
    CALLS[Method.GUIDED_BACKPROP] += 1
    g = _gradients(model, X, y, [level], [ReluMode.GUIDED])
    return AttributionMap(level, MapKind.ELEMENTWISE, g.guided[level], Method.GUIDED_BACKPROP)


def grad_cam(model: ModelGraph, X: np.ndarray, y: np.ndarray, level: int) -> AttributionMap:
    _check_level(model, level)
    if level == 0:
        raise UsageError("Grad-CAM needs a convolutional level (>= 1); use guided_grad_cam for the input")
    CALLS[Method.GRAD_CAM] += 1
    g = _gradients(model, X, y, [level], [ReluMode.STANDARD])
    cam = _cam(g.activations[level], g.standard[level])
    return AttributionMap(level, MapKind.SPATIAL, cam, Method.GRAD_CAM, g.standard[0])


def combine_guided_grad_cam(cam: np.ndarray, guided: np.ndarray) -> np.ndarray:
    """Broadcast (N,h,w) ``cam`` over channels (upsampling if needed) and multiply with ``guided``."""
    n, c, height, width = guided.shape
    if cam.shape[1:] != (height, width):
        cam = upsample_nearest(cam, height, width)
    return cam[:, None, :, :] * guided


def guided_grad_cam(model: ModelGraph, X: np.ndarray, y: np.ndarray, level: int) -> AttributionMap:
    """Grad-CAM times guided backprop at ``level``.

    At level 0 the Grad-CAM factor comes from the last conv level and is
    upsampled to the input resolution.
    """
    _check_level(model, level)
    CALLS[Method.GUIDED_GRAD_CAM] += 1
    cam_level = level if level >= 1 else model.num_blocks
    g = _gradients(model, X, y, sorted({level, cam_level}), [ReluMode.STANDARD, ReluMode.GUIDED])
    cam = _cam(g.activations[cam_level], g.standard[cam_level])
    values = combine_guided_grad_cam(cam, g.guided[level])
    return AttributionMap(level, MapKind.ELEMENTWISE, values, Method.GUIDED_GRAD_CAM, g.standard[0])


METHODS = {
    Method.SALIENCY: saliency,
    Method.GUIDED_BACKPROP: guided_backprop,
    Method.GRAD_CAM: grad_cam,
    Method.GUIDED_GRAD_CAM: guided_grad_cam,
}


def attribute(model: ModelGraph, X: np.ndarray, y: np.ndarray, level: int, method: Method | str) -> AttributionMap:
    return METHODS[Method(method)](model, X, y, level)
