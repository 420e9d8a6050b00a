"""Small conv net with numbered representation levels.

Level 0 is the raw input and level ``b`` (1..B) is the output of conv block
``b`` (conv 3x3 -> ReLU -> 2x2 max-pool). The head global-average-pools the
level-B output into the embedding and maps it to class logits.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from columbus import tensor as T
from columbus.errors import ConfigError, InputError
from columbus.tensor import Tensor

KERNEL = 3
POOL = 2
CHECKPOINT_MAGIC = b"CMB1"


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.max_pool2d(T.relu(T.conv2d(x, self.weight, self.bias, stride=1, padding=KERNEL // 2)), POOL)


@dataclass
class Prediction:
    logits: Tensor

    @property
    def probabilities(self) -> np.ndarray:
        return T._softmax(self.logits.data)

    def labels(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1)


@dataclass
class Trace:
    """Everything recorded by one forward pass.

    ``levels`` maps level index to its output tensor; a pass started at level
    ``l`` only records levels ``l..B``.
    """

    levels: dict[int, Tensor]
    embedding: Tensor
    logits: Tensor

    @property
    def prediction(self) -> Prediction:
        return Prediction(self.logits)


def level_shapes_for(input_shape: Sequence[int], channels: Sequence[int]) -> list[tuple[int, int, int]]:
    c, h, w = (int(v) for v in input_shape)
    shapes = [(c, h, w)]
    for ch in channels:
        h, w = h // POOL, w // POOL
        if h == 0 or w == 0:
            raise ConfigError(
                f"input {tuple(input_shape)} too small for {len(channels)} pooling stages"
            )
        shapes.append((int(ch), h, w))
    return shapes


@dataclass
class ModelGraph:
    blocks: list[ConvBlock]
    head_weight: Tensor
    head_bias: Tensor
    input_shape: tuple[int, int, int]
    level_shapes: list[tuple[int, int, int]] = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        channels = [b.weight.shape[0] for b in self.blocks]
        self.level_shapes = level_shapes_for(self.input_shape, channels)
        prev = self.input_shape[0]
        for i, b in enumerate(self.blocks):
            if b.weight.shape[1] != prev:
                raise ConfigError(f"block {i + 1} expects {b.weight.shape[1]} channels, gets {prev}")
            prev = b.weight.shape[0]
        if self.head_weight.shape[1] != prev:
            raise ConfigError(f"head expects embedding size {self.head_weight.shape[1]}, gets {prev}")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def num_levels(self) -> int:
        return len(self.blocks) + 1

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.head_weight.shape[1]

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for b in self.blocks:
            params += [b.weight, b.bias]
        params += [self.head_weight, self.head_bias]
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = []
        for i, b in enumerate(self.blocks, start=1):
            names += [(f"block{i}.weight", b.weight), (f"block{i}.bias", b.bias)]
        names += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return names

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self) -> Iterator["ModelGraph"]:
        """Temporarily exclude parameters from gradient tracking."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            n = p.data.size
            p.data = np.array(flat[offset:offset + n], dtype=np.float64).reshape(p.shape)
            offset += n
        if offset != len(flat):
            raise ConfigError(f"parameter vector has {len(flat)} entries, model needs {offset}")

    def trace(self, x: Tensor, start_level: int = 0) -> Trace:
        """Forward pass from ``start_level``, where ``x`` is that level's representation."""
        if not 0 <= start_level <= self.num_blocks:
            raise ConfigError(f"level {start_level} outside 0..{self.num_blocks}")
        expected = self.level_shapes[start_level]
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigError(f"level {start_level} expects (N, {expected}), got {x.shape}")
        levels = {start_level: x}
        h = x
        for b in range(start_level, self.num_blocks):
            h = self.blocks[b](h)
            levels[b + 1] = h
        emb = T.global_avg_pool(h)
        logits = T.linear(emb, self.head_weight, self.head_bias)
        return Trace(levels, emb, logits)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return self.trace(x).logits

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class predictions without building a gradient graph."""
        out = []
        with self.frozen():
            for start in range(0, len(images), batch_size):
                out.append(self.trace(Tensor(images[start:start + batch_size])).prediction.labels())
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def forward_from(model: ModelGraph, level: int, representation: Tensor) -> Tensor:
    """Logits obtained by feeding ``representation`` into the model at ``level``."""
    return model.trace(representation, start_level=level).logits


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build(
    num_blocks: int,
    channels: Sequence[int],
    num_classes: int,
    input_shape: Sequence[int],
    seed: int,
) -> ModelGraph:
    if num_blocks < 1:
        raise ConfigError("num_blocks must be at least 1")
    if len(channels) != num_blocks:
        raise ConfigError(f"expected {num_blocks} channel counts, got {len(channels)}")
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    level_shapes_for(input_shape, channels)
    rng = np.random.default_rng(seed)
    blocks = []
    prev = int(input_shape[0])
    for ch in channels:
        fan_in = prev * KERNEL * KERNEL
        w = Tensor(_he_uniform(rng, (ch, prev, KERNEL, KERNEL), fan_in), requires_grad=True)
        blocks.append(ConvBlock(w, Tensor(np.zeros(ch), requires_grad=True)))
        prev = ch
    head_w = Tensor(_he_uniform(rng, (num_classes, prev), prev), requires_grad=True)
    head_b = Tensor(np.zeros(num_classes), requires_grad=True)
    return ModelGraph(blocks, head_w, head_b, tuple(input_shape))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise InputError("targets must be one-hot rows")


def classification_loss(pred: Prediction | Tensor, y: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy between softmax(logits) and one-hot ``y``."""
    logits = pred.logits if isinstance(pred, Prediction) else pred
    y = np.asarray(y, dtype=np.float64)
    _check_one_hot(y)
    if y.shape != logits.shape:
        raise InputError(f"targets {y.shape} do not match logits {logits.shape}")
    return T.cross_entropy(logits, y)


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------
# Layout (little-endian): b"CMB1", u32 block count, u32 input C, H, W,
# then for each parameter tensor in model order: u32 ndim, u32 dims...,
# followed by all parameter values as raw f64 in the same order.

def to_bytes(model: ModelGraph) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", model.num_blocks), struct.pack("<3I", *model.input_shape)]
    params = model.parameters()
    for p in params:
        parts.append(struct.pack("<I", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
    for p in params:
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> ModelGraph:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError("not a model checkpoint (bad magic)")
    offset = 4
    (num_blocks,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    input_shape = struct.unpack_from("<3I", blob, offset)
    offset += 12
    shapes = []
    for _ in range(2 * num_blocks + 2):
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", blob, offset))
        offset += 4 * ndim
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
        tensors.append(Tensor(arr, requires_grad=True))
    if offset != len(blob):
        raise ConfigError(f"checkpoint has {len(blob) - offset} trailing bytes")
    blocks = [ConvBlock(tensors[2 * i], tensors[2 * i + 1]) for i in range(num_blocks)]
    return ModelGraph(blocks, tensors[-2], tensors[-1], input_shape)


def save_checkpoint(model: ModelGraph, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path: str | Path) -> ModelGraph:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Tensor-level relative error ||a - n|| / (||a|| + ||n||), 0 when both vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(
    model: ModelGraph,
    batch: np.ndarray,
    tolerance: float = 1e-4,
    y: Optional[np.ndarray] = None,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare every parameter gradient of the classification loss to central differences."""
    batch = np.asarray(batch, dtype=np.float64)
    if y is None:
        y = one_hot(np.arange(len(batch)) % model.num_classes, model.num_classes)

    def loss_value() -> float:
        with model.frozen():
            return classification_loss(model.forward(batch), y).item()

    model.zero_grad()
    loss = classification_loss(model.forward(Tensor(batch)), y)
    T.backward(loss)
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic, numeric)
    model.zero_grad()
    return GradCheckReport(tolerance, errors)
