"""Training loop: ERM baseline and the corrupt-then-train procedure.

Each COLUMBUS iteration samples a representation level, an attribution
method and a corruption method, identifies the most relevant features of a
random subset of the batch with the current parameters, corrupts them and
trains on the result with cross-entropy plus the domain-alignment penalty.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from columbus import attribution as A
from columbus import corruption as C
from columbus import tensor as T
from columbus.alignment import alignment_penalty
from columbus.dataset import Dataset
from columbus.errors import ConfigError, TrainingDivergence
from columbus.model import ModelGraph, classification_loss, one_hot
from columbus.tensor import Tensor

log = logging.getLogger(__name__)

ATTRIBUTION_METHODS = (A.Method.SALIENCY, A.Method.GUIDED_GRAD_CAM)
LOG_HEADER = ["iter", "level", "attr_method", "corrupt_method", "p", "q", "loss_cls", "loss_da", "loss_total"]


@dataclass
class TrainConfig:
    algorithm: str = "columbus"
    lam: float = 1.0
    lr: float = 1e-3
    iterations: int = 2000
    batch_per_domain: int = 16
    p_max_input: float = 0.3
    p_max_intermediate: float = 0.2
    q_max_input: float = 0.6
    q_max_intermediate: float = 0.3
    fgsm_epsilon: float = 0.1
    blur_sigma: float = 2.0
    blur_kernel: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("erm", "columbus"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        for name in ("p_max_input", "p_max_intermediate", "q_max_input", "q_max_intermediate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} = {v} outside [0, 1]")
        if self.iterations < 0 or self.batch_per_domain < 1 or self.checkpoint_every < 1:
            raise ConfigError("iterations >= 0, batch_per_domain >= 1 and checkpoint_every >= 1 required")


def schedule_value(t: int, T_total: int, max_value: float) -> float:
    """Linear ramp from 0 to ``max_value`` over the first half of training, then flat."""
    if T_total <= 0:
        return max_value
    return max_value * min(1.0, 2.0 * t / T_total)


@dataclass
class ScheduleState:
    t: int
    total: int
    p_input: float
    p_intermediate: float
    q_input: float
    q_intermediate: float

    @classmethod
    def at(cls, t: int, cfg: TrainConfig) -> "ScheduleState":
        n = cfg.iterations
        return cls(
            t,
            n,
            schedule_value(t, n, cfg.p_max_input),
            schedule_value(t, n, cfg.p_max_intermediate),
            schedule_value(t, n, cfg.q_max_input),
            schedule_value(t, n, cfg.q_max_intermediate),
        )


@dataclass
class CorruptionPlan:
    level: int
    attribution: A.Method
    corruption: C.CorruptionMethod
    p: float
    q: float
    subset: np.ndarray


def sample_iteration_plan(
    t: int,
    rng: np.random.Generator,
    num_blocks: int,
    batch_size: int,
    cfg: TrainConfig,
) -> CorruptionPlan:
    """Even iterations corrupt the input, odd ones a uniformly drawn intermediate level."""
    if num_blocks < 1:
        raise ConfigError("model needs at least one intermediate level")
    sched = ScheduleState.at(t, cfg)
    if t % 2 == 0:
        level, kinds = 0, C.INPUT_KINDS
        p, q = sched.p_input, sched.q_input
    else:
        level, kinds = int(rng.integers(1, num_blocks + 1)), C.REPR_KINDS
        p, q = sched.p_intermediate, sched.q_intermediate
    attr = ATTRIBUTION_METHODS[int(rng.integers(len(ATTRIBUTION_METHODS)))]
    kind = kinds[int(rng.integers(len(kinds)))]
    method = C.CorruptionMethod(kind, epsilon=cfg.fgsm_epsilon, sigma=cfg.blur_sigma, kernel=cfg.blur_kernel)
    k = int(math.floor(q * batch_size + 0.5))
    subset = np.sort(rng.choice(batch_size, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    return CorruptionPlan(level, attr, method, p, q, subset)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class BalancedSampler:
    """Draws ``per_domain`` examples from every domain, without replacement within a batch."""

    def __init__(self, data: Dataset, per_domain: int, rng: np.random.Generator):
        self.data = data
        self.rng = rng
        self.per_domain = per_domain
        self.pools = [np.flatnonzero(data.domains == d) for d in data.domain_ids()]
        for pool in self.pools:
            if len(pool) < per_domain:
                raise ConfigError(f"domain has {len(pool)} examples, batch needs {per_domain}")

    @property
    def batch_size(self) -> int:
        return self.per_domain * len(self.pools)

    def sample(self) -> np.ndarray:
        return np.concatenate([pool[self.rng.choice(len(pool), self.per_domain, replace=False)] for pool in self.pools])


@dataclass
class StepLog:
    iteration: int
    level: Optional[int]
    attr_method: str
    corrupt_method: str
    p: float
    q: float
    loss_cls: float
    loss_da: float
    loss_total: float

    def row(self) -> list[str]:
        return [
            str(self.iteration), "" if self.level is None else str(self.level), self.attr_method,
            self.corrupt_method, repr(self.p), repr(self.q), repr(self.loss_cls), repr(self.loss_da),
            repr(self.loss_total),
        ]


def _finish_step(model, opt, logits, emb, Y, domains, lam, diag) -> tuple[float, float, float]:
    loss_cls = classification_loss(logits, Y)
    da = alignment_penalty(emb, domains)
    total = T.add(loss_cls, T.scale(da, lam)) if lam != 0 else loss_cls
    values = (loss_cls.item(), da.item(), total.item())
    if not all(np.isfinite(values)):
        raise TrainingDivergence(f"non-finite loss {values} ({diag})")
    model.zero_grad()
    T.backward(total)
    opt.step()
    return values


def erm_step(model: ModelGraph, opt: Adam, X: np.ndarray, Y: np.ndarray, domains: np.ndarray) -> tuple[float, float, float]:
    tr = model.trace(Tensor(X))
    return _finish_step(model, opt, tr.logits, tr.embedding, Y, domains, 0.0, "erm")


def identify(model: ModelGraph, X: np.ndarray, Y: np.ndarray, plan: CorruptionPlan) -> A.AttributionMap:
    return A.attribute(model, X, Y, plan.level, plan.attribution)


def train_step(
    model: ModelGraph,
    opt: Adam,
    X: np.ndarray,
    Y: np.ndarray,
    domains: np.ndarray,
    plan: CorruptionPlan,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    """One COLUMBUS update; returns (loss_cls, loss_da, loss_total)."""
    active = len(plan.subset) > 0 and plan.p > 0
    if not active:
        tr = model.trace(Tensor(X))
        return _finish_step(model, opt, tr.logits, tr.embedding, Y, domains, cfg.lam, plan)

    sub = plan.subset
    amap = identify(model, X[sub], Y[sub], plan)
    mask = C.top_p_mask(amap, plan.p)
    if plan.level == 0:
        Xc = X.copy()
        # sign(grad of cross-entropy) == -sign(grad of true-class probability)
        grad = None if amap.input_gradient is None else -amap.input_gradient
        Xc[sub] = C.corrupt_input(X[sub], mask, plan.corruption, grad, rng)
        tr = model.trace(Tensor(Xc))
        logits, emb = tr.logits, tr.embedding
    else:
        R = model.trace(Tensor(X)).levels[plan.level]
        full = np.zeros((len(X),) + mask.selected.shape[1:], dtype=bool)
        full[sub] = mask.selected
        Rc = C.corrupt_repr(R, C.FeatureMask(plan.level, mask.kind, full))
        tr = model.trace(Rc, start_level=plan.level)
        logits, emb = tr.logits, tr.embedding
    return _finish_step(model, opt, logits, emb, Y, domains, cfg.lam, plan)


@dataclass
class Checkpoint:
    iteration: int
    params: np.ndarray


@dataclass
class TrainResult:
    model: ModelGraph
    checkpoints: list[Checkpoint]
    log: list[StepLog] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for entry in self.log:
            w.writerow(entry.row())
        return buf.getvalue()


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    batch_ss, plan_ss, corrupt_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(batch_ss), np.random.default_rng(plan_ss), np.random.default_rng(corrupt_ss))


def train(
    model: ModelGraph,
    data: Dataset,
    cfg: TrainConfig,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
) -> TrainResult:
    """Run ``cfg.iterations`` updates on ``data`` (pooled source-domain training splits)."""
    batch_rng, plan_rng, corrupt_rng = _streams(cfg.seed)
    sampler = BalancedSampler(data, cfg.batch_per_domain, batch_rng)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    checkpoints: list[Checkpoint] = []
    logs: list[StepLog] = []

    def snapshot(t: int) -> None:
        ck = Checkpoint(t, model.get_flat())
        checkpoints.append(ck)
        if on_checkpoint is not None:
            on_checkpoint(ck)

    for t in range(cfg.iterations):
        idx = sampler.sample()
        X = data.images[idx]
        Y = one_hot(data.labels[idx], data.num_classes)
        domains = data.domains[idx]
        if cfg.algorithm == "erm":
            values = erm_step(model, opt, X, Y, domains)
            logs.append(StepLog(t, None, "none", "none", 0.0, 0.0, *values))
        else:
            plan = sample_iteration_plan(t, plan_rng, model.num_blocks, len(idx), cfg)
            values = train_step(model, opt, X, Y, domains, plan, cfg, corrupt_rng)
            logs.append(
                StepLog(t, plan.level, plan.attribution.value, plan.corruption.kind.value, plan.p, plan.q, *values)
            )
        if (t + 1) % cfg.checkpoint_every == 0 or t + 1 == cfg.iterations:
            snapshot(t + 1)
        if t % 200 == 0:
            log.debug("iter %d loss_cls %.4f loss_da %.4f", t, values[0], values[1])
    if cfg.iterations == 0:
        snapshot(0)
    return TrainResult(model, checkpoints, logs)


# ---------------------------------------------------------------------------
# Evaluation and model selection
# ---------------------------------------------------------------------------

class Selection(enum.Enum):
    TRAIN_DOMAIN_VALIDATION = "val"
    ORACLE = "oracle"


@dataclass
class EvalSplits:
    source_val: dict[int, Dataset]
    target_val: Dataset
    target_test: Dataset

    def __post_init__(self):
        if not self.source_val:
            raise ConfigError("evaluation needs at least one source validation split")
        if len(self.target_val) == 0 or len(self.target_test) == 0:
            raise ConfigError("evaluation needs non-empty target validation and test splits")


@dataclass
class CheckpointScores:
    iteration: int
    source_val: dict[int, float]
    target_val: float
    target_test: float

    @property
    def source_mean(self) -> float:
        return float(np.mean([self.source_val[d] for d in sorted(self.source_val)]))


@dataclass
class EvaluationReport:
    selection: Selection
    iteration: int
    accuracy: float
    source_val_max_mean: float
    scores: list[CheckpointScores]

    def as_dict(self) -> dict:
        return {
            "selection": self.selection.value,
            "iteration": self.iteration,
            "accuracy": self.accuracy,
            "source_val_max_mean": self.source_val_max_mean,
            "checkpoints": [asdict(s) for s in self.scores],
        }


def accuracy(model: ModelGraph, data: Dataset) -> float:
    return float(np.mean(model.predict(data.images) == data.labels))


def score_checkpoints(model: ModelGraph, checkpoints: Sequence[Checkpoint], splits: EvalSplits) -> list[CheckpointScores]:
    """Clean-data accuracies of every checkpoint; the model's parameters are restored afterwards."""
    original = model.get_flat()
    scores = []
    try:
        for ck in checkpoints:
            model.set_flat(ck.params)
            scores.append(
                CheckpointScores(
                    ck.iteration,
                    {d: accuracy(model, ds) for d, ds in sorted(splits.source_val.items())},
                    accuracy(model, splits.target_val),
                    accuracy(model, splits.target_test),
                )
            )
    finally:
        model.set_flat(original)
    return scores


def select(scores: Sequence[CheckpointScores], selection: Selection) -> CheckpointScores:
    if not scores:
        raise ConfigError("no checkpoints to select from")
    if selection is Selection.ORACLE:
        return max(scores, key=lambda s: s.iteration)
    # Later checkpoints win ties: validation accuracy saturates early on easy sources.
    return max(scores, key=lambda s: (s.source_mean, s.iteration))


def evaluate_scores(scores: Sequence[CheckpointScores], selection: Selection) -> EvaluationReport:
    chosen = select(scores, selection)
    acc = chosen.target_val if selection is Selection.ORACLE else chosen.target_test
    return EvaluationReport(selection, chosen.iteration, acc, max(s.source_mean for s in scores), list(scores))


def evaluate(
    model: ModelGraph, checkpoints: Sequence[Checkpoint], splits: EvalSplits, selection: Selection | str
) -> EvaluationReport:
    return evaluate_scores(score_checkpoints(model, checkpoints, splits), Selection(selection))


def write_log(result: TrainResult, path: str | Path) -> None:
    Path(path).write_text(result.log_csv())
