"""Leave-one-domain-out runs, random hyperparameter search and result tables."""
from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import functools
import io
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from columbus import dataset as D
from columbus import model as M
from columbus import trainer as TR
from columbus.config import ExperimentConfig, dump_config
from columbus.errors import ConfigError

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["algorithm", "target_domain", "selection", "mean_acc", "std_acc", "trials", "seeds"]

# Search intervals for the COLUMBUS-specific hyperparameters.
LAMBDA_LOG10 = (-1.0, 1.0)
P_INPUT = (0.2, 0.5)
P_INTERMEDIATE = (0.01, 0.333)
Q_INPUT = (0.2, 1.0)
Q_INTERMEDIATE = (0.1, 0.5)


def sample_hyperparameters(rng: np.random.Generator, base: TR.TrainConfig) -> TR.TrainConfig:
    return dataclasses.replace(
        base,
        lam=float(10.0 ** rng.uniform(*LAMBDA_LOG10)),
        p_max_input=float(rng.uniform(*P_INPUT)),
        p_max_intermediate=float(rng.uniform(*P_INTERMEDIATE)),
        q_max_input=float(rng.uniform(*Q_INPUT)),
        q_max_intermediate=float(rng.uniform(*Q_INTERMEDIATE)),
    )


@dataclass
class Prepared:
    train: D.Dataset
    splits: TR.EvalSplits
    sources: list[int]
    target: int


@functools.lru_cache(maxsize=4)
def _dataset(num_classes: int, per_class: int, size: int, seed: int, target: int, path: str) -> D.Dataset:
    if path:
        return D.read_dataset(path)
    return D.generate(num_classes, D.default_domains(target), per_class, seed, size)


def prepare(cfg: ExperimentConfig, target: Optional[int] = None) -> Prepared:
    """Hold out ``target``; sources are split 80/20, the target into validation (20%) and test (80%)."""
    dc = cfg.data
    target = dc.target_domain if target is None else target
    ds = _dataset(dc.num_classes, dc.per_class, dc.size, dc.seed, target, dc.path)
    if target not in ds.domain_ids():
        raise ConfigError(f"target domain {target} not in dataset domains {ds.domain_ids()}")
    sources = [d for d in ds.domain_ids() if d != target]
    if not sources:
        raise ConfigError("need at least one source domain")
    train, val = D.split_80_20(ds.only(sources), dc.seed)
    test, target_val = D.split_80_20(ds.only([target]), dc.seed)
    splits = TR.EvalSplits({d: val.only([d]) for d in sources}, target_val, test)
    return Prepared(train, splits, sources, target)


def build_model(cfg: ExperimentConfig, prepared: Prepared, seed: int) -> M.ModelGraph:
    shape = prepared.train.images.shape[1:]
    return M.build(cfg.model.blocks, list(cfg.model.channels), prepared.train.num_classes, shape, seed=seed)


@dataclass
class TrialRecord:
    trial: int
    algorithm: str
    target_domain: int
    seed: int
    hyperparameters: dict
    results: dict = field(default_factory=dict)  # selection -> {accuracy, iteration, source_val}
    source_val_max_mean: float = math.nan
    error: str = ""
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.error

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrialRecord":
        return cls(**json.loads(text))


@dataclass
class RunSpec:
    cfg: ExperimentConfig
    train_cfg: TR.TrainConfig
    trial: int
    seed: int
    target: int
    run_dir: Optional[str] = None


def run_one(spec: RunSpec) -> TrialRecord:
    """Train and evaluate one (trial, seed); failures are captured in the record."""
    tcfg = dataclasses.replace(spec.train_cfg, seed=spec.seed)
    hp = {k: v for k, v in dataclasses.asdict(tcfg).items() if k != "seed"}
    rec = TrialRecord(spec.trial, tcfg.algorithm, spec.target, spec.seed, hp)
    start = time.perf_counter()
    try:
        with threadpool_limits(limits=1):
            prepared = prepare(spec.cfg, spec.target)
            model = build_model(spec.cfg, prepared, spec.seed)
            run_dir = Path(spec.run_dir) if spec.run_dir else None
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)

            def save(ck: TR.Checkpoint) -> None:
                if run_dir is not None:
                    M.save_checkpoint(model, run_dir / f"ckpt_{ck.iteration:06d}.cmb")

            result = TR.train(model, prepared.train, tcfg, on_checkpoint=save)
            scores = TR.score_checkpoints(model, result.checkpoints, prepared.splits)
            for sel in TR.Selection:
                rep = TR.evaluate_scores(scores, sel)
                chosen = next(s for s in scores if s.iteration == rep.iteration)
                rec.results[sel.value] = {
                    "accuracy": rep.accuracy,
                    "iteration": rep.iteration,
                    "source_val": {str(d): a for d, a in chosen.source_val.items()},
                    "source_val_mean": chosen.source_mean,
                    "target_val": chosen.target_val,
                }
                rec.source_val_max_mean = rep.source_val_max_mean
            if run_dir is not None:
                TR.write_log(result, run_dir / "log.csv")
                (run_dir / "scores.json").write_text(
                    json.dumps([dataclasses.asdict(s) for s in scores], indent=2, sort_keys=True)
                )
    except Exception as exc:  # recorded, the search goes on
        log.error("trial %d seed %d failed: %s", spec.trial, spec.seed, exc)
        rec.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    rec.wall_time = time.perf_counter() - start
    if spec.run_dir:
        Path(spec.run_dir).mkdir(parents=True, exist_ok=True)
        (Path(spec.run_dir) / "record.json").write_text(rec.to_json())
    return rec


def run_all(specs: Sequence[RunSpec], workers: int = 1) -> list[TrialRecord]:
    """Execute runs, possibly in worker processes; output order follows ``specs``."""
    if workers <= 1 or len(specs) <= 1:
        return [run_one(s) for s in specs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, specs))


def _pstd(values: Sequence[float]) -> float:
    return float(np.std(values))  # population convention (ddof=0)


def _selection_score(rec: TrialRecord, selection: str) -> float:
    # Trials are ranked by what each selection method is allowed to see.
    res = rec.results[selection]
    return res["source_val_mean"] if selection == "val" else res["target_val"]


def aggregate(records: Sequence[TrialRecord]) -> str:
    """summary.csv text; a pure function of the record set (input order does not matter)."""
    groups: dict[tuple[str, int], dict[int, list[TrialRecord]]] = {}
    for rec in sorted(records, key=lambda r: (r.algorithm, r.target_domain, r.trial, r.seed)):
        groups.setdefault((rec.algorithm, rec.target_domain), {}).setdefault(rec.trial, []).append(rec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for (algo, target), trials in sorted(groups.items()):
        complete = {t: rs for t, rs in trials.items() if all(r.ok for r in rs)}
        n_seeds = max((len(rs) for rs in trials.values()), default=0)
        for selection in ("val", "oracle"):
            if not complete:
                w.writerow([algo, target, selection, "nan", "nan", 0, n_seeds])
                continue
            best = max(
                sorted(complete),
                key=lambda t: (np.mean([_selection_score(r, selection) for r in complete[t]]), -t),
            )
            accs = [r.results[selection]["accuracy"] for r in complete[best]]
            w.writerow([algo, target, selection, f"{np.mean(accs):.6f}", f"{_pstd(accs):.6f}", len(complete), n_seeds])
    return buf.getvalue()


def load_records(root: str | Path) -> list[TrialRecord]:
    return [TrialRecord.from_json(p.read_text()) for p in sorted(Path(root).rglob("record.json"))]


def _finish(records: list[TrialRecord], cfg: ExperimentConfig, out: Optional[Path]) -> str:
    summary = aggregate(records)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(summary)
        (out / "config.txt").write_text(dump_config(cfg))
    return summary


def run_search(
    cfg: ExperimentConfig,
    target: Optional[int] = None,
    out: Optional[str | Path] = None,
    num_trials: Optional[int] = None,
    seeds: Optional[Sequence[int]] = None,
) -> tuple[list[TrialRecord], str]:
    """Random search for ``cfg.train.algorithm``: ``num_trials`` draws x ``seeds``."""
    target = cfg.data.target_domain if target is None else target
    num_trials = cfg.search.trials if num_trials is None else num_trials
    seeds = list(cfg.search.seeds if seeds is None else seeds)
    out = Path(out) if out is not None else None
    rng = np.random.default_rng(cfg.search.sampler_seed)
    specs = []
    for trial in range(num_trials):
        # ERM has nothing to sample; drawing anyway keeps the rng sequence aligned.
        sampled = sample_hyperparameters(rng, cfg.train)
        tcfg = cfg.train if cfg.train.algorithm == "erm" else sampled
        for seed in seeds:
            run_dir = out / f"trial_{trial:03d}" / f"seed_{seed}" if out is not None else None
            specs.append(RunSpec(cfg, tcfg, trial, seed, target, str(run_dir) if run_dir else None))
    records = run_all(specs, cfg.search.workers)
    return records, _finish(records, cfg, out)


def run_compare(
    cfg: ExperimentConfig,
    target: Optional[int] = None,
    out: Optional[str | Path] = None,
    seeds: Optional[Sequence[int]] = None,
) -> tuple[list[TrialRecord], str]:
    """ERM and COLUMBUS with the configured hyperparameters, one row pair per selection method."""
    target = cfg.data.target_domain if target is None else target
    seeds = list(cfg.search.seeds if seeds is None else seeds)
    out = Path(out) if out is not None else None
    specs = []
    for algo in ("erm", "columbus"):
        tcfg = dataclasses.replace(cfg.train, algorithm=algo)
        for seed in seeds:
            run_dir = out / algo / f"seed_{seed}" if out is not None else None
            specs.append(RunSpec(cfg, tcfg, 0, seed, target, str(run_dir) if run_dir else None))
    records = run_all(specs, cfg.search.workers)
    return records, _finish(records, cfg, out)
