"""Training protocol: masked two-level BCE, Adam with L2 weight decay, linear
warm-up, lambda grid search and multi-seed runs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from . import heads
from .data import Dataset
from .errors import EmptyDataset, ShapeMismatch
from .heads import HeadModel, Variant
from .metrics import MetricsReport, evaluate, tune_thresholds

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.70, 0.75, 0.80, 0.85, 0.90)
DEFAULT_SEEDS = tuple(range(8))


@dataclass(frozen=True)
class TrainConfig:
    lambda_weight: float = 0.8
    max_lr: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 50
    batch_size: int = 16
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    seed: int = 0
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        object.__setattr__(self, "seeds", tuple(int(v) for v in self.seeds))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        for lam in (self.lambda_weight, *self.lambda_grid):
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs and epochs >= 1")
        if self.max_lr < 0 or self.weight_decay < 0:
            raise ValueError("max_lr and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lambda_grid", "seeds", "hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def combined_loss(l_fine: float, l_coarse: float, lam: float) -> float:
    return lam * l_fine + (1.0 - lam) * l_coarse


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.max_lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.max_lr


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class Adam:
    """Adam over a dict of arrays, updated in place.

    Weight decay is added to the gradient (L2) unless ``decoupled`` is set, in
    which case parameters are shrunk directly by lr * weight_decay.
    """

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decoupled=False):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and self.decoupled:
                p -= lr * self.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def uses_coarse_loss(variant: Variant) -> bool:
    return variant is not Variant.FLAT


def loss_graph(graph: heads.Graph, fine_states, coarse_states, lam: float, variant: Variant):
    """Returns (root, fine loss node, coarse loss node or None)."""
    fine = gc.masked_bce(graph.p_fine, fine_states)
    if not uses_coarse_loss(variant):
        return fine, fine, None
    coarse = gc.masked_bce(graph.p_coarse, coarse_states)
    return gc.weighted_sum([fine, coarse], [lam, 1.0 - lam]), fine, coarse


def model_loss(m: HeadModel, X: np.ndarray, fine_states, coarse_states, lam: float, nodes=None):
    """Loss over a sample-major batch; returns (root, graph)."""
    graph = heads.forward(np.asarray(X).T, m, nodes)
    root, _, _ = loss_graph(graph, np.asarray(fine_states).T, np.asarray(coarse_states).T, lam, m.variant)
    return root, graph


def fine_loss(m: HeadModel, ds: Dataset) -> float:
    graph = heads.forward(ds.features.T, m)
    return gc.masked_bce(graph.p_fine, ds.fine_states.T).item()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_fine_loss: float


@dataclass
class TrainResult:
    model: HeadModel
    trace: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    lambda_weight: float
    seed: int

    def trace_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.trace]


def _check_data(model: HeadModel, *sets: Dataset) -> None:
    for ds in sets:
        if len(ds) == 0:
            raise EmptyDataset("training and validation sets must be non-empty")
        if ds.dim != model.input_dim:
            raise ShapeMismatch(f"dataset has {ds.dim} features, model expects {model.input_dim}")
        if ds.hierarchy.fingerprint() != model.hierarchy.fingerprint():
            raise ShapeMismatch("dataset hierarchy differs from the model's")


def train(model: HeadModel, train_set: Dataset, val_set: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train in place and return the snapshot with the lowest validation fine BCE."""
    _check_data(model, train_set, val_set)
    lam = 1.0 if not uses_coarse_loss(model.variant) else cfg.lambda_weight
    opt = Adam(model.params, weight_decay=cfg.weight_decay, decoupled=cfg.decoupled_weight_decay)
    X, FS, CS = train_set.features, train_set.fine_states, train_set.coarse_states
    n = len(train_set)
    best = (np.inf, -1, None)
    trace = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = batch_order(n, cfg.seed, epoch)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            root, graph = model_loss(model, X[rows], FS[rows], CS[rows], lam)
            root.backward()
            opt.step({k: node.grad for k, node in graph.params.items()}, lr)
            total += root.item()
            batches += 1
        val = fine_loss(model, val_set)
        trace.append(EpochRecord(epoch, lr, total / batches, val))
        if val < best[0]:
            best = (val, epoch, model.copy())
        log.debug("%s seed=%d lam=%.2f epoch=%d train=%.5f val=%.5f", model.variant.value,
                  cfg.seed, lam, epoch, total / batches, val)
    return TrainResult(best[2], trace, best[1], best[0], lam, cfg.seed)


def fresh_model(variant, train_set: Dataset, cfg: TrainConfig) -> HeadModel:
    return heads.init_model(variant, train_set.hierarchy, train_set.dim, cfg.hidden,
                            np.random.default_rng(cfg.seed))


TrainFn = Callable[[HeadModel, Dataset, Dataset, TrainConfig], TrainResult]


@dataclass
class GridResult:
    best_lambda: float
    best: TrainResult
    runs: dict[float, TrainResult] = field(default_factory=dict)


def grid_search(variant, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
                train_fn: TrainFn = train) -> GridResult:
    """One run per lambda; keep the lambda with the lowest validation fine BCE
    (smaller lambda on ties)."""
    if not cfg.lambda_grid:
        raise ValueError("lambda_grid is empty")
    runs = {}
    for lam in sorted(cfg.lambda_grid):
        run_cfg = replace(cfg, lambda_weight=lam)
        runs[lam] = train_fn(fresh_model(variant, train_set, run_cfg), train_set, val_set, run_cfg)
    best_lam = min(runs, key=lambda lam: (runs[lam].best_val_loss, lam))
    return GridResult(best_lam, runs[best_lam], runs)


@dataclass
class SeedRun:
    seed: int
    lambda_weight: float
    result: TrainResult
    thresholds: dict[str, np.ndarray]
    report: MetricsReport


@dataclass
class MultiSeedResult:
    variant: Variant
    runs: list[SeedRun]

    def table(self) -> list[dict]:
        """One row per seed of macro metrics, e.g. for boxplots."""
        rows = []
        for r in self.runs:
            row = {"seed": r.seed, "lambda": r.lambda_weight}
            for lvl, rep in r.report.levels.items():
                for metric, v in rep.macro.items():
                    row[f"{lvl}_{metric}"] = v
            rows.append(row)
        return rows

    def mean(self) -> dict[str, float]:
        rows = self.table()
        keys = [k for k in rows[0] if k not in ("seed", "lambda")]
        return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def evaluate_model(model: HeadModel, val_set: Dataset, test_set: Dataset):
    """Tune thresholds on validation, report on test."""
    val_pred = heads.predict(model, val_set.features)
    thresholds = tune_thresholds(val_pred, val_set.fine_states, val_set.coarse_states)
    test_pred = heads.predict(model, test_set.features)
    report = evaluate(test_pred, test_set.fine_states, test_set.coarse_states, test_set.hierarchy, thresholds)
    return thresholds, report


def multi_seed(variant, train_set: Dataset, val_set: Dataset, test_set: Dataset, cfg: TrainConfig,
               search_lambda: bool = True, train_fn: TrainFn = train) -> MultiSeedResult:
    """Independent runs per seed. With ``search_lambda`` each seed runs the full
    lambda grid, otherwise ``cfg.lambda_weight`` is used."""
    variant = Variant.parse(variant) if isinstance(variant, str) else variant
    if not cfg.seeds:
        raise ValueError("seeds is empty")
    runs = []
    for seed in cfg.seeds:
        seed_cfg = replace(cfg, seed=seed)
        if search_lambda and uses_coarse_loss(variant):
            result = grid_search(variant, train_set, val_set, seed_cfg, train_fn).best
        else:
            result = train_fn(fresh_model(variant, train_set, seed_cfg), train_set, val_set, seed_cfg)
        thresholds, report = evaluate_model(result.model, val_set, test_set)
        runs.append(SeedRun(seed, result.lambda_weight, result, thresholds, report))
    return MultiSeedResult(variant, runs)


def mean_over_seeds(results: Sequence[MultiSeedResult]) -> dict[str, dict[str, float]]:
    return {r.variant.value: r.mean() for r in results}
