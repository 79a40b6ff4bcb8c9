"""Training and scoring of assembled architectures, with a per-genotype result cache."""
from __future__ import annotations

import json
import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import (Scaler, SplitSpec, TaskKind, TimeSeriesFrame, WindowSet, make_windows,
                      split)
from .search_space import Genotype, ModelGraph, TaskSpec, assemble, count_params, fit_mask
from .selection import FeatureMask


class LengthMismatch(ValueError):
    pass


class AllZeroTruth(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


def mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, np.float64).ravel(), np.asarray(truth, np.float64).ravel()
    if pred.shape != truth.shape:
        raise LengthMismatch(f"prediction has {pred.size} values, truth has {truth.size}")
    return float(np.mean(np.abs(pred - truth)))


def wmape(pred, truth) -> float:
    pred, truth = np.asarray(pred, np.float64).ravel(), np.asarray(truth, np.float64).ravel()
    if pred.shape != truth.shape:
        raise LengthMismatch(f"prediction has {pred.size} values, truth has {truth.size}")
    den = float(np.sum(truth * truth))
    if den == 0.0:
        raise AllZeroTruth("weighted MAPE is undefined when every true value is zero")
    return float(np.sum(np.abs(truth) * np.abs(pred - truth)) / den)


# --- optimizers -------------------------------------------------------------------------

class SGD:
    def __init__(self, params: dict[str, ad.Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data -= self.lr * grads[k]


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: dict[str, ad.Tensor], lr: float):
    if name == "Adam":
        return Adam(params, lr)
    if name == "SGD":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# --- training ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    optimizer: str = "Adam"
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if self.batch_size < 1 or not self.lr > 0:
            raise ValueError("batch_size must be >= 1 and lr > 0")


class EarlyStopping:
    """Tracks the best validation score; signals a stop after `patience` epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        self.epoch += 1
        if score < self.best:
            self.best, self.best_epoch = score, self.epoch
        return self.epoch - self.best_epoch >= self.patience


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_val: float                # validation MAE in target units
    best_epoch: int
    epochs_run: int
    history: list[tuple[float, float]]


def predict(model: ModelGraph, windows: WindowSet, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Forecasts and truths (both (N, T_p)) in scaled units, in window order."""
    preds, truths = [], []
    with ad.no_grad():
        for lo in range(0, len(windows), chunk):
            x, tf, y = windows.batch(np.arange(lo, min(lo + chunk, len(windows))))
            preds.append(model.forward(x, tf).data[..., 0])
            truths.append(y)
    if not preds:
        t_p = windows.t_p
        return np.zeros((0, t_p)), np.zeros((0, t_p))
    return np.concatenate(preds), np.concatenate(truths)


def train(model: ModelGraph, train_windows: WindowSet, val_windows: WindowSet, cfg: TrainConfig,
          target_scale: float = 1.0) -> TrainResult:
    """L1 training with shuffled mini-batches and early stopping on validation MAE.

    The model ends holding its best-epoch parameters.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("train and validation window sets must be nonempty")
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    history: list[tuple[float, float]] = []
    best_state = model.state()
    n = len(train_windows)
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            x, tf, y = train_windows.batch(idx)
            out = model.forward(x, tf, train=True, rng=rng)
            loss = ad.mean(ad.abs_(out - y[..., None]))
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise NonFiniteLoss(f"training loss became {lv}")
            grads = ad.backward(model.graph, loss)
            opt.step(grads)
            total += lv * len(idx)
            count += len(idx)
        pred, truth = predict(model, val_windows)
        val = mae(pred, truth) * target_scale
        if not math.isfinite(val):
            raise NonFiniteLoss(f"validation error became {val}")
        history.append((total / count, val))
        if val < stopper.best:
            best_state = model.state()
        if stopper.update(val):
            break
    model.load_state(best_state)
    return TrainResult(best_state, stopper.best, stopper.best_epoch, len(history), history)


# --- task data ------------------------------------------------------------------------------

@dataclass
class TaskData:
    """Scaled splits and window sets for one forecasting task."""

    task: TaskSpec
    scaler: Scaler
    train_frame: TimeSeriesFrame
    val_frame: TimeSeriesFrame
    test_frame: TimeSeriesFrame
    train_windows: WindowSet
    val_windows: WindowSet
    test_windows: WindowSet

    @property
    def target_scale(self) -> float:
        return float(self.scaler.std[self.train_frame.target_index])

    @property
    def n_features(self) -> int:
        return self.train_frame.n_features


def prepare_task(frame: TimeSeriesFrame, task: TaskSpec, spec: SplitSpec = SplitSpec(),
                 train_step: int = 1, sigma0: float = 0.05, gamma: float = 1.0,
                 noise_seed: int = 0) -> TaskData:
    """Split chronologically, standardize with training statistics, and build windows.

    Task-2 future rows get noise relative to the (unit) scaled feature std; the
    power column there is zero in scaled units.
    """
    span = task.t_s + task.t_p
    train_f, val_f, test_f = split(frame, spec, min_rows=span)
    scaler = Scaler.fit(train_f)
    train_f, val_f, test_f = (scaler.transform(f) for f in (train_f, val_f, test_f))
    unit = np.ones(frame.n_features)

    def windows(f, step, seed):
        w = make_windows(f, task.t_s, task.t_p, step)
        if task.kind is TaskKind.TASK2:
            w = w.with_task(TaskKind.TASK2, sigma0, gamma, seed, unit)
        return w
    return TaskData(task, scaler, train_f, val_f, test_f,
                    windows(train_f, train_step, noise_seed),
                    windows(val_f, 1, noise_seed + 1),
                    windows(test_f, 1, noise_seed + 2))


# --- records and the cached evaluator ------------------------------------------------------

@dataclass
class EvalRecord:
    genotype: Genotype
    measured_error: float
    param_count: int
    epochs_run: int = 0
    history: list = field(default_factory=list)
    wall_seconds: float = 0.0
    status: str = "ok"

    def __post_init__(self):
        if not (self.measured_error >= 0):
            raise ValueError(f"measured error must be >= 0, got {self.measured_error}")
        if self.param_count <= 0:
            raise ValueError("param_count must be positive")

    @property
    def key(self) -> str:
        return self.genotype.key

    def to_json(self) -> str:
        d = asdict(self)
        d["genotype"] = self.genotype.to_dict()
        d["key"] = self.key
        d["measured_error"] = self.measured_error if math.isfinite(self.measured_error) else "inf"
        d["history"] = [list(h) for h in self.history]
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "EvalRecord":
        d = json.loads(line)
        d.pop("key", None)
        err = d["measured_error"]
        d["measured_error"] = math.inf if err == "inf" else float(err)
        d["genotype"] = Genotype.from_dict(d["genotype"])
        d["history"] = [tuple(h) for h in d.get("history", [])]
        return cls(**d)


def eval_seed(genotype: Genotype, run_seed: int) -> int:
    return int(np.random.SeedSequence([run_seed, int(genotype.key, 16)]).generate_state(1)[0])


def train_genotype(g: Genotype, data: TaskData, mask: FeatureMask, max_epochs: int, patience: int,
                   run_seed: int) -> tuple[EvalRecord, dict[str, np.ndarray] | None]:
    """Assemble, train and score one genotype; divergence yields an infinite error."""
    start = time.perf_counter()
    seed = eval_seed(g, run_seed)
    cfg = TrainConfig(g.lr, g.of, g.bs, max_epochs, patience, seed)
    n_params = count_params(g, data.task.t_in, data.task.t_p, mask.n_kept)
    try:
        model = assemble(g, data.task, data.train_frame, seed=seed, mask=mask)
        n_params = model.param_count()
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res = train(model, data.train_windows, data.val_windows, cfg, data.target_scale)
        err, epochs, hist, status, state = res.best_val, res.epochs_run, res.history, "ok", res.best_state
    except NonFiniteLoss:
        err, epochs, hist, status, state = math.inf, 0, [], "diverged", None
    except ad.ShapeMismatch:
        err, epochs, hist, status, state = math.inf, 0, [], "failed", None
    rec = EvalRecord(g, err, n_params, epochs, hist, time.perf_counter() - start, status)
    return rec, state


_WORKER: dict = {}


def _worker_init(data: TaskData, max_epochs: int, patience: int, run_seed: int) -> None:
    _WORKER.update(data=data, max_epochs=max_epochs, patience=patience, run_seed=run_seed)


def _worker_eval(item: tuple[Genotype, FeatureMask]):
    g, mask = item
    w = _WORKER
    return train_genotype(g, w["data"], mask, w["max_epochs"], w["patience"], w["run_seed"])


class Evaluator:
    """Cached evaluation of genotypes on one prepared task.

    ``train_calls`` counts actual trainings; cache hits never train. Records
    are appended to ``log_path`` (one JSON object per line) as they complete.
    """

    def __init__(self, data: TaskData, max_epochs: int = 50, patience: int = 3, seed: int = 0,
                 log_path: str | Path | None = None, workers: int = 1, keep_weights: bool = False):
        self.data = data
        self.max_epochs, self.patience, self.seed = max_epochs, patience, seed
        self.log_path = Path(log_path) if log_path else None
        self.workers = max(1, int(workers))
        self.keep_weights = keep_weights
        self.cache: dict[str, EvalRecord] = {}
        self.weights: dict[str, dict[str, np.ndarray]] = {}
        self.train_calls = 0
        self._masks: dict[tuple, FeatureMask] = {}
        self._lock = threading.Lock()
        self._pool: ProcessPoolExecutor | None = None

    # feature masks depend only on (fsm, fst) and the training split
    def mask(self, g: Genotype) -> FeatureMask:
        key = (g.fsm, g.fst)
        with self._lock:
            if key not in self._masks:
                self._masks[key] = fit_mask(g, self.data.train_frame)
            return self._masks[key]

    def param_count(self, g: Genotype) -> int:
        return count_params(g, self.data.task.t_in, self.data.task.t_p, self.mask(g).n_kept)

    def __contains__(self, g: Genotype) -> bool:
        return g.key in self.cache

    def __len__(self) -> int:
        return len(self.cache)

    def _absorb(self, rec: EvalRecord, state) -> EvalRecord:
        with self._lock:
            if rec.key in self.cache:
                return self.cache[rec.key]
            self.cache[rec.key] = rec
            if self.keep_weights and state is not None:
                self.weights[rec.key] = state
            if self.log_path is not None:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(rec.to_json() + "\n")
        return rec

    def evaluate(self, g: Genotype) -> EvalRecord:
        with self._lock:
            hit = self.cache.get(g.key)
        if hit is not None:
            return hit
        self.train_calls += 1
        rec, state = train_genotype(g, self.data, self.mask(g), self.max_epochs, self.patience, self.seed)
        return self._absorb(rec, state)

    def evaluate_many(self, genotypes: Sequence[Genotype]) -> list[EvalRecord]:
        """Evaluate in order; with several workers, misses train in parallel processes."""
        todo, seen = [], set()
        for g in genotypes:
            if g.key not in self.cache and g.key not in seen:
                seen.add(g.key)
                todo.append(g)
        if self.workers > 1 and len(todo) > 1:
            pool = self._get_pool()
            results = list(pool.map(_worker_eval, [(g, self.mask(g)) for g in todo]))
            self.train_calls += len(todo)
            for rec, state in results:
                self._absorb(rec, state)
        else:
            for g in todo:
                self.evaluate(g)
        return [self.cache[g.key] for g in genotypes]

    def _get_pool(self) -> ProcessPoolExecutor:
        if self._pool is None:
            self._pool = ProcessPoolExecutor(self.workers, initializer=_worker_init,
                                             initargs=(self.data, self.max_epochs, self.patience, self.seed))
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def weights_for(self, g: Genotype) -> dict[str, np.ndarray]:
        """Trained parameters; retrains deterministically when they were not kept."""
        if g.key not in self.weights:
            _, state = train_genotype(g, self.data, self.mask(g), self.max_epochs, self.patience, self.seed)
            if state is None:
                raise NonFiniteLoss(f"architecture {g.key} diverged; no weights available")
            return state
        return self.weights[g.key]

    def retain_weights(self, keys: Iterable[str]) -> None:
        keep = set(keys)
        for k in list(self.weights):
            if k not in keep:
                del self.weights[k]

    def load_log(self, path: str | Path | None = None) -> int:
        """Seed the cache from a record log (resume); returns the number of records loaded."""
        path = Path(path) if path else self.log_path
        if path is None or not path.exists():
            return 0
        raw = path.read_bytes()
        good = raw[:raw.rfind(b"\n") + 1]
        if good != raw:
            path.write_bytes(good)  # drop a torn final line left by an interrupted run
        n = 0
        for line in good.decode("utf-8").splitlines():
            if not line.strip():
                continue
            rec = EvalRecord.from_json(line)
            if rec.key not in self.cache:
                self.cache[rec.key] = rec
                n += 1
        return n


def evaluate(g: Genotype, evaluator: Evaluator) -> EvalRecord:
    return evaluator.evaluate(g)
