"""
Training protocol: cross-entropy on the target subsequence, ADAM,
reduce-on-plateau learning rate over validation loss, and selection of the
minimum-validation-loss snapshot for test evaluation.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError, TrainingError
from .metrics import evaluate_scores
from .pipeline import DatasetSplit, stack
from .tensor import Tape, Tensor, as_tensor, log, no_grad, reduce_mean
from .zoo import ModelSpec, TSCModel, save_checkpoint

logger = logging.getLogger(__name__)

CE_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    replicates: int = 5
    eval_batch_size: int = 256

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigurationError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.min_lr > self.lr:
            raise ConfigurationError(f"min_lr {self.min_lr} exceeds initial lr {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.replicates < 1:
            raise ConfigurationError("epochs, batch_size and replicates must be positive")


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-probability of the true class; probabilities clamped at 1e-12."""
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:1]:
        raise ContractError(f"{labels.shape[0] if labels.ndim else 0} labels for {probs.shape[0]} rows")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError(f"labels must be 0 or 1, got {sorted(set(labels.tolist()))}")
    picked = probs[np.arange(len(labels)), labels.astype(np.int64)]
    return -reduce_mean(log(picked, floor=CE_FLOOR))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected ADAM update, applied in place to the ``params`` arrays."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=10, min_lr=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0
        self.reductions = 0

    def step(self, loss):
        if loss < self.best:
            self.best = loss
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            new = max(self.lr * self.factor, self.min_lr)
            if new < self.lr:
                self.lr = new
                self.reductions += 1
            self.wait = 0
        return self.lr


@dataclass
class RunReport:
    model: str
    seed: int
    dataset_hash: str
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    test: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        if not math.isfinite(d["best_val_loss"]):
            d["best_val_loss"] = None
        return d


@dataclass
class ReplicateReport:
    model: str
    dataset_hash: str
    replicates: List[RunReport]
    mean: dict

    def to_dict(self):
        return {
            "model": self.model,
            "dataset_hash": self.dataset_hash,
            "replicates": [r.to_dict() for r in self.replicates],
            "mean": self.mean,
            "curves": {
                str(r.seed): {"train_loss": r.train_loss, "val_loss": r.val_loss, "lr": r.lr}
                for r in self.replicates
            },
        }


def predict_proba(model: TSCModel, X, batch_size=256) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(X), batch_size):
            out.append(model(Tensor._wrap(X[s:s + batch_size])).values)
    return np.concatenate(out) if out else np.zeros((0, 2))


def mean_loss(model, X, y, batch_size=256) -> float:
    probs = predict_proba(model, X, batch_size)
    picked = np.maximum(probs[np.arange(len(y)), y], CE_FLOOR)
    return float(-np.mean(np.log(picked)))


def evaluate(model: TSCModel, batches, batch_size=256) -> dict:
    if not batches:
        raise ContractError("cannot evaluate on an empty test set")
    X, y = stack(batches)
    return evaluate_scores(y, predict_proba(model, X, batch_size))


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    chunks = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # batch norm needs two samples per training batch
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(spec: ModelSpec, splits: DatasetSplit, cfg: TrainConfig, checkpoint=None,
          dataset_hash: Optional[str] = None):
    """Train one model; returns ``(best model, RunReport)``.

    ``dataset_hash`` labels the report; it defaults to the split fingerprint.
    """
    if not splits.train:
        raise ContractError("training split is empty")
    if splits.train[0].steps != spec.steps:
        raise ContractError(f"{spec.name} expects N={spec.steps}, splits hold N={splits.train[0].steps}")
    X, y = stack(splits.train)
    Xv, yv = stack(splits.validation) if splits.validation else (X, y)
    model = TSCModel(spec, seed=cfg.seed)
    params = model.parameters()
    state = AdamState.zeros_like([p.values for p in params])
    sched = ReduceOnPlateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    rng = np.random.default_rng(cfg.seed)
    report = RunReport(spec.name, cfg.seed, dataset_hash or splits.fingerprint())
    best_state = None
    lr = cfg.lr

    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for bi, idx in enumerate(_minibatches(len(X), cfg.batch_size, rng)):
            model.zero_grad()
            with Tape() as tape:
                try:
                    loss = cross_entropy(model(Tensor._wrap(X[idx])), y[idx])
                except NumericError as exc:
                    raise TrainingError(
                        f"{spec.name}: non-finite loss at epoch {epoch}, batch {bi} ({exc})") from exc
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"{spec.name}: non-finite loss at epoch {epoch}, batch {bi}")
                tape.backward(loss)
            adam_step([p.values for p in params], [p.grad for p in params], state, lr,
                      cfg.beta1, cfg.beta2, cfg.adam_eps)
            total += loss.item() * len(idx)
        report.train_loss.append(total / len(X))
        val = mean_loss(model, Xv, yv, cfg.eval_batch_size)
        if not np.isfinite(val):
            raise TrainingError(f"{spec.name}: non-finite validation loss at epoch {epoch}")
        report.val_loss.append(val)
        report.lr.append(lr)
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            best_state = [(name, arr.copy()) for name, arr in model.state_records()]
        lr = sched.step(val)
        logger.debug("%s seed=%d epoch=%d train=%.4f val=%.4f lr=%.2e", spec.name, cfg.seed,
                     epoch, report.train_loss[-1], val, lr)

    model.load_records(best_state)
    model.eval()
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    if splits.test:
        report.test = evaluate(model, splits.test, cfg.eval_batch_size)
    return model, report


def aggregate(reports: List[RunReport]) -> dict:
    mean = {}
    for key in ("acc", "auc", "f1_0", "f1_1"):
        vals = [r.test.get(key) for r in reports if r.test.get(key) is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    return mean


def run_replicates(spec: ModelSpec, splits: DatasetSplit, cfg: TrainConfig, jobs=1,
                   checkpoint_dir=None, dataset_hash: Optional[str] = None) -> ReplicateReport:
    """Train with seeds ``seed .. seed + replicates - 1`` and average the test metrics."""
    seeds = [cfg.seed + r for r in range(cfg.replicates)]
    dataset_hash = dataset_hash or splits.fingerprint()

    def one(seed):
        ckpt = None if checkpoint_dir is None else f"{checkpoint_dir}/{spec.name}_seed{seed}"
        return train(spec, splits, replace(cfg, seed=seed), checkpoint=ckpt, dataset_hash=dataset_hash)[1]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(one, seeds))
    else:
        reports = [one(s) for s in seeds]
    return ReplicateReport(spec.name, dataset_hash, reports, aggregate(reports))
