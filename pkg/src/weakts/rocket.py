"""
ROCKET baseline: random dilated convolution kernels pooled into (max, ppv)
features, followed by a ridge-regression classifier with the regularisation
strength picked by generalised cross-validation.
"""

import hashlib
import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DimensionError
from .metrics import accuracy, f1_per_class, roc_auc

logger = logging.getLogger(__name__)

KERNEL_LENGTHS = (7, 9, 11)
LAMBDA_GRID = tuple(10.0 ** k for k in range(-3, 4))
DEFAULT_KERNELS = 10_000


@dataclass(frozen=True)
class RandomKernel:
    """One kernel; ``weights`` is ``[len(channels), length]``."""

    weights: np.ndarray
    bias: float
    dilation: int
    padding: int
    channels: tuple

    @property
    def length(self) -> int:
        return self.weights.shape[1]

    def output_length(self, L: int) -> int:
        return L + 2 * self.padding - (self.length - 1) * self.dilation


def generate_kernels(n: int, L: int, C: int = 1, seed: int = 0) -> List[RandomKernel]:
    """Sample ``n`` kernels for inputs of ``C`` channels and length ``L``.

    Channel subsets have size ``floor(2^u)``, ``u ~ U(0, log2(C + 1))``; each
    channel's weights are drawn from N(0, 1) and mean-centred.
    """
    if n < 1:
        raise ConfigurationError(f"need at least one kernel, got {n}")
    if L < min(KERNEL_LENGTHS):
        raise ConfigurationError(f"input length {L} is shorter than the smallest kernel ({min(KERNEL_LENGTHS)})")
    if C < 1:
        raise ConfigurationError(f"need at least one channel, got {C}")
    rng = np.random.default_rng(seed)
    kernels = []
    for _ in range(n):
        length = int(rng.choice(KERNEL_LENGTHS))
        n_ch = min(C, int(2 ** rng.uniform(0, np.log2(C + 1))))
        channels = tuple(sorted(int(c) for c in rng.choice(C, n_ch, replace=False)))
        weights = rng.normal(0.0, 1.0, size=(n_ch, length))
        weights -= weights.mean(axis=1, keepdims=True)
        bias = float(rng.uniform(-1.0, 1.0))
        # kernels longer than the input (L < length) get dilation 1 and padding
        max_exp = np.log2((L - 1) / (length - 1)) if L > length else 0.0
        dilation = int(2 ** rng.uniform(0, max(max_exp, 0.0)))
        pad_on = rng.integers(2) == 1 or length > L
        padding = (length - 1) * dilation // 2 if pad_on else 0
        kernels.append(RandomKernel(weights, bias, dilation, padding, channels))
    return kernels


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, None, :]
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise DimensionError(f"expected [L], [C, L] or [M, C, L] input, got {x.shape}")
    return x


def feature_maps(x, kernel: RandomKernel) -> np.ndarray:
    """Dilated convolution plus bias for a batch ``[M, C, L] -> [M, L_out]``."""
    x = _as_batch(x)
    M, C, L = x.shape
    if max(kernel.channels) >= C:
        raise DimensionError(f"kernel uses channel {max(kernel.channels)} but input has {C}")
    L_out = kernel.output_length(L)
    if L_out < 1:
        raise DimensionError(f"kernel span exceeds padded input length {L + 2 * kernel.padding}")
    p, d = kernel.padding, kernel.dilation
    xs = x[:, kernel.channels, :]
    if p:
        xs = np.pad(xs, ((0, 0), (0, 0), (p, p)))
    out = np.full((M, L_out), kernel.bias)
    for j in range(len(kernel.channels)):
        for k in range(kernel.length):
            out += kernel.weights[j, k] * xs[:, j, k * d:k * d + L_out]
    return out


def apply_kernels(x, kernels: Sequence[RandomKernel], length: Optional[int] = None) -> np.ndarray:
    """``[M, C, L]`` (or one ``[C, L]`` sample) -> ``[M, 2n]`` of (max, ppv) pairs in kernel order.

    ``length`` is the input length the kernels were generated for; a
    mismatch raises DimensionError.
    """
    single = np.ndim(x) < 3
    X = _as_batch(x)
    if length is not None and X.shape[2] != length:
        raise DimensionError(f"kernels were generated for length {length}, input has {X.shape[2]}")
    feats = np.empty((X.shape[0], 2 * len(kernels)))
    for i, kern in enumerate(kernels):
        fm = feature_maps(X, kern)
        feats[:, 2 * i] = fm.max(axis=1)
        feats[:, 2 * i + 1] = (fm > 0).mean(axis=1)
    return feats[0] if single else feats


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean).tobytes())
        h.update(np.ascontiguousarray(self.scale).tobytes())
        return h.hexdigest()


def ridge_weights(X, y, lam: float) -> np.ndarray:
    """Solve ``(X^T X + lam I) w = X^T y`` with a positive-definite solver.

    When there are more columns than rows the equivalent dual system
    ``w = X^T (X X^T + lam I)^-1 y`` is solved instead. Raises
    ``np.linalg.LinAlgError`` if the system is singular.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    with warnings.catch_warnings():
        # an ill-conditioned warning means the system is numerically singular
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            if d <= n:
                A = X.T @ X
                A[np.diag_indices(d)] += lam
                return scipy.linalg.solve(A, X.T @ y, assume_a="pos")
            K = X @ X.T
            K[np.diag_indices(n)] += lam
            return X.T @ scipy.linalg.solve(K, y, assume_a="pos")
        except scipy.linalg.LinAlgWarning as exc:
            raise np.linalg.LinAlgError(str(exc)) from exc


def gcv_scores(X, y, grid=LAMBDA_GRID) -> dict:
    """Generalised cross-validation error ``n ||(I - H) y||^2 / (n - tr H)^2`` per lambda.

    Uses one eigendecomposition of the smaller Gram matrix for the whole grid.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if d < n:
        evals, V = np.linalg.eigh(X.T @ X)
    else:
        evals, U = np.linalg.eigh(X @ X.T)
    tol = max(evals.max(initial=0.0), 1.0) * max(n, d) * np.finfo(float).eps
    live = evals > tol
    ev = evals[live]
    # orthonormal basis of the column space of X
    Q = X @ V[:, live] / np.sqrt(ev) if d < n else U[:, live]
    uy = Q.T @ y
    outside = float(np.sum((y - Q @ uy) ** 2))
    out = {}
    for lam in grid:
        # 1 - ev / (ev + lam), written to avoid cancellation when lam << ev
        keep = lam / (ev + lam)
        resid = outside + np.sum((keep * uy) ** 2)
        dof = (n - len(ev)) + keep.sum()
        out[lam] = n * resid / dof ** 2 if dof > 0 else np.inf
    return out


@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: float
    lam: float
    gcv: dict

    def decision(self, X):
        return np.asarray(X) @ self.weights + self.intercept

    def predict(self, X):
        return (self.decision(X) > 0).astype(np.int64)


def fit_ridge(X, labels, grid=LAMBDA_GRID, fit_intercept: bool = True) -> RidgeModel:
    """Ridge classifier on ±1 targets; lambda chosen by GCV over ``grid``.

    Grid points whose system is singular (only possible for lambda = 0) are
    skipped.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(labels) != X.shape[0]:
        raise DimensionError(f"features {X.shape} do not match {len(labels)} labels")
    y = np.where(labels == 1, 1.0, -1.0)
    offset = y.mean() if fit_intercept else 0.0
    yc = y - offset
    Xc = X - X.mean(axis=0) if fit_intercept else X
    usable = []
    for lam in grid:
        if lam <= 0:
            try:
                ridge_weights(Xc, yc, lam)
            except np.linalg.LinAlgError:
                logger.debug("skipping lambda=%g: singular system", lam)
                continue
        usable.append(lam)
    scores = gcv_scores(Xc, yc, usable) if usable else {}
    if not scores:
        raise ConfigurationError("no usable lambda in the grid")
    lam = min(scores, key=lambda k: (scores[k], -k))
    w = ridge_weights(Xc, yc, lam)
    b = offset - (X.mean(axis=0) @ w if fit_intercept else 0.0)
    return RidgeModel(w, float(b), lam, scores)


@dataclass
class RocketClassifier:
    kernels: List[RandomKernel]
    length: int
    scaler: Standardizer
    ridge: RidgeModel

    def features(self, X):
        return self.scaler.transform(apply_kernels(X, self.kernels, self.length))

    def decision(self, X):
        return self.ridge.decision(self.features(X))

    def predict(self, X):
        return (self.decision(X) > 0).astype(np.int64)


def fit_rocket(X, y, n_kernels: int = DEFAULT_KERNELS, seed: int = 0, grid=LAMBDA_GRID):
    X = _as_batch(X)
    kernels = generate_kernels(n_kernels, X.shape[2], X.shape[1], seed)
    raw = apply_kernels(X, kernels)
    scaler = Standardizer.fit(raw)
    ridge = fit_ridge(scaler.transform(raw), y, grid)
    return RocketClassifier(kernels, X.shape[2], scaler, ridge)


def _single_step(batches):
    """Target subsequence of each batch as ``[M, C, L]`` plus labels."""
    X = np.stack([b.subsequences[-1] for b in batches])
    y = np.array([b.target_label for b in batches], dtype=np.int64)
    return X, y


def rocket_classify(train, test, n_kernels: int = DEFAULT_KERNELS, seed: int = 0):
    """Fit on ``train`` and score ``test``; both are SequenceBatch lists or ``(X, y)`` pairs.

    Returns ``(metrics, classifier)``. Predictions use the sign of the ridge
    decision value and AUC ranks by the decision value itself.
    """
    Xtr, ytr = train if isinstance(train, tuple) else _single_step(train)
    Xte, yte = test if isinstance(test, tuple) else _single_step(test)
    clf = fit_rocket(Xtr, ytr, n_kernels, seed)
    score = clf.decision(Xte)
    pred = (score > 0).astype(np.int64)
    f1_0, f1_1 = f1_per_class(yte, pred)
    metrics = {"acc": accuracy(yte, pred), "auc": roc_auc(yte, score), "f1_0": f1_0, "f1_1": f1_1}
    return metrics, clf
