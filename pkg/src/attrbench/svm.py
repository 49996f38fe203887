"""Linear soft-margin SVM baseline and its coefficient map."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .volume import BinaryMask

log = logging.getLogger(__name__)

C_GRID = tuple(10.0**k for k in range(-6, 5))
_TAU = 1e-12


class DegenerateLabelsError(ValueError):
    pass


@dataclass
class LinearSvmModel:
    """Separating hyperplane ``w . z + b`` with ``z = (x - mean) / scale`` when standardized."""

    w: np.ndarray
    b: float
    C: float
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    iterations: int = 0
    kkt_gap: float = 0.0

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.mean is None:
            return X
        return (X - self.mean) / self.scale

    def decision_function(self, X) -> np.ndarray:
        return self.transform(X) @ self.w + self.b

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1, -1)


def standardizer(X) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std; constant features get scale inf so they map to 0."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    return mean, np.where(sd > 0, sd, np.inf)


def _smo(K, y, C, tol, max_iter):
    """Pairwise dual coordinate ascent with second-order working-set selection.

    Solves min 1/2 a'Qa - e'a s.t. 0 <= a <= C, y'a = 0 with Q = yy' * K and
    returns (alpha, bias, iterations, final KKT gap).
    """
    n = len(y)
    alpha = np.zeros(n)
    G = -np.ones(n)
    QD = np.diag(K).copy()
    it = 0
    gap = np.inf
    pos = y > 0
    while it < max_iter:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        score = -y * G
        if not up.any() or not low.any():
            gap = 0.0
            break
        s_up = np.where(up, score, -np.inf)
        i = int(np.argmax(s_up))
        gmax = s_up[i]
        s_low = np.where(low, score, np.inf)
        gmin = s_low.min()
        gap = gmax - gmin
        if gap < tol:
            break
        Qi = y[i] * y * K[i]
        grad_diff = gmax - score
        quad = QD[i] + QD - 2.0 * y[i] * y * Qi
        quad = np.where(quad > 0, quad, _TAU)
        cand = low & (grad_diff > 0)
        obj = np.where(cand, -(grad_diff**2) / quad, np.inf)
        j = int(np.argmin(obj))
        Qj = y[j] * y * K[j]
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            q = QD[i] + QD[j] + 2.0 * Qi[j]
            delta = (-G[i] - G[j]) / (q if q > 0 else _TAU)
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            q = QD[i] + QD[j] - 2.0 * Qi[j]
            delta = (G[i] - G[j]) / (q if q > 0 else _TAU)
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
                if nj > C:
                    nj, ni = C, total - C
            else:
                if nj < 0:
                    nj, ni = 0.0, total
                if ni < 0:
                    ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        G += Qi * (ni - ai) + Qj * (nj - aj)
        it += 1
    # bias from free vectors, or the midpoint of the feasible interval
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yG[free].mean()
    else:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        ub = yG[up].min() if up.any() else np.inf
        lb = yG[low].max() if low.any() else -np.inf
        rho = 0.5 * (ub + lb) if np.isfinite(ub) and np.isfinite(lb) else (ub if np.isfinite(ub) else lb)
    return alpha, -float(rho), it, float(gap)


def train_svm(X, y, C: float, tol: float = 1e-4, max_iter: int | None = None, standardize: bool = False) -> LinearSvmModel:
    """Fit a linear C-SVM on rows of ``X`` with labels in {-1, +1} (0 is read as -1).

    Deterministic: the solver has no random component.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.where(np.asarray(y) > 0, 1.0, -1.0)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be [n_samples, n_features] with one label per row")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("both classes are needed to train an SVM")
    mean = scale = None
    if standardize:
        mean, scale = standardizer(X)
        X = (X - mean) / scale
    K = X @ X.T
    if max_iter is None:
        max_iter = max(100_000, 200 * len(y))
    alpha, b, it, gap = _smo(K, y, float(C), tol, max_iter)
    if gap >= tol:
        log.warning("SVM (C=%g) stopped at %d iterations with KKT gap %.3g", C, it, gap)
    w = X.T @ (alpha * y)
    return LinearSvmModel(w, b, float(C), mean, scale, it, gap)


@dataclass
class SvmCvReport:
    c_grid: list
    fold_accuracy: list  # [n_C][n_folds]
    mean_accuracy: list
    best_C: float
    best_accuracy: float
    standardized: bool = True
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def svm_grid_cv(X, y, splits, c_grid=C_GRID, standardize: bool = True, tol: float = 1e-4) -> SvmCvReport:
    """Cross-validated accuracy per C over shared CNN folds.

    Each fold trains on its train and validation sets and tests on its test
    set. Features are z-scored with training statistics. Ties pick the smaller C.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.where(np.asarray(y) > 0, 1, -1)
    table = []
    for C in c_grid:
        accs = []
        for fold in splits:
            tr = np.concatenate([fold.train, fold.val])
            model = train_svm(X[tr], y[tr], C, tol=tol, standardize=standardize)
            accs.append(float((model.predict(X[fold.test]) == y[fold.test]).mean()))
        table.append(accs)
        log.info("SVM C=%g: mean accuracy %.4f", C, np.mean(accs))
    means = [float(np.mean(a)) for a in table]
    order = sorted(range(len(c_grid)), key=lambda k: (-means[k], c_grid[k]))
    best = order[0]
    return SvmCvReport(
        [float(c) for c in c_grid], table, means, float(c_grid[best]), means[best], standardize
    )


def coefficient_map(model: LinearSvmModel, mask: BinaryMask):
    """|w| scattered onto the in-mask voxels (storage order, x fastest)."""
    from .attribution import Heatmap

    idx = np.flatnonzero(mask.data.ravel(order="F"))
    if len(idx) != len(model.w):
        raise ValueError(f"mask has {len(idx)} voxels but the model has {len(model.w)} weights")
    flat = np.zeros(mask.data.size)
    flat[idx] = np.abs(model.w)
    vol = mask.to_volume().like(flat.reshape(mask.dims, order="F"))
    return Heatmap(vol, "SVM")


def masked_features(volumes, mask: BinaryMask) -> np.ndarray:
    """Rows of in-mask voxel values, in the order used by :func:`coefficient_map`."""
    vols = np.asarray(volumes)
    sel = mask.data.ravel(order="F")
    return np.stack([v.ravel(order="F")[sel] for v in vols])
