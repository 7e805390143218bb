"""Margin-based learners: logistic regression, linear SVM, RBF SVM.

Logistic regression minimizes the L2-regularized logistic loss with
damped Newton steps (equivalent to a quasi-Newton run to convergence at
gradient norm <= 1e-6). The linear SVM minimizes the primal hinge loss by
projected sub-gradient descent with iterate averaging; the RBF SVM solves
the box-constrained dual by coordinate ascent with the bias folded into
the kernel (k + 1). SVM margins are mapped to probabilities with a Platt
sigmoid fitted on the training margins.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ModelError

logger = logging.getLogger(__name__)

RBF_SAMPLE_CAP = 4000


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log1pexp(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) without overflow."""
    out = np.where(z > 0, z, 0.0)
    return out + np.log1p(np.exp(-np.abs(z)))


def _newton_logistic(
    phi: np.ndarray,
    targets: np.ndarray,
    l2: float,
    penalize: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> np.ndarray:
    """Newton minimization of cross-entropy vs (possibly soft) targets.

    phi is the design matrix including any bias column; penalize flags the
    coefficients subject to the L2 term.
    """
    n, p = phi.shape
    beta = np.zeros(p)

    def loss(b: np.ndarray) -> float:
        z = phi @ b
        ce = float(np.sum(_log1pexp(z) - targets * z))
        return ce + 0.5 * l2 * float(np.sum((b * penalize) ** 2))

    current = loss(beta)
    for _ in range(max_iter):
        z = phi @ beta
        prob = _sigmoid(z)
        grad = phi.T @ (prob - targets) + l2 * beta * penalize
        if np.linalg.norm(grad) <= tol:
            break
        s = np.clip(prob * (1.0 - prob), 1e-12, None)
        hess = (phi * s[:, None]).T @ phi + l2 * np.diag(penalize.astype(float))
        hess[np.diag_indices_from(hess)] += 1e-12
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad
        # Damped update: halve until the loss decreases.
        scale = 1.0
        for _ in range(60):
            candidate = beta - scale * step
            value = loss(candidate)
            if value <= current + 1e-15:
                beta, current = candidate, value
                break
            scale *= 0.5
        else:
            break
    return beta


class LogisticRegressionModel:
    """L2-regularized logistic regression (C = 1, bias unpenalized)."""

    kind = "lr"

    def __init__(self, C: float = 1.0, tol: float = 1e-6):
        self.C = C
        self.tol = tol
        self.weights: np.ndarray | None = None
        self.bias = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "LogisticRegressionModel":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        phi = np.hstack([X, np.ones((X.shape[0], 1))])
        penalize = np.ones(phi.shape[1])
        penalize[-1] = 0.0
        beta = _newton_logistic(phi, y, l2=1.0 / self.C, penalize=penalize, tol=self.tol)
        self.weights = beta[:-1]
        self.bias = float(beta[-1])
        return self

    def predict_score(self, X: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise ModelError("predict before fit")
        return _sigmoid(np.asarray(X, dtype=np.float64) @ self.weights + self.bias)

    def to_state(self) -> dict:
        return {"C": self.C, "weights": self.weights.tolist(), "bias": self.bias}

    @classmethod
    def from_state(cls, state: dict) -> "LogisticRegressionModel":
        model = cls(C=state["C"])
        model.weights = np.asarray(state["weights"], dtype=np.float64)
        model.bias = float(state["bias"])
        return model


class PlattScaler:
    """Sigmoid calibration p = sigma(A*f + B) fitted on training margins."""

    def __init__(self) -> None:
        self.a = 1.0
        self.b = 0.0

    def fit(self, margins: np.ndarray, y: np.ndarray) -> "PlattScaler":
        margins = np.asarray(margins, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n_pos = int(np.sum(y == 1))
        n_neg = int(np.sum(y == 0))
        targets = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
        phi = np.column_stack([margins, np.ones_like(margins)])
        beta = _newton_logistic(phi, targets, l2=1e-10, penalize=np.ones(2))
        self.a, self.b = float(beta[0]), float(beta[1])
        return self

    def transform(self, margins: np.ndarray) -> np.ndarray:
        return _sigmoid(self.a * np.asarray(margins, dtype=np.float64) + self.b)

    def to_state(self) -> dict:
        return {"a": self.a, "b": self.b}

    @classmethod
    def from_state(cls, state: dict) -> "PlattScaler":
        scaler = cls()
        scaler.a, scaler.b = float(state["a"]), float(state["b"])
        return scaler


class LinearSvmModel:
    """Primal hinge-loss SVM by averaged projected sub-gradient descent."""

    kind = "svm_linear"

    def __init__(self, C: float = 1.0, n_iter: int = 2000):
        self.C = C
        self.n_iter = n_iter
        self.weights: np.ndarray | None = None
        self.bias = 0.0
        self.platt = PlattScaler()

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "LinearSvmModel":
        X = np.asarray(X, dtype=np.float64)
        y01 = np.asarray(y, dtype=np.int64)
        ypm = np.where(y01 == 1, 1.0, -1.0)
        n, p = X.shape
        lam = 1.0 / (self.C * n)
        w = np.zeros(p)
        b = 0.0
        w_avg = np.zeros(p)
        b_avg = 0.0
        n_avg = 0
        for t in range(self.n_iter):
            eta = 1.0 / (lam * (t + 1))
            margin = ypm * (X @ w + b)
            viol = margin < 1.0
            grad_w = lam * w - (ypm[viol, None] * X[viol]).sum(axis=0) / n
            grad_b = -float(ypm[viol].sum()) / n
            w = w - eta * grad_w
            b = b - eta * grad_b
            if t >= self.n_iter // 2:
                w_avg += w
                b_avg += b
                n_avg += 1
        self.weights = w_avg / n_avg
        self.bias = b_avg / n_avg
        self.platt.fit(self.decision(X), y01)
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise ModelError("predict before fit")
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict_score(self, X: np.ndarray) -> np.ndarray:
        return self.platt.transform(self.decision(X))

    def to_state(self) -> dict:
        return {
            "C": self.C,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "platt": self.platt.to_state(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "LinearSvmModel":
        model = cls(C=state["C"])
        model.weights = np.asarray(state["weights"], dtype=np.float64)
        model.bias = float(state["bias"])
        model.platt = PlattScaler.from_state(state["platt"])
        return model


class RbfSvmModel:
    """Kernel SVM with gamma='scale', solved by dual coordinate ascent.

    The bias is folded into the kernel (k(x, x') + 1), which removes the
    dual equality constraint so single-coordinate updates stay feasible.
    """

    kind = "svm_rbf"

    def __init__(self, C: float = 1.0, max_passes: int = 200, tol: float = 1e-6):
        self.C = C
        self.max_passes = max_passes
        self.tol = tol
        self.gamma: float | None = None
        self.support: np.ndarray | None = None
        self.coef: np.ndarray | None = None  # alpha_i * y_i at support points
        self.platt = PlattScaler()

    def _kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d2 = (
            (A**2).sum(axis=1)[:, None]
            + (B**2).sum(axis=1)[None, :]
            - 2.0 * (A @ B.T)
        )
        return np.exp(-self.gamma * np.clip(d2, 0.0, None))

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "RbfSvmModel":
        X = np.asarray(X, dtype=np.float64)
        y01 = np.asarray(y, dtype=np.int64)
        if X.shape[0] > RBF_SAMPLE_CAP:
            logger.warning(
                "RBF SVM training set of %d rows capped to %d (stratified)",
                X.shape[0], RBF_SAMPLE_CAP,
            )
            keep = []
            for cls in (0, 1):
                idx = np.flatnonzero(y01 == cls)
                take = int(round(RBF_SAMPLE_CAP * idx.size / X.shape[0]))
                keep.append(rng.choice(idx, size=max(2, take), replace=False))
            keep = np.sort(np.concatenate(keep))
            X, y01 = X[keep], y01[keep]
        ypm = np.where(y01 == 1, 1.0, -1.0)
        n, p = X.shape
        self.gamma = 1.0 / (p * max(X.var(), 1e-12))
        K = self._kernel(X, X) + 1.0
        diag = np.diag(K).copy()
        alpha = np.zeros(n)
        f = np.zeros(n)  # f_i = sum_j alpha_j y_j K_ij
        for _ in range(self.max_passes):
            biggest = 0.0
            for i in range(n):
                delta = (1.0 - ypm[i] * f[i]) / diag[i]
                new = min(max(alpha[i] + delta, 0.0), self.C)
                change = new - alpha[i]
                if change != 0.0:
                    alpha[i] = new
                    f += change * ypm[i] * K[i]
                    biggest = max(biggest, abs(change))
            if biggest < self.tol * self.C:
                break
        sv = alpha > 1e-12
        self.support = X[sv]
        self.coef = alpha[sv] * ypm[sv]
        self.platt.fit(self.decision(X), y01)
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        if self.support is None:
            raise ModelError("predict before fit")
        K = self._kernel(np.asarray(X, dtype=np.float64), self.support) + 1.0
        return K @ self.coef

    def predict_score(self, X: np.ndarray) -> np.ndarray:
        return self.platt.transform(self.decision(X))

    def to_state(self) -> dict:
        return {
            "C": self.C,
            "gamma": self.gamma,
            "support": self.support.tolist(),
            "coef": self.coef.tolist(),
            "platt": self.platt.to_state(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "RbfSvmModel":
        model = cls(C=state["C"])
        model.gamma = float(state["gamma"])
        model.support = np.asarray(state["support"], dtype=np.float64)
        model.coef = np.asarray(state["coef"], dtype=np.float64)
        model.platt = PlattScaler.from_state(state["platt"])
        return model
