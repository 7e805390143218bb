"""Tree ensembles: random forest, gradient boosting, AdaBoost.

Trees are grown greedily. With max_features=1 a single random candidate
feature is drawn per split; features are tried in random order until one
admits a valid split, mirroring the usual library behaviour of looking
past constant features. Classification splits use Gini impurity,
regression splits (for boosting) use squared error.
"""

from __future__ import annotations

import numpy as np

from ..errors import ModelError


def _best_threshold_gini(x: np.ndarray, y: np.ndarray) -> tuple[float, float] | None:
    """Best Gini split of one feature; returns (threshold, impurity) or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    distinct = np.flatnonzero(np.diff(xs) > 0)
    if distinct.size == 0:
        return None
    n = xs.size
    ones_left = np.cumsum(ys)[distinct].astype(np.float64)
    n_left = (distinct + 1).astype(np.float64)
    n_right = n - n_left
    ones_right = float(ys.sum()) - ones_left
    gini_left = 1.0 - (ones_left**2 + (n_left - ones_left) ** 2) / n_left**2
    gini_right = 1.0 - (ones_right**2 + (n_right - ones_right) ** 2) / n_right**2
    weighted = (n_left * gini_left + n_right * gini_right) / n
    best = int(np.argmin(weighted))
    pos = distinct[best]
    threshold = 0.5 * (xs[pos] + xs[pos + 1])
    return float(threshold), float(weighted[best])


def _best_threshold_sse(x: np.ndarray, y: np.ndarray) -> tuple[float, float] | None:
    """Best squared-error split of one feature for regression targets."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    distinct = np.flatnonzero(np.diff(xs) > 0)
    if distinct.size == 0:
        return None
    n = xs.size
    csum = np.cumsum(ys)
    csum2 = np.cumsum(ys**2)
    n_left = (distinct + 1).astype(np.float64)
    n_right = n - n_left
    sum_left = csum[distinct]
    sum_right = csum[-1] - sum_left
    sq_left = csum2[distinct]
    sq_right = csum2[-1] - sq_left
    sse = (sq_left - sum_left**2 / n_left) + (sq_right - sum_right**2 / n_right)
    best = int(np.argmin(sse))
    pos = distinct[best]
    return float(0.5 * (xs[pos] + xs[pos + 1])), float(sse[best])


class _Tree:
    """Greedy binary tree stored as a nested dict (JSON-friendly)."""

    def __init__(self, max_depth: int, max_features: int | None, criterion: str):
        self.max_depth = max_depth
        self.max_features = max_features
        self.criterion = criterion
        self.root: dict | None = None

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "_Tree":
        self.root = self._build(X, y, np.arange(X.shape[0]), 0, rng)
        return self

    def _leaf(self, y: np.ndarray, idx: np.ndarray) -> dict:
        if self.criterion == "gini":
            ones = int(y[idx].sum())
            return {"leaf": True, "counts": [int(idx.size - ones), ones], "indices": idx}
        return {"leaf": True, "value": float(y[idx].mean()), "indices": idx}

    def _build(
        self, X: np.ndarray, y: np.ndarray, idx: np.ndarray, depth: int,
        rng: np.random.Generator,
    ) -> dict:
        if depth >= self.max_depth or idx.size < 2:
            return self._leaf(y, idx)
        y_here = y[idx]
        if self.criterion == "gini" and (y_here == y_here[0]).all():
            return self._leaf(y, idx)
        finder = _best_threshold_gini if self.criterion == "gini" else _best_threshold_sse
        n_features = X.shape[1]
        order = rng.permutation(n_features)
        chosen = None
        inspected = 0
        for feat in order:
            result = finder(X[idx, feat], y_here.astype(np.float64))
            if result is not None:
                inspected += 1
                if chosen is None or result[1] < chosen[2]:
                    chosen = (int(feat), result[0], result[1])
                if self.max_features is None or inspected >= self.max_features:
                    break
        if chosen is None:
            return self._leaf(y, idx)
        feat, threshold, _ = chosen
        left = idx[X[idx, feat] <= threshold]
        right = idx[X[idx, feat] > threshold]
        return {
            "leaf": False,
            "feature": feat,
            "threshold": threshold,
            "left": self._build(X, y, left, depth + 1, rng),
            "right": self._build(X, y, right, depth + 1, rng),
        }

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        """Leaf value per row: class-1 vote for gini, mean for sse trees."""
        out = np.empty(X.shape[0])

        def descend(node: dict, rows: np.ndarray) -> None:
            if rows.size == 0:
                return
            if node["leaf"]:
                if self.criterion == "gini":
                    counts = node["counts"]
                    out[rows] = 1.0 if counts[1] > counts[0] else 0.0
                else:
                    out[rows] = node["value"]
                return
            go_left = X[rows, node["feature"]] <= node["threshold"]
            descend(node["left"], rows[go_left])
            descend(node["right"], rows[~go_left])

        descend(self.root, np.arange(X.shape[0]))
        return out

    def leaf_assignments(self, X: np.ndarray) -> list[tuple[dict, np.ndarray]]:
        pairs: list[tuple[dict, np.ndarray]] = []

        def descend(node: dict, rows: np.ndarray) -> None:
            if node["leaf"]:
                pairs.append((node, rows))
                return
            go_left = X[rows, node["feature"]] <= node["threshold"]
            descend(node["left"], rows[go_left])
            descend(node["right"], rows[~go_left])

        descend(self.root, np.arange(X.shape[0]))
        return pairs

    @staticmethod
    def strip(node: dict) -> dict:
        """Drop training row indices for serialization."""
        if node["leaf"]:
            return {k: v for k, v in node.items() if k != "indices"}
        return {
            "leaf": False,
            "feature": node["feature"],
            "threshold": node["threshold"],
            "left": _Tree.strip(node["left"]),
            "right": _Tree.strip(node["right"]),
        }


class RandomForestModel:
    """100 bagged Gini trees, depth <= 4, one candidate feature per split.

    The score is the fraction of trees voting for the slowing class.
    """

    kind = "rf"

    def __init__(self, n_estimators: int = 100, max_depth: int = 4, max_features: int = 1):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.max_features = max_features
        self.trees: list[_Tree] = []

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "RandomForestModel":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.trees = []
        for _ in range(self.n_estimators):
            rows = rng.integers(0, X.shape[0], size=X.shape[0])
            tree = _Tree(self.max_depth, self.max_features, "gini")
            tree.fit(X[rows], y[rows], rng)
            self.trees.append(tree)
        return self

    def predict_score(self, X: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise ModelError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros(X.shape[0])
        for tree in self.trees:
            votes += tree.predict_value(X)
        return votes / len(self.trees)

    def to_state(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "max_features": self.max_features,
            "trees": [_Tree.strip(t.root) for t in self.trees],
        }

    @classmethod
    def from_state(cls, state: dict) -> "RandomForestModel":
        model = cls(state["n_estimators"], state["max_depth"], state["max_features"])
        for root in state["trees"]:
            tree = _Tree(model.max_depth, model.max_features, "gini")
            tree.root = root
            model.trees.append(tree)
        return model


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class GradientBoostingModel:
    """100 depth-3 regression trees on the logistic loss, learning rate 0.1.

    Leaf values are single Newton steps sum(r) / sum(p (1-p)) over the
    leaf's rows, clamped to +/-4.
    """

    kind = "gb"

    def __init__(
        self,
        n_estimators: int = 100,
        max_depth: int = 3,
        learning_rate: float = 0.1,
        max_features: int = 1,
    ):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.max_features = max_features
        self.base_score = 0.0
        self.trees: list[_Tree] = []

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "GradientBoostingModel":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        p_mean = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        self.base_score = float(np.log(p_mean / (1 - p_mean)))
        F = np.full(X.shape[0], self.base_score)
        self.trees = []
        for _ in range(self.n_estimators):
            p = _sigmoid(F)
            residual = y - p
            tree = _Tree(self.max_depth, self.max_features, "sse")
            tree.fit(X, residual, rng)
            hess = np.clip(p * (1 - p), 1e-12, None)
            for leaf, rows in tree.leaf_assignments(X):
                if rows.size:
                    gamma = residual[rows].sum() / hess[rows].sum()
                else:
                    gamma = 0.0
                leaf["value"] = float(np.clip(gamma, -4.0, 4.0))
                leaf.pop("indices", None)
            F = F + self.learning_rate * tree.predict_value(X)
            self.trees.append(tree)
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise ModelError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        F = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            F += self.learning_rate * tree.predict_value(X)
        return F

    def predict_score(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision(X))

    def to_state(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "max_features": self.max_features,
            "base_score": self.base_score,
            "trees": [_Tree.strip(t.root) for t in self.trees],
        }

    @classmethod
    def from_state(cls, state: dict) -> "GradientBoostingModel":
        model = cls(
            state["n_estimators"], state["max_depth"],
            state["learning_rate"], state["max_features"],
        )
        model.base_score = float(state["base_score"])
        for root in state["trees"]:
            tree = _Tree(model.max_depth, model.max_features, "sse")
            tree.root = root
            model.trees.append(tree)
        return model


def _best_stump(X: np.ndarray, ypm: np.ndarray, weights: np.ndarray) -> tuple[int, float, int, float]:
    """Minimum weighted-error stump over all features.

    Returns (feature, threshold, polarity, error); polarity +1 predicts
    class 1 above the threshold, -1 predicts class 1 below it.
    """
    total_pos = float(weights[ypm > 0].sum())
    best = (0, 0.0, 1, np.inf)
    for feat in range(X.shape[1]):
        x = X[:, feat]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        distinct = np.flatnonzero(np.diff(xs) > 0)
        if distinct.size == 0:
            continue
        w_pos = np.where(ypm[order] > 0, weights[order], 0.0)
        w_neg = np.where(ypm[order] < 0, weights[order], 0.0)
        cum_pos = np.cumsum(w_pos)[distinct]
        cum_neg = np.cumsum(w_neg)[distinct]
        # polarity +1: predict 1 when x > thr -> errors: positives on the
        # left, negatives on the right.
        err_up = cum_pos + (float(w_neg.sum()) - cum_neg)
        err_down = (total_pos - cum_pos) + cum_neg
        i_up = int(np.argmin(err_up))
        i_down = int(np.argmin(err_down))
        for err, i, polarity in ((err_up[i_up], i_up, 1), (err_down[i_down], i_down, -1)):
            if err < best[3]:
                pos = distinct[i]
                best = (feat, float(0.5 * (xs[pos] + xs[pos + 1])), polarity, float(err))
    return best


class AdaBoostModel:
    """SAMME AdaBoost over 100 depth-1 stumps.

    The score is the weighted fraction of stumps voting for the slowing
    class, which already lies in [0, 1].
    """

    kind = "adaboost"

    def __init__(self, n_estimators: int = 100):
        self.n_estimators = n_estimators
        self.stumps: list[tuple[int, float, int]] = []
        self.alphas: list[float] = []

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "AdaBoostModel":
        X = np.asarray(X, dtype=np.float64)
        ypm = np.where(np.asarray(y, dtype=np.int64) == 1, 1.0, -1.0)
        n = X.shape[0]
        weights = np.full(n, 1.0 / n)
        self.stumps, self.alphas = [], []
        for _ in range(self.n_estimators):
            feat, threshold, polarity, err = _best_stump(X, ypm, weights)
            if not np.isfinite(err):
                break
            pred = np.where((X[:, feat] > threshold), polarity, -polarity)
            err = float(weights[pred != ypm].sum())
            if err <= 1e-12:
                self.stumps = [(feat, threshold, polarity)]
                self.alphas = [1.0]
                break
            if err >= 0.5:
                break
            alpha = float(np.log((1.0 - err) / err))
            self.stumps.append((feat, threshold, polarity))
            self.alphas.append(alpha)
            weights = weights * np.exp(alpha * (pred != ypm))
            weights /= weights.sum()
        if not self.stumps:
            raise ModelError("AdaBoost found no stump better than chance")
        return self

    def predict_score(self, X: np.ndarray) -> np.ndarray:
        if not self.stumps:
            raise ModelError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        vote = np.zeros(X.shape[0])
        total = float(sum(self.alphas))
        for (feat, threshold, polarity), alpha in zip(self.stumps, self.alphas):
            pred_one = (X[:, feat] > threshold) if polarity > 0 else (X[:, feat] <= threshold)
            vote += alpha * pred_one
        return vote / total

    def to_state(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "stumps": [list(s) for s in self.stumps],
            "alphas": self.alphas,
        }

    @classmethod
    def from_state(cls, state: dict) -> "AdaBoostModel":
        model = cls(state["n_estimators"])
        model.stumps = [(int(f), float(t), int(p)) for f, t, p in state["stumps"]]
        model.alphas = [float(a) for a in state["alphas"]]
        return model
