"""Classical classifiers fit on deep feature vectors.

All six share one protocol: ``fit(X, y)`` learns per-feature standardization
from the training rows and then the model; ``predict(X)`` applies the same
standardization and returns 0/1 labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .features import FeatureMatrix
from .metrics import MetricReport, evaluate
from .rng import make_rng

log = logging.getLogger(__name__)

CLASSIFIER_ORDER = ("knn", "logistic", "svm", "naive_bayes", "random_forest", "mlp")
DISPLAY_NAMES = {
    "knn": "KNN",
    "logistic": "Logistic",
    "svm": "SVM",
    "naive_bayes": "Naive Bayes",
    "random_forest": "Random Forest",
    "mlp": "MLP",
}


class ClassifierError(ValueError):
    pass


class DivergenceError(ClassifierError):
    pass


def _check_training(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ClassifierError(f"bad training shapes X={X.shape}, y={y.shape}")
    if len(X) < 2 or len(np.unique(y)) != 2:
        raise ClassifierError("training data needs both classes present")
    if not np.all(np.isfinite(X)):
        raise ClassifierError("training features contain non-finite values")
    return X, y


class Standardizer:
    def fit(self, X: np.ndarray) -> "Standardizer":
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.mean):
            raise ClassifierError(f"expected {len(self.mean)} features, got shape {X.shape}")
        return (X - self.mean) / self.std


class Classifier:
    kind = "base"

    def fit(self, X, y) -> "Classifier":
        X, y = _check_training(X, y)
        self.scaler = Standardizer().fit(X)
        self._fit(self.scaler.transform(X), y)
        return self

    def predict(self, X) -> np.ndarray:
        return self._predict(self.scaler.transform(X))

    def _fit(self, Z, y):
        raise NotImplementedError

    def _predict(self, Z):
        raise NotImplementedError


# -- KNN ------------------------------------------------------------------------

class KNearestNeighbors(Classifier):
    """Majority vote of the k nearest training rows (Euclidean on standardized
    features); equal distances favour the lower training index."""

    kind = "knn"

    def __init__(self, k: int = 5):
        if k < 1 or k % 2 == 0:
            raise ClassifierError(f"k must be a positive odd integer, got {k}")
        self.k = k

    def _fit(self, Z, y):
        if self.k > len(Z):
            raise ClassifierError(f"k={self.k} exceeds {len(Z)} training rows")
        self.Z, self.y = Z, y

    def _predict(self, Q):
        out = np.empty(len(Q), dtype=np.int64)
        index = np.arange(len(self.Z))
        for i, q in enumerate(Q):
            # per-row differences rather than the |a|^2-2ab+|b|^2 expansion, so equal distances stay equal
            d2 = ((self.Z - q) ** 2).sum(1)
            nearest = np.lexsort((index, d2))[: self.k]
            out[i] = int(self.y[nearest].sum() * 2 > self.k)
        return out


def knn_fit_predict(train: FeatureMatrix, queries, k: int = 5) -> np.ndarray:
    return KNearestNeighbors(k).fit(train.X, train.y).predict(queries)


# -- logistic regression --------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticRegression(Classifier):
    """Binary cross-entropy + (l2/2)*||w||^2, minimized by full-batch gradient descent."""

    kind = "logistic"

    def __init__(self, l2: float = 1e-4, lr: float = 0.1, epochs: int = 500):
        self.l2, self.lr, self.epochs = l2, lr, epochs

    def loss_and_grad(self, w, b, Z, y):
        p = _sigmoid(Z @ w + b)
        eps = 1e-15
        loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)) + 0.5 * self.l2 * w @ w
        r = (p - y) / len(y)
        return loss, Z.T @ r + self.l2 * w, r.sum()

    def _fit(self, Z, y):
        w = np.zeros(Z.shape[1])
        b = 0.0
        for epoch in range(self.epochs):
            _, gw, gb = self.loss_and_grad(w, b, Z, y)
            w = w - self.lr * gw
            b = b - self.lr * gb
            if not (np.all(np.isfinite(w)) and math.isfinite(b)):
                raise DivergenceError(f"logistic regression diverged at epoch {epoch + 1}")
        self.w, self.b = w, b

    def decision(self, X) -> np.ndarray:
        return _sigmoid(self.scaler.transform(X) @ self.w + self.b)

    def _predict(self, Z):
        return (_sigmoid(Z @ self.w + self.b) > 0.5).astype(np.int64)


def logistic_fit(train: FeatureMatrix, l2: float = 1e-4, epochs: int = 500, lr: float = 0.1) -> LogisticRegression:
    return LogisticRegression(l2, lr, epochs).fit(train.X, train.y)


# -- linear SVM -----------------------------------------------------------------

class LinearSVM(Classifier):
    """Primal soft-margin SVM by subgradient descent.

    Minimizes ``(C * sum(hinge) + ||w||^2 / 2) / N``, the C-weighted form of
    ``sum(hinge) + ||w||^2 / (2C)`` scaled so the step size does not depend
    on N. Labels are mapped to -1/+1 internally.
    """

    kind = "svm"

    def __init__(self, C: float = 1.0, lr: float = 1e-3, epochs: int = 1000):
        if C <= 0:
            raise ClassifierError("C must be positive")
        self.C, self.lr, self.epochs = C, lr, epochs

    def objective(self, w, b, Z, s) -> float:
        hinge = np.maximum(0.0, 1.0 - s * (Z @ w + b))
        return float((self.C * hinge.sum() + 0.5 * w @ w) / len(s))

    def _fit(self, Z, y):
        s = np.where(y == 1, 1.0, -1.0)
        n = len(s)
        w = np.zeros(Z.shape[1])
        b = 0.0
        self.history: list[float] = []
        for epoch in range(self.epochs):
            margin = s * (Z @ w + b)
            active = margin < 1.0
            gw = (w - self.C * (s[active, None] * Z[active]).sum(0)) / n
            gb = -self.C * s[active].sum() / n
            w = w - self.lr * gw
            b = b - self.lr * gb
            if not (np.all(np.isfinite(w)) and math.isfinite(b)):
                raise DivergenceError(f"SVM diverged at epoch {epoch + 1}")
            self.history.append(self.objective(w, b, Z, s))
        self.w, self.b = w, b

    def decision(self, X) -> np.ndarray:
        return self.scaler.transform(X) @ self.w + self.b

    def _predict(self, Z):
        return (Z @ self.w + self.b > 0).astype(np.int64)


def svm_fit(train: FeatureMatrix, C: float = 1.0, epochs: int = 1000, lr: float = 1e-3) -> LinearSVM:
    return LinearSVM(C, lr, epochs).fit(train.X, train.y)


# -- Gaussian naive Bayes -------------------------------------------------------

class GaussianNaiveBayes(Classifier):
    """Independent per-feature Gaussians per class.

    Predicts 1 when log R = log P(1|x) - log P(0|x) > 0, else 0, so an exact
    tie goes to class 0.
    """

    kind = "naive_bayes"

    def __init__(self, var_floor: float = 1e-9):
        self.var_floor = var_floor

    def _fit(self, Z, y):
        self.means, self.vars, self.log_priors = [], [], []
        for c in (0, 1):
            rows = Z[y == c]
            if len(rows) < 2:
                log.warning("class %d has a single training row; variance floored at %g", c, self.var_floor)
            self.means.append(rows.mean(0))
            self.vars.append(np.maximum(rows.var(0), self.var_floor))
            self.log_priors.append(math.log(len(rows) / len(Z)))

    def _log_joint(self, Z, c):
        m, v = self.means[c], self.vars[c]
        return self.log_priors[c] - 0.5 * (np.log(2 * np.pi * v) + (Z - m) ** 2 / v).sum(1)

    def log_ratio(self, X) -> np.ndarray:
        Z = self.scaler.transform(X)
        return self._log_joint(Z, 1) - self._log_joint(Z, 0)

    def _predict(self, Z):
        return (self._log_joint(Z, 1) - self._log_joint(Z, 0) > 0).astype(np.int64)


def naive_bayes_fit_predict(train: FeatureMatrix, queries) -> tuple[np.ndarray, np.ndarray]:
    """Labels and the ratio R = P(1|x)/P(0|x) per query (overflow saturates to inf)."""
    nb = GaussianNaiveBayes().fit(train.X, train.y)
    with np.errstate(over="ignore"):
        return nb.predict(queries), np.exp(nb.log_ratio(queries))


# -- decision tree / random forest ----------------------------------------------

@dataclass
class DecisionTree:
    """Greedy Gini tree. ``max_features=None`` scans every feature at each node."""

    max_depth: int | None = None
    max_features: int | None = None
    rng: np.random.Generator | None = None
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[int] = field(default_factory=list)
    impurity: list[float] = field(default_factory=list)

    def fit(self, Z: np.ndarray, y: np.ndarray) -> "DecisionTree":
        self._grow(np.asarray(Z, dtype=np.float64), np.asarray(y, dtype=np.int64), 0)
        return self

    def _new_leaf(self, y) -> int:
        self.feature.append(-1)
        self.threshold.append(math.nan)
        self.left.append(-1)
        self.right.append(-1)
        pos = int(y.sum())
        self.value.append(int(pos * 2 > len(y)))
        self.impurity.append(math.nan)
        return len(self.value) - 1

    def best_split(self, Z, y) -> tuple[float, int, float]:
        """(weighted gini, feature, threshold) minimizing impurity, ties to the
        lowest feature then lowest threshold; ``(inf, -1, nan)`` if none."""
        n, d = Z.shape
        if self.max_features is None or self.max_features >= d:
            feats = np.arange(d)
        else:
            feats = np.sort(self.rng.choice(d, self.max_features, replace=False))
        cols = Z[:, feats]
        order = np.argsort(cols, axis=0, kind="stable")
        vals = np.take_along_axis(cols, order, axis=0)
        ys = y[order]
        n_left = np.arange(1, n)[:, None].astype(np.float64)
        pos_left = np.cumsum(ys, axis=0)[:-1]
        pos_right = y.sum() - pos_left
        n_right = n - n_left
        # n_side * gini(side) = 2 * pos * neg / n_side
        score = (2 * pos_left * (n_left - pos_left) / n_left
                 + 2 * pos_right * (n_right - pos_right) / n_right) / n
        valid = vals[1:] > vals[:-1]
        if not valid.any():
            return math.inf, -1, math.nan
        score = np.where(valid, score, np.inf).T  # [feature, position]
        fi, pi = np.unravel_index(np.argmin(score), score.shape)
        return float(score[fi, pi]), int(feats[fi]), float((vals[pi, fi] + vals[pi + 1, fi]) / 2)

    def _grow(self, Z, y, depth) -> int:
        pos = y.sum()
        if pos == 0 or pos == len(y) or len(y) < 2 or (self.max_depth is not None and depth >= self.max_depth):
            return self._new_leaf(y)
        score, f, t = self.best_split(Z, y)
        if f < 0:
            return self._new_leaf(y)
        node = self._new_leaf(y)
        self.feature[node], self.threshold[node], self.impurity[node] = f, t, score
        go_left = Z[:, f] <= t
        left = self._grow(Z[go_left], y[go_left], depth + 1)
        right = self._grow(Z[~go_left], y[~go_left], depth + 1)
        self.left[node], self.right[node] = left, right
        return node

    def predict(self, Z) -> np.ndarray:
        feature = np.array(self.feature)
        threshold = np.array(self.threshold)
        left, right, value = np.array(self.left), np.array(self.right), np.array(self.value)
        node = np.zeros(len(Z), dtype=np.int64)
        rows = np.arange(len(Z))
        while True:
            internal = feature[node] >= 0
            if not internal.any():
                return value[node]
            f = feature[node[internal]]
            go_left = Z[rows[internal], f] <= threshold[node[internal]]
            node[internal] = np.where(go_left, left[node[internal]], right[node[internal]])


class RandomForest(Classifier):
    """Bootstrap-sampled Gini trees with sqrt(D) candidate features per split;
    majority vote, ties to class 0."""

    kind = "random_forest"

    def __init__(self, n_trees: int = 100, max_depth: int | None = 16, seed: int = 0):
        if n_trees < 1:
            raise ClassifierError("n_trees must be at least 1")
        self.n_trees, self.max_depth, self.seed = n_trees, max_depth, seed

    def _fit(self, Z, y):
        rng = make_rng(self.seed)
        m = max(1, int(math.isqrt(Z.shape[1])))
        self.trees = []
        for _ in range(self.n_trees):
            idx = rng.integers(0, len(Z), len(Z))
            tree = DecisionTree(self.max_depth, m, rng)
            self.trees.append(tree.fit(Z[idx], y[idx]))

    def _predict(self, Z):
        votes = np.sum([t.predict(Z) for t in self.trees], axis=0)
        return (votes * 2 > self.n_trees).astype(np.int64)


def random_forest_fit_predict(train: FeatureMatrix, queries, n_trees: int = 100,
                              max_depth: int | None = 16, seed: int = 0) -> np.ndarray:
    return RandomForest(n_trees, max_depth, seed).fit(train.X, train.y).predict(queries)


# -- multilayer perceptron ------------------------------------------------------

class MultilayerPerceptron(Classifier):
    """Fully connected ReLU network with a 2-logit head, trained full-batch by
    Adam on softmax cross-entropy through the tensor engine (float64)."""

    kind = "mlp"

    def __init__(self, hidden=(64,), epochs: int = 300, lr: float = 1e-2, seed: int = 0):
        hidden = tuple(int(h) for h in hidden)
        if not hidden or min(hidden) < 1:
            raise ClassifierError("MLP needs at least one hidden layer of positive width")
        self.hidden, self.epochs, self.lr, self.seed = hidden, epochs, lr, seed

    def _forward(self, Z):
        h = E.Tensor(Z, dtype=np.float64)
        for i, (w, b) in enumerate(self.layers):
            h = E.dense(h, w, b)
            if i < len(self.layers) - 1:
                h = E.relu(h)
        return h

    def _fit(self, Z, y):
        rng = make_rng(self.seed)
        sizes = (Z.shape[1], *self.hidden, 2)
        self.layers = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            bound = math.sqrt(6.0 / fan_in)
            w = E.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, dtype=np.float64)
            b = E.Tensor(np.zeros(fan_out), requires_grad=True, dtype=np.float64)
            self.layers.append((w, b))
        opt = E.Adam([p for layer in self.layers for p in layer], lr=self.lr)
        for epoch in range(self.epochs):
            opt.zero_grad()
            try:
                loss = E.softmax_cross_entropy(self._forward(Z), y)
                loss.backward()
                opt.step()
            except E.NonFiniteError:
                raise DivergenceError(f"MLP diverged at epoch {epoch + 1}") from None

    def _predict(self, Z):
        with E.no_grad():
            return self._forward(Z).data.argmax(1).astype(np.int64)


def mlp_fit_predict(train: FeatureMatrix, queries, hidden=(64,), epochs: int = 300,
                    lr: float = 1e-2, seed: int = 0) -> np.ndarray:
    return MultilayerPerceptron(hidden, epochs, lr, seed).fit(train.X, train.y).predict(queries)


# -- the grid -------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    knn_k: int = 5
    logistic_l2: float = 1e-4
    logistic_lr: float = 0.1
    logistic_epochs: int = 500
    svm_c: float = 1.0
    svm_lr: float = 1e-3
    svm_epochs: int = 1000
    rf_trees: int = 100
    rf_max_depth: int = 16
    mlp_hidden: tuple = (64,)
    mlp_epochs: int = 300
    mlp_lr: float = 1e-2
    seed: int = 0


def build(kind: str, cfg: ClassifierConfig | None = None) -> Classifier:
    cfg = cfg or ClassifierConfig()
    if kind == "knn":
        return KNearestNeighbors(cfg.knn_k)
    if kind == "logistic":
        return LogisticRegression(cfg.logistic_l2, cfg.logistic_lr, cfg.logistic_epochs)
    if kind == "svm":
        return LinearSVM(cfg.svm_c, cfg.svm_lr, cfg.svm_epochs)
    if kind == "naive_bayes":
        return GaussianNaiveBayes()
    if kind == "random_forest":
        return RandomForest(cfg.rf_trees, cfg.rf_max_depth, cfg.seed)
    if kind == "mlp":
        return MultilayerPerceptron(cfg.mlp_hidden, cfg.mlp_epochs, cfg.mlp_lr, cfg.seed)
    raise ClassifierError(f"unknown classifier {kind!r}")


def fit_all(train: FeatureMatrix, eval_: FeatureMatrix, cfg: ClassifierConfig | None = None,
            kinds=CLASSIFIER_ORDER) -> dict[str, MetricReport | Exception]:
    """Fit every classifier on ``train`` and score it on ``eval_``.

    A classifier that raises contributes its exception instead of a report;
    the rest of the grid is still computed.
    """
    if train.dim != eval_.dim:
        raise ClassifierError(f"feature dimensions differ: train {train.dim}, eval {eval_.dim}")
    results: dict[str, MetricReport | Exception] = {}
    for kind in kinds:
        try:
            clf = build(kind, cfg).fit(train.X, train.y)
            results[kind] = evaluate(clf.predict(eval_.X), eval_.y)
        except Exception as exc:  # one failure must not sink the grid
            log.error("%s failed: %s", kind, exc)
            results[kind] = exc
    return results


def render_grid(rows: dict[str, dict[str, MetricReport | Exception]], kinds=CLASSIFIER_ORDER) -> str:
    """Aligned text table, one row per feature source, accuracy in percent."""
    header = ["features", *(DISPLAY_NAMES[k] for k in kinds)]
    body = []
    for name, res in rows.items():
        cells = [name]
        for k in kinds:
            r = res.get(k)
            if isinstance(r, MetricReport) and r.accuracy is not None:
                cells.append(f"{100 * r.accuracy:.2f}")
            else:
                cells.append("err")
        body.append(cells)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                for i, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, body)]) + "\n"
