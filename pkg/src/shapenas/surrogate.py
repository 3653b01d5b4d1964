"""Gradient-boosted regression trees for perplexity/latency prediction.

Squared-error boosting over depth-limited trees. Split finding is
deterministic: features are scanned in ascending index order and thresholds
are midpoints between consecutive sorted unique values; rows are
canonically sorted before fitting, so the fitted model is independent of
sample order. Feature importance is total split gain, normalized to sum 1.
"""

import csv
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataError, ValidationError
from .supernet import count_params
from .training import evaluate_perplexity, sample_random

MODEL_FORMAT_VERSION = 1


def pearson(a, b):
    """Pearson correlation coefficient."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValidationError("pearson needs two equal-length vectors (>= 2)")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ValidationError("correlation undefined for constant input")
    r = float(da @ db) / math.sqrt(va * vb)
    return min(1.0, max(-1.0, r))


def _avg_ranks(x):
    """Average ranks (1-based); ties share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b):
    """Spearman rank correlation: Pearson over average-tie ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValidationError("spearman needs two equal-length vectors (>= 2)")
    return pearson(_avg_ranks(a), _avg_ranks(b))


def r2(y_true, y_pred):
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or len(y_true) < 2:
        raise ValidationError("r2 needs two equal-length vectors (>= 2)")
    resid = y_true - y_pred
    dev = y_true - y_true.mean()
    ss_tot = float(dev @ dev)
    if ss_tot == 0.0:
        raise ValidationError("r2 undefined for constant y_true")
    return 1.0 - float(resid @ resid) / ss_tot


@dataclass(frozen=True)
class GbtHyperparams:
    n_trees: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 2

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0:
            raise ConfigError("n_trees must be >= 1 and max_depth >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")


class _Node:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, value=None, feature=None, threshold=None,
                 left=None, right=None):
        self.value = value
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right

    def predict(self, X, out, idx):
        if self.value is not None:
            out[idx] = self.value
            return
        go_left = X[idx, self.feature] <= self.threshold
        self.left.predict(X, out, idx[go_left])
        self.right.predict(X, out, idx[~go_left])

    def to_doc(self):
        if self.value is not None:
            return {"value": self.value}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_doc(),
            "right": self.right.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc):
        if "value" in doc:
            return cls(value=float(doc["value"]))
        return cls(
            feature=int(doc["feature"]),
            threshold=float(doc["threshold"]),
            left=cls.from_doc(doc["left"]),
            right=cls.from_doc(doc["right"]),
        )


def _best_split(X, y, feature, min_leaf):
    """Best SSE-reducing threshold for one feature, or None."""
    order = np.argsort(X[:, feature], kind="stable")
    xs = X[order, feature]
    ys = y[order]
    n = len(ys)
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    total_sum = csum[-1]
    total_sq = csq[-1]
    # candidate split after position i (left = ys[:i+1]); both sides need
    # min_leaf rows and distinct adjacent feature values
    i = np.arange(n - 1)
    valid = (xs[:-1] != xs[1:]) & (i + 1 >= min_leaf) & (n - i - 1 >= min_leaf)
    if not valid.any():
        return None
    nl = (i + 1).astype(np.float64)
    nr = n - nl
    sl = csum[:-1]
    sr = total_sum - sl
    sse_left = csq[:-1] - sl * sl / nl
    sse_right = (total_sq - csq[:-1]) - sr * sr / nr
    parent_sse = total_sq - total_sum * total_sum / n
    gain = parent_sse - (sse_left + sse_right)
    gain[~valid] = -np.inf
    j = int(np.argmax(gain))
    if not np.isfinite(gain[j]) or gain[j] <= 0.0:
        return None
    threshold = 0.5 * (xs[j] + xs[j + 1])
    return float(gain[j]), threshold


def _grow(X, y, depth, hp, gains):
    if depth >= hp.max_depth or len(y) < 2 * hp.min_samples_leaf:
        return _Node(value=float(y.mean()))
    best = None
    for feature in range(X.shape[1]):
        found = _best_split(X, y, feature, hp.min_samples_leaf)
        if found is None:
            continue
        gain, threshold = found
        if best is None or gain > best[0]:
            best = (gain, feature, threshold)
    if best is None:
        return _Node(value=float(y.mean()))
    gain, feature, threshold = best
    gains[feature] += gain
    mask = X[:, feature] <= threshold
    return _Node(
        feature=feature,
        threshold=threshold,
        left=_grow(X[mask], y[mask], depth + 1, hp, gains),
        right=_grow(X[~mask], y[~mask], depth + 1, hp, gains),
    )


@dataclass
class SurrogateModel:
    """Fitted boosted ensemble: predict = base + lr * sum(tree values)."""

    feature_names: list
    base_score: float
    learning_rate: float
    trees: list = field(default_factory=list)
    total_gain: np.ndarray = None

    def predict_many(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValidationError(
                f"expected {len(self.feature_names)} features, got shape "
                f"{X.shape}"
            )
        out = np.full(len(X), self.base_score)
        buf = np.empty(len(X))
        idx = np.arange(len(X))
        for tree in self.trees:
            tree.predict(X, buf, idx)
            out += self.learning_rate * buf
        return out

    def predict(self, features):
        return float(self.predict_many(np.asarray(features)[None, :])[0])

    def feature_importance(self):
        """Total split gain per feature, normalized to sum to 1."""
        if self.total_gain is None:
            raise ConfigError("model has no recorded split gains")
        total = self.total_gain.sum()
        if total == 0.0:
            return np.zeros(len(self.feature_names))
        return self.total_gain / total

    def to_json(self):
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "feature_names": self.feature_names,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "total_gain": list(self.total_gain),
            "trees": [t.to_doc() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise DataError(
                f"unsupported surrogate model version "
                f"{doc.get('format_version')!r}"
            )
        return cls(
            feature_names=list(doc["feature_names"]),
            base_score=float(doc["base_score"]),
            learning_rate=float(doc["learning_rate"]),
            trees=[_Node.from_doc(t) for t in doc["trees"]],
            total_gain=np.asarray(doc["total_gain"], dtype=np.float64),
        )


@dataclass
class FitReport:
    train_r2: float
    holdout_r2: float
    holdout_spearman: float
    holdout_pearson: float
    importance: dict
    n_train: int
    n_holdout: int
    degenerate: bool = False
    staged_train_sse: list = field(default_factory=list)

    def to_json(self):
        doc = {"format_version": MODEL_FORMAT_VERSION, **asdict(self)}
        return json.dumps(doc, sort_keys=True)


def fit_gbt(X, y, feature_names, hyperparams=None, seed=0, holdout=0.2):
    """Fit a boosted ensemble and report held-out quality.

    Rows are canonically sorted before the seeded train/holdout shuffle, so
    the result is invariant to input row order. Constant targets degenerate
    to the mean predictor (flagged in the report, not an error).
    """
    hp = hyperparams or GbtHyperparams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("fit_gbt needs matching X rows and y values")
    if len(y) < 20:
        raise DataError(f"need at least 20 samples to fit, got {len(y)}")
    if X.shape[1] != len(feature_names):
        raise ValidationError("feature_names length does not match X")

    canon = np.lexsort(np.vstack([y[None, :], X.T[::-1]]))
    X = X[canon]
    y = y[canon]

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    n_hold = max(1, int(round(holdout * len(y))))
    hold_idx = perm[:n_hold]
    train_idx = perm[n_hold:]
    Xtr, ytr = X[train_idx], y[train_idx]
    Xho, yho = X[hold_idx], y[hold_idx]

    base = float(ytr.mean())
    model = SurrogateModel(
        feature_names=list(feature_names),
        base_score=base,
        learning_rate=hp.learning_rate,
        total_gain=np.zeros(X.shape[1]),
    )
    pred = np.full(len(ytr), base)
    buf = np.empty(len(ytr))
    idx = np.arange(len(ytr))
    staged = []
    for _ in range(hp.n_trees):
        resid = ytr - pred
        tree = _grow(Xtr, resid, 0, hp, model.total_gain)
        model.trees.append(tree)
        tree.predict(Xtr, buf, idx)
        pred += hp.learning_rate * buf
        staged.append(float(((ytr - pred) ** 2).sum()))

    degenerate = float(np.ptp(ytr)) == 0.0
    train_pred = model.predict_many(Xtr)
    hold_pred = model.predict_many(Xho)
    importance = model.feature_importance()

    def safe(fn, a, b):
        try:
            return fn(a, b)
        except ValidationError:
            return None

    report = FitReport(
        train_r2=safe(r2, ytr, train_pred),
        holdout_r2=safe(r2, yho, hold_pred),
        holdout_spearman=safe(spearman, yho, hold_pred),
        holdout_pearson=safe(pearson, yho, hold_pred),
        importance={
            name: float(v) for name, v in zip(feature_names, importance)
        },
        n_train=len(ytr),
        n_holdout=len(yho),
        degenerate=degenerate,
        staged_train_sse=staged,
    )
    return model, report


@dataclass(frozen=True)
class SurrogateSample:
    """One (shape, exact params, measured target) row."""

    dims: tuple
    params: int
    target: float


def sample_matrix(samples, include_params):
    """Feature matrix + names; latency predictors add the params column."""
    n_layers = len(samples[0].dims)
    names = [f"shape_{i}" for i in range(n_layers)]
    rows = [list(s.dims) for s in samples]
    if include_params:
        names.append("params")
        for row, s in zip(rows, samples):
            row.append(s.params)
    y = np.asarray([s.target for s in samples], dtype=np.float64)
    return np.asarray(rows, dtype=np.float64), y, names


def fit_predictor(samples, kind, hyperparams=None, seed=0):
    """Fit the perplexity (shape-only) or latency (shape+params) predictor."""
    if kind not in ("perplexity", "latency"):
        raise ConfigError(f"unknown predictor kind {kind!r}")
    X, y, names = sample_matrix(samples, include_params=(kind == "latency"))
    return fit_gbt(X, y, names, hyperparams=hyperparams, seed=seed)


def collect_perplexity_dataset(model, design_space, n, eval_rows, batch_size,
                               policy, rng):
    """Measure MLM perplexity of n uniform-random sub-networks."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    samples = []
    for _ in range(n):
        shape = sample_random(design_space, rng)
        p = evaluate_perplexity(
            model, shape, eval_rows, batch_size, policy,
            model.config.vocab_size,
        )
        samples.append(SurrogateSample(
            dims=shape, params=count_params(model.config, shape), target=p,
        ))
    return samples


def write_dataset_csv(samples, path):
    n_layers = len(samples[0].dims)
    header = [f"shape_{i}" for i in range(n_layers)] + ["params", "target"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for s in samples:
            writer.writerow(list(s.dims) + [s.params, repr(s.target)])


def read_dataset_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"dataset {path} is empty") from None
        if header[-2:] != ["params", "target"] or not header[0].startswith("shape_"):
            raise DataError(f"dataset {path} has an unexpected header")
        n_layers = len(header) - 2
        samples = []
        for row in reader:
            if not row:
                continue
            dims = tuple(int(v) for v in row[:n_layers])
            samples.append(SurrogateSample(
                dims=dims, params=int(row[n_layers]),
                target=float(row[n_layers + 1]),
            ))
    if not samples:
        raise DataError(f"dataset {path} has no rows")
    return samples
