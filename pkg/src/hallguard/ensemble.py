"""Second-order gradient boosted trees for binary logistic loss.

Exact greedy split search over midpoints of consecutive distinct feature
values, L2-regularized Newton leaf values, and a text (JSON) model format.
Training is deterministic: ties between equally good splits go to the
lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

MODEL_FORMAT = "hallguard.gbdt"
MODEL_VERSION = 1
PROBA_CLAMP = 1e-6


@dataclass(frozen=True)
class GbdtConfig:
    rounds: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    l2_regularization: float = 1.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.l2_regularization < 0:
            raise ValueError("l2_regularization must be >= 0")


def logistic_grad_hess(raw: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and hessian of the logistic loss with respect to the raw score."""
    p = expit(raw)
    return p - y, p * (1.0 - p)


def log_loss(y: np.ndarray, raw: np.ndarray) -> float:
    """Mean logistic loss, computed stably from raw scores."""
    y = np.asarray(y, dtype=float)
    raw = np.asarray(raw, dtype=float)
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


@dataclass(frozen=True)
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf.

    Rows with ``x[feature] < threshold`` go left.
    """

    feature: Tuple[int, ...]
    threshold: Tuple[float, ...]
    left: Tuple[int, ...]
    right: Tuple[int, ...]
    value: Tuple[float, ...]

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        rows = np.arange(X.shape[0])
        while True:
            active = feature[node] >= 0
            if not active.any():
                break
            r = rows[active]
            nd = node[active]
            go_left = X[r, feature[nd]] < threshold[nd]
            node[r] = np.where(go_left, left[nd], right[nd])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.value)[self.apply(X)]

    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            tuple(int(v) for v in d["feature"]),
            tuple(float(v) for v in d["threshold"]),
            tuple(int(v) for v in d["left"]),
            tuple(int(v) for v in d["right"]),
            tuple(float(v) for v in d["value"]),
        )


@dataclass(frozen=True)
class Split:
    gain: float
    feature: int
    threshold: float


def leaf_value(g_sum: float, h_sum: float, lam: float) -> float:
    denom = h_sum + lam
    return -g_sum / denom if denom > 0 else 0.0


def _split_threshold(lo: float, hi: float) -> float:
    t = (lo + hi) / 2.0
    # adjacent floats: the midpoint can round down onto ``lo``
    return hi if t <= lo else t


def find_best_split(
    X: np.ndarray, g: np.ndarray, h: np.ndarray, idx: np.ndarray, cfg: GbdtConfig
) -> Optional[Split]:
    """Highest-gain split of the rows ``idx``; None if no split has positive gain."""
    lam = cfg.l2_regularization
    msl = cfg.min_samples_leaf
    m = len(idx)
    if m < 2 * msl:
        return None
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + lam) if H + lam > 0 else 0.0
    best: Optional[Split] = None
    for f in range(X.shape[1]):
        order = idx[np.argsort(X[idx, f], kind="stable")]
        xs = X[order, f]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        gr, hr = G - gl, H - hl
        n_left = np.arange(1, m)
        valid = (xs[:-1] < xs[1:]) & (n_left >= msl) & (m - n_left >= msl)
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
        gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > 0 and (best is None or gain[k] > best.gain):
            best = Split(float(gain[k]), f, _split_threshold(float(xs[k]), float(xs[k + 1])))
    return best


def build_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: GbdtConfig) -> Tree:
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(leaf_value(float(g[idx].sum()), float(h[idx].sum()), cfg.l2_regularization))
        if depth >= cfg.max_depth:
            return node
        split = find_best_split(X, g, h, idx, cfg)
        if split is None:
            return node
        mask = X[idx, split.feature] < split.threshold
        feature[node] = split.feature
        threshold[node] = split.threshold
        value[node] = 0.0
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return Tree(tuple(feature), tuple(threshold), tuple(left), tuple(right), tuple(value))


@dataclass(frozen=True)
class EnsembleModel:
    base_score: float
    trees: Tuple[Tree, ...]
    learning_rate: float
    feature_names: Tuple[str, ...]
    config: GbdtConfig = field(default_factory=GbdtConfig)
    seed: int = 0
    thresholds: Dict[str, float] = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def config_hash(self) -> str:
        payload = json.dumps(
            {"config": asdict(self.config), "features": list(self.feature_names), "seed": self.seed},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def model_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def decision_function(self, X) -> np.ndarray:
        X = self._check(X)
        raw = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            raw += self.learning_rate * tree.predict(X)
        return raw

    def staged_decision_function(self, X) -> Iterator[np.ndarray]:
        """Raw scores after 0, 1, ..., len(trees) boosting rounds."""
        X = self._check(X)
        raw = np.full(X.shape[0], self.base_score)
        yield raw.copy()
        for tree in self.trees:
            raw += self.learning_rate * tree.predict(X)
            yield raw.copy()

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def with_thresholds(self, **thresholds: float) -> "EnsembleModel":
        merged = dict(self.thresholds)
        merged.update(thresholds)
        return EnsembleModel(self.base_score, self.trees, self.learning_rate,
                             self.feature_names, self.config, self.seed, merged)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(self.feature_names),
            "config": asdict(self.config),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "thresholds": dict(self.thresholds),
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} model")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        model = cls(
            base_score=float(d["base_score"]),
            trees=tuple(Tree.from_dict(t) for t in d["trees"]),
            learning_rate=float(d["learning_rate"]),
            feature_names=tuple(d["feature_names"]),
            config=GbdtConfig(**d["config"]),
            seed=int(d.get("seed", 0)),
            thresholds={k: float(v) for k, v in d.get("thresholds", {}).items()},
        )
        if "config_hash" in d and d["config_hash"] != model.config_hash:
            raise ValueError("config hash mismatch; model file is corrupt or edited")
        for tree in model.trees:
            if any(f >= model.n_features for f in tree.feature):
                raise ValueError("tree references a feature outside the schema")
        return model

    @classmethod
    def from_json(cls, text: str) -> "EnsembleModel":
        return cls.from_dict(json.loads(text))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EnsembleModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _default_names(n: int) -> Tuple[str, ...]:
    return tuple(f"f{i}" for i in range(n))


def train(
    X,
    y,
    cfg: GbdtConfig = GbdtConfig(),
    seed: int = 0,
    feature_names: Optional[Sequence[str]] = None,
) -> EnsembleModel:
    """Fit boosted trees on binary labels ``y`` in {0, 1}.

    ``seed`` is recorded in the model; the algorithm itself uses no
    randomness, so identical inputs always give identical trees.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be a non-empty 2-D array matching y")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    names = tuple(feature_names) if feature_names is not None else _default_names(X.shape[1])
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match X")

    prior = min(max(float(y.mean()), PROBA_CLAMP), 1.0 - PROBA_CLAMP)
    base = math.log(prior / (1.0 - prior))
    trees: List[Tree] = []
    if 0.0 < y.mean() < 1.0:
        raw = np.full(X.shape[0], base)
        for _ in range(cfg.rounds):
            g, h = logistic_grad_hess(raw, y)
            tree = build_tree(X, g, h, cfg)
            trees.append(tree)
            raw = raw + cfg.learning_rate * tree.predict(X)
    return EnsembleModel(base, tuple(trees), cfg.learning_rate, names, cfg, seed)


def predict(model: EnsembleModel, x) -> float:
    """Hallucination probability for one feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict takes a single feature vector")
    return float(model.predict_proba(x)[0])


# ---------------------------------------------------------------------------
# operating points


@dataclass(frozen=True)
class MaxF1:
    pass


@dataclass(frozen=True)
class PrecisionAtLeast:
    p: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError("precision target must be in (0, 1]")


class ThresholdUnachievable(ValueError):
    pass


def _confusion(scores: np.ndarray, labels: np.ndarray, t: float) -> Tuple[int, int, int]:
    flagged = scores >= t
    tp = int(np.sum(flagged & (labels == 1)))
    fp = int(np.sum(flagged & (labels == 0)))
    fn = int(np.sum(~flagged & (labels == 1)))
    return tp, fp, fn


def threshold_from_scores(scores, labels, target=MaxF1()) -> float:
    """Decision threshold for ``score >= threshold`` meeting ``target``.

    Candidates are the distinct scores. The returned value sits halfway
    between the winning candidate and the next lower distinct score, which
    flags exactly the same items while leaving a margin on both sides.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("scores and labels must be equal-length and non-empty")
    if len(set(labels.tolist())) < 2:
        raise ValueError("validation data must contain both classes")
    candidates = np.unique(scores)
    chosen = None
    if isinstance(target, MaxF1):
        best_f1 = -1.0
        for t in candidates:
            tp, fp, fn = _confusion(scores, labels, t)
            f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
            if f1 > best_f1:
                best_f1, chosen = f1, t
    elif isinstance(target, PrecisionAtLeast):
        for t in candidates:
            tp, fp, _ = _confusion(scores, labels, t)
            if tp / (tp + fp) >= target.p:
                chosen = t
                break
        if chosen is None:
            raise ThresholdUnachievable(f"no threshold reaches precision {target.p}")
    else:
        raise TypeError(f"unknown calibration target {target!r}")
    lower = candidates[candidates < chosen]
    if lower.size == 0:
        return float(chosen)
    t = (float(lower[-1]) + float(chosen)) / 2.0
    return float(chosen) if t <= lower[-1] else t


def calibrate_threshold(model: EnsembleModel, X, y, target=MaxF1()) -> float:
    return threshold_from_scores(model.predict_proba(X), y, target)


# ---------------------------------------------------------------------------
# scikit-learn estimator


class GradientBoostedTreeClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn compatible front end to :func:`train`.

    Parameters
    ----------
    rounds : int
        Number of boosting rounds (trees).
    max_depth : int
        Maximum depth of each tree; 1 gives stumps.
    learning_rate : float
        Shrinkage applied to every leaf value, in (0, 1].
    min_samples_leaf : int
        Minimum number of training rows in each leaf.
    l2_regularization : float
        L2 penalty on leaf values.
    random_state : int
        Recorded in the fitted model; training is deterministic regardless.
    feature_names : sequence of str, optional
        Names stored in the model file; defaults to ``f0..fN``.
    """

    def __init__(self, rounds=50, max_depth=3, learning_rate=0.1, min_samples_leaf=5,
                 l2_regularization=1.0, random_state=0, feature_names=None):
        self.rounds = rounds
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.l2_regularization = l2_regularization
        self.random_state = random_state
        self.feature_names = feature_names

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) > 2:
            raise ValueError("only binary classification is supported")
        y01 = (y == self.classes_[-1]).astype(float) if len(self.classes_) == 2 else np.ones_like(y, dtype=float)
        cfg = GbdtConfig(self.rounds, self.max_depth, self.learning_rate,
                         self.min_samples_leaf, self.l2_regularization)
        self.model_ = train(X, y01, cfg, seed=self.random_state or 0, feature_names=self.feature_names)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: EnsembleModel) -> "GradientBoostedTreeClassifier":
        c = model.config
        est = cls(c.rounds, c.max_depth, c.learning_rate, c.min_samples_leaf,
                  c.l2_regularization, model.seed, list(model.feature_names))
        est.model_ = model
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = model.n_features
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(check_array(X, dtype=float))

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        p = self.predict_proba(X)[:, 1]
        if len(self.classes_) == 1:
            return np.full(p.shape, self.classes_[0])
        return self.classes_[(p >= 0.5).astype(int)]
