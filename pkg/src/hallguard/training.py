"""Fit and calibrate the ensemble from labelled records or feature tables."""

from __future__ import annotations

import csv
import functools
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .ensemble import (EnsembleModel, GbdtConfig, MaxF1, PrecisionAtLeast, ThresholdUnachievable,
                       threshold_from_scores, train)
from .features import FEATURE_NAMES, DetectorFeaturizer

logger = logging.getLogger(__name__)

DEFAULT_SEED = 7
DEFAULT_TRAIN_DOCS = 100


def featurize_records(records, featurizer: Optional[DetectorFeaturizer] = None) -> Tuple[np.ndarray, np.ndarray]:
    featurizer = featurizer or DetectorFeaturizer()
    X = featurizer.transform([(r.document, r.response) for r in records])
    y = np.array([r.label for r in records], dtype=int)
    return X, y


def write_feature_csv(path: Union[str, Path], X: np.ndarray, y: Sequence[int], ids: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("id",) + FEATURE_NAMES + ("label",))
        for rid, row, label in zip(ids, X, y):
            w.writerow([rid] + [repr(float(v)) for v in row] + [int(label)])


def read_feature_csv(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(FEATURE_NAMES + ("label",)) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    X = np.array([[float(r[n]) for n in FEATURE_NAMES] for r in rows], dtype=float)
    y = np.array([int(r["label"]) for r in rows], dtype=int)
    return X.reshape(len(rows), len(FEATURE_NAMES)), y


def fit_calibrated(
    X: np.ndarray,
    y: np.ndarray,
    cfg: GbdtConfig = GbdtConfig(),
    seed: int = 0,
    verification_precision: float = 0.8,
) -> EnsembleModel:
    """Train, then store a max-F1 detection threshold and a precision-targeted
    verification threshold (never below the detection one) in the model."""
    model = train(X, y, cfg, seed, FEATURE_NAMES)
    scores = model.predict_proba(X)
    detection = threshold_from_scores(scores, y, MaxF1())
    try:
        verification = threshold_from_scores(scores, y, PrecisionAtLeast(verification_precision))
    except ThresholdUnachievable:
        logger.warning("precision %.2f unreachable; verification uses the detection threshold",
                       verification_precision)
        verification = detection
    return model.with_thresholds(detection=detection, verification=max(detection, verification))


@functools.lru_cache(maxsize=4)
def default_model(seed: int = DEFAULT_SEED, n_docs: int = DEFAULT_TRAIN_DOCS) -> EnsembleModel:
    """Model trained on the bundled synthetic corpus; deterministic per arguments."""
    from .evaluation.corpus import standard_corpus

    records = standard_corpus(seed, n_docs, 4)
    X, y = featurize_records(records)
    return fit_calibrated(X, y, GbdtConfig(), seed)
