"""Fixed-order feature vectors built from detector reports."""

from __future__ import annotations

from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import DetectorReport, ResponseUnderTest, SourceDocument
from .ner import NER_FEATURES, Gazetteer, NerConfig, NerDetector
from .nli import NLI_FEATURES, NliConfig, NliDetector
from .sbd import SBD_FEATURES, SbdConfig, SbdDetector
from .segmentation import SegmenterConfig, count_tokens, segment_document, split_sentences

FEATURE_NAMES: Tuple[str, ...] = NER_FEATURES + NLI_FEATURES + SBD_FEATURES + (
    "response_token_count",
    "doc_token_count",
)
N_FEATURES = len(FEATURE_NAMES)

DETECTOR_FEATURES = {"ner": NER_FEATURES, "nli": NLI_FEATURES, "sbd": SBD_FEATURES}


def prepare(
    document: str,
    response: str,
    segmenter: SegmenterConfig = SegmenterConfig(),
    doc_id: str = "document",
    resp_id: str = "response",
) -> Tuple[SourceDocument, ResponseUnderTest]:
    """Segment the document and split the response into sentences."""
    doc = SourceDocument(doc_id, document)
    doc = SourceDocument(doc_id, document, tuple(segment_document(doc, segmenter)))
    resp = ResponseUnderTest(resp_id, response, tuple(split_sentences(response, segmenter.abbreviations)))
    return doc, resp


def assemble_features(
    reports: Mapping[str, DetectorReport], doc: SourceDocument, resp: ResponseUnderTest
) -> np.ndarray:
    """Feature vector in ``FEATURE_NAMES`` order; missing detectors contribute zeros."""
    values = dict.fromkeys(FEATURE_NAMES, 0.0)
    for report in reports.values():
        for name in DETECTOR_FEATURES.get(report.detector, ()):
            values[name] = float(report.features.get(name, 0.0))
    values["response_token_count"] = float(count_tokens(resp.text))
    values["doc_token_count"] = float(count_tokens(doc.text))
    vec = np.array([values[n] for n in FEATURE_NAMES], dtype=float)
    if not np.all(np.isfinite(vec)) or np.any(vec < 0):
        raise ValueError("feature vector must be finite and non-negative")
    return vec


def default_detectors(
    ner_config: NerConfig = NerConfig(),
    nli_config: NliConfig = NliConfig(),
    sbd_config: SbdConfig = SbdConfig(),
    gazetteer: Optional[Gazetteer] = None,
    nli_backend=None,
    sbd_backend=None,
):
    return [
        NerDetector(ner_config, gazetteer),
        NliDetector(nli_backend, nli_config),
        SbdDetector(sbd_backend, sbd_config),
    ]


class DetectorFeaturizer(TransformerMixin, BaseEstimator):
    """Turn (document, response) pairs into detector feature rows.

    Stateless: ``fit`` only validates parameters, so the featurizer can sit
    in front of :class:`~hallguard.ensemble.GradientBoostedTreeClassifier`
    in a :class:`sklearn.pipeline.Pipeline`.
    """

    def __init__(self, ner_config=None, nli_config=None, sbd_config=None,
                 segmenter_config=None, gazetteer=None, nli_backend=None, sbd_backend=None):
        self.ner_config = ner_config
        self.nli_config = nli_config
        self.sbd_config = sbd_config
        self.segmenter_config = segmenter_config
        self.gazetteer = gazetteer
        self.nli_backend = nli_backend
        self.sbd_backend = sbd_backend

    def _detectors(self):
        return default_detectors(
            self.ner_config or NerConfig(),
            self.nli_config or NliConfig(),
            self.sbd_config or SbdConfig(),
            self.gazetteer,
            self.nli_backend,
            self.sbd_backend,
        )

    def fit(self, X, y=None):
        self._detectors()
        self.n_features_out_ = N_FEATURES
        return self

    def transform(self, X: Iterable[Sequence[str]]) -> np.ndarray:
        detectors = self._detectors()
        seg = self.segmenter_config or SegmenterConfig()
        rows = []
        for pair in X:
            document, response = pair[0], pair[1]
            doc, resp = prepare(document, response, seg)
            reports = {d.name: d.detect(doc, resp) for d in detectors}
            rows.append(assemble_features(reports, doc, resp))
        return np.array(rows, dtype=float).reshape(len(rows), N_FEATURES)

    def get_feature_names_out(self, input_features=None):
        return np.array(FEATURE_NAMES, dtype=object)
