"""Pipeline configuration: file format, defaults and environment overrides.

A config file is YAML or JSON with these keys (all optional)::

    name: default
    variant: detect_and_mitigate      # or detect_only
    detectors: {ner: true, nli: true, sbd: true}
    timeout_ms: 300                   # per-detector join timeout
    deadline_ms: 5000                 # whole-request budget
    failure_policy: fail_closed       # or fail_open
    privacy: true                     # keep raw text out of request logs
    model_path: null                  # null trains the bundled synthetic model
    loop: {max_iterations: 2, prompt_version: v2, detection_threshold: null,
           verification_threshold: null, token_budget: null}
    ner: {enabled: [Person, Date, Money, Percent], thresholds: {Person: 0.5}, fuzzy_match: false}
    nli: {sentence_threshold: 0.5, aggregation: max, k: 1}
    sbd: {token_threshold: 0.5, merge_gap: 2, min_span_tokens: 1, baseline_ngram: 3}
    segmenter: {max_segment_tokens: 512, segment_overlap_tokens: 64}
    backends: {nli_url: null, sbd_url: null, rewriter_url: null}

Environment variables override the file: ``HALLGUARD_CONFIG`` (path of the
file itself), ``HALLGUARD_MODEL_PATH``, ``HALLGUARD_NLI_URL``,
``HALLGUARD_SBD_URL`` and ``HALLGUARD_REWRITER_URL``.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml

from ..ner import NerConfig
from ..nli import Aggregation, NliConfig
from ..pipeline import FailurePolicy
from ..rewrite import LoopConfig, PromptVersion
from ..sbd import SbdConfig
from ..segmentation import SegmenterConfig

ENV_CONFIG = "HALLGUARD_CONFIG"
ENV_OVERRIDES = {
    "HALLGUARD_MODEL_PATH": ("model_path",),
    "HALLGUARD_NLI_URL": ("backends", "nli_url"),
    "HALLGUARD_SBD_URL": ("backends", "sbd_url"),
    "HALLGUARD_REWRITER_URL": ("backends", "rewriter_url"),
}


class Variant(str, enum.Enum):
    DETECT_ONLY = "detect_only"
    DETECT_AND_MITIGATE = "detect_and_mitigate"


@dataclass(frozen=True)
class Backends:
    nli_url: Optional[str] = None
    sbd_url: Optional[str] = None
    rewriter_url: Optional[str] = None


@dataclass(frozen=True)
class PipelineConfig:
    name: str = "default"
    variant: Variant = Variant.DETECT_AND_MITIGATE
    detectors: Mapping[str, bool] = field(default_factory=lambda: {"ner": True, "nli": True, "sbd": True})
    timeout_ms: float = 300.0
    deadline_ms: float = 5000.0
    failure_policy: FailurePolicy = FailurePolicy.FAIL_CLOSED
    privacy: bool = True
    model_path: Optional[str] = None
    loop: LoopConfig = LoopConfig()
    ner: NerConfig = NerConfig()
    nli: NliConfig = NliConfig()
    sbd: SbdConfig = SbdConfig()
    segmenter: SegmenterConfig = SegmenterConfig()
    backends: Backends = Backends()

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "failure_policy", FailurePolicy(self.failure_policy))
        unknown = set(self.detectors) - {"ner", "nli", "sbd"}
        if unknown:
            raise ValueError(f"unknown detectors: {sorted(unknown)}")
        if not any(self.detectors.values()):
            raise ValueError("at least one detector must be enabled")
        if self.timeout_ms <= 0 or self.deadline_ms <= 0:
            raise ValueError("timeouts must be positive")
        if self.timeout_ms >= self.deadline_ms:
            raise ValueError("per-detector timeout must be below the total deadline")

    @property
    def enabled_detectors(self):
        return tuple(name for name in ("ner", "nli", "sbd") if self.detectors.get(name, False))

    def loop_config(self) -> LoopConfig:
        """The loop settings with the request deadline applied."""
        deadline = self.deadline_ms / 1000.0
        if self.loop.deadline is not None:
            deadline = min(deadline, self.loop.deadline)
        return dataclasses.replace(self.loop, deadline=deadline)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "variant": self.variant.value,
            "detectors": {k: bool(self.detectors.get(k, False)) for k in ("ner", "nli", "sbd")},
            "timeout_ms": self.timeout_ms,
            "deadline_ms": self.deadline_ms,
            "failure_policy": self.failure_policy.value,
            "privacy": self.privacy,
            "model_path": self.model_path,
            "loop": {
                "max_iterations": self.loop.max_iterations,
                "prompt_version": self.loop.prompt_version.value,
                "detection_threshold": self.loop.detection_threshold,
                "verification_threshold": self.loop.verification_threshold,
                "token_budget": self.loop.token_budget,
            },
            "ner": self.ner.to_dict(),
            "nli": {"sentence_threshold": self.nli.sentence_threshold,
                    "aggregation": self.nli.aggregation.value, "k": self.nli.k},
            "sbd": dataclasses.asdict(self.sbd),
            "segmenter": {"max_segment_tokens": self.segmenter.max_segment_tokens,
                          "segment_overlap_tokens": self.segmenter.segment_overlap_tokens},
            "backends": dataclasses.asdict(self.backends),
        }

    @property
    def config_hash(self) -> str:
        """Hash of everything that affects verdicts; the name is only a label."""
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw: Dict[str, Any] = {k: d[k] for k in ("name", "variant", "timeout_ms", "deadline_ms",
                                                 "failure_policy", "privacy", "model_path") if k in d}
        if "detectors" in d:
            kw["detectors"] = {"ner": True, "nli": True, "sbd": True, **d["detectors"]}
        if "loop" in d:
            loop = dict(d["loop"])
            if "prompt_version" in loop:
                loop["prompt_version"] = PromptVersion(loop["prompt_version"])
            kw["loop"] = LoopConfig(**loop)
        if "ner" in d:
            kw["ner"] = NerConfig.from_dict(d["ner"])
        if "nli" in d:
            nli = dict(d["nli"])
            if "aggregation" in nli:
                nli["aggregation"] = Aggregation(nli["aggregation"])
            kw["nli"] = NliConfig(**nli)
        if "sbd" in d:
            kw["sbd"] = SbdConfig(**d["sbd"])
        if "segmenter" in d:
            kw["segmenter"] = SegmenterConfig(**d["segmenter"])
        if "backends" in d:
            kw["backends"] = Backends(**d["backends"])
        return cls(**kw)


def _read(path: Union[str, Path]) -> Dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def load_config(path: Optional[Union[str, Path]] = None,
                environ: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    """Read ``path`` (or ``$HALLGUARD_CONFIG``), then apply environment overrides."""
    env = os.environ if environ is None else environ
    path = path or env.get(ENV_CONFIG)
    data = _read(path) if path else {}
    for var, keys in ENV_OVERRIDES.items():
        if env.get(var):
            target = data
            for k in keys[:-1]:
                target = target.setdefault(k, {})
            target[keys[-1]] = env[var]
    return PipelineConfig.from_dict(data)
