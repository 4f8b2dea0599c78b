"""Command-line entry point: ``hallguard <subcommand> --help`` for details."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .ensemble import EnsembleModel, GbdtConfig
from .evaluation.corpus import generate_corrupted_corpus, read_jsonl, synthesize_documents, write_jsonl
from .evaluation.flight import read_traffic, run_flight, traffic_from_records
from .evaluation.judge import LexicalJudge, OracleJudge
from .evaluation.metrics import evaluate_detection, evaluate_mitigation
from .features import DetectorFeaturizer
from .service.config import PipelineConfig, load_config
from .training import featurize_records, fit_calibrated, read_feature_csv, write_feature_csv


def _load_model(path: Optional[str], config: Optional[PipelineConfig] = None) -> EnsembleModel:
    path = path or (config.model_path if config else None)
    if path:
        return EnsembleModel.load(path)
    from .training import default_model

    return default_model()


def _featurizer(config: PipelineConfig) -> DetectorFeaturizer:
    return DetectorFeaturizer(config.ner, config.nli, config.sbd, config.segmenter)


def _judge(name: str, records):
    if name == "oracle":
        return OracleJudge(records)
    return LexicalJudge()


def _emit(text: str, out: Optional[str]) -> None:
    print(text)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")


def cmd_generate(args) -> int:
    docs = synthesize_documents(args.seed, args.docs)
    records = generate_corrupted_corpus(args.seed, docs, args.per_doc, args.mix, args.positive_fraction)
    write_jsonl(records, args.output)
    pos = sum(r.label for r in records)
    print(f"wrote {len(records)} records ({pos} corrupted, {len(records) - pos} clean) to {args.output}")
    return 0


def cmd_featurize(args) -> int:
    records = read_jsonl(args.dataset)
    X, y = featurize_records(records, _featurizer(load_config(args.config)))
    write_feature_csv(args.output, X, y, [r.id for r in records])
    print(f"wrote {len(records)} feature rows to {args.output}")
    return 0


def cmd_train(args) -> int:
    if args.dataset.endswith(".csv"):
        X, y = read_feature_csv(args.dataset)
    else:
        X, y = featurize_records(read_jsonl(args.dataset), _featurizer(load_config(args.config)))
    cfg = GbdtConfig(args.rounds, args.max_depth, args.learning_rate, args.min_samples_leaf, args.l2)
    model = fit_calibrated(X, y, cfg, args.seed, args.verification_precision)
    model.save(args.output)
    t = model.thresholds
    print(f"trained {len(model.trees)} trees on {len(y)} rows; detection threshold "
          f"{t['detection']:.4f}, verification threshold {t['verification']:.4f}; model {model.model_hash}")
    return 0


def cmd_eval_detect(args) -> int:
    config = load_config(args.config)
    records = read_jsonl(args.dataset)
    model = _load_model(args.model, config)
    metrics = evaluate_detection(records, model, args.threshold, _featurizer(config))
    _emit(metrics.table(), args.report)
    if args.jsonl:
        with open(args.jsonl, "w", encoding="utf-8") as fh:
            for row in metrics.to_rows():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


def cmd_eval_mitigate(args) -> int:
    from .service.runtime import GuardPipeline

    config = load_config(args.config)
    records = read_jsonl(args.dataset)
    pipe = GuardPipeline(config, _load_model(args.model, config))
    try:
        metrics = evaluate_mitigation(records, pipe, _judge(args.judge, records))
    finally:
        pipe.close()
    _emit(metrics.table(), args.report)
    if args.jsonl:
        Path(args.jsonl).write_text(json.dumps(metrics.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_flight(args) -> int:
    if args.traffic.endswith(".jsonl") and args.judge == "oracle":
        records = read_jsonl(args.traffic)
        traffic = traffic_from_records(records)
    else:
        records = []
        traffic = read_traffic(args.traffic)
    variants = [load_config(path, environ={}) for path in args.configs]
    model = EnsembleModel.load(args.model) if args.model else None
    report = run_flight(traffic, variants, _judge(args.judge, records), model, workers=args.workers)
    _emit(report.table(), args.report)
    report.write_jsonl(args.jsonl, args.outcomes)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import build_service, create_app

    config = load_config(args.config)
    model = EnsembleModel.load(args.model) if args.model else None
    uvicorn.run(create_app(build_service(config, model)), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hallguard", description="Hallucination detection and mitigation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic labelled corpus (JSON lines)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--docs", type=int, default=100, help="number of source documents")
    g.add_argument("--per-doc", type=int, default=4, help="records per document")
    g.add_argument("--mix", default=None,
                   help="corruption weights, e.g. entity_swap=2,number=1 (default: uniform over all four)")
    g.add_argument("--positive-fraction", type=float, default=0.5)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("featurize", help="run the detectors and write a feature CSV")
    f.add_argument("dataset")
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--config")
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="train and calibrate the ensemble (dataset: .jsonl corpus or .csv features)")
    t.add_argument("dataset")
    t.add_argument("-o", "--output", required=True, help="model JSON file")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--rounds", type=int, default=50)
    t.add_argument("--max-depth", type=int, default=3)
    t.add_argument("--learning-rate", type=float, default=0.1)
    t.add_argument("--min-samples-leaf", type=int, default=5)
    t.add_argument("--l2", type=float, default=1.0)
    t.add_argument("--verification-precision", type=float, default=0.8)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-detect", help="per-detector and ensemble precision/recall/F1")
    e.add_argument("dataset")
    e.add_argument("--model", help="model JSON (default: bundled synthetic model)")
    e.add_argument("--config")
    e.add_argument("--threshold", type=float, help="override the model's detection threshold")
    e.add_argument("--report", help="also write the text table here")
    e.add_argument("--jsonl", help="write one JSON row per method here")
    e.set_defaults(func=cmd_eval_detect)

    m = sub.add_parser("eval-mitigate", help="mitigation rate of the detect-rewrite-verify loop")
    m.add_argument("dataset")
    m.add_argument("--model")
    m.add_argument("--config")
    m.add_argument("--judge", choices=("oracle", "lexical"), default="oracle")
    m.add_argument("--report")
    m.add_argument("--jsonl")
    m.set_defaults(func=cmd_eval_mitigate)

    fl = sub.add_parser("flight", help="replay traffic through several pipeline configs")
    fl.add_argument("traffic", help="traffic JSONL ({id, timestamp, document, response}) or a generated corpus")
    fl.add_argument("configs", nargs="+", help="one config file per variant; names must differ")
    fl.add_argument("--model")
    fl.add_argument("--judge", choices=("oracle", "lexical"), default="lexical",
                    help="oracle needs a generated corpus as traffic")
    fl.add_argument("--workers", type=int, default=1, help=">1 replays concurrently (latency not comparable)")
    fl.add_argument("--report")
    fl.add_argument("--jsonl", required=True, help="per-variant metric rows")
    fl.add_argument("--outcomes", help="per-record outcomes")
    fl.set_defaults(func=cmd_flight)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--config")
    s.add_argument("--model")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
