"""Randomized rewriter used by the loop-safety fuzz tests."""

import random

from hallguard.features import prepare
from hallguard.rewrite import FinalAction, LoopConfig, PromptVersion, run_loop
from hallguard.segmentation import count_tokens
from hallguard.stubs import IdentityRewriter, SpanDeletingRewriter


class FuzzRewriter:
    """Picks a random behaviour per call and remembers every token count it reports."""

    BEHAVIOURS = ("delete", "identity", "garbage", "empty", "raise", "out_of_range", "inject", "negative")

    def __init__(self, rng):
        self.rng = rng
        self.reported = []
        self.delete = SpanDeletingRewriter()
        self.identity = IdentityRewriter()

    def rewrite(self, prompt):
        kind = self.rng.choice(self.BEHAVIOURS)
        if kind == "raise":
            raise ConnectionError("backend down")
        if kind == "delete":
            text, _ = self.delete.rewrite(prompt)
        elif kind == "identity":
            text, _ = self.identity.rewrite(prompt)
        elif kind == "garbage":
            text = "Totally different words about Zanzibar."
        elif kind == "empty":
            text = ""
        elif kind == "out_of_range":
            text = "[99] nothing"
        elif kind == "negative":
            return "x", -1
        else:
            text = "[1] Maria Gonzalez founded Fabrikam in Lisbon."
        tokens = count_tokens(text) + self.rng.randint(0, 3)
        self.reported.append(tokens)
        return text, tokens


def run_fuzz(detector, records, trials, seed=0):
    rng = random.Random(seed)
    failures = []
    for trial in range(trials):
        rec = rng.choice(records)
        det = rng.uniform(0.05, 0.95)
        cfg = LoopConfig(
            max_iterations=rng.randint(1, 4),
            prompt_version=rng.choice(list(PromptVersion)),
            detection_threshold=det,
            verification_threshold=rng.uniform(det, 1.0),
            token_budget=rng.choice([None, None, 5, 40]),
        )
        rewriter = FuzzRewriter(random.Random(rng.random()))
        doc, resp = prepare(rec.document, rec.response)
        s = run_loop(doc, resp, detector, rewriter, cfg)
        problems = []
        if len(s.iterations) > cfg.max_iterations:
            problems.append("too many iterations")
        delivered = s.final_action is not FinalAction.BLOCK
        if delivered and s.final_score >= cfg.verification_threshold:
            problems.append("delivered above verification threshold")
        if not delivered and s.final_score < cfg.verification_threshold:
            problems.append("blocked below verification threshold")
        if s.output_tokens != sum(rewriter.reported):
            problems.append("token mismatch")
        if (s.final_action is FinalAction.PASS) != (not s.initial.verdict.hallucinated):
            problems.append("pass iff clean violated")
        if s.final_action is FinalAction.PASS and s.final_text != rec.response:
            problems.append("pass changed text")
        if problems:
            failures.append((trial, problems))
    return failures
