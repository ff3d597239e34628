"""One-shot LLM classification baseline."""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .datasets import Post
from .errors import EmptyDataset, EmptyInput
from .llm import LlmClient, RateLimiter, call_with_retry

ONESHOT_MARKER = "You are a hate speech detection bot."
ONESHOT_INSTRUCTIONS = {
    "v1": (
        "You are a hate speech detection bot. Given a text, respond with the classification "
        "label towards given text with either hateful labeled as 1 or non-hateful labeled as 0. "
        "Note: It is essential to give classification for all the texts."
    ),
}
DEFAULT_ONESHOT_VERSION = "v1"

_LABEL_RE = re.compile(r"(?<![\w.])([01])(?![\w]|\.\d)")


@dataclass
class OneShotResult:
    post_id: str
    raw_output: str
    label: int | None
    abstain: bool
    latency: float = 0.0

    def __post_init__(self):
        if (self.label is None) != self.abstain:
            raise ValueError("a result carries a label xor is flagged abstain")


@dataclass
class OneShotReport:
    accuracy: float | None
    abstain_rate: float
    n_posts: int
    n_abstain: int
    strict: bool
    model_id: str = ""
    prompt_version: str = DEFAULT_ONESHOT_VERSION
    results: list[OneShotResult] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("results")
        return d


def build_oneshot_prompt(text: str, exemplar: tuple[str, int], version: str = DEFAULT_ONESHOT_VERSION) -> str:
    ex_text, ex_label = exemplar
    if not text or not text.strip() or not ex_text or not ex_text.strip():
        raise EmptyInput("query and exemplar texts must be non-empty")
    if ex_label not in (0, 1):
        raise ValueError("exemplar label must be 0 or 1")
    return (
        f"{ONESHOT_INSTRUCTIONS[version]}\n"
        f'Text: "{ex_text.strip()}"\n'
        f"Label: {ex_label}\n"
        f'Text: "{text.strip()}"\n'
        f"Label:"
    )


def query_from_oneshot_prompt(prompt: str) -> str:
    body = prompt.rsplit('\nText: "', 1)[1]
    return body.rsplit('"\nLabel:', 1)[0]


def parse_oneshot_label(reply: str) -> int | None:
    """The label if the reply names exactly one of 0/1 as a standalone token, else None."""
    found = set(_LABEL_RE.findall(reply or ""))
    return int(found.pop()) if len(found) == 1 else None


def classify_oneshot(text: str, client: LlmClient, exemplar: tuple[str, int], *, post_id: str = "",
                     version: str = DEFAULT_ONESHOT_VERSION, rate_limiter: RateLimiter | None = None,
                     sleep=time.sleep) -> OneShotResult:
    prompt = build_oneshot_prompt(text, exemplar, version)
    t0 = time.perf_counter()
    raw = call_with_retry(client, prompt, rate_limiter=rate_limiter, sleep=sleep)
    latency = time.perf_counter() - t0
    label = parse_oneshot_label(raw)
    return OneShotResult(post_id, raw, label, label is None, latency)


def evaluate_oneshot(posts: Sequence[Post], client: LlmClient, exemplar: tuple[str, int], *,
                     strict: bool = False, version: str = DEFAULT_ONESHOT_VERSION, max_workers: int = 4,
                     rate_limiter: RateLimiter | None = None) -> OneShotReport:
    """Accuracy over parsed replies; abstentions are excluded (lenient) or scored wrong (strict).

    In lenient mode accuracy is None when every reply abstains.
    """
    if not posts:
        raise EmptyDataset("no posts")

    def one(post):
        return classify_oneshot(post.text, client, exemplar, post_id=post.id, version=version,
                                rate_limiter=rate_limiter)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        results = list(pool.map(one, posts))
    gold = {p.id: p.label for p in posts}
    results.sort(key=lambda r: r.post_id)

    n_abstain = sum(r.abstain for r in results)
    correct = sum(1 for r in results if not r.abstain and r.label == gold[r.post_id])
    denom = len(results) if strict else len(results) - n_abstain
    return OneShotReport(
        accuracy=correct / denom if denom else None,
        abstain_rate=n_abstain / len(results),
        n_posts=len(results),
        n_abstain=n_abstain,
        strict=strict,
        model_id=client.model_id,
        prompt_version=version,
        results=results,
    )


def write_oneshot_results(report: OneShotReport, results_path, summary_path, latency_log=None) -> None:
    """Results and summary are reproducible byte for byte; wall-clock latency goes to the log only."""
    results_path, summary_path = Path(results_path), Path(summary_path)
    results_path.parent.mkdir(parents=True, exist_ok=True)
    with results_path.open("w", encoding="utf-8") as fh:
        for r in report.results:
            rec = asdict(r)
            rec.pop("latency")
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    if latency_log is not None:
        with Path(latency_log).open("w", encoding="utf-8") as fh:
            for r in report.results:
                fh.write(json.dumps({"post_id": r.post_id, "latency": r.latency, "logged_at": time.time()}) + "\n")
    summary_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
