"""Agreement between LLM-extracted rationales and human rationale spans."""

from __future__ import annotations

import html
import json
import math
import string
import unicodedata
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch

from .datasets import Post, RationaleSpan
from .errors import EmptyInput, EmptyIntersection, StorageError
from .extraction import FeatureSet

LLM, HUMAN = "llm", "human"


@lru_cache(maxsize=1)
def _stopword_file() -> tuple[str, frozenset[str]]:
    text = resources.files("shield").joinpath("data/stopwords_en.txt").read_text(encoding="utf-8")
    version = "unknown"
    words = []
    for line in text.splitlines():
        if line.startswith("#"):
            if "version:" in line:
                version = line.split("version:", 1)[1].strip()
            continue
        if line.strip():
            words.append(line.strip())
    # entries go through the same normalization as tokens, so "don't" also removes "dont"
    return version, frozenset(w for w in (_strip_punct(x.lower()) for x in words) if w)


def stopwords() -> frozenset[str]:
    return _stopword_file()[1]


def stopwords_version() -> str:
    return _stopword_file()[0]


def _strip_punct(s: str) -> str:
    return "".join(ch for ch in s if ch not in string.punctuation and not unicodedata.category(ch).startswith("P"))


def normalize_token(token: str) -> str:
    """Normalized form of one surface token; ``""`` when it is punctuation or a stop-word."""
    t = _strip_punct(token.lower()).strip()
    return "" if t in stopwords() else t


@dataclass(frozen=True)
class TokenSet:
    tokens: frozenset[str]
    source: str

    def __len__(self):
        return len(self.tokens)

    def __bool__(self):
        return bool(self.tokens)


def span_tokens(post: Post, span: RationaleSpan) -> tuple[str, ...]:
    return span.tokens or tuple(post.text.split()[span.token_start: span.token_end])


def normalize_tokens(text_or_spans, source: str = LLM) -> TokenSet:
    """Lowercase, drop punctuation, split on whitespace, drop stop-words, deduplicate.

    Accepts a string, an iterable of strings, or an iterable of RationaleSpans.
    """
    if isinstance(text_or_spans, str):
        pieces = [text_or_spans]
    else:
        pieces = [" ".join(x.tokens) if isinstance(x, RationaleSpan) else str(x) for x in text_or_spans]
    tokens = {normalize_token(t) for piece in pieces for t in piece.split()}
    tokens.discard("")
    return TokenSet(frozenset(tokens), source)


def _as_set(x) -> frozenset:
    return x.tokens if isinstance(x, TokenSet) else frozenset(x)


def overlap_similarity(a, b) -> float:
    """Overlap coefficient ``|a & b| / min(|a|, |b|)``."""
    a, b = _as_set(a), _as_set(b)
    if not a or not b:
        raise EmptyInput("overlap of an empty token set is undefined")
    return len(a & b) / min(len(a), len(b))


def jaccard_similarity(a, b) -> float:
    a, b = _as_set(a), _as_set(b)
    if not a or not b:
        raise EmptyInput("jaccard of an empty token set is undefined")
    return len(a & b) / len(a | b)


def _embed(text: str, encoder) -> torch.Tensor:
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder([text])[0].double()
    finally:
        encoder.train(was_training)


def semantic_similarity(a_text: str, b_text: str, encoder) -> float:
    """Cosine of the two first-token embeddings; 0.0 if either vector is zero."""
    if not a_text.strip() or not b_text.strip():
        raise EmptyInput("semantic similarity needs two non-empty texts")
    u, v = _embed(a_text, encoder), _embed(b_text, encoder)
    denom = torch.linalg.vector_norm(u) * torch.linalg.vector_norm(v)
    if denom == 0:
        return 0.0
    return max(-1.0, min(1.0, float(u @ v / denom)))


@dataclass
class AlignmentExample:
    post_id: str
    overlap: float
    cosine: float | None
    jaccard: float


@dataclass
class AlignmentResult:
    per_example: list[AlignmentExample] = field(default_factory=list)
    aggregate_overlap: float | None = None
    aggregate_cosine: float | None = None
    aggregate_jaccard: float | None = None
    n_evaluated: int = 0
    n_skipped: int = 0
    stopwords_version: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def llm_rationale_text(fs: FeatureSet) -> str:
    return "; ".join(fs.items())


def human_rationale_text(post: Post) -> str:
    return "; ".join(" ".join(span_tokens(post, s)) for s in post.human_rationales or [])


def human_token_set(post: Post) -> TokenSet:
    return normalize_tokens([" ".join(span_tokens(post, s)) for s in post.human_rationales or []], HUMAN)


def llm_token_set(fs: FeatureSet) -> TokenSet:
    return normalize_tokens(fs.items(), LLM)


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def align_corpus(extracted: Mapping[str, FeatureSet], human: Iterable[Post], encoder=None) -> AlignmentResult:
    """Score every human-annotated post that also has LLM features.

    Posts missing on either side, or empty after normalization on either
    side, are counted in ``n_skipped``. Cosine needs ``encoder``; without one
    it is reported as None.
    """
    human = list(human)
    if human and extracted and not any(p.id in extracted for p in human):
        raise EmptyIntersection("no post id is shared by the extracted features and the human annotations")
    result = AlignmentResult(stopwords_version=stopwords_version())
    for post in human:
        fs = extracted.get(post.id)
        if fs is None:
            result.n_skipped += 1
            continue
        llm_set, human_set = llm_token_set(fs), human_token_set(post)
        if not llm_set or not human_set:
            result.n_skipped += 1
            continue
        cosine = None
        if encoder is not None:
            cosine = semantic_similarity(llm_rationale_text(fs), human_rationale_text(post), encoder)
        result.per_example.append(AlignmentExample(
            post.id, overlap_similarity(llm_set, human_set), cosine, jaccard_similarity(llm_set, human_set),
        ))
        result.n_evaluated += 1
    result.aggregate_overlap = _mean([e.overlap for e in result.per_example])
    result.aggregate_jaccard = _mean([e.jaccard for e in result.per_example])
    if encoder is not None:
        result.aggregate_cosine = _mean([e.cosine for e in result.per_example])
    return result


# --- HTML report ------------------------------------------------------------------------

COLORS = {"llm": "#1f4fd1", "human": "#c62828", "both": "#7b1fa2"}


def token_classes(post: Post, fs: FeatureSet | None) -> list[tuple[str, str | None]]:
    """Each surface token with exactly one of ``llm``, ``human``, ``both`` or None.

    A token counts for a side only through its normalized form, so the set of
    normalized ``both`` tokens equals the intersection of the two TokenSets.
    """
    tokens = post.text.split()
    in_span = [False] * len(tokens)
    for s in post.human_rationales or []:
        for i in range(s.token_start, min(s.token_end, len(tokens))):
            in_span[i] = True
    llm_set = llm_token_set(fs).tokens if fs is not None else frozenset()
    out = []
    for tok, marked in zip(tokens, in_span):
        norm = normalize_token(tok)
        is_human = bool(norm) and marked
        is_llm = bool(norm) and norm in llm_set
        cls = "both" if is_human and is_llm else "human" if is_human else "llm" if is_llm else None
        out.append((tok, cls))
    return out


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}%"


def render_overlap_report(posts: Sequence[Post], extracted: Mapping[str, FeatureSet], out_path,
                          result: AlignmentResult | None = None, encoder=None) -> Path:
    """Standalone HTML: LLM-only tokens blue, human-only red, shared purple."""
    if result is None:
        result = align_corpus(extracted, posts, encoder)
    style = "\n".join(f".{k} {{ color: {v}; font-weight: 600; }}" for k, v in COLORS.items())
    parts = [
        "<!DOCTYPE html>",
        '<html lang="en"><head><meta charset="utf-8"><title>Rationale overlap</title>',
        "<style>",
        "body { font-family: sans-serif; max-width: 60em; margin: 2em auto; }",
        "table { border-collapse: collapse; } td, th { border: 1px solid #999; padding: 0.2em 0.6em; }",
        ".post { margin: 0.8em 0; line-height: 1.6; }",
        style,
        "</style></head><body>",
        "<h1>LLM vs human rationales</h1>",
        "<table>",
        f"<tr><th>Overlap coefficient</th><td>{_fmt(result.aggregate_overlap)}</td></tr>",
        f"<tr><th>Cosine similarity</th><td>{_fmt(result.aggregate_cosine)}</td></tr>",
        f"<tr><th>Jaccard</th><td>{_fmt(result.aggregate_jaccard)}</td></tr>",
        f"<tr><th>Evaluated</th><td>{result.n_evaluated}</td></tr>",
        f"<tr><th>Skipped</th><td>{result.n_skipped}</td></tr>",
        f"<tr><th>Stop-words</th><td>{html.escape(result.stopwords_version)}</td></tr>",
        "</table>",
        '<p><span class="llm">LLM only</span> &middot; <span class="human">human only</span> '
        '&middot; <span class="both">both</span></p>',
    ]
    for post in posts:
        rendered = []
        for tok, cls in token_classes(post, extracted.get(post.id)):
            esc = html.escape(tok)
            rendered.append(f'<span class="{cls}">{esc}</span>' if cls else esc)
        parts.append(f'<div class="post" id="post-{html.escape(post.id)}">'
                     f"<b>{html.escape(post.id)}</b>: {' '.join(rendered)}</div>")
    parts.append("</body></html>")
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write report {out_path}: {exc}") from exc
    return out_path
