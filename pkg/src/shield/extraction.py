"""LLM rationale extraction: prompt, response parsing, offline lexicon mock, disk cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import EmptyInput, ParseError, StorageError
from .llm import LlmClient, RateLimiter, call_with_retry

logger = logging.getLogger(__name__)

PROMPT_TEMPLATES = {
    "v1": (
        "You are a content moderation bot. Identify the list of rationales, list of "
        "derogatory language, list of cuss words that promote a hateful sentiment and "
        "respond with non-hateful if there are none. Note: The output should be in a "
        "json format.\n"
        "Text: [input_text]"
    ),
}
DEFAULT_PROMPT_VERSION = "v1"
_TEXT_SLOT = "[input_text]"

CATEGORIES = ("rationales", "derogatory_language", "cuss_words")
_KEY_ALIASES = {
    "rationales": "rationales",
    "rationale": "rationales",
    "derogatory language": "derogatory_language",
    "derogatory": "derogatory_language",
    "cuss words": "cuss_words",
    "cuss word": "cuss_words",
    "profanity": "cuss_words",
}
# list items that mean "nothing here" rather than a feature
_EMPTY_ITEMS = {"", "none", "n/a", "na", "null", "nil", "non-hateful", "non hateful", "nonhateful"}
_NON_HATEFUL_RE = re.compile(r"non[\s_-]?hateful", re.IGNORECASE)


@dataclass
class FeatureSet:
    rationales: list[str] = field(default_factory=list)
    derogatory_language: list[str] = field(default_factory=list)
    cuss_words: list[str] = field(default_factory=list)
    non_hateful: bool = False
    raw_response: str = ""
    prompt_version: str = ""
    model_id: str = ""

    def __post_init__(self):
        for name in CATEGORIES:
            items = [str(x).strip() for x in getattr(self, name)]
            setattr(self, name, [x for x in items if x])
        if self.non_hateful and self.items():
            raise ValueError("a non-hateful FeatureSet cannot carry features")

    def items(self) -> list[str]:
        """All features, categories concatenated in fixed order."""
        return self.rationales + self.derogatory_language + self.cuss_words

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSet":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def build_feature_prompt(text: str, template_version: str = DEFAULT_PROMPT_VERSION) -> str:
    if not text or not text.strip():
        raise EmptyInput("cannot build a prompt for blank text")
    try:
        template = PROMPT_TEMPLATES[template_version]
    except KeyError:
        raise ValueError(f"unknown prompt version {template_version!r}") from None
    return template.replace(_TEXT_SLOT, text)


def text_from_feature_prompt(prompt: str) -> str:
    """Inverse of build_feature_prompt for any known template."""
    for template in PROMPT_TEMPLATES.values():
        head, _, tail = template.partition(_TEXT_SLOT)
        if prompt.startswith(head) and prompt.endswith(tail):
            return prompt[len(head): len(prompt) - len(tail)]
    raise ValueError("not a feature-extraction prompt")


# --- response parsing -------------------------------------------------------

def _normalize_key(key: str) -> str:
    key = re.sub(r"[_\-\s]+", " ", key.strip().lower())
    return re.sub(r"^list of ", "", key)


def _as_items(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (str, int, float)) and not isinstance(value, bool):
        value = [value]
    if isinstance(value, dict):
        value = list(value.values())
    if not isinstance(value, list):
        return []
    items = []
    for v in value:
        if isinstance(v, (dict, list)):
            items.extend(_as_items(v))
        elif v is not None and not isinstance(v, bool):
            s = str(v).strip()
            if s.lower() not in _EMPTY_ITEMS:
                items.append(s)
    return items


def _is_non_hateful_answer(s: str) -> bool:
    return bool(_NON_HATEFUL_RE.fullmatch(s.strip().strip("\"'`.!").strip()))


def _outermost_object(s: str) -> str | None:
    """First balanced ``{...}`` span, ignoring braces inside JSON strings."""
    start = s.find("{")
    while start != -1:
        depth, in_str, esc = 0, False, False
        for i in range(start, len(s)):
            ch = s[i]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return s[start: i + 1]
        start = s.find("{", start + 1)
    return None


def _from_json_value(value, raw: str) -> FeatureSet | None:
    if isinstance(value, str):
        return FeatureSet(non_hateful=True, raw_response=raw) if _is_non_hateful_answer(value) else None
    if isinstance(value, list):
        if value and all(isinstance(v, str) and _is_non_hateful_answer(v) for v in value):
            return FeatureSet(non_hateful=True, raw_response=raw)
        return None
    if not isinstance(value, dict):
        return None

    found: dict[str, list[str]] = {}
    for key, v in value.items():
        canon = _KEY_ALIASES.get(_normalize_key(str(key)))
        if canon is not None:
            found.setdefault(canon, []).extend(_as_items(v))
    if not found:
        # {"label": "non-hateful"} style wrappers
        if any(isinstance(v, str) and _is_non_hateful_answer(v) for v in value.values()):
            return FeatureSet(non_hateful=True, raw_response=raw)
        if len(value) == 1:
            return _from_json_value(next(iter(value.values())), raw)
        return None
    if not any(found.values()):
        return FeatureSet(non_hateful=True, raw_response=raw)
    return FeatureSet(
        rationales=found.get("rationales", []),
        derogatory_language=found.get("derogatory_language", []),
        cuss_words=found.get("cuss_words", []),
        raw_response=raw,
    )


def parse_feature_response(raw: str, *, prompt_version: str = "", model_id: str = "") -> FeatureSet:
    """Interpret one model reply. Raises ParseError and nothing else."""
    try:
        fs = _parse(raw)
    except ParseError:
        raise
    except Exception as exc:  # totality: any surprise becomes a ParseError
        raise ParseError(f"unparseable response: {type(exc).__name__}", raw=raw) from exc
    fs.prompt_version = prompt_version
    fs.model_id = model_id
    return fs


def _parse(raw: str) -> FeatureSet:
    if not isinstance(raw, str):
        raise ParseError("response is not text", raw=str(raw))
    text = raw.strip()
    if not text:
        raise ParseError("empty response", raw=raw)
    if _is_non_hateful_answer(text):
        return FeatureSet(non_hateful=True, raw_response=raw)

    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL | re.IGNORECASE)
    candidates = [text]
    if fence:
        candidates.append(fence.group(1).strip())
    obj = _outermost_object(text)
    if obj is not None:
        candidates.append(obj)

    for cand in candidates:
        try:
            value = json.loads(cand)
        except ValueError:
            continue
        fs = _from_json_value(value, raw)
        if fs is not None:
            return fs
    raise ParseError("no feature JSON or non-hateful answer found", raw=raw)


# --- offline lexicon mock ---------------------------------------------------

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def _term_pattern(term: str) -> re.Pattern:
    return re.compile(r"(?<![\w*])" + re.escape(term) + r"(?![\w*])", re.IGNORECASE)


def lexicon_extract(text: str, lexicon: Mapping[str, str]) -> FeatureSet:
    """Deterministic stand-in for the LLM.

    Terms match case-insensitively on whole tokens and are reported in their
    lexicon spelling, in order of first occurrence. Every sentence holding a
    match becomes a rationale.
    """
    if not lexicon:
        raise ValueError("lexicon is empty")
    routed: dict[str, list[tuple[int, str]]] = {c: [] for c in CATEGORIES}
    spans = []
    for term, category in lexicon.items():
        canon = _KEY_ALIASES.get(_normalize_key(category))
        if canon is None:
            raise ValueError(f"unknown lexicon category {category!r} for {term!r}")
        hits = list(_term_pattern(term).finditer(text))
        if hits:
            routed[canon].append((hits[0].start(), term))
            spans.extend((m.start(), m.end()) for m in hits)
    if not spans:
        return FeatureSet(non_hateful=True)

    rationales = []
    pos = 0
    for sentence in _SENTENCE_SPLIT.split(text):
        begin = text.index(sentence, pos)
        end = begin + len(sentence)
        pos = end
        if any(begin <= s < end for s, _ in spans) and sentence.strip() not in rationales:
            rationales.append(sentence.strip())

    def ordered(cat):
        return [t for _, t in sorted(routed[cat])]

    return FeatureSet(
        rationales=rationales + ordered("rationales"),
        derogatory_language=ordered("derogatory_language"),
        cuss_words=ordered("cuss_words"),
    )


# --- cache ------------------------------------------------------------------

def normalize_input(text: str) -> str:
    return unicodedata.normalize("NFC", text.strip())


def cache_key(model_id: str, prompt_version: str, decoding_params: Mapping, text: str) -> str:
    payload = json.dumps(
        {
            "model_id": model_id,
            "prompt_version": prompt_version,
            "decoding": dict(sorted(decoding_params.items())),
            "text": normalize_input(text),
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ExtractionCacheEntry:
    key: str
    value: FeatureSet
    created_at: float


class ExtractionCache:
    """One JSON file per entry at ``<root>/<key[:2]>/<key>.json``."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create cache dir {self.root}: {exc}") from exc
        if not os.access(self.root, os.W_OK):
            raise StorageError(f"cache dir {self.root} is not writable")

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def lookup(self, key: str) -> FeatureSet | None:
        path = self.path_for(key)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, ValueError) as exc:
            logger.warning("ignoring unreadable cache entry %s: %s", path, exc)
            return None
        return FeatureSet.from_dict(data["value"])

    def store(self, key: str, fs: FeatureSet) -> Path:
        entry = {"key": key, "created_at": time.time(), "value": fs.to_dict()}
        return _atomic_write(self.path_for(key), json.dumps(entry, ensure_ascii=False, indent=1))

    def record_failure(self, key: str, raw: str) -> Path:
        return _atomic_write(self.root / "failed" / f"{key}.txt", raw)


def _atomic_write(path: Path, content: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def cache_lookup(cache: ExtractionCache, key: str) -> FeatureSet | None:
    return cache.lookup(key)


def cache_store(cache: ExtractionCache, key: str, fs: FeatureSet) -> Path:
    return cache.store(key, fs)


# --- extraction ---------------------------------------------------------------

def extract_features(
    text: str,
    client: LlmClient,
    cache: ExtractionCache | None = None,
    *,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
    rate_limiter: RateLimiter | None = None,
    sleep=time.sleep,
) -> FeatureSet:
    key = cache_key(client.model_id, prompt_version, client.decoding_params, text)
    if cache is not None:
        hit = cache.lookup(key)
        if hit is not None:
            return hit
    prompt = build_feature_prompt(normalize_input(text), prompt_version)
    raw = call_with_retry(client, prompt, rate_limiter=rate_limiter, sleep=sleep)
    try:
        fs = parse_feature_response(raw, prompt_version=prompt_version, model_id=client.model_id)
    except ParseError:
        if cache is not None:
            where = cache.record_failure(key, raw)
            logger.error("unparseable LLM response kept at %s", where)
        raise
    if cache is not None:
        cache.store(key, fs)
    return fs


def extract_corpus(
    posts: Iterable,
    client: LlmClient,
    cache: ExtractionCache | None = None,
    *,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
    max_workers: int = 4,
    rate_limiter: RateLimiter | None = None,
) -> dict[str, FeatureSet]:
    """Extract features for every post with bounded parallelism; keyed by post id."""
    posts = list(posts)

    def one(post):
        return extract_features(post.text, client, cache, prompt_version=prompt_version,
                                rate_limiter=rate_limiter)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        results = list(pool.map(one, posts))
    return {p.id: fs for p, fs in zip(posts, results)}


def write_features_jsonl(features: Mapping[str, FeatureSet], path) -> Path:
    lines = []
    for post_id, fs in features.items():
        lines.append(json.dumps({
            "post_id": post_id,
            "rationales": fs.rationales,
            "derogatory_language": fs.derogatory_language,
            "cuss_words": fs.cuss_words,
            "non_hateful": fs.non_hateful,
            "model_id": fs.model_id,
            "prompt_version": fs.prompt_version,
        }, ensure_ascii=False))
    return _atomic_write(Path(path), "".join(line + "\n" for line in lines))


def read_features_jsonl(path) -> dict[str, FeatureSet]:
    features = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                features[str(rec.pop("post_id"))] = FeatureSet.from_dict(rec)
    return features
