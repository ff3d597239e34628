"""Corpus loading, cleaning, stratified splitting and Table-1 style statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import EmptyDataset, FormatError, InvalidRatios, MissingField

logger = logging.getLogger(__name__)

PLATFORMS = ("gab", "reddit", "twitter", "youtube", "implicit_hs", "other")
FORMATS = ("jsonl", "csv", "hatexplain")

# Labels mapped to None are dropped at load time (e.g. explicit rows of the implicit corpus).
DEFAULT_LABEL_MAP: dict[str, int | None] = {
    "0": 0, "1": 1,
    "false": 0, "true": 1,
    "hate": 1, "hateful": 1, "hatespeech": 1, "offensive": 1,
    "non-hateful": 0, "non_hateful": 0, "nonhateful": 0, "normal": 0, "not_hate": 0, "none": 0,
    "implicit_hate": 1, "explicit_hate": None,
}
IMPLICIT_HS_LABEL_MAP: dict[str, int | None] = {"implicit_hate": 1, "not_hate": 0, "explicit_hate": None}


@dataclass(frozen=True)
class RationaleSpan:
    token_start: int
    token_end: int
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 <= self.token_start < self.token_end:
            raise ValueError(f"bad span [{self.token_start}, {self.token_end})")


@dataclass
class Post:
    id: str
    text: str
    label: int
    platform: str = "other"
    human_rationales: list[RationaleSpan] | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.platform not in PLATFORMS:
            raise ValueError(f"unknown platform {self.platform!r}")
        if self.human_rationales:
            n = len(self.text.split())
            for span in self.human_rationales:
                if span.token_end > n:
                    raise ValueError(f"span {span} runs past {n} tokens")

    def to_dict(self) -> dict:
        d = {"id": self.id, "text": self.text, "label": self.label, "platform": self.platform}
        if self.human_rationales is not None:
            d["human_rationales"] = [
                {"token_start": s.token_start, "token_end": s.token_end, "tokens": list(s.tokens)}
                for s in self.human_rationales
            ]
        return d


@dataclass(frozen=True)
class DatasetStats:
    n_posts: int
    n_hateful: int
    hate_pct: float = field(init=False)

    def __post_init__(self):
        if not 0 <= self.n_hateful <= self.n_posts:
            raise ValueError("need 0 <= n_hateful <= n_posts")
        object.__setattr__(self, "hate_pct", hate_percentage(self.n_hateful, self.n_posts))


def hate_percentage(n_hateful: int, n_posts: int) -> float:
    # half-up on the exact ratio, so x.x5 boundaries do not depend on float noise
    pct = Decimal(100 * n_hateful) / Decimal(n_posts)
    return float(pct.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


# --- preprocessing ------------------------------------------------------------

_URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_MENTION_RE = re.compile(r"(?<![\w<>])@\w+")
_WS_RE = re.compile(r"\s+")


def preprocess_text(text: str) -> str:
    """Lowercase, ``<url>``/``<user>`` placeholders, single spaces. Idempotent."""
    text = text.lower()
    text = _URL_RE.sub("<url>", text)
    text = _MENTION_RE.sub("<user>", text)
    return _WS_RE.sub(" ", text).strip()


# --- loading ------------------------------------------------------------------

def _map_label(raw, label_map: Mapping[str, int | None], row) -> int | None:
    if isinstance(raw, bool):
        key = str(raw).lower()
    elif isinstance(raw, float) and raw.is_integer():
        key = str(int(raw))
    else:
        key = str(raw).strip().lower()
    if key not in label_map:
        raise FormatError(f"label {raw!r} not in label map", row=row)
    return label_map[key]


def _make_post(rec: Mapping, row, *, label_map, platform, id_field, text_field, label_field) -> Post | None:
    for name in (id_field, text_field, label_field):
        if name not in rec or rec[name] is None or rec[name] == "":
            raise MissingField(name, row=row)
    label = _map_label(rec[label_field], label_map, row)
    if label is None:
        return None
    text = str(rec[text_field])
    if not preprocess_text(text):
        raise FormatError("text is empty after preprocessing", row=row)
    spans = rec.get("human_rationales")
    try:
        return Post(
            id=str(rec[id_field]),
            text=text,
            label=label,
            platform=rec.get("platform") or platform,
            human_rationales=None if spans is None else [
                RationaleSpan(s["token_start"], s["token_end"], tuple(s.get("tokens", ()))) for s in spans
            ],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(str(exc), row=row) from exc


def _iter_jsonl(path: Path):
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError as exc:
                raise FormatError(f"invalid JSON: {exc}", row=lineno) from exc
            if not isinstance(rec, dict):
                raise FormatError("record is not a JSON object", row=lineno)
            yield lineno, rec


def _iter_csv(path: Path):
    delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        try:
            for rec in reader:
                # header is line 1
                yield reader.line_num, rec
        except csv.Error as exc:
            raise FormatError(str(exc), row=reader.line_num) from exc


def load_posts(
    path,
    format: str = "jsonl",
    *,
    label_map: Mapping[str, int | None] | None = None,
    platform: str = "other",
    id_field: str = "id",
    text_field: str = "text",
    label_field: str = "label",
    min_rationale_votes: int | None = None,
) -> list[Post]:
    """Read a whole corpus; either every record loads or a row-addressed error is raised."""
    path = Path(path)
    if format not in FORMATS:
        raise FormatError(f"unknown format {format!r}")
    label_map = {str(k).lower(): v for k, v in (label_map or DEFAULT_LABEL_MAP).items()}
    if format == "hatexplain":
        return load_hatexplain(path, label_map=label_map, min_votes=min_rationale_votes)

    rows = _iter_jsonl(path) if format == "jsonl" else _iter_csv(path)
    posts, dropped = [], 0
    for row, rec in rows:
        post = _make_post(rec, row, label_map=label_map, platform=platform,
                          id_field=id_field, text_field=text_field, label_field=label_field)
        if post is None:
            dropped += 1
        else:
            posts.append(post)
    if dropped:
        logger.info("%s: dropped %d rows whose label maps to no class", path.name, dropped)
    return posts


# --- HateXplain -----------------------------------------------------------------

HATEXPLAIN_LABEL_MAP = {"hatespeech": 1, "offensive": 1, "normal": 0}


def majority_mask(masks: Sequence[Sequence[int]], n_annotators: int, min_votes: int | None = None) -> list[bool]:
    """Token kept when at least a strict majority of annotators marked it."""
    if min_votes is None:
        min_votes = n_annotators // 2 + 1
    if not masks:
        return []
    n_tokens = len(masks[0])
    if any(len(m) != n_tokens for m in masks):
        raise ValueError("rationale masks differ in length")
    return [sum(int(m[i]) for m in masks) >= min_votes for i in range(n_tokens)]


def mask_to_spans(mask: Sequence[bool], tokens: Sequence[str]) -> list[RationaleSpan]:
    spans, start = [], None
    for i, on in enumerate(list(mask) + [False]):
        if on and start is None:
            start = i
        elif not on and start is not None:
            spans.append(RationaleSpan(start, i, tuple(tokens[start:i])))
            start = None
    return spans


def _hatexplain_records(path: Path):
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except ValueError:
        # JSON-lines variant
        for row, rec in _iter_jsonl(path):
            yield row, rec
        return
    if isinstance(data, dict):
        data = list(data.values())
    for i, rec in enumerate(data, 1):
        yield i, rec


def _platform_from_id(post_id: str) -> str:
    suffix = post_id.rsplit("_", 1)[-1].lower()
    return suffix if suffix in PLATFORMS else "other"


def load_hatexplain(path, *, label_map=None, min_votes: int | None = None) -> list[Post]:
    """Records shaped like HateXplain's ``dataset.json``.

    Label is the annotators' majority; posts with no majority are dropped, as
    the dataset itself does. Rationales are majority-voted token masks.
    """
    label_map = label_map if label_map is not None else HATEXPLAIN_LABEL_MAP
    posts, undecided = [], 0
    for row, rec in _hatexplain_records(Path(path)):
        if not isinstance(rec, dict):
            raise FormatError("record is not a JSON object", row=row)
        for name in ("post_id", "post_tokens", "annotators"):
            if name not in rec:
                raise MissingField(name, row=row)
        tokens = [str(t) for t in rec["post_tokens"]]
        votes = Counter(_map_label(a["label"], label_map, row) for a in rec["annotators"])
        (top, n_top), *rest = votes.most_common() or [(None, 0)]
        if top is None or (rest and rest[0][1] == n_top):
            undecided += 1
            continue
        try:
            mask = majority_mask(rec.get("rationales") or [], len(rec["annotators"]), min_votes)
        except ValueError as exc:
            raise FormatError(str(exc), row=row) from exc
        if mask and len(mask) != len(tokens):
            raise FormatError("rationale mask length differs from token count", row=row)
        text = " ".join(tokens)
        if not preprocess_text(text):
            raise FormatError("text is empty after preprocessing", row=row)
        posts.append(Post(
            id=str(rec["post_id"]),
            text=text,
            label=top,
            platform=_platform_from_id(str(rec["post_id"])),
            human_rationales=mask_to_spans(mask, tokens),
        ))
    if undecided:
        logger.info("%s: dropped %d posts without a majority label", Path(path).name, undecided)
    return posts


def write_posts_jsonl(posts: Iterable[Post], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in posts:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
    return path


# --- splitting ------------------------------------------------------------------

def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    exact = [total * w for w in weights]
    sizes = [math.floor(x + 1e-9) for x in exact]
    order = sorted(range(len(weights)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[: total - sum(sizes)]:
        sizes[k] += 1
    return sizes


def _allocate(group_sizes: list[int], ratios: Sequence[float], totals: list[int]) -> list[list[int]]:
    """Integer label x split table with exact row and column sums, each cell within one of ideal."""
    exact = [[g * r for r in ratios] for g in group_sizes]
    table = [[math.floor(x + 1e-9) for x in row] for row in exact]
    row_left = [g - sum(row) for g, row in zip(group_sizes, table)]
    col_need = [t - sum(table[i][k] for i in range(len(table))) for k, t in enumerate(totals)]
    for k in sorted(range(len(totals)), key=lambda k: -col_need[k]):
        while col_need[k] > 0:
            # prefer rows that still owe units and have not yet topped up this cell
            candidates = [i for i in range(len(table)) if row_left[i] > 0]
            fresh = [i for i in candidates if table[i][k] == math.floor(exact[i][k] + 1e-9)]
            i = max(fresh or candidates, key=lambda i: (row_left[i], exact[i][k] - math.floor(exact[i][k] + 1e-9), -i))
            table[i][k] += 1
            row_left[i] -= 1
            col_need[k] -= 1
    return table


def split_dataset(posts: Sequence[Post], ratios=(0.8, 0.1, 0.1), seed: int = 13):
    """Stratified, deterministic three-way partition (train, val, test)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = random.Random(seed)
    labels = sorted({p.label for p in posts})
    groups = [[p for p in posts if p.label == lab] for lab in labels]
    for g in groups:
        rng.shuffle(g)
    totals = _largest_remainder(len(posts), ratios)
    table = _allocate([len(g) for g in groups], ratios, totals)

    parts: list[list[Post]] = [[], [], []]
    for g, row in zip(groups, table):
        start = 0
        for k, n in enumerate(row):
            parts[k].extend(g[start: start + n])
            start += n
    for part in parts:
        rng.shuffle(part)
    return parts[0], parts[1], parts[2]


def dataset_stats(posts: Sequence[Post]) -> DatasetStats:
    if not posts:
        raise EmptyDataset("no posts")
    return DatasetStats(n_posts=len(posts), n_hateful=sum(p.label for p in posts))


def format_stats_table(rows: Mapping[str, DatasetStats]) -> str:
    header = ("Dataset", "# of Posts", "# of Hateful Posts", "Hate %")
    body = [(name, f"{s.n_posts:,}", f"{s.n_hateful:,}", f"{s.hate_pct:.1f}") for name, s in rows.items()]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    lines = []
    for r in [header, *body]:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)
