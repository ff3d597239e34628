import html
import math
import random
import re
from html.parser import HTMLParser

import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from shield.alignment import (
    align_corpus,
    jaccard_similarity,
    normalize_tokens,
    overlap_similarity,
    render_overlap_report,
    semantic_similarity,
    stopwords,
    stopwords_version,
    token_classes,
)
from shield.datasets import Post, RationaleSpan
from shield.embedding import EncoderSpec
from shield.errors import EmptyInput, EmptyIntersection
from shield.extraction import FeatureSet


class BagOfWords(nn.Module):
    """Count vector over a fixed vocabulary; cosines are easy to do by hand."""

    def __init__(self, vocab):
        super().__init__()
        self.vocab = {w: i for i, w in enumerate(vocab)}
        self.hidden_size = len(vocab)
        self.spec = EncoderSpec("bow", trainable=False)

    def forward(self, texts):
        out = torch.zeros(len(texts), self.hidden_size)
        for row, t in enumerate(texts):
            for w in re.findall(r"[a-z]+", t.lower()):
                if w in self.vocab:
                    out[row, self.vocab[w]] += 1
        return out


class Orthogonal(nn.Module):
    hidden_size = 2

    def forward(self, texts):
        return torch.tensor([[1.0, 0.0] if t.startswith("a") else [0.0, 1.0] for t in texts])


def span_post(pid, text, spans, label=1):
    toks = text.split()
    return Post(pid, text, label, human_rationales=[RationaleSpan(s, e, tuple(toks[s:e])) for s, e in spans])


# --- normalization ------------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("The black muslims!", {"black", "muslims"}),
    ("", set()),
    ("the and of", set()),
    ("Don't STOP, f**king... stop", {"stop", "fking"}),
])
def test_normalize_examples(text, expected):
    ts = normalize_tokens(text, "llm")
    assert set(ts.tokens) == expected and ts.source == "llm"


def test_normalize_spans_and_lists():
    spans = [RationaleSpan(0, 2, ("Black", "people")), RationaleSpan(3, 4, ("people!",))]
    assert set(normalize_tokens(spans, "human").tokens) == {"black", "people"}
    assert set(normalize_tokens(["a cat", "the dog"]).tokens) == {"cat", "dog"}


def test_stopword_list_is_pinned():
    sw = stopwords()
    assert stopwords_version() == "nltk-english-179"
    assert {"the", "and", "of", "dont", "same", "again"} <= sw
    assert not {"every", "never", "nobody", "cannot", "one"} & sw


@settings(max_examples=200)
@given(st.text(max_size=80))
def test_token_set_invariants(text):
    for tok in normalize_tokens(text).tokens:
        assert tok and tok == tok.lower() and tok not in stopwords()
        assert not any(ch.isspace() for ch in tok)
        assert not re.search(r"[!\"#$%&'()*+,\-./:;<=>?@\[\\\]^_`{|}~]", tok)


# --- overlap ------------------------------------------------------------------------

def test_overlap_examples():
    assert overlap_similarity({"a", "b", "c"}, {"b", "c", "d"}) == 2 / 3
    assert overlap_similarity({"a"}, {"a"}) == 1.0
    assert jaccard_similarity({"a", "b", "c"}, {"b", "c", "d"}) == 0.5


def test_overlap_empty_raises():
    with pytest.raises(EmptyInput):
        overlap_similarity(set(), {"a"})
    with pytest.raises(EmptyInput):
        jaccard_similarity({"a"}, set())


def brute_force_overlap(a, b):
    shared = 0
    for x in a:
        for y in b:
            if x == y:
                shared += 1
                break
    return shared / min(len(a), len(b))


def random_pairs(n, seed=0):
    rng = random.Random(seed)
    vocab = [f"w{i}" for i in range(30)]
    for _ in range(n):
        yield (set(rng.sample(vocab, rng.randint(1, 12))), set(rng.sample(vocab, rng.randint(1, 12))))


def test_overlap_matches_oracle_on_1000_pairs():
    for a, b in random_pairs(1000):
        assert overlap_similarity(a, b) == brute_force_overlap(a, b)
        assert overlap_similarity(a, b) == overlap_similarity(b, a)
        assert overlap_similarity(a, a) == 1.0


@settings(max_examples=200)
@given(st.sets(st.integers(0, 40), min_size=1), st.sets(st.integers(0, 40), min_size=1))
def test_overlap_properties(a, b):
    a, b = {str(x) for x in a}, {str(x) for x in b}
    v = overlap_similarity(a, b)
    assert 0.0 <= v <= 1.0
    if a <= b or b <= a:
        assert v == 1.0
    assert jaccard_similarity(a, b) <= v


# --- cosine -------------------------------------------------------------------------

def test_semantic_self_similarity():
    enc = BagOfWords(["x", "y", "z"])
    assert semantic_similarity("x y y", "x y y", enc) == pytest.approx(1.0, abs=1e-6)


def test_semantic_orthogonal():
    assert semantic_similarity("apple", "banana", Orthogonal()) == 0.0


def test_semantic_empty():
    with pytest.raises(EmptyInput):
        semantic_similarity("", "x", Orthogonal())


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="abc ", min_size=1, max_size=30).filter(str.strip))
def test_semantic_self_similarity_with_stub(text):
    from shield.embedding import feature_side_spec, load_encoder
    enc = load_encoder(feature_side_spec("stub-8", 64))
    assert semantic_similarity(text, text, enc) == pytest.approx(1.0, abs=1e-6)


# --- corpus -------------------------------------------------------------------------

# five scored posts with hand-computed overlap, jaccard and bag-of-words cosine
FIVE = [
    (span_post("e1", "go away you dirty slurx", [(3, 5)]),
     FeatureSet(derogatory_language=["dirty slurx"]), 1.0, 1.0, 1.0),
    (span_post("e2", "slurx people ruin this place", [(0, 3)]),
     FeatureSet(rationales=["ruin this place"], derogatory_language=["slurx"]), 2 / 3, 1 / 2, 1 / math.sqrt(3)),
    (span_post("e3", "i hate hate hate slury", [(1, 5)]),
     FeatureSet(rationales=["hate slury"], cuss_words=["slury"]), 1.0, 1.0, 1 / math.sqrt(2)),
    (span_post("e4", "they are vermin and rats", [(2, 3), (4, 5)]),
     FeatureSet(derogatory_language=["cockroaches"]), 0.0, 0.0, 0.0),
    (span_post("e5", "shut up you stupid clown", [(3, 5)]),
     FeatureSet(derogatory_language=["stupid"], cuss_words=["shut up"]), 1 / 2, 1 / 3, 1 / math.sqrt(6)),
]
SKIPPED = [
    (span_post("s1", "of the people and the state", [(2, 3)]), FeatureSet(rationales=["of the"])),
    (Post("s2", "what a lovely day", 0, human_rationales=[]), FeatureSet(non_hateful=True)),
]
VOCAB = sorted({w for p, fs, *_ in FIVE + SKIPPED for w in re.findall(r"[a-z]+", p.text + " " + " ".join(fs.items()))})


def test_five_example_fixture_matches_hand_values():
    posts = [p for p, *_ in FIVE] + [p for p, _ in SKIPPED]
    extracted = {p.id: fs for p, fs, *_ in FIVE} | {p.id: fs for p, fs in SKIPPED}
    result = align_corpus(extracted, posts, BagOfWords(VOCAB))
    assert (result.n_evaluated, result.n_skipped) == (5, 2)
    for ex, (post, _, overlap, jaccard, cosine) in zip(result.per_example, FIVE):
        assert ex.post_id == post.id
        assert abs(ex.overlap - overlap) < 1e-9
        assert abs(ex.jaccard - jaccard) < 1e-9
        assert abs(ex.cosine - cosine) < 1e-6
    assert abs(result.aggregate_overlap - 19 / 30) < 1e-9
    expected_cos = (1 + 1 / math.sqrt(3) + 1 / math.sqrt(2) + 0 + 1 / math.sqrt(6)) / 5
    assert abs(result.aggregate_cosine - expected_cos) < 1e-6


def test_aggregates_permutation_invariant():
    pairs = [(p, fs) for p, fs, *_ in FIVE]
    extracted = {p.id: fs for p, fs in pairs}
    a = align_corpus(extracted, [p for p, _ in pairs])
    b = align_corpus(extracted, [p for p, _ in reversed(pairs)])
    assert a.aggregate_overlap == b.aggregate_overlap
    assert a.aggregate_jaccard == b.aggregate_jaccard


def test_all_non_hateful_is_all_skipped():
    posts = [p for p, *_ in FIVE]
    result = align_corpus({p.id: FeatureSet(non_hateful=True) for p in posts}, posts)
    assert result.n_evaluated == 0 and result.n_skipped == 5
    assert result.aggregate_overlap is None


def test_disjoint_ids_raise():
    with pytest.raises(EmptyIntersection):
        align_corpus({"zzz": FeatureSet(rationales=["x"])}, [p for p, *_ in FIVE])


def test_missing_posts_count_as_skipped():
    posts = [p for p, *_ in FIVE]
    result = align_corpus({"e1": FIVE[0][1]}, posts)
    assert result.n_evaluated + result.n_skipped == len(posts) == 5


# --- report -------------------------------------------------------------------------

class SpanCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.posts = {}
        self._post = None
        self._cls = None

    def handle_starttag(self, tag, attrs):
        attrs = dict(attrs)
        if tag == "div" and attrs.get("class") == "post":
            self._post = attrs["id"][len("post-"):]
            self.posts[self._post] = []
        elif tag == "span" and self._post is not None:
            self._cls = attrs.get("class")

    def handle_endtag(self, tag):
        if tag == "span":
            self._cls = None
        elif tag == "div":
            self._post = None

    def handle_data(self, data):
        if self._post is not None and self._cls:
            self.posts[self._post].append((self._cls, data))


def collect(path):
    parser = SpanCollector()
    parser.feed(path.read_text(encoding="utf-8"))
    return parser.posts


def test_report_identical_sets_all_purple(tmp_path):
    post = span_post("i1", "you dirty slurx", [(1, 3)])
    path = render_overlap_report([post], {"i1": FeatureSet(derogatory_language=["dirty slurx"])}, tmp_path / "r.html")
    assert collect(path)["i1"] == [("both", "dirty"), ("both", "slurx")]


def test_report_disjoint_sets_no_purple(tmp_path):
    post = span_post("d1", "you dirty slurx now", [(1, 2)])
    path = render_overlap_report([post], {"d1": FeatureSet(cuss_words=["slurx"])}, tmp_path / "r.html")
    classes = collect(path)["d1"]
    assert classes == [("human", "dirty"), ("llm", "slurx")]
    assert all(c != "both" for c, _ in classes)


def test_report_three_colour_partition(tmp_path):
    # human annotators also marked low-relevance words the LLM left out
    post = span_post("f1", "slurx media prominently features aids figures to push the slurx agenda", [(2, 6), (9, 11)])
    fs = FeatureSet(rationales=["push the slurx agenda"], derogatory_language=["slurx"])
    assert token_classes(post, fs) == [
        ("slurx", "llm"), ("media", None), ("prominently", "human"), ("features", "human"),
        ("aids", "human"), ("figures", "human"), ("to", None), ("push", "llm"), ("the", None),
        ("slurx", "both"), ("agenda", "both"),
    ]
    path = render_overlap_report([post], {"f1": fs}, tmp_path / "r.html")
    text = path.read_text(encoding="utf-8")
    assert text.startswith("<!DOCTYPE html>") and "http" not in text
    assert "nltk-english-179" in text
    assert collect(path)["f1"] == [(c, t) for t, c in token_classes(post, fs) if c]


def test_report_escapes_html(tmp_path):
    post = span_post("x1", "<b>slurx</b> &", [(0, 1)])
    path = render_overlap_report([post], {"x1": FeatureSet(derogatory_language=["<b>slurx</b>"])}, tmp_path / "r.html")
    body = path.read_text(encoding="utf-8")
    assert "<b>slurx</b> &" not in body and html.escape("<b>slurx</b>") in body


def test_alignment_json_round_trip():
    import json
    pairs = [(p, fs) for p, fs, *_ in FIVE]
    result = align_corpus({p.id: fs for p, fs in pairs}, [p for p, _ in pairs])
    data = json.loads(result.to_json())
    assert data["n_evaluated"] == 5 and len(data["per_example"]) == 5
    assert data["stopwords_version"] == "nltk-english-179"
