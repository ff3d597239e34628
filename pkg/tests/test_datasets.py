import json
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from shield.datasets import (
    IMPLICIT_HS_LABEL_MAP,
    DatasetStats,
    Post,
    RationaleSpan,
    dataset_stats,
    format_stats_table,
    load_posts,
    majority_mask,
    mask_to_spans,
    preprocess_text,
    split_dataset,
    write_posts_jsonl,
)
from shield.errors import EmptyDataset, FormatError, InvalidRatios, MissingField

from conftest import FIXTURES


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def _posts(n, n_hate, prefix="p"):
    return [Post(id=f"{prefix}{i}", text=f"text {i}", label=int(i < n_hate)) for i in range(n)]


# --- loading ------------------------------------------------------------------------

def test_load_jsonl(tmp_path):
    path = _write_jsonl(tmp_path / "a.jsonl", [
        {"id": 1, "text": "Hello there", "label": 1},
        {"id": "b", "text": "bye", "label": "normal"},
    ])
    posts = load_posts(path, "jsonl", platform="gab")
    assert [(p.id, p.label, p.platform) for p in posts] == [("1", 1, "gab"), ("b", 0, "gab")]


def test_missing_label_names_row(tmp_path):
    path = _write_jsonl(tmp_path / "a.jsonl", [{"id": 1, "text": "x", "label": 0}, {"id": 2, "text": "y"}])
    with pytest.raises(MissingField) as exc:
        load_posts(path)
    assert exc.value.row == 2 and "label" in str(exc.value)


def test_bad_json_row_is_addressed(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text('{"id": 1, "text": "x", "label": 0}\n{oops\n', encoding="utf-8")
    with pytest.raises(FormatError) as exc:
        load_posts(path)
    assert exc.value.row == 2


def test_unknown_label_and_blank_text(tmp_path):
    with pytest.raises(FormatError):
        load_posts(_write_jsonl(tmp_path / "a.jsonl", [{"id": 1, "text": "x", "label": "maybe"}]))
    with pytest.raises(FormatError):
        load_posts(_write_jsonl(tmp_path / "b.jsonl", [{"id": 1, "text": "   ", "label": 0}]))


def test_load_csv_and_tsv(tmp_path):
    (tmp_path / "a.csv").write_text('post,cls\n"hi, you",1\nbye,0\n', encoding="utf-8")
    posts = load_posts(tmp_path / "a.csv", "csv", id_field="post", text_field="post", label_field="cls")
    assert [p.label for p in posts] == [1, 0] and posts[0].text == "hi, you"
    (tmp_path / "a.tsv").write_text("id\ttext\tlabel\n7\thello\t0\n8\t\t1\n", encoding="utf-8")
    with pytest.raises(MissingField) as exc:
        load_posts(tmp_path / "a.tsv", "csv")
    assert exc.value.row == 3


def test_implicit_label_map_drops_explicit_rows(tmp_path):
    path = _write_jsonl(tmp_path / "ih.jsonl", [
        {"id": 1, "text": "a", "label": "implicit_hate"},
        {"id": 2, "text": "b", "label": "explicit_hate"},
        {"id": 3, "text": "c", "label": "not_hate"},
    ])
    posts = load_posts(path, label_map=IMPLICIT_HS_LABEL_MAP, platform="implicit_hs")
    assert [(p.id, p.label) for p in posts] == [("1", 1), ("3", 0)]


def test_jsonl_round_trip(tmp_path):
    posts = [Post("a", "one two three", 1, "twitter", [RationaleSpan(1, 3, ("two", "three"))]), Post("b", "x", 0)]
    write_posts_jsonl(posts, tmp_path / "p.jsonl")
    assert load_posts(tmp_path / "p.jsonl") == posts


# --- HateXplain ---------------------------------------------------------------------

def _hx_record(mask_votes, labels=("hatespeech", "offensive", "normal")):
    return {
        "post_id": "1_gab",
        "post_tokens": ["you", "stupid", "slurx", "ok"],
        "annotators": [{"label": lab} for lab in labels],
        "rationales": mask_votes,
    }


def test_hatexplain_mask_to_span(tmp_path):
    path = tmp_path / "hx.json"
    path.write_text(json.dumps({"1_gab": _hx_record([[0, 1, 1, 0], [0, 1, 1, 0], [1, 1, 0, 0]])}))
    (post,) = load_posts(path, "hatexplain")
    assert post.human_rationales == [RationaleSpan(1, 3, ("stupid", "slurx"))]
    assert post.label == 1 and post.platform == "gab"


def test_hatexplain_drops_posts_without_majority_label(tmp_path):
    path = tmp_path / "hx.json"
    rec = _hx_record([], labels=("hatespeech", "normal"))
    path.write_text(json.dumps([rec]))
    assert load_posts(path, "hatexplain") == []


def test_hatexplain_missing_tokens(tmp_path):
    path = tmp_path / "hx.json"
    rec = _hx_record([])
    del rec["post_tokens"]
    path.write_text(json.dumps([rec]))
    with pytest.raises(MissingField):
        load_posts(path, "hatexplain")


def test_majority_mask_needs_two_of_three():
    masks = [[1, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 1]]
    assert majority_mask(masks, 3) == [True, False, False, False]


def test_mask_to_spans_multiple_runs():
    toks = list("abcdef")
    spans = mask_to_spans([1, 1, 0, 0, 1, 1], toks)
    assert [(s.token_start, s.token_end) for s in spans] == [(0, 2), (4, 6)]


def test_hatexplain_fixture_shape():
    posts = load_posts(FIXTURES / "hatexplain_fixture.json", "hatexplain")
    assert len(posts) == 21
    assert sum(bool(p.human_rationales) for p in posts) == 19


# --- preprocessing ------------------------------------------------------------------

def test_preprocess_example():
    assert preprocess_text("Check http://x.co @bob  HELLO") == "check <url> <user> hello"


def test_preprocess_blank():
    assert preprocess_text("   ") == ""


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=st.sampled_from("ab @:/.wHTPS<>_\t\n1"), max_size=60) | st.text(max_size=60))
def test_preprocess_idempotent(text):
    once = preprocess_text(text)
    assert preprocess_text(once) == once


# --- splitting ----------------------------------------------------------------------

def test_split_sizes_and_partition():
    posts = _posts(100, 37)
    tr, va, te = split_dataset(posts, (0.8, 0.1, 0.1), seed=7)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    ids = [p.id for p in tr + va + te]
    assert Counter(ids) == Counter(p.id for p in posts)


def test_split_deterministic_and_seed_sensitive():
    posts = _posts(100, 37)
    a = split_dataset(posts, seed=7)
    b = split_dataset(posts, seed=7)
    c = split_dataset(posts, seed=8)
    assert [[p.id for p in part] for part in a] == [[p.id for p in part] for part in b]
    assert [[p.id for p in part] for part in a] != [[p.id for p in part] for part in c]


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.1), (0.8, 0.2, 0.0), (0.8, 0.1), (-0.1, 0.6, 0.5)])
def test_split_invalid_ratios(ratios):
    with pytest.raises(InvalidRatios):
        split_dataset(_posts(10, 5), ratios, seed=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.data())
def test_split_stratified_within_one_post(n, data):
    n_hate = data.draw(st.integers(0, n))
    seed = data.draw(st.integers(0, 2**16))
    ratios = (0.8, 0.1, 0.1)
    parts = split_dataset(_posts(n, n_hate), ratios, seed)
    assert sum(map(len, parts)) == n
    assert len({p.id for part in parts for p in part}) == n
    for part, r in zip(parts, ratios):
        hate_here = sum(p.label for p in part)
        assert abs(hate_here - n_hate * r) < 1
        assert abs((len(part) - hate_here) - (n - n_hate) * r) < 1


@settings(max_examples=25, deadline=None)
@given(st.integers(1000, 5000), st.floats(0.05, 0.95), st.integers(0, 999))
def test_split_label_proportions_within_two_points(n, frac, seed):
    n_hate = round(n * frac)
    parts = split_dataset(_posts(n, n_hate), (0.8, 0.1, 0.1), seed)
    for part in parts:
        assert abs(100 * sum(p.label for p in part) / len(part) - 100 * n_hate / n) <= 2.0


# --- stats --------------------------------------------------------------------------

def _half_up_pct(k, n):
    # independent oracle: exact rational, half-up at one decimal
    x = Fraction(1000 * k, n)
    q, r = divmod(x.numerator, x.denominator)
    return (q + (2 * r >= x.denominator)) / 10


@pytest.mark.parametrize("n,k,pct", [
    (14240, 11920, 83.7), (37164, 10562, 28.4), (10457, 3933, 37.6), (5052, 1699, 33.6),
])
def test_table_counts_round_to_reported_percent(n, k, pct):
    assert DatasetStats(n, k).hate_pct == pct == _half_up_pct(k, n)


@settings(max_examples=300)
@given(st.integers(1, 10**6), st.data())
def test_stats_identity(n, data):
    k = data.draw(st.integers(0, n))
    assert DatasetStats(n, k).hate_pct == _half_up_pct(k, n)


def test_stats_half_up_boundary():
    # 1/8 = 12.5% exactly; 1/16 = 6.25% -> 6.3
    assert DatasetStats(16, 1).hate_pct == 6.3


def test_dataset_stats_counts_and_empty():
    s = dataset_stats(_posts(10, 3))
    assert (s.n_posts, s.n_hateful, s.hate_pct) == (10, 3, 30.0)
    with pytest.raises(EmptyDataset):
        dataset_stats([])


def test_stats_table_format():
    table = format_stats_table({"gab": DatasetStats(14240, 11920)})
    assert "14,240" in table and "11,920" in table and "83.7" in table
