"""A constructed, perfectly separable corpus for offline end-to-end runs.

Hateful posts contain exactly one made-up lexicon term; non-hateful posts
contain none. With the lexicon mock as extractor the feature side alone
determines the label.
"""

from __future__ import annotations

import random

from .datasets import Post

LEXICON = {
    "zorblat": "derogatory_language",
    "quexfin": "derogatory_language",
    "drimmel": "derogatory_language",
    "frakking": "cuss_words",
    "gronk": "cuss_words",
}

_FILLER = (
    "the weather was calm and people walked along the river while talking about "
    "music games dinner plans football books coffee trains gardens movies work "
    "school weekend market bakery village mountain lake holiday friends family"
).split()


def make_separable_corpus(n_posts: int = 200, seed: int = 7, hate_fraction: float = 0.5) -> list[Post]:
    rng = random.Random(seed)
    n_hate = round(n_posts * hate_fraction)
    labels = [1] * n_hate + [0] * (n_posts - n_hate)
    rng.shuffle(labels)
    terms = sorted(LEXICON)
    posts = []
    for i, label in enumerate(labels):
        words = rng.choices(_FILLER, k=rng.randint(6, 12))
        if label:
            words.insert(rng.randrange(len(words) + 1), rng.choice(terms))
        posts.append(Post(id=f"syn-{i:04d}", text=" ".join(words) + ".", label=label, platform="other"))
    return posts


if __name__ == "__main__":
    import json
    import sys

    from .datasets import write_posts_jsonl

    out = sys.argv[1] if len(sys.argv) > 1 else "synthetic.jsonl"
    write_posts_jsonl(make_separable_corpus(), out)
    if len(sys.argv) > 2:
        with open(sys.argv[2], "w", encoding="utf-8") as fh:
            json.dump(LEXICON, fh, indent=2)
