"""Consensus captioning metric: TF-IDF weighted n-gram cosine similarity.

Per image, for n = 1..4, the candidate's idf-weighted n-gram count
vector is compared with each reference's by cosine similarity, averaged
over references; the image score is 10 times the mean over n, and the
corpus score is the mean over images. Zero-norm vectors contribute
similarity 0 (so a candidate with no overlap scores exactly 0).

Tokenization: lowercase, strip punctuation, split on whitespace.
This is the base consensus formula; no length penalty is applied.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field

MAX_NGRAM = 4

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list:
    return text.lower().translate(_PUNCT_TABLE).split()


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class CiderCorpus:
    """Reference captions plus the idf table derived from them.

    document_count is the number of images; df(g) counts images whose
    reference set contains g. Grams never seen in the references get
    df = 1 (maximal idf) when weighting candidates.
    """

    references: dict
    ngram_idf: dict = field(default_factory=dict)
    document_count: int = 0

    @classmethod
    def build(cls, references: dict) -> "CiderCorpus":
        if not references:
            raise ValueError("reference corpus is empty")
        document_count = len(references)
        df: Counter = Counter()
        for refs in references.values():
            seen = set()
            for ref in refs:
                tokens = tokenize(ref)
                for n in range(1, MAX_NGRAM + 1):
                    seen.update(ngram_counts(tokens, n).keys())
            df.update(seen)
        idf = {g: math.log(document_count / c) for g, c in df.items()}
        return cls(references=dict(references), ngram_idf=idf, document_count=document_count)

    def idf(self, gram) -> float:
        default = math.log(self.document_count)  # df = 1 for unseen grams
        return self.ngram_idf.get(gram, default)


def _tfidf_vector(corpus: CiderCorpus, tokens, n: int) -> dict:
    return {
        g: c * corpus.idf(g)
        for g, c in ngram_counts(tokens, n).items()
    }


def _cosine(a: dict, b: dict) -> float:
    norm_a = math.sqrt(sum(v * v for v in a.values()))
    norm_b = math.sqrt(sum(v * v for v in b.values()))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (norm_a * norm_b)


def cider_score(candidates: dict, corpus: CiderCorpus, per_image: bool = False):
    """Score candidate captions (image id -> caption) against the corpus."""
    missing = [i for i in candidates if i not in corpus.references]
    if missing:
        raise KeyError(f"no references for image ids {missing}")
    scores = {}
    for image_id in sorted(candidates):
        cand_tokens = tokenize(candidates[image_id])
        refs = corpus.references[image_id]
        total = 0.0
        for n in range(1, MAX_NGRAM + 1):
            cand_vec = _tfidf_vector(corpus, cand_tokens, n)
            sim = sum(
                _cosine(cand_vec, _tfidf_vector(corpus, tokenize(r), n))
                for r in refs
            ) / len(refs)
            total += sim
        scores[image_id] = 10.0 * total / MAX_NGRAM
    corpus_score = sum(scores.values()) / len(scores) if scores else 0.0
    if per_image:
        return corpus_score, scores
    return corpus_score
