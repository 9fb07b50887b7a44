"""Proposal sets of influential objects.

Three sources: a human attention map scored against object boxes, nouns of
a textual explanation matched to object category names, and nouns of the
question/answer pair matched the same way.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

DEFAULT_THRESHOLD = 0.6
DEFAULT_SIZE = 6
INF_SCORE = float("inf")


class EmbeddingStore:
    """word -> vector lookup with a fixed dimension; immutable after load."""

    def __init__(self, vectors: dict[str, np.ndarray] | None = None, dim: int | None = None):
        vectors = vectors or {}
        if dim is None:
            if not vectors:
                raise ValueError("dimension required for an empty store")
            dim = len(next(iter(vectors.values())))
        self.dim = int(dim)
        self._vectors = {}
        for w, v in vectors.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.dim,):
                raise ValueError(f"vector for {w!r} has shape {v.shape}, expected ({self.dim},)")
            self._vectors[w] = v

    def __contains__(self, word):
        return word in self._vectors

    def __len__(self):
        return len(self._vectors)

    def get(self, word: str):
        """Vector for ``word`` or None when absent."""
        return self._vectors.get(word)

    def words(self):
        return list(self._vectors)

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        vectors, dim = {}, None
        with open(path, encoding="utf8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if not parts or not parts[0]:
                    continue
                word, vals = parts[0], parts[1:]
                if dim is None:
                    dim = len(vals)
                if len(vals) != dim:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
                vectors[word] = np.array([float(x) for x in vals])
        return cls(vectors, dim)

    def save(self, path):
        with open(path, "w", encoding="utf8") as fh:
            for w, v in self._vectors.items():
                fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


def phrase_embedding(text: str, store: EmbeddingStore) -> np.ndarray:
    """Sum of word vectors of a (possibly multi-word) name; unknown words add nothing."""
    out = np.zeros(store.dim)
    for w in text.lower().split():
        v = store.get(w)
        if v is not None:
            out = out + v
    return out


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


# --- part-of-speech tagging ---------------------------------------------------

class Tagger(Protocol):
    def tag(self, tokens: Sequence[str]) -> list[tuple[str, str]]: ...


COMMON_NOUNS = frozenset("""
man woman person people boy girl child kid baby player people guy lady
dog cat horse cow sheep bird elephant giraffe zebra bear cattle animal
banana apple orange pizza sandwich cake donut carrot broccoli fruit food hotdog
car bus truck train bike bicycle motorcycle boat plane airplane vehicle
table chair couch bed sofa desk bench toilet sink bathroom bedroom kitchen room
tv laptop phone keyboard clock book vase bottle cup bowl plate fork knife spoon
ball bat racket frisbee kite skateboard surfboard umbrella bag hat shirt tie
tree grass sky water snow street road sign building house window door wall floor
picture image photo color shape sport field beach ocean park
""".split())

FUNCTION_WORDS = frozenset("""
a an the this that these those is are was were be been being am do does did
what which who whom whose where when why how there here it its they them their
he she his her him we us our you your i me my of in on at to for with by from
and or but not no yes as into onto near next left right above below behind under
over than then so if because very quickly slowly some any many much more most
all each every both few one two three four five six seven eight nine ten
""".split())

NOUN_SUFFIXES = ("tion", "sion", "ment", "ness", "ity", "ship", "hood", "ism", "ist",
                 "ance", "ence", "dom", "ure")


class LexiconTagger:
    """Deterministic tagger: noun wordlist, function-word list, noun-suffix fallback."""

    def __init__(self, nouns=COMMON_NOUNS, function_words=FUNCTION_WORDS, suffixes=NOUN_SUFFIXES):
        self.nouns = frozenset(nouns)
        self.function_words = frozenset(function_words)
        self.suffixes = tuple(suffixes)

    def is_noun(self, word: str) -> bool:
        if word in self.function_words:
            return False
        if word in self.nouns:
            return True
        if word.endswith("s") and word[:-1] in self.nouns:
            return True
        if word.endswith("es") and word[:-2] in self.nouns:
            return True
        return len(word) > 4 and word.endswith(self.suffixes)

    def tag(self, tokens):
        return [(t, "NOUN" if self.is_noun(t) else "X") for t in tokens]


_WORD = re.compile(r"[a-z]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def extract_nouns(text: str, tagger: Tagger | None = None) -> list[str]:
    """Lowercased nouns in order of first appearance."""
    tagger = tagger or LexiconTagger()
    seen, out = set(), []
    for tok, pos in tagger.tag(tokenize(text)):
        if pos == "NOUN" and tok not in seen:
            seen.add(tok)
            out.append(tok)
    return out


# --- object metadata and proposal sets ----------------------------------------

@dataclass
class ObjectMeta:
    category: str
    box: tuple = (0, 0, 1, 1)      # x1, y1, x2, y2 in pixels, half-open

    def validate(self, width: int, height: int):
        x1, y1, x2, y2 = self.box
        if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
            raise ValueError(f"box {self.box} for {self.category!r} is outside a {width}x{height} image or empty")


@dataclass
class ProposalSet:
    indices: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    method: str = "qa"

    @property
    def usable(self) -> bool:
        return bool(self.indices)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


def _top_k(scores, k: int, keep=None) -> list[int]:
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(scores.size)
    if keep is not None:
        idx = idx[np.asarray(keep, dtype=bool)]
    # descending score, ties by lower index
    order = sorted(idx.tolist(), key=lambda i: (-scores[i], i))
    return order[:max(int(k), 0)]


def score_objects_visual(attention, boxes: Sequence[ObjectMeta]) -> np.ndarray:
    """Attention density inside each box divided by the density outside it."""
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 2 or np.any(att < 0):
        raise ValueError("attention map must be a 2-d non-negative array")
    total = att.sum()
    if total <= 0:
        raise ValueError("attention map has no mass")
    att = att / total
    H, W = att.shape
    out = np.zeros(len(boxes))
    for k, obj in enumerate(boxes):
        obj.validate(W, H)
        x1, y1, x2, y2 = (int(c) for c in obj.box)
        area_in = (x2 - x1) * (y2 - y1)
        area_out = H * W - area_in
        if area_out == 0:
            raise ValueError(f"box {obj.box} covers the whole image; no outside region")
        mass_in = att[y1:y2, x1:x2].sum()
        dens_out = (1.0 - mass_in) / area_out
        out[k] = INF_SCORE if dens_out <= 0 else (mass_in / area_in) / dens_out
    return out


def build_proposal_visual(scores, k: int = DEFAULT_SIZE) -> ProposalSet:
    idx = _top_k(scores, k)
    return ProposalSet(idx, [float(scores[i]) for i in idx], "visual")


def _category(obj) -> str:
    return obj.category if isinstance(obj, ObjectMeta) else str(obj)


def similarity_scores(nouns, objects, store: EmbeddingStore) -> np.ndarray:
    noun_vecs = [phrase_embedding(n, store) for n in nouns]
    out = np.zeros(len(objects))
    for i, obj in enumerate(objects):
        e = phrase_embedding(_category(obj), store)
        out[i] = max((cosine(e, nv) for nv in noun_vecs), default=0.0)
    return out


def build_proposal_textual(nouns, objects, store: EmbeddingStore,
                           threshold: float = DEFAULT_THRESHOLD, k: int = DEFAULT_SIZE,
                           method: str = "textual") -> ProposalSet:
    """Objects whose category is similar (> threshold) to any noun, best k first.

    An empty result means the instance has no usable proposal set.
    """
    sims = similarity_scores(nouns, objects, store)
    idx = _top_k(sims, k, keep=sims > threshold)
    return ProposalSet(idx, [float(sims[i]) for i in idx], method)


def build_proposal_qa(question: str, answer: str, objects, store: EmbeddingStore,
                      threshold: float = DEFAULT_THRESHOLD, k: int = DEFAULT_SIZE,
                      tagger: Tagger | None = None) -> ProposalSet:
    nouns = extract_nouns(f"{question} {answer}", tagger)
    return build_proposal_textual(nouns, objects, store, threshold, k, method="qa")


def containment(candidate, reference) -> float:
    """Fraction of ``reference`` members also present in ``candidate``."""
    ref = set(reference)
    if not ref:
        raise ValueError("reference proposal set is empty")
    return len(ref & set(candidate)) / len(ref)


def mean_containment(pairs) -> float:
    vals = [containment(c, r) for c, r in pairs if len(r)]
    if not vals:
        raise ValueError("no non-empty reference sets")
    return float(np.mean(vals))
