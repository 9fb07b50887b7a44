"""Desk-scale QA corpus with a per-question-type answer prior that flips
between train and test.

Every scene holds one object from the asked-about group (the causal object,
whose category is the answer) among distractors.  Object features are a
noisy category prototype, so the visual route is learnable but imperfect
and a model can lean on the question-conditional prior instead.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..models import PAD_ID, UNK_ID, QaInstance
from ..proposal import (EmbeddingStore, LexiconTagger, ObjectMeta, ProposalSet, build_proposal_qa,
                        build_proposal_textual, build_proposal_visual, extract_nouns,
                        score_objects_visual, tokenize)

GROUPS = {
    "animal": ["dog", "cat", "horse"],
    "fruit": ["banana", "apple", "orange"],
    "vehicle": ["car", "bus", "truck"],
    "furniture": ["chair", "couch", "bench"],
}
BACKGROUND = ["tree", "sky", "grass", "building", "sign", "wall", "window", "road"]
TEMPLATES = {
    "animal": ["what animal is in the picture", "which animal can you see here"],
    "fruit": ["what fruit is on the table", "which fruit is shown in the image"],
    "vehicle": ["what vehicle is on the street", "which vehicle is in the photo"],
    "furniture": ["what furniture is in the room", "which furniture is in the picture"],
}
EXPLANATIONS = ["because there is a {answer} near the {other}",
                "the {answer} is next to the {other}"]
IMAGE_SIZE = 32


@dataclass
class ToyQaConfig:
    n_train: int = 6000
    n_test: int = 600
    n_objects: int = 8
    d_obj: int = 16
    d_word: int = 16
    hidden: int = 32
    embed_dim: int = 300
    shift: float = 0.5          # 0: same prior train/test; 1: fully inverted
    feature_noise: float = 0.5
    partial_credit: float = 0.2  # chance a same-group answer gets soft score 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError(f"shift must lie in [0, 1], got {self.shift}")
        if self.n_objects < 2:
            raise ValueError("scenes need at least two objects")


@dataclass
class Corpus:
    answers: list[str]
    vocab: dict[str, int]
    train: list[QaInstance] = field(default_factory=list)
    test: list[QaInstance] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(w, UNK_ID) for w in tokenize(text)]


def answer_list() -> list[str]:
    return [c for cats in GROUPS.values() for c in cats]


def build_vocab() -> dict[str, int]:
    words = ["<pad>", "<unk>"]
    for qs in TEMPLATES.values():
        for q in qs:
            for w in tokenize(q):
                if w not in words:
                    words.append(w)
    return {w: i for i, w in enumerate(words)}


def template_priors(n_answers_per_group: int, shift: float):
    """Train and test answer distributions for one question type; index 0 is the train majority."""
    k = n_answers_per_group
    uniform = np.full(k, 1.0 / k)
    major = np.eye(k)[0]
    minor = (1.0 - major) / (k - 1)
    return (1 - shift) * uniform + shift * major, (1 - shift) * uniform + shift * minor


def make_embeddings(seed: int, dim: int = 300) -> EmbeddingStore:
    """Glove-like synthetic vectors: group members share a direction, background words do not."""
    rng = np.random.default_rng(seed + 7919)
    vectors = {}
    for group, members in GROUPS.items():
        base = rng.normal(size=dim)
        vectors[group] = base + 0.3 * rng.normal(size=dim)
        for m in members:
            vectors[m] = base + 1.0 * rng.normal(size=dim)
    for w in BACKGROUND + ["picture", "table", "street", "room", "image", "photo"]:
        vectors.setdefault(w, rng.normal(size=dim))
    return EmbeddingStore(vectors, dim)


def _random_box(rng):
    w, h = rng.integers(6, 13, size=2)
    x1 = rng.integers(0, IMAGE_SIZE - w + 1)
    y1 = rng.integers(0, IMAGE_SIZE - h + 1)
    return (int(x1), int(y1), int(x1 + w), int(y1 + h))


def _attention_map(rng, box, other_box):
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    att = np.full((IMAGE_SIZE, IMAGE_SIZE), 0.02)
    for (x1, y1, x2, y2), weight in ((box, 1.0), (other_box, 0.35)):
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        sx, sy = max((x2 - x1) / 2.5, 1.0), max((y2 - y1) / 2.5, 1.0)
        att += weight * np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
    att *= rng.uniform(0.9, 1.1, size=att.shape)
    return att / att.sum()


def gen_toy_qa(config: ToyQaConfig) -> Corpus:
    """Seeded train/test corpora; test priors invert the train priors per question type."""
    c = config
    rng = np.random.default_rng(c.seed)
    answers = answer_list()
    a_index = {a: i for i, a in enumerate(answers)}
    vocab = build_vocab()
    categories = answers + BACKGROUND
    prototypes = {cat: rng.normal(size=c.d_obj) for cat in categories}
    groups = list(GROUPS)
    majority = {g: int(rng.integers(len(GROUPS[g]))) for g in groups}
    priors = {}
    for g in groups:
        tr, te = template_priors(len(GROUPS[g]), c.shift)
        # rotate so the chosen majority answer sits at index majority[g]
        priors[g] = (np.roll(tr, majority[g]), np.roll(te, majority[g]))

    corpus = Corpus(answers=answers, vocab=vocab, meta={"config": asdict(c), "majority": majority})

    def sample(split: int) -> QaInstance:
        t = int(rng.integers(len(groups)))
        g = groups[t]
        ans = GROUPS[g][int(rng.choice(len(GROUPS[g]), p=priors[g][split]))]
        question = TEMPLATES[g][int(rng.integers(len(TEMPLATES[g])))]
        others = [x for x in categories if x not in GROUPS[g]]
        distractors = list(rng.choice(others, size=c.n_objects - 1, replace=True))
        causal = int(rng.integers(c.n_objects))
        cats = distractors[:causal] + [ans] + distractors[causal:]
        feats = np.stack([prototypes[x] + c.feature_noise * rng.normal(size=c.d_obj) for x in cats])
        boxes = [_random_box(rng) for _ in cats]
        other = int(rng.choice([i for i in range(c.n_objects) if i != causal]))
        explanation = EXPLANATIONS[int(rng.integers(len(EXPLANATIONS)))].format(answer=ans, other=cats[other])
        att = _attention_map(rng, boxes[causal], boxes[other])
        gold = np.zeros(len(answers))
        gold[a_index[ans]] = 1.0
        if rng.random() < c.partial_credit:
            alt = [x for x in GROUPS[g] if x != ans]
            gold[a_index[alt[int(rng.integers(len(alt)))]]] = 0.3
        return QaInstance(features=feats, tokens=[vocab.get(w, UNK_ID) for w in tokenize(question)],
                          gold=gold, question=question, answer=ans, categories=cats, boxes=boxes,
                          explanation=explanation, attention=att, template=t, causal=causal)

    corpus.train = [sample(0) for _ in range(c.n_train)]
    corpus.test = [sample(1) for _ in range(c.n_test)]
    return corpus


def template_answer_distribution(instances, n_answers: int) -> dict[int, np.ndarray]:
    out = {}
    for inst in instances:
        out.setdefault(inst.template, np.zeros(n_answers))[inst.a_gt] += 1
    return {t: v / v.sum() for t, v in out.items()}


# --- proposal construction for corpus instances --------------------------------

def build_proposals(instances, method: str, store: EmbeddingStore, k: int = 6,
                    threshold: float = 0.6, tagger=None) -> list[ProposalSet]:
    tagger = tagger or LexiconTagger()
    out = []
    for inst in instances:
        objects = [ObjectMeta(cat, tuple(b)) for cat, b in zip(inst.categories, inst.boxes)]
        if method == "visual":
            if inst.attention is None:
                out.append(ProposalSet([], [], "visual"))
                continue
            prop = build_proposal_visual(score_objects_visual(inst.attention, objects), k)
        elif method == "textual":
            if not inst.explanation:
                out.append(ProposalSet([], [], "textual"))
                continue
            prop = build_proposal_textual(extract_nouns(inst.explanation, tagger), objects, store, threshold, k)
        elif method == "qa":
            prop = build_proposal_qa(inst.question, inst.answer, objects, store, threshold, k, tagger)
        else:
            raise ValueError(f"unknown proposal method {method!r}")
        # a proposal set covering every object leaves nothing to compare against
        if len(prop.indices) >= inst.n_objects:
            prop = ProposalSet(prop.indices[:inst.n_objects - 1], prop.scores[:inst.n_objects - 1], prop.method)
        out.append(prop)
    return out


# --- corpus files ---------------------------------------------------------------

def instance_to_record(inst: QaInstance, answers: list[str]) -> dict:
    rec = {
        "question": inst.question,
        "answer": inst.answer,
        "answers": {answers[i]: float(s) for i, s in enumerate(inst.gold) if s > 0},
        "objects": [{"category": c, "box": list(b)} for c, b in zip(inst.categories, inst.boxes)],
        "features": inst.features.tolist(),
        "explanation": inst.explanation,
        "attention": None,
        "template": inst.template,
        "causal": inst.causal,
    }
    if inst.attention is not None:
        h, w = inst.attention.shape
        rec["attention"] = {"h": h, "w": w, "data": inst.attention.reshape(-1).tolist()}
    return rec


def record_to_instance(rec: dict, answers: list[str], vocab: dict[str, int]) -> QaInstance:
    a_index = {a: i for i, a in enumerate(answers)}
    gold = np.zeros(len(answers))
    for a, s in rec["answers"].items():
        if a not in a_index:
            raise ValueError(f"answer {a!r} is not in the answer vocabulary")
        gold[a_index[a]] = s
    att = rec.get("attention")
    if att is not None:
        att = np.asarray(att["data"], dtype=np.float64).reshape(att["h"], att["w"])
    return QaInstance(
        features=np.asarray(rec["features"], dtype=np.float64),
        tokens=[vocab.get(w, UNK_ID) for w in tokenize(rec["question"])],
        gold=gold,
        question=rec["question"],
        answer=rec.get("answer") or answers[int(np.argmax(gold))],
        categories=[o["category"] for o in rec["objects"]],
        boxes=[tuple(o["box"]) for o in rec["objects"]],
        explanation=rec.get("explanation"),
        attention=att,
        template=rec.get("template"),
        causal=rec.get("causal"),
    )


def save_corpus(corpus: Corpus, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"format": "selfcrit-corpus", "version": 1, "answers": corpus.answers,
            "vocab": corpus.vocab, "meta": corpus.meta}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    for split in ("train", "test"):
        with open(d / f"{split}.jsonl", "w") as fh:
            for inst in getattr(corpus, split):
                fh.write(json.dumps(instance_to_record(inst, corpus.answers)) + "\n")


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format") != "selfcrit-corpus":
        raise ValueError(f"{d}: not a corpus directory")
    corpus = Corpus(answers=meta["answers"], vocab=meta["vocab"], meta=meta.get("meta", {}))
    for split in ("train", "test"):
        path = d / f"{split}.jsonl"
        if path.exists():
            with open(path) as fh:
                setattr(corpus, split, [record_to_instance(json.loads(line), corpus.answers, corpus.vocab)
                                        for line in fh if line.strip()])
    return corpus
