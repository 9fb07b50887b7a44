import xml.etree.ElementTree as ET

import numpy as np
import pytest

from selfcrit.harness.synthetic import (SyntheticConfig, boundary_points, gen_synthetic,
                                        mean_boundary_x, render_svg)
from selfcrit.harness.toyqa import (GROUPS, ToyQaConfig, build_proposals, gen_toy_qa, load_corpus,
                                    make_embeddings, save_corpus, template_answer_distribution,
                                    template_priors)
from selfcrit.proposal import cosine

SMALL = dict(n_train=400, n_test=400)


def test_template_priors_sum_to_one_and_shift():
    tr, te = template_priors(4, 0.0)
    np.testing.assert_allclose(tr, te)
    tr, te = template_priors(4, 1.0)
    assert tr[0] == 1.0 and te[0] == 0.0
    for shift in (0.0, 0.3, 0.8):
        tr, te = template_priors(4, shift)
        assert np.isclose(tr.sum(), 1.0) and np.isclose(te.sum(), 1.0)


def test_generator_is_seeded():
    a = gen_toy_qa(ToyQaConfig(seed=3, **SMALL))
    b = gen_toy_qa(ToyQaConfig(seed=3, **SMALL))
    c = gen_toy_qa(ToyQaConfig(seed=4, **SMALL))
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a.train, b.train))
    assert [x.answer for x in a.test] == [x.answer for x in b.test]
    assert not np.array_equal(a.train[0].features, c.train[0].features)


def test_shift_inverts_train_majority():
    corpus = gen_toy_qa(ToyQaConfig(shift=0.8, n_train=3000, n_test=3000))
    n = len(corpus.answers)
    tr = template_answer_distribution(corpus.train, n)
    te = template_answer_distribution(corpus.test, n)
    for t in tr:
        top = int(np.argmax(tr[t]))
        assert tr[t][top] > 0.6
        assert te[t][top] < 0.15


def test_no_shift_keeps_distributions_close():
    corpus = gen_toy_qa(ToyQaConfig(shift=0.0, n_train=3000, n_test=3000))
    n = len(corpus.answers)
    tr = template_answer_distribution(corpus.train, n)
    te = template_answer_distribution(corpus.test, n)
    for t in tr:
        assert np.abs(tr[t] - te[t]).max() < 0.08


def test_instances_are_consistent():
    corpus = gen_toy_qa(ToyQaConfig(**SMALL))
    for inst in corpus.train[:50]:
        assert inst.categories[inst.causal] == inst.answer
        assert inst.gold[corpus.answers.index(inst.answer)] == 1.0
        assert inst.answer in GROUPS[list(GROUPS)[inst.template]]
        assert inst.answer in inst.explanation
        assert np.isclose(inst.attention.sum(), 1.0)


@pytest.mark.parametrize("method", ["textual", "qa"])
def test_causal_object_is_proposed(method):
    corpus = gen_toy_qa(ToyQaConfig(**SMALL))
    props = build_proposals(corpus.train, method, make_embeddings(0))
    assert all(inst.causal in p.indices for inst, p in zip(corpus.train, props))


def test_visual_proposals_rank_the_causal_object_high():
    corpus = gen_toy_qa(ToyQaConfig(**SMALL))
    props = build_proposals(corpus.train, "visual", make_embeddings(0), k=3)
    hit = np.mean([inst.causal in p.indices for inst, p in zip(corpus.train, props)])
    assert hit > 0.8


def test_proposal_never_covers_every_object():
    corpus = gen_toy_qa(ToyQaConfig(n_objects=3, **SMALL))
    props = build_proposals(corpus.train, "visual", make_embeddings(0), k=6)
    assert all(len(p.indices) <= 2 for p in props)


def test_unknown_method_rejected():
    corpus = gen_toy_qa(ToyQaConfig(n_train=2, n_test=2))
    with pytest.raises(ValueError):
        build_proposals(corpus.train, "gaze", make_embeddings(0))


def test_corpus_round_trip(tmp_path):
    corpus = gen_toy_qa(ToyQaConfig(n_train=20, n_test=10))
    save_corpus(corpus, tmp_path)
    back = load_corpus(tmp_path)
    assert back.answers == corpus.answers and back.vocab == corpus.vocab
    for a, b in zip(corpus.train + corpus.test, back.train + back.test):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.gold, b.gold)
        assert a.tokens == b.tokens and a.boxes == b.boxes and a.categories == b.categories
        assert np.array_equal(a.attention, b.attention)


def test_load_rejects_foreign_directory(tmp_path):
    (tmp_path / "meta.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_corpus(tmp_path)


def test_embedding_groups_are_closer_than_background():
    store = make_embeddings(0)
    members = GROUPS["animal"]
    inner = cosine(store.get(members[0]), store.get(members[1]))
    outer = cosine(store.get(members[0]), store.get("tree"))
    assert inner > 0.3 > abs(outer)


# --- synthetic ------------------------------------------------------------------

def test_synthetic_class_balance_flips():
    cfg = SyntheticConfig(n_train=4000, n_test=4000)
    d = gen_synthetic(cfg, 0.1)
    assert abs(np.mean(d.y_train == 0) - 0.1) < 0.02
    assert abs(np.mean(d.y_test == 0) - 0.9) < 0.02
    assert d.proposal == [0]


def test_synthetic_is_seeded_per_p():
    cfg = SyntheticConfig()
    a, b = gen_synthetic(cfg, 0.05), gen_synthetic(cfg, 0.05)
    assert np.array_equal(a.X_train, b.X_train) and np.array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.X_train, gen_synthetic(cfg, 0.1).X_train)


def test_synthetic_rejects_degenerate_p():
    with pytest.raises(ValueError):
        gen_synthetic(SyntheticConfig(), 0.0)
    with pytest.raises(ValueError):
        SyntheticConfig(ps=[0.5, 1.0])


def test_boundary_of_vertical_split():
    xs = np.linspace(-8, 8, 200)
    raster = np.tile((xs > 1.0).astype(int), (200, 1))
    pts = boundary_points(raster)
    assert len(pts) == 200
    assert abs(mean_boundary_x(raster) - 1.0) < 16 / 199
    assert np.isnan(mean_boundary_x(np.zeros((10, 10), dtype=int)))


def test_svg_is_well_formed():
    d = gen_synthetic(SyntheticConfig(n_train=50, n_test=50), 0.2)
    raster = np.tile((np.linspace(-8, 8, 200) > 0).astype(int), (200, 1))
    row = {"p": 0.2, "pretrain_test_acc": 0.5, "finetune_test_acc": 0.6}
    root = ET.fromstring(render_svg([{"row": row, "data": d, "rasters": (raster, raster)}]))
    assert root.tag.endswith("svg")
    assert len(root.findall(".//{http://www.w3.org/2000/svg}polyline")) == 4
