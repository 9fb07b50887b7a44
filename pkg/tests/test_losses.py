import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfcrit import autodiff as ad
from selfcrit.autodiff import Tensor
from selfcrit.losses import (Bucket, LossConfig, _infl_from_S, answer_weight, answer_weight_table,
                             build_bucket, cosine_distance, influence_strengthen_loss,
                             influence_strengthen_value, joint_loss, joint_objective,
                             self_critical_loss, self_critical_value, vqa_loss)
from selfcrit.models import QaConfig, QaInstance, QaModel
from selfcrit.proposal import EmbeddingStore
from selfcrit.sensitivity import select_most_influential, sensitivity_matrix, weighted_sensitivity

from probes import LinearProbe


def brute_infl(S, I):
    outside = [j for j in range(len(S)) if j not in I]
    return min(sum(max(S[j] - S[i], 0.0) for j in outside) for i in I)


# --- L_vqa ---------------------------------------------------------------------

def test_vqa_loss_fair_coin():
    P = Tensor(np.full((1, 4), 0.5))
    assert vqa_loss(P, np.full((1, 4), 0.5)).item() == pytest.approx(math.log(2), abs=1e-15)


def test_vqa_loss_hand_value():
    assert vqa_loss(Tensor([0.9, 0.1]), [1.0, 0.0]).item() == pytest.approx(0.10536051565782628, abs=1e-14)


def test_vqa_loss_perfect_limit_and_clamp():
    assert vqa_loss(Tensor([1 - 1e-9]), [1.0]).item() < 1e-8
    # exact 0/1 confidences stay finite
    assert np.isfinite(vqa_loss(Tensor([0.0, 1.0]), [1.0, 0.0]).item())


def test_vqa_loss_shape_mismatch():
    with pytest.raises(ValueError):
        vqa_loss(Tensor([0.5, 0.5]), [1.0])


# --- L_infl --------------------------------------------------------------------

@pytest.mark.parametrize("S,expected", [([0.9, 0.1, 0.5, 0.2], 0.0), ([0.1, 0.2, 0.5, 0.4], 0.5)])
def test_infl_worked_examples(S, expected):
    S = np.array(S)
    assert influence_strengthen_value(S, [0, 1]) == pytest.approx(expected, abs=1e-15)
    loss, _ = _infl_from_S(Tensor(S[None]), [0], [[0, 1]])
    assert loss.item() == pytest.approx(expected, abs=1e-15)


def test_infl_agrees_with_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        K = int(rng.integers(2, 8))
        S = rng.normal(size=K)
        I = [int(i) for i in rng.choice(K, size=int(rng.integers(1, K)), replace=False)]
        loss, v_star = _infl_from_S(Tensor(S[None]), [0], [I])
        assert loss.item() == brute_infl(S, I)
        assert influence_strengthen_value(S, I) == brute_infl(S, I)
        assert v_star[0] == select_most_influential(S, I)


def test_infl_zero_exactly_on_dominance():
    rng = np.random.default_rng(1)
    for _ in range(300):
        K = int(rng.integers(3, 9))
        S = rng.normal(size=K)
        top = int(np.argmax(S))
        rest = [k for k in range(K) if k != top]
        I = [top] + [int(i) for i in rng.choice(rest, size=int(rng.integers(0, K - 2)), replace=False)]
        assert _infl_from_S(Tensor(S[None]), [0], [I])[0].item() == 0.0
        # and positive when every proposal is strictly beaten by an outsider
        I2 = [k for k in rest if S[k] < S[top]][:1]
        if I2:
            assert _infl_from_S(Tensor(S[None]), [0], [I2])[0].item() > 0.0


def test_infl_loss_on_probe_matches_value():
    S_target = np.array([[0.1, 0.2, 0.5, 0.4]])
    probe = LinearProbe(C=[4.0 * S_target], B=[np.zeros(1)])
    inst = QaInstance(features=np.zeros((4, 2)), tokens=[0], gold=np.array([1.0]))
    assert influence_strengthen_loss(0, [0, 1], inst, probe).item() == pytest.approx(0.5, abs=1e-15)


# --- bucket --------------------------------------------------------------------

def test_bucket_empty_when_gt_on_top():
    assert len(build_bucket(np.array([0.9, 0.3, 0.8]), 0)) == 0


def test_bucket_top_two():
    b = build_bucket(np.array([0.9, 0.8, 0.7, 0.2]), 3, capacity=2)
    assert b.answers == [0, 1]


def test_bucket_capacity_clamp():
    P = np.array([0.1, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65])
    b = build_bucket(P, 0)
    assert b.answers == [1, 2, 3, 4, 5]
    assert len(build_bucket(P, 0, capacity=10)) == 7


def test_bucket_excludes_ties():
    assert build_bucket(np.array([0.5, 0.5, 0.6]), 0).answers == [2]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.data())
def test_bucket_properties(P, data):
    P = np.array(P)
    gt = data.draw(st.integers(0, len(P) - 1))
    b = build_bucket(P, gt)
    assert gt not in b.answers
    assert all(P[a] > P[gt] for a in b)
    assert len(b) <= 5
    assert all(x > y for x, y in zip(b.confidences, b.confidences[1:])) or len(set(b.confidences)) < len(b)


# --- answer weights --------------------------------------------------------------

def store2(**vecs):
    return EmbeddingStore({k: np.array(v, dtype=float) for k, v in vecs.items()})


def test_weight_of_ground_truth_is_zero():
    s = store2(cat=[1, 2], dog=[2, 1])
    assert answer_weight(0, 0, ["cat", "dog"], s) == 0.0


def test_weight_orthogonal_and_antipodal():
    s = store2(up=[1, 0], left=[0, 1], down=[-1, 0])
    answers = ["up", "left", "down"]
    assert answer_weight(1, 0, answers, s) == 1.0
    assert answer_weight(2, 0, answers, s) == 2.0


def test_weight_multiword_sums_and_oov():
    s = store2(hot=[1, 0], dog=[0, 1], sausage=[1, 1])
    answers = ["hot dog", "sausage", "zebra"]
    assert answer_weight(1, 0, answers, s) == pytest.approx(0.0, abs=1e-15)
    assert answer_weight(2, 0, answers, s) == 1.0


def test_weight_table_symmetric_and_scale_invariant():
    rng = np.random.default_rng(2)
    words = ["a", "b", "c", "d"]
    vecs = {w: rng.normal(size=5) for w in words}
    t1 = answer_weight_table(words, EmbeddingStore(vecs))
    t2 = answer_weight_table(words, EmbeddingStore({w: 7.5 * v for w, v in vecs.items()}))
    np.testing.assert_allclose(t1, t1.T, atol=1e-15)
    np.testing.assert_allclose(t1, t2, atol=1e-12)
    assert np.all(np.diag(t1) == 0) and np.all((t1 >= 0) & (t1 <= 2))
    np.testing.assert_array_equal(answer_weight_table(words), 1 - np.eye(4))


def test_cosine_distance_zero_vector_is_neutral():
    assert cosine_distance(np.zeros(3), np.ones(3)) == 1.0


# --- L_crit ----------------------------------------------------------------------

def probe_with_S(S):
    """Probe whose sensitivity matrix at zero features equals S."""
    S = np.asarray(S, dtype=float)
    return LinearProbe(C=[4.0 * S], B=[np.zeros(S.shape[0])])


def test_crit_empty_bucket_is_zero():
    inst = QaInstance(features=np.zeros((2, 2)), tokens=[0], gold=np.array([1.0, 0.0]))
    out = self_critical_loss(Bucket(), 0, 0, np.ones(2), inst, probe_with_S([[0.3, 0.1], [0.7, 0.2]]))
    assert out.item() == 0.0


def test_crit_single_answer():
    S = np.array([[0.3, 0.1], [0.7, 0.2]])
    inst = QaInstance(features=np.zeros((2, 2)), tokens=[0], gold=np.array([1.0, 0.0]))
    out = self_critical_loss(Bucket([1]), 0, 0, np.array([0.0, 1.0]), inst, probe_with_S(S))
    assert out.item() == pytest.approx(0.4, abs=1e-15)
    assert self_critical_value(S, [1], 0, 0, [0.0, 1.0]) == pytest.approx(0.4, abs=1e-15)


def test_crit_two_answers_cancel():
    # gaps 0.2 and -0.1 at v* = 0, weights 0.5 and 1.0
    S = np.array([[0.3, 0.0], [0.5, 0.0], [0.2, 0.0]])
    inst = QaInstance(features=np.zeros((2, 2)), tokens=[0], gold=np.array([1.0, 0.0, 0.0]))
    w = np.array([0.0, 0.5, 1.0])
    out = self_critical_loss(Bucket([1, 2]), 0, 0, w, inst, probe_with_S(S))
    assert out.item() == pytest.approx(0.0, abs=1e-15)


def test_crit_can_be_negative():
    S = np.array([[0.9, 0.0], [0.1, 0.0]])
    assert self_critical_value(S, [1], 0, 0, [0.0, 1.0]) < 0


def tiny_qa(seed):
    return QaModel(QaConfig(vocab_size=6, n_answers=4, d_obj=3, d_word=2, hidden=3, joint=3, seed=seed))


def test_crit_descent_property():
    rng = np.random.default_rng(3)
    checked = 0
    for seed in range(30):
        model = tiny_qa(seed)
        inst = QaInstance(features=rng.normal(size=(4, 3)), tokens=[2, 3], gold=np.zeros(4) + np.eye(4)[0])
        with ad.no_grad():
            P = model(Tensor(inst.features[None]), [inst.tokens]).data[0]
        gt = int(np.argmin(P))
        inst.gold = np.eye(4)[gt]
        bucket = build_bucket(P, gt, capacity=1)
        v_star = int(rng.integers(4))
        w = np.ones(4)
        a = bucket.answers[0]

        def gap():
            M = sensitivity_matrix(inst, model)
            return M[a, v_star] - M[gt, v_star]

        before = gap()
        loss = self_critical_loss(bucket, gt, v_star, w, inst, model)
        params = list(model.params.values())
        grads = ad.grad(loss, params)
        for p, g in zip(params, grads):
            p.data -= 1e-4 * g.data
        assert gap() <= before
        checked += 1
    assert checked == 30


# --- joint loss ------------------------------------------------------------------------

def test_joint_degenerate_weights_equal_vqa():
    model = tiny_qa(0)
    inst = QaInstance(features=np.random.default_rng(0).normal(size=(4, 3)), tokens=[2], gold=np.eye(4)[1])
    total, parts = joint_loss(inst, model, LossConfig(0, 0), [0, 1])
    with ad.no_grad():
        P = model(Tensor(inst.features[None]), [inst.tokens])
    assert total.item() == vqa_loss(P, inst.gold[None]).item()
    assert parts["infl"] == parts["crit"] == 0.0


def test_joint_breakdown_adds_up():
    model = tiny_qa(1)
    rng = np.random.default_rng(1)
    inst = QaInstance(features=rng.normal(size=(4, 3)), tokens=[2, 4], gold=np.eye(4)[2])
    total, parts = joint_loss(inst, model, LossConfig(20, 2000), [1, 3])
    assert total.item() == pytest.approx(parts["vqa"] + 20 * parts["infl"] + 2000 * parts["crit"], rel=1e-12)


def test_joint_terms_match_single_instance_forms():
    model = tiny_qa(2)
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(4, 3))
    with ad.no_grad():
        P = model(Tensor(feats[None]), [[3, 2]]).data[0]
    gt = int(np.argmin(P))
    inst = QaInstance(features=feats, tokens=[3, 2], gold=np.eye(4)[gt])
    I = [0, 2]
    _, parts = joint_loss(inst, model, LossConfig(1, 1, bucket_size=5), I)
    S = sensitivity_matrix(inst, model)
    v_star = select_most_influential(S[gt], I)
    bucket = build_bucket(P, gt)
    assert parts["infl"] == pytest.approx(influence_strengthen_value(S[gt], I), rel=1e-10, abs=1e-15)
    assert parts["crit"] == pytest.approx(self_critical_value(S, bucket, gt, v_star, np.ones(4)), rel=1e-10, abs=1e-15)
    assert parts["bucket"] == len(bucket) == 3


def test_joint_loss_gradient_matches_fd():
    """Full joint loss, including the gradient-of-gradient terms, against central differences."""
    rng = np.random.default_rng(5)
    cfg = LossConfig(lambda_infl=20, lambda_crit=2000, bucket_size=5)
    worst = 0.0
    for point in range(20):
        model = tiny_qa(point)
        feats = rng.normal(size=(2, 4, 3))
        tokens = [[2, 3], [4, 5, 2]]
        with ad.no_grad():
            P0 = model(Tensor(feats), tokens).data
        # ground truth at the least confident answer so the bucket is full
        gold = np.eye(4)[np.argmin(P0, axis=1)]
        V = Tensor(feats, requires_grad=True)
        S_gt = weighted_sensitivity(model(V, tokens), V, gold).data
        # least sensitive object as the proposal keeps L_infl active
        proposals = [[int(np.argmin(row))] for row in S_gt]

        def loss_value():
            V = Tensor(feats, requires_grad=True)
            return joint_objective(model(V, tokens), V, gold, proposals, cfg)[0]

        V = Tensor(feats, requires_grad=True)
        total, parts = joint_objective(model(V, tokens), V, gold, proposals, cfg)
        assert parts["bucket"] > 0 and parts["infl"] > 0
        names = list(model.params)
        grads = dict(zip(names, ad.grad(total, [model.params[k] for k in names])))
        for _ in range(6):
            k = names[int(rng.integers(len(names)))]
            arr = model.params[k].data
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            h = 1e-6
            old = arr[idx]
            arr[idx] = old + h
            up = loss_value().item()
            arr[idx] = old - h
            down = loss_value().item()
            arr[idx] = old
            fd = (up - down) / (2 * h)
            err = ad.relative_error(grads[k].data[idx], fd, 1e-3)
            worst = max(worst, err)
            assert err < 1e-4, (point, k, idx, grads[k].data[idx], fd)
    assert worst < 1e-4
