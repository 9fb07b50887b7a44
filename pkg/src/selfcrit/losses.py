"""Training objectives: soft-target BCE, the influence-strengthening loss,
the self-critical loss, and their weighted combination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sensitivity import (_check_proposals, onehot, select_most_influential,
                          violation_sums, weighted_sensitivity)

BCE_EPS = 1e-12


@dataclass
class LossConfig:
    lambda_infl: float = 20.0
    lambda_crit: float = 2000.0
    bucket_size: int = 5


@dataclass
class Bucket:
    answers: list[int] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    capacity: int = 5

    def __len__(self):
        return len(self.answers)

    def __iter__(self):
        return iter(self.answers)


def vqa_loss(P, gold) -> Tensor:
    """Mean binary cross-entropy against soft scores, over answers (and instances)."""
    P = ad.as_tensor(P)
    gold = np.asarray(gold, dtype=np.float64)
    if gold.shape != P.shape:
        raise ad.ShapeError(f"vqa_loss: confidences {P.shape} and gold scores {gold.shape} differ")
    Pc = ad.clamp(P, BCE_EPS, 1.0 - BCE_EPS)
    s = Tensor(gold)
    ll = s * ad.log(Pc) + (1.0 - s) * ad.log(1.0 - Pc)
    return ad.scale(ad.sum_(ll), -1.0 / gold.size)


def build_bucket(P, a_gt: int, capacity: int = 5) -> Bucket:
    """Up to ``capacity`` answers strictly more confident than ``a_gt``, most confident first."""
    P = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64).reshape(-1)
    above = np.flatnonzero(P > P[a_gt])
    order = above[np.argsort(-P[above], kind="stable")][:capacity]
    return Bucket([int(a) for a in order], [float(P[a]) for a in order], capacity)


def phrase_vector(text: str, store) -> np.ndarray:
    """Sum of word vectors; unknown words contribute zero."""
    vec = np.zeros(store.dim)
    for word in text.lower().split():
        v = store.get(word)
        if v is not None:
            vec = vec + v
    return vec


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 1.0
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 2.0))


def answer_weight(a: int, a_gt: int, answers: list[str], store) -> float:
    """Cosine distance between the summed word embeddings of two answers."""
    if a == a_gt:
        return 0.0
    return cosine_distance(phrase_vector(answers[a_gt], store), phrase_vector(answers[a], store))


def answer_weight_table(answers: list[str], store=None) -> np.ndarray:
    """(|A|, |A|) table, row = ground truth.  Without a store every off-diagonal weight is 1."""
    n = len(answers)
    if store is None:
        return 1.0 - np.eye(n)
    vecs = [phrase_vector(a, store) for a in answers]
    table = np.array([[cosine_distance(vecs[g], vecs[a]) for a in range(n)] for g in range(n)])
    np.fill_diagonal(table, 0.0)
    return table


# --- value-level forms, used for inspection and as test oracles -------------

def influence_strengthen_value(S_gt: np.ndarray, I, valid=None) -> float:
    return min(violation_sums(S_gt, I, valid).values())


def self_critical_value(S: np.ndarray, bucket, a_gt: int, v_star: int, weights) -> float:
    """S is (|A|, |V|); ``weights`` indexed by answer."""
    return float(sum(weights[a] * (S[a, v_star] - S[a_gt, v_star]) for a in bucket))


# --- differentiable single-instance forms ------------------------------------

def _instance_forward(inst, model):
    V = Tensor(inst.features[None], requires_grad=True)
    return V, model(V, [inst.tokens])


def influence_strengthen_loss(a_gt: int, I, inst, model) -> Tensor:
    """min over proposals of summed violations, differentiable w.r.t. model parameters."""
    I = _check_proposals(I, inst.n_objects)
    V, P = _instance_forward(inst, model)
    S = weighted_sensitivity(P, V, onehot([a_gt], P.shape[1]), create_graph=True)
    return _infl_from_S(S, [a_gt], [I])[0]


def self_critical_loss(bucket, a_gt: int, v_star: int, weights, inst, model) -> Tensor:
    """sum over bucket answers of w(a) * (S(a, v*) - S(a_gt, v*)); not clamped."""
    answers = list(bucket)
    if not answers:
        return Tensor(0.0)
    V, P = _instance_forward(inst, model)
    coef = np.zeros(P.shape)
    for a in answers:
        coef[0, a] += weights[a]
        coef[0, a_gt] -= weights[a]
    S = weighted_sensitivity(P, V, coef, create_graph=True)
    return ad.reshape(ad.take(S, [v_star], 1), ())


def _infl_from_S(S: Tensor, gts, proposals, valid=None):
    """Influence-strengthening loss per row of S (N, K) plus the selected v* per row.

    Rows with no proposal set get v* = -1 and contribute zero.
    """
    n, K = S.shape
    star = np.zeros((n, K))
    outside = np.zeros((n, K))
    v_star = np.full(n, -1, dtype=np.int64)
    for r, I in enumerate(proposals):
        if not I:
            continue
        ok = None if valid is None else valid[r]
        v_star[r] = select_most_influential(S.data[r], I, ok)
        star[r, v_star[r]] = 1.0
        outside[r] = 1.0
        outside[r, list(I)] = 0.0
        if ok is not None:
            outside[r] *= ok
    s_star = ad.expand(ad.sum_(S * Tensor(star), 1), (n, K), 1)
    per_row = ad.sum_(ad.relu(S - s_star) * Tensor(outside), 1)
    if n == 1:
        return ad.reshape(per_row, ()), v_star
    return per_row, v_star


# --- batched joint objective --------------------------------------------------

def joint_objective(P: Tensor, V: Tensor, gold: np.ndarray, proposals, cfg: LossConfig,
                    weight_table: np.ndarray | None = None, valid=None):
    """Batch joint loss L_vqa + lambda_infl * L_infl + lambda_crit * L_crit.

    ``P`` must have been computed from the leaf ``V``.  ``proposals`` holds one
    index list per instance; an empty list disables the sensitivity terms for
    that instance.  Returns the scalar loss and a float breakdown.
    """
    gold = np.asarray(gold, dtype=np.float64)
    n, A = P.shape
    l_vqa = vqa_loss(P, gold)
    zero = Tensor(0.0)
    l_infl, l_crit = zero, zero
    n_bucket = 0
    if cfg.lambda_infl or cfg.lambda_crit:
        gts = np.argmax(gold, axis=1)
        rows = [list(I) if I is not None else [] for I in proposals]
        S_gt = weighted_sensitivity(P, V, onehot(gts, A), create_graph=True)
        per_infl, v_star = _infl_from_S(S_gt, gts, rows, valid)
        if cfg.lambda_infl:
            l_infl = ad.scale(ad.sum_(per_infl), 1.0 / n)
        if cfg.lambda_crit:
            table = weight_table if weight_table is not None else 1.0 - np.eye(A)
            coef = np.zeros((n, A))
            star = np.zeros(S_gt.shape)
            for r in range(n):
                if v_star[r] < 0:
                    continue
                bucket = build_bucket(P.data[r], gts[r], cfg.bucket_size)
                for a in bucket:
                    coef[r, a] += table[gts[r], a]
                    coef[r, gts[r]] -= table[gts[r], a]
                n_bucket += len(bucket)
                star[r, v_star[r]] = 1.0
            if np.any(coef):
                S_c = weighted_sensitivity(P, V, coef, create_graph=True)
                l_crit = ad.scale(ad.sum_(S_c * Tensor(star)), 1.0 / n)
    total = l_vqa + ad.scale(l_infl, cfg.lambda_infl) + ad.scale(l_crit, cfg.lambda_crit)
    breakdown = {"vqa": l_vqa.item(), "infl": l_infl.item(), "crit": l_crit.item(),
                 "joint": total.item(), "bucket": n_bucket}
    return total, breakdown


def joint_loss(inst, model, cfg: LossConfig, proposals, weight_table=None):
    """Joint loss for one instance; returns (scalar Tensor, breakdown)."""
    V = Tensor(inst.features[None], requires_grad=True)
    P = model(V, [inst.tokens])
    return joint_objective(P, V, inst.gold[None], [list(proposals or [])], cfg, weight_table)
