"""Gradient sensitivities of answer confidences to object features.

The sensitivity of answer ``a`` to object ``i`` is the plain sum of the
entries of d P(a) / d v_i.  Unlike GradCAM there is no ReLU on the
result and the gradient is not multiplied by the features, so negative
evidence survives and the value does not depend on the object's current
feature magnitudes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def weighted_sensitivity(P: Tensor, V: Tensor, weights, create_graph: bool = False) -> Tensor:
    """Sensitivities of the answer combination ``sum_a weights[n, a] * P[n, a]``.

    ``V`` must be the leaf the forward pass started from.  Instances are
    independent in every model here, so a single backward over the batch
    yields per-instance gradients.  Returns (N, K); for 2-d ``V`` each
    column is treated as a one-dimensional object.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != P.shape:
        raise ad.ShapeError(f"sensitivity weights {weights.shape} do not match confidences {P.shape}")
    total = ad.sum_(P * Tensor(weights))
    (g,) = ad.grad(total, [V], create_graph=create_graph)
    return ad.sum_(g, 2) if g.ndim == 3 else g


def onehot(index, depth: int, values=None) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((index.size, depth))
    out[np.arange(index.size), index] = 1.0 if values is None else values
    return out


def _forward_single(model, inst):
    V = Tensor(inst.features[None], requires_grad=True)
    return V, model(V, [inst.tokens])


def sensitivity(a: int, i: int, inst, model, create_graph: bool = False):
    """S(a, v_i) for one instance.  Returns a 0-d Tensor when ``create_graph`` else a float."""
    if not 0 <= i < inst.n_objects:
        raise IndexError(f"object index {i} out of range for {inst.n_objects} objects")
    if not 0 <= a < model.config.n_answers:
        raise IndexError(f"answer index {a} out of range")
    V, P = _forward_single(model, inst)
    S = weighted_sensitivity(P, V, onehot([a], P.shape[1]), create_graph)
    s = ad.reshape(ad.take(S, [i], 1), ())
    return s if create_graph else s.item()


def sensitivity_matrix(inst, model) -> np.ndarray:
    """Full |A| x |V| sensitivity matrix, one backward sweep per answer."""
    V, P = _forward_single(model, inst)
    A = P.shape[1]
    rows = [weighted_sensitivity(P, V, onehot([a], A)).data[0] for a in range(A)]
    return np.stack(rows)


def sensitivity_violation(s_i, s_j):
    """max(S(a, v_j) - S(a, v_i), 0); works on floats and Tensors."""
    if isinstance(s_i, Tensor) or isinstance(s_j, Tensor):
        return ad.relu(ad.sub(s_j, s_i))
    return max(float(s_j) - float(s_i), 0.0)


def _check_proposals(I, n_objects: int) -> list[int]:
    I = [int(i) for i in I]
    if not I:
        raise ValueError("proposal set is empty")
    if len(set(I)) != len(I) or any(not 0 <= i < n_objects for i in I):
        raise ValueError(f"proposal indices {I} invalid for {n_objects} objects")
    if len(I) >= n_objects:
        raise ValueError("proposal set covers every object; no outside objects to compare against")
    return I


def violation_sums(S_gt: np.ndarray, I, valid=None) -> dict[int, float]:
    """For each proposal object, its summed violations against all outside objects."""
    S_gt = np.asarray(S_gt, dtype=np.float64)
    I = _check_proposals(I, S_gt.size)
    outside = np.ones(S_gt.size, dtype=bool)
    outside[I] = False
    if valid is not None:
        outside &= np.asarray(valid, dtype=bool)
    return {i: float(np.sum(np.maximum(S_gt[outside] - S_gt[i], 0.0))) for i in I}


def select_most_influential(S_gt: np.ndarray, I, valid=None) -> int:
    """Proposal object with the smallest violation sum; ties go to the lowest index."""
    sums = violation_sums(S_gt, I, valid)
    return min(sorted(sums), key=lambda i: sums[i])


def most_influential(a_gt: int, I, inst, model) -> int:
    I = _check_proposals(I, inst.n_objects)
    if len(I) == 1:
        return I[0]
    S = sensitivity_matrix_row(a_gt, inst, model)
    return select_most_influential(S, I)


def sensitivity_matrix_row(a: int, inst, model) -> np.ndarray:
    V, P = _forward_single(model, inst)
    return weighted_sensitivity(P, V, onehot([a], P.shape[1])).data[0]


@dataclass
class SensitivityReport:
    S: np.ndarray                       # (|A|, |V|)
    v_star_index: int
    proposal_indices: list[int]
    a_gt: int
    create_graph: bool = False
    answers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not np.all(np.isfinite(self.S)):
            raise ad.NonFiniteError("sensitivity matrix contains non-finite values")
        if self.v_star_index not in self.proposal_indices:
            raise ValueError("most influential object must belong to the proposal set")

    def to_json(self) -> str:
        d = asdict(self)
        d["S"] = self.S.tolist()
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SensitivityReport":
        d = json.loads(text)
        d["S"] = np.asarray(d["S"], dtype=np.float64)
        return cls(**d)


def sensitivity_report(inst, model, I, answers=None) -> SensitivityReport:
    S = sensitivity_matrix(inst, model)
    I = _check_proposals(I, inst.n_objects)
    v_star = select_most_influential(S[inst.a_gt], I)
    return SensitivityReport(S=S, v_star_index=v_star, proposal_indices=I, a_gt=inst.a_gt,
                             answers=list(answers or []))

