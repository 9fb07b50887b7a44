"""Evaluation: soft-score accuracy and the false sensitivity rate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sensitivity import onehot, select_most_influential, weighted_sensitivity

CSV_FIELDS = ["score", "fsr", "n_total", "n_counted", "n_false", "n_excluded", "n_wrong"]


@dataclass
class EvalReport:
    score: float
    fsr: float
    n_total: int
    n_counted: int          # instances with a usable proposal set
    n_false: int            # false-sensitivity instances among the counted ones
    n_excluded: int
    n_wrong: int            # counted instances whose prediction scored exactly 0
    per_type: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_counted and not 0.0 <= self.fsr <= 1.0:
            raise ValueError(f"FSR {self.fsr} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def soft_score(prediction: int, gold) -> float:
    return float(np.asarray(gold)[int(prediction)])


def stack_instances(instances):
    """Pad object sets to a common size; returns features (N, K, d), token lists, gold, mask."""
    K = max(inst.n_objects for inst in instances)
    d = instances[0].features.shape[1]
    V = np.zeros((len(instances), K, d))
    mask = np.zeros((len(instances), K))
    for r, inst in enumerate(instances):
        V[r, :inst.n_objects] = inst.features
        mask[r, :inst.n_objects] = 1.0
    gold = np.stack([inst.gold for inst in instances])
    return V, [inst.tokens for inst in instances], gold, mask


def _proposal_list(p):
    if p is None:
        return []
    return list(getattr(p, "indices", p))


def batch_false_sensitivity(model, instances, proposals):
    """Per-instance (prediction, counted, false_sensitive) flags for one batch."""
    V_np, tokens, gold, mask = stack_instances(instances)
    full = bool(mask.all())
    V = Tensor(V_np, requires_grad=True)
    P = model(V, tokens, None if full else mask)
    A = P.shape[1]
    pred = np.argmax(P.data, axis=1)
    gts = np.argmax(gold, axis=1)
    S_gt = weighted_sensitivity(P, V, onehot(gts, A)).data
    S_pred = weighted_sensitivity(P, V, onehot(pred, A)).data
    counted = np.zeros(len(instances), dtype=bool)
    false = np.zeros(len(instances), dtype=bool)
    for r, prop in enumerate(proposals):
        I = _proposal_list(prop)
        if not I:
            continue
        counted[r] = True
        v_star = select_most_influential(S_gt[r], I, mask[r] > 0)
        false[r] = (S_pred[r, v_star] - S_gt[r, v_star] > 0) and gold[r, pred[r]] == 0
    return pred, counted, false


def evaluate(model, instances, proposals=None, batch_size: int = 256, with_fsr: bool = True) -> EvalReport:
    """Soft score over every instance; FSR over instances that have a proposal set."""
    if not instances:
        raise ValueError("cannot evaluate an empty dataset")
    if proposals is None:
        proposals = [None] * len(instances)
    preds, counted, false = [], [], []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        props = proposals[start:start + batch_size]
        if with_fsr:
            p, c, f = batch_false_sensitivity(model, chunk, props)
        else:
            V, tokens, _, mask = stack_instances(chunk)
            with ad.no_grad():
                P = model(Tensor(V), tokens, None if mask.all() else mask)
            p = np.argmax(P.data, axis=1)
            c = f = np.zeros(len(chunk), dtype=bool)
        preds.append(p)
        counted.append(c)
        false.append(f)
    preds = np.concatenate(preds)
    counted = np.concatenate(counted)
    false = np.concatenate(false)
    scores = np.array([soft_score(p, inst.gold) for p, inst in zip(preds, instances)])
    per_type = {}
    types = [inst.template for inst in instances]
    if any(t is not None for t in types):
        for t in sorted({t for t in types if t is not None}):
            sel = np.array([tt == t for tt in types])
            per_type[str(t)] = float(scores[sel].mean())
    n_counted = int(counted.sum())
    wrong = counted & (scores == 0)
    return EvalReport(
        score=float(scores.mean()),
        fsr=float(false.sum() / n_counted) if n_counted else float("nan"),
        n_total=len(instances),
        n_counted=n_counted,
        n_false=int(false.sum()),
        n_excluded=len(instances) - n_counted,
        n_wrong=int(wrong.sum()),
        per_type=per_type,
    )


def false_sensitivity_rate(instances, model, proposals, batch_size: int = 256) -> float:
    """Fraction of counted instances whose zero-credit prediction is more
    sensitive to v* than the ground-truth answer is."""
    if not instances:
        raise ValueError("cannot compute FSR on an empty dataset")
    report = evaluate(model, instances, proposals, batch_size)
    if report.n_counted == 0:
        raise ValueError("no instance has a usable proposal set")
    return report.fsr
