"""Differentiable predictors: a deep ReLU MLP and a small attention QA model."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "selfcrit-checkpoint"
CHECKPOINT_VERSION = 1

PAD_ID = 0
UNK_ID = 1


def _uniform(rng: np.random.Generator, fan_in: int, shape, scale: float = 1.0) -> np.ndarray:
    s = scale / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


class Module:
    """Holds named parameter tensors; subclasses fill ``self.params``."""

    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"checkpoint keys do not match model: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"checkpoint array {k!r} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].data[...] = v

    def config_dict(self) -> dict:
        return asdict(self.config)


# --- synthetic classifier -----------------------------------------------------

@dataclass
class MlpConfig:
    in_dim: int = 2
    hidden: int = 256
    depth: int = 15          # number of linear layers, output layer included
    n_classes: int = 2
    init_gain: float = 1.0
    seed: int = 0


class MlpClassifier(Module):
    """ReLU hidden layers, one sigmoid confidence per class."""

    kind = "mlp"

    def __init__(self, config: MlpConfig | None = None, **kw):
        self.config = config or MlpConfig(**kw)
        c = self.config
        if c.depth < 1:
            raise ValueError("depth must be >= 1")
        rng = np.random.default_rng(c.seed)
        dims = [c.in_dim] + [c.hidden] * (c.depth - 1) + [c.n_classes]
        self.params = {}
        for k in range(c.depth):
            fan_in = dims[k]
            self.params[f"W{k}"] = Tensor(_uniform(rng, fan_in, (dims[k], dims[k + 1]), c.init_gain), requires_grad=True)
            self.params[f"b{k}"] = Tensor(_uniform(rng, fan_in, (dims[k + 1],)), requires_grad=True)

    def logits(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise ad.ShapeError(f"mlp: expected input (N, {self.config.in_dim}), got {x.shape}")
        n = x.shape[0]
        h = x
        depth = self.config.depth
        for k in range(depth):
            W, b = self.params[f"W{k}"], self.params[f"b{k}"]
            h = h @ W + ad.expand(b, (n, W.shape[1]), 0)
            if k < depth - 1:
                h = ad.relu(h)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(x))


# --- question answering model -------------------------------------------------

@dataclass
class QaConfig:
    vocab_size: int = 64
    n_answers: int = 12
    d_obj: int = 16
    d_word: int = 16
    hidden: int = 32        # GRU hidden size
    joint: int = 32         # fusion space
    max_len: int = 14
    init_gain: float = 1.0  # scales the uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; embeddings excluded
    seed: int = 0


@dataclass
class QaInstance:
    features: np.ndarray            # (|V|, d_obj)
    tokens: list[int]
    gold: np.ndarray                # (|A|,) soft scores
    question: str = ""
    answer: str = ""
    categories: list[str] = field(default_factory=list)
    boxes: list[tuple] = field(default_factory=list)
    explanation: str | None = None
    attention: np.ndarray | None = None   # (H, W)
    template: int | None = None
    causal: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.gold = np.asarray(self.gold, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise ValueError(f"instance needs at least two objects, got features {self.features.shape}")
        if np.any(self.gold < 0) or np.any(self.gold > 1):
            raise ValueError("gold soft scores must lie in [0, 1]")

    @property
    def a_gt(self) -> int:
        return int(np.argmax(self.gold))

    @property
    def n_objects(self) -> int:
        return self.features.shape[0]


class QaModel(Module):
    """Embedding + single-layer GRU question encoder, per-object fusion with
    the question, soft attention pooling and a sigmoid answer head."""

    kind = "qa"

    def __init__(self, config: QaConfig | None = None, **kw):
        self.config = c = config or QaConfig(**kw)
        rng = np.random.default_rng(c.seed)
        H, D, J = c.hidden, c.d_word, c.joint

        def p(shape, fan_in):
            return Tensor(_uniform(rng, fan_in, shape, c.init_gain), requires_grad=True)

        self.params = {
            "embed": Tensor(rng.normal(0.0, 1.0, (c.vocab_size, D)), requires_grad=True),
            "gru_Wz": p((D, H), D), "gru_Uz": p((H, H), H), "gru_bz": p((H,), H),
            "gru_Wr": p((D, H), D), "gru_Ur": p((H, H), H), "gru_br": p((H,), H),
            "gru_Wn": p((D, H), D), "gru_Un": p((H, H), H), "gru_bn": p((H,), H),
            "obj_W": p((c.d_obj, J), c.d_obj), "obj_b": p((J,), c.d_obj),
            "q_W": p((H, J), H), "q_b": p((J,), H),
            "att_w": p((J, 1), J),
            "cls_W": p((J, J), J), "cls_b": p((J,), J),
            "out_W": p((J, c.n_answers), J), "out_b": p((c.n_answers,), J),
        }

    def _affine(self, x: Tensor, W: str, b: str) -> Tensor:
        Wt = self.params[W]
        return x @ Wt + ad.expand(self.params[b], (x.shape[0], Wt.shape[1]), 0)

    def encode(self, tokens) -> Tensor:
        """Final GRU state for each token sequence; returns (N, hidden)."""
        c = self.config
        seqs = [list(map(int, s)) for s in tokens]
        if not seqs:
            raise ValueError("no questions to encode")
        for s in seqs:
            if not s:
                raise ValueError("empty question")
            if len(s) > c.max_len:
                raise ValueError(f"question has {len(s)} tokens, max is {c.max_len}")
            bad = [t for t in s if not 0 <= t < c.vocab_size]
            if bad:
                raise ValueError(f"unknown token ids {bad} (vocab size {c.vocab_size}, unk id {UNK_ID})")
        n, H = len(seqs), c.hidden
        lengths = np.array([len(s) for s in seqs])
        L = int(lengths.max())
        ids = np.full((n, L), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        P = self.params
        h = Tensor(np.zeros((n, H)))
        for t in range(L):
            x = ad.take(P["embed"], ids[:, t], 0)
            z = ad.sigmoid(self._affine(x, "gru_Wz", "gru_bz") + h @ P["gru_Uz"])
            r = ad.sigmoid(self._affine(x, "gru_Wr", "gru_br") + h @ P["gru_Ur"])
            cand = ad.tanh(self._affine(x, "gru_Wn", "gru_bn") + (r * h) @ P["gru_Un"])
            new = (1.0 - z) * cand + z * h
            if (lengths > t).all():
                h = new
            else:
                m = Tensor(np.repeat((lengths > t).astype(np.float64)[:, None], H, axis=1))
                h = m * new + (1.0 - m) * h
        return h

    def predict(self, V: Tensor, q: Tensor, object_mask=None) -> Tensor:
        """Per-answer confidences (N, |A|) for objects V (N, K, d_obj) and question vectors q (N, hidden).

        ``object_mask`` (N, K) of 0/1 removes objects from attention entirely.
        """
        c = self.config
        V = ad.as_tensor(V)
        if V.ndim == 2:
            V = ad.reshape(V, (1,) + V.shape)
        if V.ndim != 3 or V.shape[2] != c.d_obj:
            raise ad.ShapeError(f"predict: expected objects (N, K, {c.d_obj}), got {V.shape}")
        n, K, _ = V.shape
        if K == 0:
            raise ValueError("predict: no objects")
        if q.shape != (n, c.hidden):
            raise ad.ShapeError(f"predict: question vectors {q.shape} do not match {n} instances")
        J = c.joint
        pv = ad.tanh(self._affine(ad.reshape(V, (n * K, c.d_obj)), "obj_W", "obj_b"))
        pq = ad.tanh(self._affine(q, "q_W", "q_b"))
        joint = pv * ad.take(pq, np.repeat(np.arange(n), K), 0)
        scores = ad.reshape(joint @ self.params["att_w"], (n, K))
        if object_mask is not None:
            mask = np.asarray(object_mask, dtype=np.float64).reshape(n, K)
            if np.any(mask.sum(axis=1) == 0):
                raise ValueError("predict: every instance needs at least one unmasked object")
            scores = scores + Tensor(np.where(mask > 0, 0.0, -1e30))
        alpha = ad.softmax(scores, axis=1)
        weights = ad.expand(ad.reshape(alpha, (n * K,)), (n * K, J), 1)
        pooled = ad.sum_(ad.reshape(weights * joint, (n, K, J)), 1)
        hidden = ad.tanh(self._affine(pooled, "cls_W", "cls_b"))
        return ad.sigmoid(self._affine(hidden, "out_W", "out_b"))

    def __call__(self, V, tokens, object_mask=None) -> Tensor:
        return self.predict(V, self.encode(tokens), object_mask)


def encode_question(tokens, model: QaModel) -> Tensor:
    return ad.reshape(model.encode([tokens]), (model.config.hidden,))


def predict(V, q, model: QaModel, object_mask=None) -> Tensor:
    """Single instance: V (K, d_obj), q (hidden,) -> (|A|,)."""
    V = ad.as_tensor(V)
    if V.ndim != 2 or V.shape[0] == 0:
        raise ValueError(f"predict: expected a non-empty (K, d_obj) object set, got {V.shape}")
    q = ad.reshape(ad.as_tensor(q), (1, model.config.hidden))
    mask = None if object_mask is None else np.asarray(object_mask)[None, :]
    P = model.predict(ad.reshape(V, (1,) + V.shape), q, mask)
    return ad.reshape(P, (model.config.n_answers,))


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(model: Module, path, extra: dict | None = None):
    """npz archive: parameter arrays plus a JSON header under ``__header__``."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.config_dict(),
        "extra": extra or {},
    }
    arrays = model.state_dict()
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Module, dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        state = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if header["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {header['version']} is newer than supported")
    cls = {"mlp": (MlpClassifier, MlpConfig), "qa": (QaModel, QaConfig)}[header["kind"]]
    model = cls[0](cls[1](**header["config"]))
    model.load_state_dict(state)
    return model, header.get("extra", {})
