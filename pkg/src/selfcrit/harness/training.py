"""Three-stage training on the toy QA corpus: pretrain on the VQA loss, then
strengthen the influential objects, then fine-tune with the joint loss.

Every stage writes ``<stage>.npz`` (its best checkpoint), ``<stage>_steps.csv``
(per-step loss breakdown), ``<stage>_epochs.csv`` (per-epoch validation score)
and ``<stage>_eval.json`` (test EvalReport).  ``stages.csv`` collects one row
per stage.  A stage only reads the previous stage's checkpoint, so later
stages can be rerun on their own.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..losses import LossConfig, answer_weight_table, joint_objective
from ..metrics import CSV_FIELDS, EvalReport, evaluate, stack_instances
from ..models import QaConfig, QaModel, load_checkpoint, save_checkpoint
from .toyqa import Corpus, ToyQaConfig, build_proposals, make_embeddings

STAGES = ("pretrain", "strengthen", "joint")
STAGE_IDS = {name: k for k, name in enumerate(STAGES)}
STEP_FIELDS = ["step", "epoch", "vqa", "infl", "crit", "joint", "bucket"]
EPOCH_FIELDS = ["epoch", "val_score", "best"]
SUMMARY_FIELDS = ["stage"] + CSV_FIELDS


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainStage:
    name: str
    epochs: int
    lr: float
    lambda_infl: float = 0.0
    lambda_crit: float = 0.0

    def __post_init__(self):
        if self.name not in STAGES:
            raise ValueError(f"unknown stage {self.name!r}")
        if self.name == "pretrain" and (self.lambda_infl or self.lambda_crit):
            raise ValueError("pretrain uses the VQA loss only")
        if self.name == "strengthen" and self.lambda_crit:
            raise ValueError("strengthen stage has no self-critical term")


@dataclass
class TrainConfig:
    toyqa: ToyQaConfig = field(default_factory=ToyQaConfig)
    joint_dim: int = 32
    init_gain: float = 3.0
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 15
    finetune_lr: float = 3e-4
    lambda_infl: float = 20.0
    lambda_crit: float = 2000.0
    bucket_size: int = 5
    proposal_method: str = "textual"
    proposal_size: int = 6
    proposal_threshold: float = 0.6
    batch_size: int | None = None      # default min(384, n_train // 10)
    val_fraction: float = 0.1
    seed: int = 0

    def stages(self) -> list[TrainStage]:
        return [
            TrainStage("pretrain", self.pretrain_epochs, self.pretrain_lr),
            TrainStage("strengthen", self.finetune_epochs, self.finetune_lr, self.lambda_infl),
            TrainStage("joint", self.finetune_epochs, self.finetune_lr, self.lambda_infl, self.lambda_crit),
        ]

    def loss_config(self, stage: TrainStage) -> LossConfig:
        return LossConfig(stage.lambda_infl, stage.lambda_crit, self.bucket_size)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_IDS[stage]])


def split_validation(n: int, fraction: float, seed: int):
    """Deterministic (train, validation) index split."""
    perm = np.random.default_rng([seed, 99]).permutation(n)
    n_val = max(1, int(round(n * fraction))) if fraction > 0 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def new_model(corpus: Corpus, cfg: TrainConfig) -> QaModel:
    t = cfg.toyqa
    return QaModel(QaConfig(vocab_size=len(corpus.vocab), n_answers=len(corpus.answers), d_obj=t.d_obj,
                            d_word=t.d_word, hidden=t.hidden, joint=cfg.joint_dim,
                            init_gain=cfg.init_gain, seed=cfg.seed))


def _write_csv(path: Path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def train_stage(model: QaModel, stage: TrainStage, instances, proposals, val, cfg: TrainConfig,
                weight_table: np.ndarray, log=None):
    """Train in place; returns (best state, step rows, epoch rows)."""
    rng = stage_rng(cfg.seed, stage.name)
    loss_cfg = cfg.loss_config(stage)
    needs_grad = bool(stage.lambda_infl or stage.lambda_crit)
    bs = cfg.batch_size or max(1, min(384, len(instances) // 10))
    names = list(model.params)
    adam = ad.AdamState(lr=stage.lr)
    step_rows, epoch_rows = [], []
    best_score, best_state = -np.inf, None
    step = 0
    for epoch in range(1, stage.epochs + 1):
        for idx in _batches(len(instances), bs, rng):
            batch = [instances[i] for i in idx]
            V_np, tokens, gold, mask = stack_instances(batch)
            V = Tensor(V_np, requires_grad=needs_grad)
            P = model(V, tokens, None if mask.all() else mask)
            props = [list(proposals[i]) for i in idx]
            loss, parts = joint_objective(P, V, gold, props, loss_cfg, weight_table, mask > 0)
            step += 1
            if not np.isfinite(parts["joint"]):
                raise TrainingDivergence(f"stage {stage.name}: non-finite loss at epoch {epoch}, step {step}")
            grads = ad.grad(loss, [model.params[k] for k in names])
            try:
                ad.adam_step(model.params, dict(zip(names, grads)), adam)
            except ad.NonFiniteError as exc:
                raise TrainingDivergence(f"stage {stage.name}: epoch {epoch}, step {step}: {exc}") from exc
            step_rows.append({"step": step, "epoch": epoch, **parts})
        score = evaluate(model, val, with_fsr=False).score if val else -float(step_rows[-1]["joint"])
        better = score > best_score
        if better:
            best_score, best_state = score, model.state_dict()
        epoch_rows.append({"epoch": epoch, "val_score": float(score), "best": int(better)})
        if log:
            log(f"{stage.name} epoch {epoch}: val score {score:.4f} loss {step_rows[-1]['joint']:.5f}")
    return best_state, step_rows, epoch_rows


def prepare(corpus: Corpus, cfg: TrainConfig, store=None):
    """Proposal sets and the answer weight table for a corpus."""
    store = store or make_embeddings(cfg.toyqa.seed, cfg.toyqa.embed_dim)
    kw = dict(method=cfg.proposal_method, store=store, k=cfg.proposal_size, threshold=cfg.proposal_threshold)
    train_props = [p.indices for p in build_proposals(corpus.train, **kw)]
    test_props = [p.indices for p in build_proposals(corpus.test, **kw)]
    return train_props, test_props, answer_weight_table(corpus.answers, store)


def run_stages(corpus: Corpus, cfg: TrainConfig, out_dir, stages=STAGES, store=None, log=None) -> dict:
    """Run the named stages in order; returns {stage: EvalReport}.

    A stage other than pretrain starts from the previous stage's checkpoint
    in ``out_dir``, which must exist when that stage is run on its own.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = [s for s in STAGES if s in set(stages)]
    train_props, test_props, table = prepare(corpus, cfg, store)
    if not any(train_props) and any(s != "pretrain" for s in stages):
        raise ValueError("no training instance has a usable proposal set; the strengthen stage is impossible")
    tr_idx, val_idx = split_validation(len(corpus.train), cfg.val_fraction, cfg.seed)
    train = [corpus.train[i] for i in tr_idx]
    props = [train_props[i] for i in tr_idx]
    val = [corpus.train[i] for i in val_idx]
    specs = {s.name: s for s in cfg.stages()}
    reports = {}
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    for name in stages:
        stage = specs[name]
        if name == "pretrain":
            model = new_model(corpus, cfg)
        else:
            prev = out / f"{STAGES[STAGE_IDS[name] - 1]}.npz"
            if not prev.exists():
                raise FileNotFoundError(f"stage {name} needs {prev}; run the earlier stage first")
            model, _ = load_checkpoint(prev)
        best, step_rows, epoch_rows = train_stage(model, stage, train, props, val, cfg, table, log)
        if best is not None:
            model.load_state_dict(best)
        save_checkpoint(model, out / f"{name}.npz", extra={"stage": name, "seed": cfg.seed})
        _write_csv(out / f"{name}_steps.csv", STEP_FIELDS, step_rows)
        _write_csv(out / f"{name}_epochs.csv", EPOCH_FIELDS, epoch_rows)
        report = evaluate(model, corpus.test, test_props)
        (out / f"{name}_eval.json").write_text(report.to_json())
        reports[name] = report
        if log:
            log(f"{name}: test score {report.score:.4f} FSR {report.fsr:.4f}")
    _update_summary(out / "stages.csv", reports)
    return reports


def _update_summary(path: Path, reports: dict):
    rows = {}
    if path.exists():
        with open(path) as fh:
            rows = {r["stage"]: r for r in csv.DictReader(fh)}
    for name, rep in reports.items():
        rows[name] = {"stage": name, **{k: _fmt(v) for k, v in rep.csv_row().items()}}
    _write_csv(path, SUMMARY_FIELDS, [rows[s] for s in STAGES if s in rows])


def load_reports(out_dir) -> dict:
    out = Path(out_dir)
    reports = {}
    for name in STAGES:
        path = out / f"{name}_eval.json"
        if path.exists():
            reports[name] = EvalReport(**json.loads(path.read_text()))
    return reports
