"""Two-Gaussian prior-shift experiment.

Class 0 is N([-3, 3], 2I) and class 1 is N([3, 3], 2I).  Training points
come from class 0 with probability p, test points with probability 1 - p.
The explanation "the first channel is important" becomes the proposal set
{0}, with the two input coordinates treated as two scalar objects.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..losses import LossConfig, joint_objective
from ..models import MlpClassifier, MlpConfig
from .training import TrainingDivergence

GRID = 200
EXTENT = 8.0
CSV_HEADER = ["p", "seed", "pretrain_test_acc", "finetune_test_acc", "pretrain_train_acc",
              "finetune_train_acc", "pretrain_boundary_x", "finetune_boundary_x"]


@dataclass
class SyntheticConfig:
    p: float = 0.05
    ps: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.5])
    mean0: tuple = (-3.0, 3.0)
    mean1: tuple = (3.0, 3.0)
    cov_scale: float = 2.0
    n_train: int = 1000
    n_test: int = 1000
    depth: int = 15
    hidden: int = 256
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 50
    finetune_lr: float = 1e-5
    lambda_infl: float = 20.0
    lambda_crit: float = 1000.0
    batch_size: int | None = None      # None: full batch
    seed: int = 0

    def __post_init__(self):
        for p in [self.p, *self.ps]:
            if not 0.0 < p < 1.0:
                raise ValueError(f"mixing probability must lie in (0, 1), got {p}")


@dataclass
class SyntheticData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    proposal: list = field(default_factory=lambda: [0])


def _draw(rng, n, p0, cfg):
    y = (rng.random(n) >= p0).astype(np.int64)
    means = np.array([cfg.mean0, cfg.mean1], dtype=np.float64)
    X = means[y] + rng.normal(size=(n, 2)) * np.sqrt(cfg.cov_scale)
    return X, y


def gen_synthetic(config: SyntheticConfig, p: float | None = None) -> SyntheticData:
    p = config.p if p is None else p
    if not 0.0 < p < 1.0:
        raise ValueError(f"mixing probability must lie in (0, 1), got {p}")
    rng = np.random.default_rng([config.seed, int(round(p * 1e6))])
    Xtr, ytr = _draw(rng, config.n_train, p, config)
    Xte, yte = _draw(rng, config.n_test, 1.0 - p, config)
    return SyntheticData(Xtr, ytr, Xte, yte)


def accuracy(model, X, y) -> float:
    with ad.no_grad():
        P = model(Tensor(X)).data
    return float(np.mean(P.argmax(axis=1) == y))


def _fit(model, X, y, epochs, lr, loss_cfg, batch_size, rng, stage):
    gold = np.eye(2)[y]
    n = len(X)
    bs = batch_size or n
    names = list(model.params)
    adam = ad.AdamState(lr=lr)
    needs_grad = bool(loss_cfg.lambda_infl or loss_cfg.lambda_crit)
    step = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            V = Tensor(X[idx], requires_grad=needs_grad)
            loss, parts = joint_objective(model(V), V, gold[idx], [[0]] * len(idx), loss_cfg)
            step += 1
            if not np.isfinite(parts["joint"]):
                raise TrainingDivergence(f"synthetic {stage}: non-finite loss at epoch {epoch}, step {step}")
            grads = ad.grad(loss, [model.params[k] for k in names])
            try:
                ad.adam_step(model.params, dict(zip(names, grads)), adam)
            except ad.NonFiniteError as exc:
                raise TrainingDivergence(f"synthetic {stage}: epoch {epoch}, step {step}: {exc}") from exc
    return model


def boundary_raster(model, grid: int = GRID, extent: float = EXTENT) -> np.ndarray:
    """(grid, grid) predicted classes; row r is y = ys[r], column c is x = xs[c]."""
    xs = np.linspace(-extent, extent, grid)
    xx, yy = np.meshgrid(xs, xs)
    with ad.no_grad():
        P = model(Tensor(np.column_stack([xx.ravel(), yy.ravel()]))).data
    return P.argmax(axis=1).reshape(grid, grid)


def boundary_points(raster: np.ndarray, extent: float = EXTENT):
    """First class change along each row, as (x, y) midpoints; rows without a change are skipped."""
    grid = raster.shape[0]
    xs = np.linspace(-extent, extent, grid)
    pts = []
    for r in range(grid):
        change = np.flatnonzero(np.diff(raster[r]) != 0)
        if change.size:
            c = change[0]
            pts.append(((xs[c] + xs[c + 1]) / 2, xs[r]))
    return pts


def mean_boundary_x(raster: np.ndarray, extent: float = EXTENT) -> float:
    pts = boundary_points(raster, extent)
    return float(np.mean([x for x, _ in pts])) if pts else float("nan")


def run_one(config: SyntheticConfig, p: float, log=None) -> dict:
    data = gen_synthetic(config, p)
    model = MlpClassifier(MlpConfig(in_dim=2, hidden=config.hidden, depth=config.depth, n_classes=2,
                                    seed=config.seed))
    pid = int(round(p * 1e6))
    _fit(model, data.X_train, data.y_train, config.pretrain_epochs, config.pretrain_lr,
         LossConfig(0.0, 0.0), config.batch_size, np.random.default_rng([config.seed, pid, 0]), "pretrain")
    pre_raster = boundary_raster(model)
    row = {"p": p, "seed": config.seed,
           "pretrain_test_acc": accuracy(model, data.X_test, data.y_test),
           "pretrain_train_acc": accuracy(model, data.X_train, data.y_train),
           "pretrain_boundary_x": mean_boundary_x(pre_raster)}
    _fit(model, data.X_train, data.y_train, config.finetune_epochs, config.finetune_lr,
         LossConfig(config.lambda_infl, config.lambda_crit), config.batch_size,
         np.random.default_rng([config.seed, pid, 1]), "finetune")
    ft_raster = boundary_raster(model)
    row.update({"finetune_test_acc": accuracy(model, data.X_test, data.y_test),
                "finetune_train_acc": accuracy(model, data.X_train, data.y_train),
                "finetune_boundary_x": mean_boundary_x(ft_raster)})
    if log:
        log(f"p={p}: test accuracy {row['pretrain_test_acc']:.3f} -> {row['finetune_test_acc']:.3f}")
    return {"row": row, "data": data, "rasters": (pre_raster, ft_raster)}


def run_synthetic(config: SyntheticConfig, out_dir=None, ps=None, log=None) -> list[dict]:
    """Pretrain then fine-tune for each p; writes synthetic.csv and synthetic.svg when out_dir is given."""
    ps = list(config.ps if ps is None else ps)
    results = [run_one(config, p, log) for p in ps]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "synthetic.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
            w.writeheader()
            for r in results:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r["row"].items()})
        (out / "synthetic.svg").write_text(render_svg(results))
    return [r["row"] for r in results]


# --- plotting -----------------------------------------------------------------

_COLORS = ("#d62728", "#1f77b4")
_PANEL = 220


def _to_px(x, y, ox, oy):
    s = _PANEL / (2 * EXTENT)
    return ox + (x + EXTENT) * s, oy + (EXTENT - y) * s


def _panel(X, y, rasters, acc, title, ox, oy):
    parts = [f'<rect x="{ox}" y="{oy}" width="{_PANEL}" height="{_PANEL}" fill="white" stroke="#888"/>',
             f'<text x="{ox + 4}" y="{oy - 6}" font-size="12">{title}</text>']
    for (a, b), label in zip(X, y):
        px, py = _to_px(a, b, ox, oy)
        if ox <= px <= ox + _PANEL and oy <= py <= oy + _PANEL:
            parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="1.6" fill="{_COLORS[label]}" fill-opacity="0.6"/>')
    for raster, dash in zip(rasters, ('stroke-dasharray="5,3"', "")):
        pts = " ".join("%.1f,%.1f" % _to_px(x, yy, ox, oy) for x, yy in boundary_points(raster))
        if pts:
            parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1.5" {dash}/>')
    if acc is not None:
        parts.append(f'<text x="{ox + 4}" y="{oy + _PANEL - 6}" font-size="11">'
                     f'acc {acc[0]:.3f} (dashed) / {acc[1]:.3f} (solid)</text>')
    return parts


def render_svg(results) -> str:
    """Columns per p; training data on top, test data below; dashed = pretrained, solid = fine-tuned."""
    gap = 30
    width = len(results) * (_PANEL + gap) + gap
    height = 2 * (_PANEL + gap) + gap
    body = []
    for k, r in enumerate(results):
        ox = gap + k * (_PANEL + gap)
        row, d = r["row"], r["data"]
        body += _panel(d.X_train, d.y_train, r["rasters"], None, f"train, p = {row['p']}", ox, gap)
        acc = (row["pretrain_test_acc"], row["finetune_test_acc"])
        body += _panel(d.X_test, d.y_test, r["rasters"], acc, "test", ox, 2 * gap + _PANEL)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif">\n' + "\n".join(body) + "\n</svg>\n")
