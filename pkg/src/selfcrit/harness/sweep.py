"""Ablation grids over the loss weights and the proposal set size.

All cells share one pretrained checkpoint, since the grid axes only touch
the two fine-tuning stages.  Cells may run in worker processes; rows are
written in grid order regardless of completion order.
"""
from __future__ import annotations

import csv
import itertools
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from ..metrics import CSV_FIELDS
from .toyqa import Corpus
from .training import TrainConfig, run_stages

AXES = {
    "infl": {"lambda_infl": [5.0, 20.0, 60.0, 80.0], "lambda_crit": [0.0]},
    "crit": {"lambda_crit": [500.0, 2000.0, 4000.0, 6000.0], "lambda_infl": [20.0]},
    "size": {"proposal_size": [4, 5, 6, 7, 8, 10]},
}
GRID_KEYS = ("lambda_infl", "lambda_crit", "proposal_size")
SWEEP_FIELDS = list(GRID_KEYS) + ["pretrain_score", "pretrain_fsr"] + CSV_FIELDS


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of ``{key: [values]}`` in key order of GRID_KEYS."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid is empty")
    bad = set(grid) - set(GRID_KEYS)
    if bad:
        raise ValueError(f"unknown sweep keys {sorted(bad)}")
    keys = [k for k in GRID_KEYS if k in grid]
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _cell(args):
    corpus, cfg, cell, pre_dir, cell_dir = args
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(Path(pre_dir) / "pretrain.npz", cell_dir / "pretrain.npz")
    reports = run_stages(corpus, replace(cfg, **cell), cell_dir, stages=("strengthen", "joint"))
    return reports["joint"]


def run_sweep(corpus: Corpus, cfg: TrainConfig, grid: dict, out_dir, workers: int = 1, log=None) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = expand_grid(grid)
    pre = run_stages(corpus, cfg, out / "pretrain", stages=("pretrain",))["pretrain"]
    jobs = [(corpus, cfg, cell, out / "pretrain", out / f"cell_{k:02d}") for k, cell in enumerate(cells)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_cell, jobs))
    else:
        reports = [_cell(j) for j in jobs]
    rows = []
    for cell, rep in zip(cells, reports):
        full = {k: getattr(replace(cfg, **cell), k) for k in GRID_KEYS}
        rows.append({**full, "pretrain_score": pre.score, "pretrain_fsr": pre.fsr, **rep.csv_row()})
        if log:
            log(f"{cell}: score {rep.score:.4f} FSR {rep.fsr:.4f}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows
