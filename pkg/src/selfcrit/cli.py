"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime or divergence error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .harness import config as cfgio
from .harness.config import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# --- config assembly ------------------------------------------------------------

def _train_config(args):
    from .harness.training import TrainConfig

    cfg = cfgio.load(TrainConfig, args.config,
                     lambda_infl=getattr(args, "lambda_infl", None),
                     lambda_crit=getattr(args, "lambda_crit", None),
                     proposal_method=getattr(args, "proposal_method", None),
                     proposal_size=getattr(args, "proposal_size", None),
                     bucket_size=getattr(args, "bucket_size", None))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, toyqa=replace(cfg.toyqa, seed=args.seed))
    if cfg.proposal_method not in ("visual", "textual", "qa"):
        raise ConfigError(f"unknown proposal method {cfg.proposal_method!r}")
    if cfg.proposal_size < 1 or cfg.bucket_size < 0:
        raise ConfigError("proposal size must be >= 1 and bucket size >= 0")
    return cfg


def _corpus_and_store(args, cfg):
    from .harness.toyqa import gen_toy_qa, load_corpus, make_embeddings
    from .proposal import EmbeddingStore

    if getattr(args, "corpus", None):
        corpus = load_corpus(args.corpus)
        vec = Path(args.corpus) / "embeddings.txt"
        store = EmbeddingStore.load(vec) if vec.exists() else make_embeddings(cfg.toyqa.seed, cfg.toyqa.embed_dim)
    else:
        corpus = gen_toy_qa(cfg.toyqa)
        store = make_embeddings(cfg.toyqa.seed, cfg.toyqa.embed_dim)
    return corpus, store


# --- commands --------------------------------------------------------------------

def cmd_synth_run(args):
    from .harness.synthetic import SyntheticConfig, run_synthetic

    cfg = cfgio.load(SyntheticConfig, args.config, seed=args.seed, lambda_infl=args.lambda_infl,
                     lambda_crit=args.lambda_crit, ps=args.p)
    rows = run_synthetic(cfg, args.out_dir, log=_log)
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


def cmd_toyqa_gen(args):
    from .harness.toyqa import ToyQaConfig, gen_toy_qa, make_embeddings, save_corpus

    cfg = cfgio.load(ToyQaConfig, args.config, seed=args.seed)
    corpus = gen_toy_qa(cfg)
    save_corpus(corpus, args.out_dir)
    make_embeddings(cfg.seed, cfg.embed_dim).save(Path(args.out_dir) / "embeddings.txt")
    _log(f"wrote {len(corpus.train)} train / {len(corpus.test)} test instances to {args.out_dir}")
    return EXIT_OK


def cmd_toyqa_train(args):
    from .harness.training import STAGES, run_stages

    cfg = _train_config(args)
    corpus, store = _corpus_and_store(args, cfg)
    stages = STAGES if args.stage == "all" else (args.stage,)
    reports = run_stages(corpus, cfg, args.out_dir, stages=stages, store=store, log=_log)
    print(json.dumps({k: v.csv_row() for k, v in reports.items()}, indent=2))
    return EXIT_OK


def cmd_toyqa_eval(args):
    from .harness.toyqa import build_proposals
    from .metrics import evaluate
    from .models import load_checkpoint

    cfg = _train_config(args)
    corpus, store = _corpus_and_store(args, cfg)
    model, _ = load_checkpoint(args.checkpoint)
    data = corpus.test if args.split == "test" else corpus.train
    props = [p.indices for p in build_proposals(data, cfg.proposal_method, store, cfg.proposal_size,
                                                cfg.proposal_threshold)]
    report = evaluate(model, data, props)
    text = report.to_json()
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "eval.json").write_text(text)
    print(text)
    return EXIT_OK


def cmd_sweep(args):
    from .harness.sweep import AXES, expand_grid, run_sweep

    cfg = _train_config(args)
    corpus, store = _corpus_and_store(args, cfg)
    grid = dict(AXES[args.axis])
    if args.grid:
        try:
            grid = json.loads(args.grid)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--grid is not valid JSON: {exc}") from exc
    try:
        expand_grid(grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = run_sweep(corpus, cfg, grid, args.out_dir, workers=args.workers, log=_log)
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


def cmd_gradcheck(args):
    from .autodiff import Tensor
    from .losses import LossConfig, joint_objective
    from .models import QaConfig, QaModel
    from .sensitivity import weighted_sensitivity

    rng = np.random.default_rng(args.seed or 0)
    cfg = LossConfig(args.lambda_infl if args.lambda_infl is not None else 20.0,
                     args.lambda_crit if args.lambda_crit is not None else 2000.0,
                     args.bucket_size if args.bucket_size is not None else 5)
    worst = 0.0
    for point in range(args.points):
        model = QaModel(QaConfig(vocab_size=6, n_answers=4, d_obj=3, d_word=2, hidden=3, joint=3, seed=point))
        feats = rng.normal(size=(2, 4, 3))
        tokens = [[2, 3], [4, 5, 2]]
        with ad.no_grad():
            P0 = model(Tensor(feats), tokens).data
        gold = np.eye(4)[np.argmin(P0, axis=1)]
        V = Tensor(feats, requires_grad=True)
        S = weighted_sensitivity(model(V, tokens), V, gold).data
        props = [[int(np.argmin(row))] for row in S]

        def value():
            V = Tensor(feats, requires_grad=True)
            return joint_objective(model(V, tokens), V, gold, props, cfg)[0].item()

        V = Tensor(feats, requires_grad=True)
        total, _ = joint_objective(model(V, tokens), V, gold, props, cfg)
        names = list(model.params)
        grads = dict(zip(names, ad.grad(total, [model.params[k] for k in names])))
        for k in names:
            fd = ad.numerical_grad(value, model.params[k].data, h=1e-6)
            worst = max(worst, ad.relative_error(grads[k].data, fd, 1e-3))
    ok = worst < args.tol
    print(json.dumps({"points": args.points, "max_relative_error": worst, "tolerance": args.tol, "ok": ok}))
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_inspect(args):
    from .harness.toyqa import build_proposals
    from .models import load_checkpoint
    from .sensitivity import sensitivity_report

    cfg = _train_config(args)
    corpus, store = _corpus_and_store(args, cfg)
    model, _ = load_checkpoint(args.checkpoint)
    data = corpus.test if args.split == "test" else corpus.train
    if not 0 <= args.index < len(data):
        raise ConfigError(f"--index {args.index} outside [0, {len(data)})")
    inst = data[args.index]
    prop = build_proposals([inst], cfg.proposal_method, store, cfg.proposal_size, cfg.proposal_threshold)[0]
    if not prop.usable:
        raise ConfigError(f"instance {args.index} has no usable {cfg.proposal_method} proposal set")
    print(sensitivity_report(inst, model, prop.indices, corpus.answers).to_json())
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _common(p, train=False):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="runs")
    if train:
        p.add_argument("--corpus", help="corpus directory written by 'toyqa gen' (default: generate from config)")
        p.add_argument("--lambda-infl", type=float)
        p.add_argument("--lambda-crit", type=float)
        p.add_argument("--proposal-method", choices=["visual", "textual", "qa"])
        p.add_argument("--proposal-size", type=int)
        p.add_argument("--bucket-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfcrit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="two-Gaussian prior-shift experiment").add_subparsers(dest="action", required=True)
    p = synth.add_parser("run")
    _common(p)
    p.add_argument("--lambda-infl", type=float)
    p.add_argument("--lambda-crit", type=float)
    p.add_argument("--p", type=float, nargs="+", help="train mixing probabilities (default 0.05 0.1 0.2 0.5)")
    p.set_defaults(func=cmd_synth_run)

    toy = sub.add_parser("toyqa", help="toy prior-shift QA experiment").add_subparsers(dest="action", required=True)
    p = toy.add_parser("gen")
    _common(p)
    p.set_defaults(func=cmd_toyqa_gen)
    p = toy.add_parser("train")
    _common(p, train=True)
    p.add_argument("--stage", choices=["all", "pretrain", "strengthen", "joint"], default="all")
    p.set_defaults(func=cmd_toyqa_train)
    p = toy.add_parser("eval")
    _common(p, train=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_toyqa_eval, out_dir=None)

    p = sub.add_parser("sweep", help="ablation grid over loss weights or proposal size")
    _common(p, train=True)
    p.add_argument("--axis", choices=["infl", "crit", "size"], default="infl")
    p.add_argument("--grid", help='explicit grid as JSON, e.g. {"lambda_infl": [5, 20]}')
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="joint-loss gradient against finite differences")
    p.add_argument("--seed", type=int)
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--lambda-infl", type=float)
    p.add_argument("--lambda-crit", type=float)
    p.add_argument("--bucket-size", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump the sensitivity report of one instance")
    _common(p, train=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    from .harness.training import TrainingDivergence

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (TrainingDivergence, ad.NonFiniteError, FloatingPointError) as exc:
        _log(f"runtime error: {exc}")
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
