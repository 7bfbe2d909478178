"""Command-line entry point: gen, train, eval, ground, gradcheck.

Exit codes: 0 ok, 1 other error, 2 config error, 3 divergence, 4 shape mismatch.
Set XMODAL_LOG (DEBUG/INFO/WARNING) for verbosity.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .align import prepare_batch
from .dataio import read_corpus, write_corpus
from .eval import RANK_SCORES, evaluate_grounding, evaluate_retrieval
from .grad import DEFAULT_LAMBDA, DEFAULT_TAU, fd_check, init_params
from .loss import DegenerateAlignmentError
from .synth import SynthConfig, generate
from .train import Checkpoint, DivergenceError, TrainConfig, fit, history_csv

log = logging.getLogger("xmodal")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SHAPE = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


def _load_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return data


def _emit(report, out):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _run_params(args, **extra):
    # thread count is left out: outputs must not depend on it
    d = {"seed": args.seed}
    for k in ("rank_score", "lam", "tau"):
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    d.update(extra)
    return d


def _check_compatible(ckpt, corpus):
    if ckpt.params.dim != corpus.dim:
        raise ShapeMismatch(f"checkpoint dim {ckpt.params.dim} != corpus dim {corpus.dim}")
    grid = ckpt.config.get("grid")
    if grid is not None and list(grid) != [corpus.grid.height, corpus.grid.width]:
        raise ShapeMismatch(f"checkpoint grid {grid} != corpus grid {corpus.grid}")


def _apply_overrides(ckpt, args):
    if args.lam is not None:
        ckpt.params.lam = args.lam
    if args.tau is not None:
        ckpt.params.tau = args.tau
    return ckpt


def cmd_gen(args):
    data = _load_json(args.config)
    if args.seed is not None:
        # resampling keeps the concept geometry of the config's own seed
        data.setdefault("direction_seed", data.get("seed", SynthConfig.seed))
        data["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    corpus = generate(cfg)
    manifest = write_corpus(corpus, args.out)
    _emit({"out": str(args.out), "manifest": manifest, "config": cfg.to_dict()}, None)
    return EXIT_OK


def _train_config(args, corpus):
    data = _load_json(args.config) if args.config else {}
    for flag, key in (("seed", "seed"), ("threads", "threads"), ("rank_score", "rank_score"),
                      ("lam", "lam"), ("tau", "tau"), ("patience", "patience"),
                      ("max_epochs", "max_epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    if args.no_lateral:
        data["use_lateral"] = False
    if args.no_pe:
        data["use_pe"] = False
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args):
    train = read_corpus(args.train)
    val = read_corpus(args.val)
    if train.dim != val.dim or train.grid != val.grid:
        raise ShapeMismatch("train/val dim or grid mismatch")
    cfg = _train_config(args, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = []

    def on_epoch(row, metrics, params):
        history.append(row)

    try:
        best, history = fit(train, val, cfg, on_epoch=on_epoch)
    except (DivergenceError, DegenerateAlignmentError) as exc:
        ckpt = getattr(exc, "checkpoint", None)
        if ckpt is not None:
            ckpt.config["grid"] = [train.grid.height, train.grid.width]
            ckpt.save(out / "last_good.ckpt")
        (out / "history.csv").write_text(history_csv(history))
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    best.config["grid"] = [train.grid.height, train.grid.width]
    best.save(out / "best.ckpt")
    (out / "history.csv").write_text(history_csv(history))
    report, _ = evaluate_retrieval(val, best.params, cfg.rank_score, cfg.eval_ks,
                                   use_pe=cfg.use_pe, use_lateral=cfg.use_lateral, threads=cfg.threads)
    rep = report.to_dict()
    echoed = {k: v for k, v in cfg.to_dict().items() if k != "threads"}
    rep["config"].update({"train": echoed, "best_epoch": best.epoch, "epochs_run": len(history)})
    _emit(rep, out / "metrics.json")
    sys.stdout.write(f"best epoch {best.epoch}  R_sum {best.R_sum:.2f}  -> {out}\n")
    return EXIT_OK


def _load_model(args, corpus):
    ckpt = _apply_overrides(Checkpoint.load(args.checkpoint), args)
    _check_compatible(ckpt, corpus)
    return ckpt


def cmd_eval(args):
    corpus = read_corpus(args.corpus)
    ckpt = _load_model(args, corpus)
    cfg = ckpt.config
    rank = args.rank_score or cfg.get("rank_score", "agg")
    report, _ = evaluate_retrieval(corpus, ckpt.params, rank, tuple(args.k), args.precision_k,
                                   use_pe=cfg.get("use_pe", True), use_lateral=cfg.get("use_lateral", True),
                                   threads=args.threads)
    rep = report.to_dict()
    rep["config"].update(_run_params(args, rank_score=rank, checkpoint_epoch=ckpt.epoch))
    _emit(rep, args.out)
    return EXIT_OK


def cmd_ground(args):
    corpus = read_corpus(args.corpus)
    ckpt = _load_model(args, corpus)
    cfg = ckpt.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = evaluate_grounding(corpus, ckpt.params, args.map_mode, cfg.get("use_pe", True),
                             cfg.get("use_lateral", True), map_dir=out)
    rep["config"] = _run_params(args, lam=ckpt.params.lam, map_mode=args.map_mode)
    _emit(rep, out / "grounding.json")
    sys.stdout.write(f"mean CNR {rep['mean_cnr']:.4f} over {rep['n_boxes']} boxes -> {out}\n")
    return EXIT_OK


def cmd_gradcheck(args):
    seed = args.seed or 0
    if args.corpus:
        corpus = read_corpus(args.corpus)
        studies = corpus.studies[:args.n_studies]
    else:
        corpus = generate(SynthConfig(num_studies=args.n_studies, d=8, grid=(2, 3), n_words=4, vocab_size=4,
                                      concepts_per_study=2, n_background=2, noise_sigma=0.3,
                                      lateral_fraction=1.0, feature_scale=1.0, box_size=(1, 1), seed=seed))
        studies = corpus.studies
    lam = args.lam if args.lam is not None else DEFAULT_LAMBDA
    tau = args.tau if args.tau is not None else DEFAULT_TAU
    if args.checkpoint:
        params = _load_model(args, corpus).params
    else:
        params = init_params(corpus.dim, seed=seed, lam=lam, tau=tau)
    report = {k: float(v) for k, v in fd_check(prepare_batch(studies), params, step=args.step, seed=seed).items()}
    width = max(len(k) for k in report)
    for k, v in report.items():
        sys.stderr.write(f"{k:<{width}}  {v:.3e}  {'ok' if v < args.tol else 'FAIL'}\n")
    worst = max(report.values())
    _emit({"blocks": report, "max_rel_error": worst, "pass": bool(worst < args.tol),
           "config": _run_params(args, step=args.step, tol=args.tol, lam=params.lam, tau=params.tau,
                                 n_studies=len(studies))}, args.out)
    return EXIT_OK if worst < args.tol else EXIT_OTHER


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", default=None)
    common.add_argument("--lambda", dest="lam", type=float, default=None)
    common.add_argument("--tau", type=float, default=None)

    p = argparse.ArgumentParser(prog="xmodal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--config", required=True)

    t = sub.add_parser("train", parents=[common], help="train the alignment head")
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--config")
    t.add_argument("--rank-score", dest="rank_score", choices=RANK_SCORES)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--no-lateral", action="store_true")
    t.add_argument("--no-pe", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--rank-score", dest="rank_score", choices=RANK_SCORES)
    e.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    e.add_argument("--precision-k", dest="precision_k", type=int, nargs="+")

    gr = sub.add_parser("ground", parents=[common], help="phrase-grounding CNR and attention maps")
    gr.add_argument("--checkpoint", required=True)
    gr.add_argument("--corpus", required=True)
    gr.add_argument("--map-mode", dest="map_mode", choices=("attention", "cosine"), default="attention")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--corpus")
    c.add_argument("--checkpoint")
    c.add_argument("--n-studies", dest="n_studies", type=int, default=4)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-6)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ground": cmd_ground,
            "gradcheck": cmd_gradcheck}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("XMODAL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command in ("gen", "ground") and not args.out:
        sys.stderr.write(f"error: {args.command} requires --out\n")
        return EXIT_CONFIG
    if args.command == "train" and not args.out:
        sys.stderr.write("error: train requires --out\n")
        return EXIT_CONFIG
    if args.threads < 1:
        sys.stderr.write("error: --threads must be >= 1\n")
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except ShapeMismatch as exc:
        sys.stderr.write(f"shape mismatch: {exc}\n")
        return EXIT_SHAPE
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
