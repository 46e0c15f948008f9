"""Command-line entry point: ``rankvqa {generate,train,eval,gradcheck,ablate}``.

Each command writes its fully resolved configuration to standard error
before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .data import generate_synthetic, load_dataset, save_dataset, split
from .errors import RankVqaError
from .experiments import VARIANTS, run_ablation, run_gradcheck, tiny_config
from .losses import evaluate
from .model import RankVqaModel, load_checkpoint, summary
from .tensor import make_rng
from .training import fit

log = logging.getLogger("rankvqa")


class UsageError(RankVqaError):
    pass


def _csv(kind):
    def parse(text: str):
        return [kind(x) for x in text.split(",") if x.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat JSON config file")
    shared.add_argument("--seed", type=int, help="top-level seed")
    shared.add_argument("--out", help="output path or directory")

    p = argparse.ArgumentParser(prog="rankvqa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[shared], help="write a synthetic .jsonl dataset")
    g.add_argument("--sigma", type=float, dest="data.noise_sigma")
    g.add_argument("--n-samples", type=int, dest="data.n_samples")

    t = sub.add_parser("train", parents=[shared], help="fit a model with early stopping")
    t.add_argument("--dataset", dest="paths.dataset")
    t.add_argument("--max-epochs", type=int, dest="train.max_epochs")
    t.add_argument("--learning-rate", type=float, dest="train.learning_rate")
    t.add_argument("--batch-size", type=int, dest="train.batch_size")
    t.add_argument("--lambda-rank", type=float, dest="hybrid.lambda_rank")
    t.add_argument("--margin", type=float, dest="ranking.margin_alpha")
    t.add_argument("--fusion-mode", dest="model.fusion_mode")
    t.add_argument("--heads", type=int, dest="model.heads")
    t.add_argument("--epoch-checkpoints", action="store_true")

    e = sub.add_parser("eval", parents=[shared], help="print an EvalReport as JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", dest="paths.dataset")
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all",
                   help="evaluate one part of the seeded split instead of the whole file")

    gc = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient check")
    gc.add_argument("--seeds", type=int, dest="gradcheck.seeds")
    gc.add_argument("--tolerance", type=float, dest="gradcheck.tolerance")
    gc.add_argument("--fusion-mode", default="token_sequence")

    a = sub.add_parser("ablate", parents=[shared], help="train all ablation variants")
    a.add_argument("--dataset", dest="paths.dataset")
    a.add_argument("--variants", type=_csv(str), dest="ablation.variants")
    a.add_argument("--seeds", type=_csv(int), dest="ablation.seeds")
    a.add_argument("--max-epochs", type=int, dest="train.max_epochs")
    return p


def _resolve(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["paths.out"] = args.out
    rc = RunConfig.load(args.config, overrides)
    print(rc.to_json(), file=sys.stderr)
    return rc


def _dataset(rc: RunConfig):
    path = rc.values["paths.dataset"]
    if path:
        return load_dataset(path)
    log.info("no dataset given; generating the synthetic task from the config")
    return generate_synthetic(rc.synthetic_spec())


def _align_model(rc: RunConfig, meta: dict) -> None:
    # widths follow the dataset; the echoed config records the final values
    for key in ("d_visual", "d_text", "regions", "n_answers"):
        rc.values[f"model.{key}"] = meta[key]
    rc.model_config()


def cmd_generate(rc: RunConfig) -> int:
    d = generate_synthetic(rc.synthetic_spec())
    out = Path(rc.values["paths.out"])
    if out.suffix != ".jsonl":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "dataset.jsonl"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(d, out)
    brief = {k: v for k, v in d.meta.items() if k not in ("concept_prototypes", "type_prototypes")}
    print(json.dumps({"path": str(out), "n_samples": len(d), **brief}))
    return 0


def cmd_train(rc: RunConfig, epoch_checkpoints: bool = False) -> int:
    d = _dataset(rc)
    _align_model(rc, d.meta)
    out = Path(rc.values["paths.out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(rc.to_json() + "\n", encoding="utf-8")
    mcfg, tcfg, _, scfg = rc.build()
    print(summary(mcfg), file=sys.stderr)
    train, val, _ = split(d, scfg.fractions, rc.split_seed)
    model = RankVqaModel(mcfg, make_rng(rc.init_seed))

    def show(rec):
        print(f"epoch {rec.epoch:3d}  train {rec.train_total:.4f}  val {rec.val_total:.4f}  "
              f"acc {rec.val_accuracy:.4f}  mrr {rec.val_mrr:.4f}  lambda {rec.lambda_used:g}")

    res = fit(model, train, val, tcfg, out, keep_epoch_checkpoints=epoch_checkpoints, on_epoch=show)
    best = res.logs[res.best_epoch - 1]
    print(f"best epoch {res.best_epoch}: val acc {best.val_accuracy:.4f} mrr {best.val_mrr:.4f}"
          f"{' (early stop)' if res.stopped_early else ''}")
    return 0


def cmd_eval(rc: RunConfig, checkpoint: str, which: str) -> int:
    model = load_checkpoint(checkpoint)
    d = _dataset(rc)
    cfg = model.config
    keys = ["d_visual", "d_text", "n_answers"] + (["regions"] if cfg.fusion_mode == "token_sequence" else [])
    bad = [f"{k}={d.meta[k]} (checkpoint {getattr(cfg, k)})" for k in keys if d.meta[k] != getattr(cfg, k)]
    if bad:
        raise UsageError("dataset does not match checkpoint: " + ", ".join(bad))
    if which != "all":
        parts = dict(zip(("train", "val", "test"), split(d, rc.split_config().fractions, rc.split_seed)))
        d = parts[which]
    visual, text, answers = d.arrays()
    scores = model.logits(visual, text).data
    report = evaluate(scores, answers, {"checkpoint": str(checkpoint), "split": which,
                                        "model": cfg.to_dict(),
                                        "margin_alpha": rc.values["ranking.margin_alpha"]})
    print(report.to_json())
    return 0


def cmd_gradcheck(rc: RunConfig, fusion_mode: str) -> int:
    gc = rc.gradcheck_config()
    overrides = {"fusion_mode": fusion_mode}
    if fusion_mode != "token_sequence":
        overrides.update(d_model=8, d_proj=4)
    _, tcfg, _, _ = rc.build()
    report = run_gradcheck([tiny_config(**overrides)], range(gc.seeds), tcfg.ranking, tcfg.hybrid,
                           gc.step, gc.tolerance, gc.batch)
    print(report.text())
    out = rc.values["paths.out"]
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        Path(out, "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2))
        Path(out, "gradcheck.txt").write_text(report.text() + "\n")
    return 0 if report.passed else 1


def cmd_ablate(rc: RunConfig) -> int:
    ab = rc.ablation_config()
    bad = [v for v in ab.variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {', '.join(bad)}; choose from {', '.join(VARIANTS)}")
    d = _dataset(rc)
    _align_model(rc, d.meta)
    mcfg, tcfg, _, scfg = rc.build()

    def show(run):
        print(f"{run.variant:<12} seed {run.seed}: acc {run.accuracy:.4f} mrr {run.mrr:.4f} "
              f"(best epoch {run.best_epoch}/{run.epochs})", file=sys.stderr)

    report = run_ablation(d, mcfg, tcfg, ab.variants, ab.seeds, scfg.fractions, rc.split_seed,
                          ab.min_gap, progress=show)
    print(report.table())
    out = Path(rc.values["paths.out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(report.to_json() + "\n")
    (out / "ablation.txt").write_text(report.table() + "\n")
    return 0 if report.passed else 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = _resolve(args)
        if args.command == "generate":
            return cmd_generate(rc)
        if args.command == "train":
            return cmd_train(rc, args.epoch_checkpoints)
        if args.command == "eval":
            return cmd_eval(rc, args.checkpoint, args.split)
        if args.command == "gradcheck":
            return cmd_gradcheck(rc, args.fusion_mode)
        return cmd_ablate(rc)
    except UsageError as exc:
        print(f"rankvqa: usage error: {exc}", file=sys.stderr)
        return 2
    except (RankVqaError, OSError, json.JSONDecodeError) as exc:
        print(f"rankvqa: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
