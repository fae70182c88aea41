"""Command-line entry point: ``coseg <command> [options]``.

Reports and data go to stdout or files; progress goes to stderr.  Failures
exit non-zero with one line ``coseg: error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as dataset
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .gradcheck import run_end_to_end_suite, run_primitive_suite
from .group import (MODES, generate_attention, instant_group_coseg, pairwise_group_coseg,
                    write_attention_export)
from .imageio import ImageFormatError, load_image, save_mask
from .metrics import format_report, jaccard, precision_pixel, report_rows
from .network import CosegModel
from .optim import Adam
from .training import SCHEDULES, PretrainConfig, TrainConfig, evaluate, fit, pretrain_on_shapes

log = logging.getLogger("coseg")

COMMANDS = ("gen-data", "train", "eval", "coseg-pair", "coseg-group", "benchmark", "gradcheck",
            "export-attention")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    precision: int = 32
    variant: str | None = None
    mode: str = "average"
    config: Path | None = None
    checkpoint: Path | None = None
    out: Path | None = None
    data: Path | None = None
    n: tuple[int, ...] = ()
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


def _n_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"group sizes must be positive, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", type=int, choices=(32, 64), default=32)
    common.add_argument("--config", type=Path, help="model config file (key = value text)")
    common.add_argument("--variant", choices=("ca", "fca", "csa"))
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--out", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="coseg", description="Attention-based object co-segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic pair dataset")
    g.add_argument("--train-pairs", type=int, default=400)
    g.add_argument("--val-pairs", type=int, default=40)
    g.add_argument("--test-pairs", type=int, default=100)
    g.add_argument("--unseen-pairs", type=int, default=40)
    g.add_argument("--holdout", default="cross", help="class kept out of training ('none' for no hold-out)")

    t = sub.add_parser("train", parents=[common], help="train on a dataset written by gen-data")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--pretrain-epochs", type=int, default=3,
                   help="encoder shape-classification epochs before co-segmentation training (0 to skip)")
    t.add_argument("--pretrain-per-class", type=int, default=400, help="single-shape images per class for pretraining")
    t.add_argument("--schedule", choices=SCHEDULES, default="cosine", help="learning-rate schedule over the epochs")
    t.add_argument("--recipe", choices=("desk", "base"), default="desk",
                   help="architecture defaults without --config: desk = max pooling, no dropout")

    e = sub.add_parser("eval", parents=[common], help="per-class Jaccard / precision report")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default="test")

    cp = sub.add_parser("coseg-pair", parents=[common], help="co-segment two images")
    cp.add_argument("image_a", type=Path)
    cp.add_argument("image_b", type=Path)

    cg = sub.add_parser("coseg-group", parents=[common], help="instant group co-segmentation of a directory")
    cg.add_argument("directory", type=Path)
    cg.add_argument("--mode", choices=MODES, default="average")
    cg.add_argument("--no-cache", action="store_true", help="re-encode images in the segmentation pass")

    b = sub.add_parser("benchmark", parents=[common], help="instant vs pairwise invocation counts and time")
    b.add_argument("--n", type=_n_list, default=(2, 4, 8, 16))
    b.add_argument("--mode", choices=MODES, default="average")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")

    x = sub.add_parser("export-attention", parents=[common], help="write per-image attention vectors")
    x.add_argument("directory", type=Path, help="directory of .ppm images, searched recursively")
    return p


def _run_config(args: argparse.Namespace) -> RunConfig:
    known = {"command", "seed", "precision", "variant", "config", "checkpoint", "out", "data", "mode", "n"}
    extra = {k: v for k, v in vars(args).items() if k not in known and k != "verbose"}
    return RunConfig(command=args.command, seed=args.seed, precision=args.precision, variant=args.variant,
                     mode=getattr(args, "mode", "average"), config=args.config, checkpoint=args.checkpoint,
                     out=args.out, data=getattr(args, "data", None), n=getattr(args, "n", ()), extra=extra)


def _model_config(rc: RunConfig) -> ModelConfig:
    cfg = ModelConfig.load(rc.config) if rc.config else ModelConfig()
    if rc.variant:
        cfg = replace(cfg, variant=rc.variant)
    return cfg


def _load_model(rc: RunConfig, required: bool = True) -> CosegModel:
    if rc.checkpoint is None:
        if required:
            raise CliError("config", "--checkpoint is required for this command")
        return CosegModel(_model_config(rc), seed=rc.seed, dtype=rc.dtype)
    if not rc.checkpoint.exists():
        raise CliError("missing-file", f"checkpoint {rc.checkpoint} not found")
    model, _ = load_checkpoint(rc.checkpoint, dtype=rc.dtype)
    if rc.variant and rc.variant != model.config.variant:
        raise CliError("config", f"checkpoint holds a {model.config.variant} model, --variant asked for {rc.variant}")
    return model.eval()


def _out_dir(rc: RunConfig) -> Path:
    if rc.out is None:
        raise CliError("config", "--out is required for this command")
    rc.out.mkdir(parents=True, exist_ok=True)
    return rc.out


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise CliError("missing-file", f"{directory} is not a directory")
    paths = sorted(p for p in directory.rglob("*.ppm") if not p.name.endswith("_mask.ppm"))
    if not paths:
        raise CliError("missing-file", f"no .ppm images under {directory}")
    return paths


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(rc: RunConfig) -> int:
    x = rc.extra
    holdout = None if x["holdout"] == "none" else x["holdout"]
    cfg = dataset.SyntheticConfig(train_pairs=x["train_pairs"], val_pairs=x["val_pairs"],
                                  test_pairs=x["test_pairs"], unseen_pairs=x["unseen_pairs"],
                                  holdout=holdout, seed=rc.seed)
    pairs = dataset.gen_synthetic_pairset(cfg)
    root = _out_dir(rc)
    dataset.write_pairset(pairs, root)
    total = sum(len(v) for v in pairs.splits.values())
    log.info("wrote %d pairs to %s", total, root)
    print(f"{root}\t{total}\t{dataset.tree_digest(root)}")
    return 0


def cmd_train(rc: RunConfig) -> int:
    x = rc.extra
    if rc.checkpoint is None:
        raise CliError("config", "--checkpoint is required (where to save)")
    pairs = dataset.load_split(rc.data, "train")
    if not pairs:
        raise CliError("missing-file", f"no training pairs in {rc.data}")
    cfg = _model_config(rc)
    if rc.config is None and x["recipe"] == "desk":
        cfg = ModelConfig.desk(variant=cfg.variant)
    model = CosegModel(cfg, seed=rc.seed, dtype=rc.dtype)
    if x["pretrain_epochs"] > 0:
        acc = pretrain_on_shapes(model, x["pretrain_per_class"], PretrainConfig(epochs=x["pretrain_epochs"], seed=rc.seed))
        print(f"pretrain\t{len(acc)}\t{acc[-1]:.4f}", flush=True)
    opt = Adam(model.params, lr=x["lr"])
    tc = TrainConfig(epochs=x["epochs"], batch_pairs=x["batch"], lr=x["lr"], seed=rc.seed, schedule=x["schedule"])

    def on_epoch(epoch, loss):
        save_checkpoint(rc.checkpoint, model, opt)
        print(f"epoch\t{epoch + 1}\t{loss:.6f}", flush=True)

    fit(model, pairs, tc, optimizer=opt, on_epoch=on_epoch)
    return 0


def cmd_eval(rc: RunConfig) -> int:
    model = _load_model(rc)
    pairs = dataset.load_split(rc.data, rc.extra["split"])
    if not pairs:
        raise CliError("missing-file", f"split {rc.extra['split']!r} is empty in {rc.data}")
    text = format_report(report_rows(evaluate(model, pairs)))
    if rc.out:
        rc.out.parent.mkdir(parents=True, exist_ok=True)
        rc.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_coseg_pair(rc: RunConfig) -> int:
    model = _load_model(rc)
    a, b = load_image(rc.extra["image_a"]), load_image(rc.extra["image_b"])
    ma, mb = model.predict_pair(a, b)
    out = _out_dir(rc)
    save_mask(ma[0], out / "a_mask.pgm")
    save_mask(mb[0], out / "b_mask.pgm")
    print(f"{out / 'a_mask.pgm'}\t{int(ma.sum())}\n{out / 'b_mask.pgm'}\t{int(mb.sum())}")
    return 0


def cmd_coseg_group(rc: RunConfig) -> int:
    model = _load_model(rc)
    paths = _images_in(rc.extra["directory"])
    images = [load_image(p) for p in paths]
    res = instant_group_coseg(images, model, rc.mode, cache_features=not rc.extra["no_cache"])
    out = _out_dir(rc)
    for p, m in zip(paths, res.masks):
        save_mask(m, out / f"{p.stem}_mask.pgm")
        print(f"{p}\t{int(m.sum())}")
    write_attention_export(out / "attention.txt", [str(p) for p in paths], res.attentions)
    log.info("counters %s, %.3fs", dict(res.counters), res.seconds)
    return 0


def cmd_benchmark(rc: RunConfig) -> int:
    model = _load_model(rc, required=False).eval()
    cfg = dataset.SyntheticConfig(seed=rc.seed)
    lines = ["n\tmode\tencoder\tattention\tdecoder\treduction\tseconds"]
    for n in rc.n:
        images, _ = dataset.make_group(cfg, cfg.classes[0], n, 0, seed=n)
        inst = instant_group_coseg(images, model, rc.mode)
        rows = [("instant-" + rc.mode, inst)]
        if n >= 2:
            rows.append(("pairwise", pairwise_group_coseg(images, model)))
        for name, r in rows:
            c = r.counters
            lines.append(f"{n}\t{name}\t{c['encoder']}\t{c['attention']}\t{c['decoder']}\t{c['reduction']}\t{r.seconds:.4f}")
    text = "\n".join(lines) + "\n"
    if rc.out:
        rc.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(rc: RunConfig) -> int:
    results = run_primitive_suite(rc.seed) + run_end_to_end_suite(rc.seed)
    for r in results:
        print(f"{r.name}\t{r.error:.3e}\t{r.tolerance:.0e}\t{'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError("invariant", f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_export_attention(rc: RunConfig) -> int:
    model = _load_model(rc)
    paths = _images_in(rc.extra["directory"])
    alphas = [generate_attention(load_image(p), model)[0] for p in paths]
    if rc.out:
        rc.out.parent.mkdir(parents=True, exist_ok=True)
        write_attention_export(rc.out, [str(p) for p in paths], alphas)
    else:
        for p, a in zip(paths, alphas):
            print(f"{p}\t" + ",".join(f"{v:.8g}" for v in a))
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "coseg-pair": cmd_coseg_pair,
    "coseg-group": cmd_coseg_group,
    "benchmark": cmd_benchmark,
    "gradcheck": cmd_gradcheck,
    "export-attention": cmd_export_attention,
}


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(asctime)s %(name)s %(message)s")
        return HANDLERS[args.command](_run_config(args))
    except CliError as e:
        kind, msg = e.kind, str(e)
    except (FileNotFoundError, ImageFormatError, CheckpointError) as e:
        kind, msg = "missing-file" if isinstance(e, FileNotFoundError) else "bad-input", str(e)
    except ValueError as e:
        kind, msg = "invalid", str(e)
    print(f"coseg: error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
