"""``cosal`` command line: train, predict, evaluate, synth, gradcheck.

Exit codes: 0 success, 1 a check failed, 2 bad input (config, dataset,
checkpoint or file sets).
"""
from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import RunConfig, dump_config, load_config
from .data import load_dataset, load_image, load_mask, save_dataset, synth_generate
from .diffcore import CheckpointError, TrainingDiverged
from .metrics import evaluate_dataset
from .network import CoSaliencyNet
from .training import ITERATION_KEY, read_log, save_training_checkpoint, train, write_log

log = logging.getLogger("cosal")

CONFIG_NAME = "config.ini"
LOG_NAME = "log.csv"
FINAL_NAME = "model.csk"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
_CKPT_RE = re.compile(r"ckpt_(\d+)\.csk$")


class CliError(Exception):
    """Bad input; reported on stderr with exit code 2."""


def n_threads():
    raw = os.environ.get("COSAL_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise CliError(f"COSAL_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def _pmap(fn, items):
    items = list(items)
    workers = min(n_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def resolve_config(args):
    try:
        cfg = load_config(args.config) if args.config else RunConfig.desk()
    except (OSError, ValueError) as exc:
        raise CliError(f"config: {exc}") from None
    if getattr(args, "full_schedule", False):
        cfg = replace(cfg, optim=RunConfig.full().optim)
    upd = {}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "mode", None):
        upd["mode"] = args.mode
    if getattr(args, "out", None):
        upd["out_dir"] = args.out
    if getattr(args, "data", None):
        upd["train_dir"] = args.data
    if getattr(args, "iterations", None):
        upd["optim"] = replace(cfg.optim, iterations=args.iterations)
    return replace(cfg, **upd)


def _images_in(folder):
    folder = Path(folder)
    if not folder.is_dir():
        raise CliError(f"not a directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --------------------------------------------------------------------------
# train


def latest_checkpoint(out_dir):
    found = []
    for p in Path(out_dir).glob("ckpt_*.csk"):
        m = _CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found) if found else (0, None)


def _training_set(run):
    if run.train_dir:
        ds = load_dataset(run.train_dir)
        if ds.diagnostics:
            lines = "\n".join(f"  {path}: {msg}" for path, msg in ds.diagnostics)
            raise CliError(f"dataset {run.train_dir} has invalid samples:\n{lines}")
        if not ds:
            raise CliError(f"dataset {run.train_dir} is empty")
        return list(ds)
    return synth_generate(run.synth_train, run.network.side, seed=run.synth_seed)


def cmd_train(args):
    run = resolve_config(args)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = _training_set(run)
    net = CoSaliencyNet(run.network, rng=np.random.default_rng(run.seed))
    start = 0
    log_path = out / LOG_NAME
    if args.resume:
        start, ckpt = latest_checkpoint(out)
        if ckpt is not None:
            net, records = CoSaliencyNet.load(ckpt, run.network)
            start = int(records[ITERATION_KEY][0])
            kept = [r for r in read_log(log_path) if r[0] <= start] if log_path.exists() else []
            write_log(log_path, kept)
            log.info("resuming from %s at iteration %d", ckpt, start)
    if start == 0:
        write_log(log_path, [])
    dump_config(run, out / CONFIG_NAME)

    pending = []

    def on_row(row):
        pending.append(row)

    def on_checkpoint(it):
        write_log(log_path, pending, append=True)
        pending.clear()
        save_training_checkpoint(net, out / f"ckpt_{it:06d}.csk", it)

    try:
        result = train(net, samples, run, start=start, on_checkpoint=on_checkpoint, on_row=on_row)
    except TrainingDiverged as exc:
        write_log(log_path, pending, append=True)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    write_log(log_path, pending, append=True)
    save_training_checkpoint(net, out / FINAL_NAME, run.optim.iterations)
    if result.rows:
        last = result.rows[-1]
        print(f"trained iterations {start + 1}..{last[0]} in {result.seconds:.1f}s; "
              f"final total {last[4]:.4f} (decoder {last[1]:.4f} rpn {last[2]:.4f} rfm {last[3]:.4f})")
    print(f"wrote {out / FINAL_NAME} and {log_path}")
    return 0


# --------------------------------------------------------------------------
# predict


def load_model(checkpoint, config_path=None):
    checkpoint = Path(checkpoint)
    if config_path is None and (checkpoint.parent / CONFIG_NAME).exists():
        config_path = checkpoint.parent / CONFIG_NAME
    try:
        run = load_config(config_path) if config_path else RunConfig.desk()
    except (OSError, ValueError) as exc:
        raise CliError(f"config: {exc}") from None
    try:
        net, _ = CoSaliencyNet.load(checkpoint, run.network)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {checkpoint}") from None
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"bad checkpoint {checkpoint}: {exc}") from None
    return net


def predict_file(net, path):
    """Saliency map of an image file at its own resolution, as uint8."""
    image = load_image(path)
    h, w = image.shape[1:]
    side = net.config.side
    if (h, w) != (side, side):
        rgb = Image.fromarray(np.round(image.transpose(1, 2, 0) * 255).astype(np.uint8))
        image = np.asarray(rgb.resize((side, side), Image.BILINEAR), dtype=np.float32).transpose(2, 0, 1) / 255.0
    p = net.predict(np.ascontiguousarray(image))
    if (h, w) != (side, side):
        p = np.asarray(Image.fromarray(p.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
    return np.round(255.0 * np.clip(p, 0.0, 1.0)).astype(np.uint8)


def cmd_predict(args):
    net = load_model(args.checkpoint, args.config)
    files = _images_in(args.input)
    out = Path(args.out or "predictions")
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        Image.fromarray(predict_file(net, path), mode="L").save(out / f"{path.stem}.png")

    _pmap(one, files)
    print(f"wrote {len(files)} saliency maps to {out}")
    return 0


# --------------------------------------------------------------------------
# evaluate


def _gt_folder(gt_dir):
    gt_dir = Path(gt_dir)
    return gt_dir / "gt" if (gt_dir / "gt").is_dir() else gt_dir


def pair_files(pred_dir, gt_dir):
    preds = {p.stem: p for p in _images_in(pred_dir)}
    gts = {p.stem: p for p in _images_in(_gt_folder(gt_dir))}
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt or not preds:
        msg = ["prediction and ground-truth file sets differ"]
        if only_pred:
            msg.append("  no ground truth for: " + ", ".join(only_pred))
        if only_gt:
            msg.append("  no prediction for: " + ", ".join(only_gt))
        if not preds and not gts:
            msg.append("  both folders are empty")
        raise CliError("\n".join(msg))
    return [(preds[k], gts[k]) for k in sorted(preds)]


def _load_pair(pair):
    pred_path, gt_path = pair
    with Image.open(pred_path) as im:
        p = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    y = load_mask(gt_path)
    if p.shape != y.shape:
        raise CliError(f"{pred_path.name}: prediction {p.shape} vs ground truth {y.shape}")
    return p, y


def cmd_evaluate(args):
    pairs = pair_files(args.pred, args.gt)
    loaded = _pmap(_load_pair, pairs)
    report = evaluate_dataset([p for p, _ in loaded], [y for _, y in loaded])
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "pr_curve.csv").write_text(report.pr_csv())
    sys.stdout.write(report.to_text())
    return 0


# --------------------------------------------------------------------------
# synth / gradcheck


def cmd_synth(args):
    out = Path(args.out or "synth")
    samples = synth_generate(args.count, args.side, seed=args.seed if args.seed is not None else 0)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} scenes to {out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite, summarize

    reports = run_suite(seeds=args.seeds)
    for r in summarize(reports):
        print(r)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


# --------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="cosal", description="Within-image co-saliency detection on numpy.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, mode=False):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if mode:
            p.add_argument("--mode", choices=("offline", "online"))

    p = sub.add_parser("train", help="train a model")
    common(p, mode=True)
    p.add_argument("--data", help="dataset root (default: synthetic scenes)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    p.add_argument("--full-schedule", action="store_true", help="1e-5 -> 1e-6 after 30k, 80k iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write saliency maps for a folder of images")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("input", help="folder of images")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score saliency maps against ground-truth masks")
    common(p)
    p.add_argument("pred", help="folder of predicted maps")
    p.add_argument("gt", help="folder of masks, or a dataset root with gt/")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("count", type=int)
    p.add_argument("--side", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
