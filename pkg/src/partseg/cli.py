"""Command-line entry point: ``partseg <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .core import argmax_labels, resize_labels, resize_scores
from .crbm import CrbmTrainConfig, InferenceConfig, format_log, rbm_refine, train
from .densecrf import DenseCrfParams, crf_infer, format_table, grid_search, parameter_grid
from .metrics import iou_report, pixel_accuracy, superpixel_accuracy
from .multiscale import ScalePyramid, fuse_scores
from .pipeline import PipelineConfig, run
from .synth import SynthConfig, gen_dataset, read_manifest

log = logging.getLogger("partseg")


class CliError(Exception):
    pass


def _typed_config(cls, raw: dict, source, required=(), skip=()):
    """Build a dataclass from string values, converting by the field defaults' types."""
    for key in required:
        if key not in raw:
            raise CliError(f"{source}: missing required key '{key}'")
    types = {f.name: type(f.default) for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key in skip:
            continue
        if key not in types:
            raise CliError(f"{source}: unknown key '{key}'")
        t = types[key]
        if t is bool:
            kwargs[key] = value.strip().lower() in ("1", "true", "yes", "on")
        else:
            kwargs[key] = t(value)
    return cls(**kwargs)


def _out_dir(args, default=".") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    raw = io.read_key_values(args.config)
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    cfg = _typed_config(SynthConfig, raw, args.config, required=("seed",), skip=("n", "out"))
    out = args.out or raw.get("out")
    if out is None:
        raise CliError(f"{args.config}: no output directory (set 'out' or pass --out)")
    manifest = gen_dataset(int(raw.get("n", 10)), cfg, out)
    print(manifest)


def _load_split(manifest, split):
    entries = [e for e in read_manifest(manifest) if split is None or e.split == split]
    if not entries:
        raise CliError(f"{manifest}: split {split!r} is empty")
    return entries


def cmd_train_rbm(args):
    raw = io.read_key_values(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    grid = (int(raw.pop("grid_h", 0)), int(raw.pop("grid_w", 0)))
    cfg = _typed_config(CrbmTrainConfig, raw, args.config or "<defaults>")
    data = []
    for e in _load_split(args.manifest, args.split):
        labels, _ = io.read_labels(e.label_path)
        scores = io.read_scores(e.score_path)
        if all(grid):
            labels = resize_labels(labels, *grid)
            scores = resize_scores(scores, *grid)
        data.append((labels, scores))
    params, epoch_log = train(data, cfg)
    out = _out_dir(args)
    io.write_crbm(out / "crbm.params", params)
    (out / "train.log").write_text(format_log(epoch_log))
    print(out / "crbm.params")


def cmd_rbm_infer(args):
    params = io.read_crbm(args.rbm_params)
    scores = io.read_scores(args.scores)
    seed = args.seed if args.seed is not None else 0
    refined = rbm_refine(scores, params, InferenceConfig(args.burn_in, args.samples, seed))
    out = _out_dir(args)
    io.write_scores(out / "refined.spsm", refined)
    io.write_labels(out / "labels.pgm", argmax_labels(refined), refined.shape[2])
    print(out / "labels.pgm")


def cmd_crf(args):
    params = io.read_densecrf(args.crf_params)
    scores = io.read_scores(args.scores)
    image = io.read_image(args.image)
    labels, q = crf_infer(scores, image, params)
    out = _out_dir(args)
    io.write_labels(out / "labels.pgm", labels, scores.shape[2])
    io.write_scores(out / "log_q.spsm", np.log(np.maximum(q, 1e-10)))
    print(out / "labels.pgm")


def cmd_fuse(args):
    pyramid = ScalePyramid.from_manifest(args.scales, nominal=args.nominal)
    boxes = io.read_boxes(args.boxes) if args.boxes else []
    if args.base:
        h, w = (int(x) for x in args.base.lower().split("x"))
    else:
        s, m = pyramid.scales[0], pyramid.score_maps[0]
        h, w = int(round(m.shape[0] / s)), int(round(m.shape[1] / s))
    fused = fuse_scores(pyramid, boxes, h, w)
    out = _out_dir(args)
    io.write_scores(out / "fused.spsm", fused)
    io.write_labels(out / "labels.pgm", argmax_labels(fused), fused.shape[2])
    print(out / "fused.spsm")


def cmd_eval(args):
    pred, k = io.read_labels(args.pred)
    gt, k_gt = io.read_labels(args.gt)
    report = iou_report(pred, gt, max(k, k_gt))
    text = report.format() + f"pixel_accuracy={pixel_accuracy(pred, gt)!r}\n"
    if args.superpixels:
        sp = io.read_superpixels(args.superpixels)
        sp_labels = np.array([int(x) for x in Path(args.sp_labels).read_text().split()])
        text += f"superpixel_accuracy={superpixel_accuracy(pred, sp_labels, sp)!r}\n"
    sys.stdout.write(text)
    if args.out:
        (_out_dir(args) / "report.txt").write_text(text)


def _read_grid(path):
    raw = io.read_key_values(path)
    base_keys = {"iterations", "update_mode", "damping"}
    base = DenseCrfParams.from_mapping({k: v for k, v in raw.items() if k in base_keys}, str(path))
    grid = {k: tuple(float(x) for x in v.split(",")) for k, v in raw.items() if k not in base_keys}
    for k in grid:
        if k not in {"theta_alpha", "theta_beta", "theta_gamma", "w_app", "w_smooth"}:
            raise CliError(f"{path}: unknown grid key '{k}'")
    return parameter_grid(grid or None, base)


def cmd_gridsearch(args):
    candidates = _read_grid(args.grid) if args.grid else parameter_grid()
    validation = []
    for e in _load_split(args.manifest, args.split):
        if e.image_path is None:
            raise CliError(f"{args.manifest}: entry {e.index} has no image")
        gt, _ = io.read_labels(e.label_path)
        validation.append((io.read_scores(e.score_path), io.read_image(e.image_path), gt))
    best, table = grid_search(candidates, validation)
    out = _out_dir(args)
    (out / "gridsearch.txt").write_text(format_table(table))
    io.write_densecrf(out / "crf.params", best)
    best_score = next(score for p, score in table if p is best)
    sys.stdout.write(format_table([(best, best_score)]))


def cmd_pipeline(args):
    cfg = PipelineConfig.from_file(args.config, out=Path(args.out) if args.out else None, seed=args.seed,
                                   rbm_params=Path(args.rbm_params) if args.rbm_params else None,
                                   crf_params=Path(args.crf_params) if args.crf_params else None,
                                   threads=args.threads)
    for name, summary in run(cfg, ablation=args.ablation):
        print(f"{name}\tmean_iou={summary['mean_iou']!r}\tpixel_accuracy={summary['pixel_accuracy']!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        return p

    p = add("gen", cmd_gen, "generate a synthetic dataset")
    p.add_argument("--config", required=True)

    p = add("train-rbm", cmd_train_rbm, "train the shape prior")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--split", default="train")

    p = add("rbm-infer", cmd_rbm_infer, "refine one score map with the shape prior")
    p.add_argument("--scores", required=True)
    p.add_argument("--rbm-params", required=True)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--samples", type=int, default=200)

    p = add("crf", cmd_crf, "dense CRF inference on one image")
    p.add_argument("--scores", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--crf-params", required=True)

    p = add("fuse", cmd_fuse, "fuse a score pyramid under detector boxes")
    p.add_argument("--scales", required=True, help="manifest of 'scale<TAB>path' lines")
    p.add_argument("--boxes")
    p.add_argument("--nominal", type=int, default=321)
    p.add_argument("--base", help="base size HxW (default: derived from the first level)")

    p = add("eval", cmd_eval, "evaluate a predicted label map")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--superpixels")
    p.add_argument("--sp-labels")

    p = add("gridsearch", cmd_gridsearch, "grid-search dense CRF parameters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--grid")

    p = add("pipeline", cmd_pipeline, "run the composed pipeline and evaluate")
    p.add_argument("--config", required=True)
    p.add_argument("--rbm-params")
    p.add_argument("--crf-params")
    p.add_argument("--ablation", action="store_true", help="run all four stage combinations")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.fn(args)
    except (CliError, OSError, ValueError, RuntimeError) as exc:
        print(f"partseg {args.command}: error: {exc}", file=sys.stderr)
        if isinstance(exc, CliError):
            parser.print_usage(sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
