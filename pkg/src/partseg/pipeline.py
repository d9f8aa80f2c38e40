"""Stage composition: raw scores, optionally shape-prior refined, optionally CRF smoothed.

The RBM stage runs first and its log-marginals serve as the CRF's scores.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .core import argmax_labels
from .crbm import CrbmParams, InferenceConfig, rbm_refine
from .densecrf import DenseCrfParams, crf_infer
from .metrics import iou_report, pixel_accuracy
from .synth import read_manifest

logger = logging.getLogger(__name__)

ABLATIONS = (("CNN", False, False), ("CNN+RBM", True, False), ("CNN+CRF", False, True), ("CNN+RBM+CRF", True, True))


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage and file."""


def parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


@dataclass
class PipelineConfig:
    manifest: Path
    out: Path | None = None
    split: str | None = "test"
    rbm: bool = False
    rbm_params: Path | None = None
    crf: bool = False
    crf_params: Path | None = None
    burn_in: int = 50
    samples: int = 200
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        path = Path(path)
        raw = io.read_key_values(path)
        if "manifest" not in raw:
            raise ValueError(f"{path}: missing required key 'manifest'")
        base = path.parent

        def p(key):
            if not raw.get(key):
                return None
            q = Path(raw[key])
            return q if q.is_absolute() else base / q

        known = {"manifest", "out", "split", "rbm", "rbm_params", "crf", "crf_params", "burn_in", "samples", "seed", "threads"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
        cfg = cls(
            manifest=p("manifest"),
            out=p("out"),
            split=None if raw.get("split", "test") in ("", "all") else raw.get("split", "test"),
            rbm=parse_bool(raw.get("rbm", "off"), "rbm"),
            rbm_params=p("rbm_params"),
            crf=parse_bool(raw.get("crf", "off"), "crf"),
            crf_params=p("crf_params"),
            burn_in=int(raw.get("burn_in", 50)),
            samples=int(raw.get("samples", 200)),
            seed=int(raw.get("seed", 0)),
            threads=int(raw.get("threads", 1)),
        )
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
        return cfg

    def validate(self, need_rbm=None, need_crf=None):
        need_rbm = self.rbm if need_rbm is None else need_rbm
        need_crf = self.crf if need_crf is None else need_crf
        if not Path(self.manifest).is_file():
            raise FileNotFoundError(f"manifest not found: {self.manifest}")
        if need_rbm and (self.rbm_params is None or not Path(self.rbm_params).is_file()):
            raise ValueError(f"rbm stage enabled but rbm_params missing: {self.rbm_params}")
        if need_crf and (self.crf_params is None or not Path(self.crf_params).is_file()):
            raise ValueError(f"crf stage enabled but crf_params missing: {self.crf_params}")


def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def predict(scores, image=None, rbm_params: CrbmParams | None = None, crf_params: DenseCrfParams | None = None,
            inference: InferenceConfig | None = None):
    """Label map for one image under the enabled stages."""
    v = scores
    if rbm_params is not None:
        v = rbm_refine(v, rbm_params, inference)
    if crf_params is not None:
        if image is None:
            image = np.full(v.shape[:2] + (3,), 128, dtype=np.uint8)
        return crf_infer(v, image, crf_params)[0]
    return argmax_labels(v)


def _run(stage, path, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        raise StageError(f"stage {stage} failed on {path}: {exc}") from exc


def run(cfg: PipelineConfig, ablation: bool = False) -> list[tuple[str, dict]]:
    """Predict every manifest entry of ``cfg.split`` and evaluate against ground truth.

    Returns:
        ``[(name, report)]`` with one entry, or one per stage combination when
        ``ablation`` is set. Each report holds ``mean_iou``, ``pixel_accuracy``
        and the :class:`IouReport`.
    """
    cfg.validate(need_rbm=cfg.rbm or ablation, need_crf=cfg.crf or ablation)
    entries = [e for e in read_manifest(cfg.manifest) if cfg.split is None or e.split == cfg.split]
    if not entries:
        raise ValueError(f"{cfg.manifest}: no entries in split {cfg.split!r}")
    rbm_params = _run("load", cfg.rbm_params, io.read_crbm, cfg.rbm_params) if (cfg.rbm or ablation) else None
    crf_params = _run("load", cfg.crf_params, io.read_densecrf, cfg.crf_params) if (cfg.crf or ablation) else None
    combos = ABLATIONS if ablation else [(_name(cfg.rbm, cfg.crf), cfg.rbm, cfg.crf)]

    def job(entry, use_rbm, use_crf):
        scores = _run("load", entry.score_path, io.read_scores, entry.score_path)
        image = None
        if use_crf and entry.image_path is not None:
            image = _run("load", entry.image_path, io.read_image, entry.image_path)
        inference = InferenceConfig(cfg.burn_in, cfg.samples, image_seed(cfg.seed, entry.index))
        stage = "+".join(["rbm"] * use_rbm + ["crf"] * use_crf) or "argmax"
        return _run(stage, entry.score_path, predict, scores, image,
                    rbm_params if use_rbm else None, crf_params if use_crf else None, inference)

    results = []
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        for name, use_rbm, use_crf in combos:
            preds = list(pool.map(lambda e: job(e, use_rbm, use_crf), entries))
            results.append((name, _evaluate(cfg, name, entries, preds)))
    return results


def _name(rbm, crf):
    return {(False, False): "CNN", (True, False): "CNN+RBM", (False, True): "CNN+CRF", (True, True): "CNN+RBM+CRF"}[(rbm, crf)]


def _evaluate(cfg, name, entries, preds):
    gts, k = [], None
    for e in entries:
        gt, k = _run("load", e.label_path, io.read_labels, e.label_path)
        gts.append(gt)
    if cfg.out is not None:
        out = Path(cfg.out) / name
        out.mkdir(parents=True, exist_ok=True)
        for e, pred in zip(entries, preds):
            io.write_labels(out / f"pred_{e.index:05d}.pgm", pred, k)
    report = iou_report(preds, gts, k)
    acc = pixel_accuracy(np.concatenate([p.ravel() for p in preds]), np.concatenate([g.ravel() for g in gts]))
    summary = {"mean_iou": report.mean, "pixel_accuracy": acc, "iou": report}
    if cfg.out is not None:
        text = f"# {name}\n" + report.format() + f"pixel_accuracy={acc!r}\n"
        (Path(cfg.out) / name / "report.txt").write_text(text)
    return summary
