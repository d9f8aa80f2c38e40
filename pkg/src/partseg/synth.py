"""Deterministic synthetic part layouts, corrupted score maps and scenes.

Layouts are articulated figures (torso ellipse, head disc resting on the
torso, hinged limb rectangles) with labels 0 background, 1 head, 2 torso,
3 upper limbs, 4 lower limbs. Everything is a pure function of
``(seed, index)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DetectionBox, bilinear_sample, one_hot, resize_labels
from .io import write_image, write_labels, write_scores
from .multiscale import ScalePyramid, scaled_size

BACKGROUND, HEAD, TORSO, ARMS, LEGS = range(5)
PART_NAMES = ("background", "head", "torso", "upper-limbs", "lower-limbs")
PALETTE = np.array(
    [[40, 40, 40], [230, 190, 150], [200, 40, 40], [60, 160, 60], [50, 70, 200]], dtype=np.float64
)

_LAYOUT, _SCORES, _IMAGE, _SCENE = range(4)


@dataclass
class SynthConfig:
    grid_h: int = 32
    grid_w: int = 32
    num_labels: int = 5
    arm_angle_jitter: float = 30.0
    leg_angle_jitter: float = 15.0
    translation_jitter: float = 3.0
    noise_sigma: float = 1.0
    margin: float = 2.0
    part_dropout: float = 0.3
    image_noise: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.grid_h < 8 or self.grid_w < 8:
            raise ValueError("grid must be at least 8x8")
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if not 0 <= self.part_dropout <= 1:
            raise ValueError("part_dropout must lie in [0, 1]")
        if self.noise_sigma < 0 or self.image_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    @property
    def jitter_free(self) -> bool:
        return self.arm_angle_jitter == 0 and self.leg_angle_jitter == 0 and self.translation_jitter == 0


def _rng(config: SynthConfig, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, index, stream])


def _limb(rows, cols, hinge, angle_deg, length, width):
    """Pixels of a rectangle hanging from ``hinge``; angle 0 points straight down."""
    a = np.deg2rad(angle_deg)
    d = np.array([np.cos(a), np.sin(a)])  # (row, col) direction
    dr, dc = rows - hinge[0], cols - hinge[1]
    along = dr * d[0] + dc * d[1]
    across = -dr * d[1] + dc * d[0]
    return (along >= 0) & (along <= length) & (np.abs(across) <= width / 2)


def gen_layout(config: SynthConfig, index: int) -> np.ndarray:
    """Rasterize the articulated figure for ``(config.seed, index)``."""
    h, w = config.grid_h, config.grid_w
    f = min(h, w) / 32.0
    rng = _rng(config, index, _LAYOUT)
    jit = rng.uniform(-1, 1, size=6)

    torso_ry, torso_rx = 6.0 * f, 4.0 * f
    head_r = max(3.0 * f, 1.0)
    arm_len, arm_w = 8.0 * f, max(2.2 * f, 1.0)
    leg_len, leg_w = 10.0 * f, max(2.6 * f, 1.0)

    cy = 0.45 * (h - 1) + config.translation_jitter * jit[0]
    cx = 0.5 * (w - 1) + config.translation_jitter * jit[1]
    # keep the whole figure on the grid: translate, never drop a part
    top_extent = torso_ry + 2 * head_r
    bottom_extent = 0.7 * torso_ry + leg_len
    side_extent = 0.85 * torso_rx + arm_len
    cy = float(np.clip(cy, top_extent, max(top_extent, h - 1 - bottom_extent)))
    cx = float(np.clip(cx, side_extent, max(side_extent, w - 1 - side_extent)))

    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    torso = ((rows - cy) / torso_ry) ** 2 + ((cols - cx) / torso_rx) ** 2 <= 1.0
    labels[torso] = TORSO

    limbs = [
        (ARMS, (cy - 0.6 * torso_ry, cx - 0.85 * torso_rx), -35 + config.arm_angle_jitter * jit[2], arm_len, arm_w),
        (ARMS, (cy - 0.6 * torso_ry, cx + 0.85 * torso_rx), 35 + config.arm_angle_jitter * jit[3], arm_len, arm_w),
        (LEGS, (cy + 0.7 * torso_ry, cx - 0.5 * torso_rx), -10 + config.leg_angle_jitter * jit[4], leg_len, leg_w),
        (LEGS, (cy + 0.7 * torso_ry, cx + 0.5 * torso_rx), 10 + config.leg_angle_jitter * jit[5], leg_len, leg_w),
    ]
    for part, hinge, angle, length, width in limbs:
        labels[_limb(rows, cols, hinge, angle, length, width)] = part

    # head disc overlaps the torso top by half a pixel so the rasters touch
    hy = cy - torso_ry - head_r + 0.5
    head = (rows - hy) ** 2 + (cols - cx) ** 2 <= head_r**2
    labels[head] = HEAD
    _ensure_neck(labels)
    return np.minimum(labels, config.num_labels - 1)


def _ensure_neck(labels):
    """Guarantee a head pixel 4-adjacent to a torso pixel."""
    if head_touches_torso(labels):
        return
    rows, cols = np.nonzero(labels == HEAD)
    bottom = rows.max()
    col = int(np.round(cols[rows == bottom].mean()))
    if bottom + 1 < labels.shape[0]:
        labels[bottom + 1, col] = TORSO
    else:
        labels[bottom - 1, col] = TORSO


def head_touches_torso(labels) -> bool:
    head = labels == HEAD
    torso = labels == TORSO
    near = np.zeros_like(torso)
    near[1:] |= torso[:-1]
    near[:-1] |= torso[1:]
    near[:, 1:] |= torso[:, :-1]
    near[:, :-1] |= torso[:, 1:]
    return bool(np.any(head & near))


def corrupt_to_scores(labels, config: SynthConfig, index: int) -> np.ndarray:
    """DCNN-like scores: ``margin`` on the true label plus Gaussian noise.

    With probability ``part_dropout`` one non-background part present in the
    map loses its margin everywhere, mimicking a missed part.
    """
    labels = np.asarray(labels)
    k = config.num_labels
    rng = _rng(config, index, _SCORES)
    margin = np.full(labels.shape, config.margin)
    drop = rng.random() < config.part_dropout
    parts = np.unique(labels[labels != BACKGROUND])
    if drop and parts.size:
        margin[labels == parts[rng.integers(parts.size)]] = 0.0
    noise = rng.normal(0.0, 1.0, size=labels.shape + (k,)) * config.noise_sigma
    return one_hot(labels, k) * margin[..., None] + noise


def render_image(labels, config: SynthConfig, index: int) -> np.ndarray:
    """Colour image whose colours follow the parts, plus Gaussian pixel noise."""
    labels = np.asarray(labels)
    rng = _rng(config, index, _IMAGE)
    k = int(labels.max()) + 1
    palette = PALETTE
    if k > len(palette):
        extra = np.random.default_rng(k).uniform(0, 255, size=(k - len(palette), 3))
        palette = np.vstack([palette, extra])
    img = palette[labels] + rng.normal(0.0, config.image_noise, size=labels.shape + (3,))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def split_tags(n: int, seed: int = 0) -> list[str]:
    """Assign 70/15/15 train/val/test by ranking indices on a hash of (seed, index)."""
    def key(i):
        return hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()

    order = sorted(range(n), key=key)
    n_train, n_val = round(0.70 * n), round(0.15 * n)
    tags = [""] * n
    for rank, i in enumerate(order):
        tags[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


MANIFEST_NAME = "manifest.tsv"


def gen_dataset(n: int, config: SynthConfig, out_dir) -> Path:
    """Write ``n`` (labels, scores, image) triples and a tab-separated manifest.

    Manifest columns: index, label path, score path, split, image path
    (paths relative to the manifest).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tags = split_tags(n, config.seed)
    lines = []
    for i in range(n):
        labels = gen_layout(config, i)
        names = (f"labels_{i:05d}.pgm", f"scores_{i:05d}.spsm", f"image_{i:05d}.ppm")
        write_labels(out / names[0], labels, config.num_labels)
        write_scores(out / names[1], corrupt_to_scores(labels, config, i))
        write_image(out / names[2], render_image(labels, config, i))
        lines.append(f"{i}\t{names[0]}\t{names[1]}\t{tags[i]}\t{names[2]}\n")
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(lines))
    return manifest


@dataclass
class ManifestEntry:
    index: int
    label_path: Path
    score_path: Path
    split: str | None = None
    image_path: Path | None = None


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 3:
            raise ValueError(f"{path}:{lineno}: expected at least 3 tab-separated columns")
        resolve = lambda p: p if Path(p).is_absolute() else path.parent / p  # noqa: E731
        entries.append(
            ManifestEntry(
                int(cols[0]),
                Path(resolve(cols[1])),
                Path(resolve(cols[2])),
                cols[3] if len(cols) > 3 and cols[3] else None,
                Path(resolve(cols[4])) if len(cols) > 4 and cols[4] else None,
            )
        )
    return entries


# -- multi-scale scenes -----------------------------------------------------------------

@dataclass
class SceneConfig:
    """A single figure pasted into a larger frame, seen through a strided network.

    The simulated network pools one-hot labels over ``stride`` x ``stride``
    cells of the rescaled frame, so objects far below nominal size lose thin
    parts; objects pushed far above nominal size get noisier scores.
    """

    base_h: int = 96
    base_w: int = 96
    nominal: int = 48
    scales: tuple = (1.0, 1.5, 2.0)
    stride: int = 8
    margin: float = 4.0
    noise_sigma: float = 1.0


@dataclass
class Scene:
    labels: np.ndarray
    boxes: list
    pyramid: ScalePyramid
    object_size: int = 0
    extra: dict = field(default_factory=dict)


def simulate_network(labels, scale: float, object_size: int, scene: SceneConfig, rng, num_labels: int):
    """Score map a strided network would produce on the frame rescaled by ``scale``."""
    h, w = labels.shape
    hs, ws = scaled_size(h, scale), scaled_size(w, scale)
    up = resize_labels(labels, hs, ws)
    s = scene.stride
    ch, cw = -(-hs // s), -(-ws // s)
    padded = np.pad(up, ((0, ch * s - hs), (0, cw * s - ws)), mode="edge")
    pooled = one_hot(padded, num_labels).reshape(ch, s, cw, s, num_labels).mean(axis=(1, 3))
    oversize = max(0.0, np.log2(scale * object_size / scene.nominal))
    sigma = scene.noise_sigma * (1.0 + oversize)
    coarse = scene.margin * pooled + rng.normal(0.0, sigma, size=pooled.shape)
    rows = np.clip((np.arange(hs) + 0.5) / s - 0.5, 0, ch - 1)[:, None]
    cols = np.clip((np.arange(ws) + 0.5) / s - 0.5, 0, cw - 1)[None, :]
    return bilinear_sample(coarse, rows, cols)


def gen_scene(config: SynthConfig, scene: SceneConfig, index: int, object_size: int) -> Scene:
    """Frame with one figure of ``object_size`` pixels, its box and score pyramid."""
    if object_size > min(scene.base_h, scene.base_w):
        raise ValueError("object larger than the frame")
    rng = _rng(config, index, _SCENE)
    fig_cfg = replace(config, grid_h=object_size, grid_w=object_size)
    fig = gen_layout(fig_cfg, index)
    y0 = int(rng.integers(0, scene.base_h - object_size + 1))
    x0 = int(rng.integers(0, scene.base_w - object_size + 1))
    labels = np.zeros((scene.base_h, scene.base_w), dtype=np.int64)
    labels[y0 : y0 + object_size, x0 : x0 + object_size] = fig
    rows, cols = np.nonzero(labels != BACKGROUND)
    box = DetectionBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()), 1.0, 0)
    maps = [simulate_network(labels, s, object_size, scene, rng, config.num_labels) for s in scene.scales]
    pyramid = ScalePyramid(list(scene.scales), maps, scene.nominal)
    return Scene(labels, [box], pyramid, object_size)
