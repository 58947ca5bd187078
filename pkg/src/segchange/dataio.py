"""Sample model, bitemporal dataset loading and synthetic scene generation.

On-disk layout::

    root/
      A/<name>        t1 images (8-bit RGB)
      B/<name>        t2 images
      label/<name>    change masks (8-bit, 0 / 255)
      list/<split>.txt
      prompts.jsonl   optional, {"id": ..., "prompt": ...} per line
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import GenerationError, LoadError, ValidationError

SPLITS = ("train", "val", "test")
STRIDE = 32
MASK_THRESHOLD = 128
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass
class BitemporalSample:
    id: str
    image_t1: np.ndarray
    image_t2: np.ndarray
    mask: np.ndarray
    prompt: Optional[str] = None

    def __post_init__(self):
        validate_sample(self)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape


def validate_sample(s: BitemporalSample) -> None:
    """Raise ValidationError if ``s`` breaks any sample invariant."""
    for name in ("image_t1", "image_t2"):
        img = getattr(s, name)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError(f"sample {s.id!r}: {name} must be HxWx3, got {img.shape}")
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise ValidationError(f"sample {s.id!r}: {name} values must lie in [0, 1]")
    if s.image_t1.shape != s.image_t2.shape:
        raise ValidationError(
            f"sample {s.id!r}: image size mismatch {s.image_t1.shape[:2]} vs {s.image_t2.shape[:2]}"
        )
    if s.mask.shape != s.image_t1.shape[:2]:
        raise ValidationError(
            f"sample {s.id!r}: mask size {s.mask.shape} does not match image {s.image_t1.shape[:2]}"
        )
    if not np.isin(s.mask, (0, 1)).all():
        raise ValidationError(f"sample {s.id!r}: mask is not binary")
    h, w = s.mask.shape
    if h % STRIDE or w % STRIDE:
        raise ValidationError(f"sample {s.id!r}: size {h}x{w} not divisible by {STRIDE}")


@dataclass
class DatasetSplit:
    name: str
    samples: List[BitemporalSample] = field(default_factory=list)

    def __post_init__(self):
        if self.name not in SPLITS:
            raise ValidationError(f"unknown split {self.name!r}, expected one of {SPLITS}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"split {self.name!r} has duplicate sample ids")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def sorted(self) -> "DatasetSplit":
        return DatasetSplit(self.name, sorted(self.samples, key=lambda s: s.id))

    def shuffled(self, seed: int) -> "DatasetSplit":
        order = np.random.default_rng(seed).permutation(len(self.samples))
        return DatasetSplit(self.name, [self.samples[i] for i in order])


@dataclass
class SynthConfig:
    n_samples: int = 16
    height: int = 64
    width: int = 64
    n_shapes_range: Tuple[int, int] = (1, 4)
    shape_size_range: Tuple[int, int] = (8, 24)
    change_fraction_bounds: Tuple[float, float] = (0.05, 0.3)
    seed: int = 0
    # shape corners and sizes are snapped to this many pixels
    grid: int = 4

    def validate(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be positive")
        if self.height < 1 or self.width < 1 or self.height % STRIDE or self.width % STRIDE:
            raise ValidationError(f"height/width must be positive multiples of {STRIDE}")
        lo, hi = self.n_shapes_range
        if lo < 1 or hi < lo:
            raise ValidationError("n_shapes_range must satisfy 1 <= low <= high")
        smin, smax = self.shape_size_range
        if smin < 1 or smax < smin:
            raise ValidationError("shape_size_range must satisfy 1 <= low <= high")
        flo, fhi = self.change_fraction_bounds
        if not (0 < flo < fhi < 1):
            raise ValidationError("change_fraction_bounds must satisfy 0 < low < high < 1")
        if self.grid < 1:
            raise ValidationError("grid must be >= 1")


# image io -----------------------------------------------------------------

def _read_rgb(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def load_mask(path: str) -> np.ndarray:
    """Read an 8-bit mask and binarize it at 128."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr >= MASK_THRESHOLD).astype(np.uint8)


def save_mask(mask: np.ndarray, path: str) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise ValidationError("save_mask expects a 2-D binary array")
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path, format="PNG")


def save_image(image: np.ndarray, path: str) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# loading ------------------------------------------------------------------

def _read_prompts(root: str):
    path = os.path.join(root, "prompts.jsonl")
    if not os.path.exists(path):
        return {}
    prompts = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                prompts[str(rec["id"])] = str(rec["prompt"])
            except (ValueError, KeyError) as e:
                raise LoadError(f"{path}:{lineno}: bad prompt record ({e})") from e
    return prompts


def _sample_id(name: str) -> str:
    return os.path.splitext(name)[0]


def load_dataset(root: str, split: str, workers: int = 1,
                 default_prompt: Optional[str] = None) -> DatasetSplit:
    """Load one split from a bitemporal A/B/label/list tree.

    Samples come back in the order of ``list/<split>.txt`` regardless of
    ``workers``. Prompts are joined from ``prompts.jsonl`` by sample id (the
    file name without extension); ``default_prompt`` fills in the rest.
    """
    for sub in ("A", "B", "label", "list"):
        d = os.path.join(root, sub)
        if not os.path.isdir(d):
            raise LoadError(f"missing directory: {d}")
    list_path = os.path.join(root, "list", f"{split}.txt")
    if not os.path.isfile(list_path):
        raise LoadError(f"missing split list: {list_path}")
    with open(list_path, encoding="utf-8") as f:
        names = [ln.strip() for ln in f if ln.strip()]

    for name in names:
        for sub in ("A", "B", "label"):
            if not os.path.isfile(os.path.join(root, sub, name)):
                raise LoadError(f"missing file: {sub}/{name}")

    prompts = _read_prompts(root)

    def read_one(name):
        sid = _sample_id(name)
        return BitemporalSample(
            id=sid,
            image_t1=_read_rgb(os.path.join(root, "A", name)),
            image_t2=_read_rgb(os.path.join(root, "B", name)),
            mask=load_mask(os.path.join(root, "label", name)),
            prompt=prompts.get(sid, default_prompt),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(read_one, names))
    else:
        samples = [read_one(n) for n in names]
    return DatasetSplit(split, samples)


def write_dataset(root: str, splits: Sequence[DatasetSplit]) -> None:
    """Write splits to ``root`` in the layout read by :func:`load_dataset`."""
    for sub in ("A", "B", "label", "list"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    records = []
    for split in splits:
        names = []
        for s in split:
            name = f"{s.id}.png"
            save_image(s.image_t1, os.path.join(root, "A", name))
            save_image(s.image_t2, os.path.join(root, "B", name))
            save_mask(s.mask, os.path.join(root, "label", name))
            names.append(name)
            if s.prompt is not None:
                records.append({"id": s.id, "prompt": s.prompt})
        with open(os.path.join(root, "list", f"{split.name}.txt"), "w", encoding="utf-8") as f:
            f.write("".join(n + "\n" for n in names))
    if records:
        with open(os.path.join(root, "prompts.jsonl"), "w", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")


# synthetic scenes ---------------------------------------------------------

CHANGE_PROMPTS = {
    "appeared": "buildings appeared",
    "disappeared": "buildings disappeared",
    "mixed": "buildings appeared and disappeared",
}


def _texture(rng, h, w):
    # smooth low-contrast background: bilinear upsampled coarse noise + fine grain
    coarse = rng.uniform(0.25, 0.55, size=(h // 8 + 1, w // 8 + 1, 3))
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.floor(ys).astype(int).clip(max=coarse.shape[0] - 2)
    x0 = np.floor(xs).astype(int).clip(max=coarse.shape[1] - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    smooth = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    grain = rng.normal(0.0, 0.03, size=(h, w, 3))
    return np.clip(smooth + grain, 0.0, 0.6)


def _rect(rng, cfg):
    g = cfg.grid
    smin, smax = cfg.shape_size_range
    sizes = [s for s in range(smin, smax + 1) if s % g == 0] or [max(g, (smin // g) * g)]
    rh = int(rng.choice(sizes))
    rw = int(rng.choice(sizes))
    rh, rw = min(rh, cfg.height), min(rw, cfg.width)
    y = int(rng.integers(0, (cfg.height - rh) // g + 1)) * g
    x = int(rng.integers(0, (cfg.width - rw) // g + 1)) * g
    return y, x, rh, rw


def _building_color(rng):
    # always brighter than any background pixel (backgrounds are clipped at 0.6)
    return rng.uniform(0.8, 1.0, size=3)


def _to_uint8_grid(img):
    return np.rint(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0


def _one_scene(rng, cfg):
    h, w = cfg.height, cfg.width
    background = _texture(rng, h, w)
    kind = ("appeared", "disappeared", "mixed")[int(rng.integers(0, 3))]
    lo, hi = cfg.n_shapes_range
    n_changed = int(rng.integers(lo, hi + 1))

    t1 = background.copy()
    # a few persistent buildings so that "changed" is not just "bright"
    for _ in range(int(rng.integers(0, 3))):
        y, x, rh, rw = _rect(rng, cfg)
        t1[y:y + rh, x:x + rw] = _building_color(rng) * 0.9

    removed, added = [], []
    for k in range(n_changed):
        if kind == "appeared" or (kind == "mixed" and k % 2 == 0):
            added.append(_rect(rng, cfg))
        else:
            removed.append(_rect(rng, cfg))
    for y, x, rh, rw in removed:
        t1[y:y + rh, x:x + rw] = _building_color(rng)
    t2 = t1.copy()
    for y, x, rh, rw in removed:
        t2[y:y + rh, x:x + rw] = background[y:y + rh, x:x + rw]
    for y, x, rh, rw in added:
        t2[y:y + rh, x:x + rw] = _building_color(rng)

    t1 = _to_uint8_grid(t1)
    t2 = _to_uint8_grid(t2)
    mask = np.any(t1 != t2, axis=-1).astype(np.uint8)
    return t1, t2, mask, CHANGE_PROMPTS[kind]


def generate_synthetic(cfg: SynthConfig, split: str = "train") -> DatasetSplit:
    """Deterministic rectangle-change scenes; the mask is exactly the altered pixels.

    Pixel values are quantized to 8 bits so that a written and reloaded
    dataset is identical to the generated one.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    flo, fhi = cfg.change_fraction_bounds
    samples = []
    for i in range(cfg.n_samples):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            t1, t2, mask, prompt = _one_scene(rng, cfg)
            frac = mask.mean()
            if mask.any() and flo <= frac <= fhi:
                break
        else:
            raise GenerationError(
                f"sample {i}: could not reach change fraction in [{flo}, {fhi}] "
                f"within {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        samples.append(BitemporalSample(f"{split}_{i:05d}", t1, t2, mask, prompt))
    return DatasetSplit(split, samples)
