"""Dataset ingestion and a synthetic occluded-pedestrian generator."""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError

log = logging.getLogger(__name__)

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)
IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp"}
MASK_SUFFIX = ".mask.png"

_STANDARD_NAME = re.compile(r"^(-?\d+)_c(\d+)")
_PARTIAL_NAME = re.compile(r"^(\d+)[_.]")

SPLIT_DIRS = {
    "standard": {
        "train": ("bounding_box_train", "train"),
        "query": ("query",),
        "gallery": ("bounding_box_test", "gallery"),
    },
    "partial": {
        "train": ("bounding_box_train", "train"),
        "query": ("partial_body_images", "occluded_body_images", "query"),
        "gallery": ("whole_body_images", "gallery"),
    },
}


@dataclass
class ReidSample:
    pid: int
    camid: int
    image: Optional[np.ndarray] = None  # H x W x 3 uint8
    path: Optional[str] = None
    mask: Optional[np.ndarray] = None  # H x W, 1 = occluded
    occluder: Optional[str] = None

    def __post_init__(self):
        if self.pid < 0:
            raise ConfigError(f"identity must be non-negative, got {self.pid}")
        if self.mask is not None and self.image is not None and self.mask.shape != self.image.shape[:2]:
            raise ConfigError("mask shape does not match image")

    def load_image(self):
        if self.image is not None:
            return self.image
        from PIL import Image

        with Image.open(self.path) as im:
            return np.asarray(im.convert("RGB"))


@dataclass
class ReidDataset:
    train: List[ReidSample] = field(default_factory=list)
    query: List[ReidSample] = field(default_factory=list)
    gallery: List[ReidSample] = field(default_factory=list)
    skipped: int = 0


def parse_name(name: str, protocol: str = "standard") -> Optional[Tuple[int, int]]:
    """``0042_c3_000001.jpg -> (42, 3)``; Market-style ``c1s1`` camera tokens also parse.

    Returns None for names that do not follow the grammar. Under the partial
    protocol a bare ``<pid>_...`` name is accepted with camera -1.
    """
    m = _STANDARD_NAME.match(name)
    if m:
        return int(m.group(1)), int(m.group(2))
    if protocol == "partial":
        m = _PARTIAL_NAME.match(name)
        if m:
            return int(m.group(1)), -1
    return None


def _load_split(directory: Path, protocol: str, camera_default: int, drop_distractors: bool):
    samples, skipped = [], 0
    for p in sorted(directory.iterdir()):
        if p.name.endswith(MASK_SUFFIX) or p.suffix.lower() not in IMAGE_EXTS:
            continue
        parsed = parse_name(p.name, protocol)
        if parsed is None:
            log.warning("skipping %s: filename does not match <pid>_c<cam>_*", p)
            skipped += 1
            continue
        pid, cam = parsed
        if pid < 0 or (pid == 0 and drop_distractors):
            continue
        mask = None
        mask_path = p.with_name(p.name[: -len(p.suffix)] + MASK_SUFFIX)
        if mask_path.exists():
            from PIL import Image

            with Image.open(mask_path) as im:
                mask = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
        samples.append(ReidSample(pid=pid, camid=cam if cam >= 0 else camera_default, path=str(p), mask=mask))
    return samples, skipped


def load_reid_dir(path, protocol: str = "standard", required: Sequence[str] = ("train", "query", "gallery"),
                  drop_distractors: bool = False) -> ReidDataset:
    """Load ``{train, query, gallery}`` from a standard ReID directory layout.

    Identity and camera come from ``<pid>_c<cam>_*`` filenames. Junk images
    (identity -1) are always dropped; distractors (identity 0) only when
    ``drop_distractors`` is set. A split listed in
    ``required`` that is missing or empty raises :class:`ConfigError`.
    """
    if protocol not in SPLIT_DIRS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    ds = ReidDataset()
    for cam_default, split in enumerate(("train", "query", "gallery")):
        directory = next((root / d for d in SPLIT_DIRS[protocol][split] if (root / d).is_dir()), None)
        samples, skipped = ([], 0)
        if directory is not None:
            samples, skipped = _load_split(directory, protocol, cam_default, drop_distractors)
        ds.skipped += skipped
        setattr(ds, split, samples)
        if split in required and not samples:
            raise ConfigError(f"required split {split!r} is missing or empty under {root}")
    if ds.skipped:
        log.warning("skipped %d unparseable files under %s", ds.skipped, root)
    return ds


def to_tensor(samples: Sequence[ReidSample], input_size: Tuple[int, int]) -> torch.Tensor:
    """Stack samples into a normalized ``(N, 3, H, W)`` float tensor, resizing when needed."""
    from PIL import Image

    H, W = input_size
    out = np.empty((len(samples), 3, H, W), dtype=np.float32)
    for i, s in enumerate(samples):
        img = s.load_image()
        if img.shape[:2] != (H, W):
            img = np.asarray(Image.fromarray(img).resize((W, H), Image.BILINEAR))
        out[i] = img.transpose(2, 0, 1) / 255.0
    mean = np.array(IMAGE_MEAN, dtype=np.float32)[None, :, None, None]
    std = np.array(IMAGE_STD, dtype=np.float32)[None, :, None, None]
    return torch.from_numpy((out - mean) / std)


def denormalize(images: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor`: ``(N, 3, H, W)`` -> uint8 ``(N, H, W, 3)``."""
    mean = torch.tensor(IMAGE_MEAN)[None, :, None, None]
    std = torch.tensor(IMAGE_STD)[None, :, None, None]
    x = (images * std + mean).clamp(0, 1) * 255.0
    return x.round().byte().permute(0, 2, 3, 1).numpy()


def part_occlusion_fraction(mask: np.ndarray, K: int) -> np.ndarray:
    """Fraction of occluded pixels inside each of the K horizontal image bands.

    Feature-map stripes cover exactly these bands whenever the feature height
    is divisible by K, so this is also the per-part occlusion fraction.
    """
    H, W = mask.shape
    if H % K:
        raise ConfigError(f"mask height {H} is not divisible by K={K}")
    return mask.reshape(K, H // K, W).mean(axis=(1, 2))


# -------------------------------------------------------------- synthetic

PALETTE = np.array([
    [220, 40, 40], [40, 160, 60], [40, 70, 200], [230, 200, 40],
    [150, 60, 170], [40, 190, 200], [240, 130, 30], [235, 235, 235],
    [30, 30, 30], [140, 90, 50],
], dtype=np.float32)
N_TEXTURES = 4
N_BANDS = 8


@dataclass
class SynthConfig:
    num_identities: int = 50
    images_per_identity: int = 20
    num_test_identities: int = 50
    test_images_per_identity: int = 10
    queries_per_identity: int = 2
    image_size: Tuple[int, int] = (64, 32)
    occlusion_prob: float = 0.5
    occluder_kinds: Tuple[str, ...] = ("object",)
    num_cameras: int = 4
    noise: float = 10.0
    color_jitter: float = 0.0
    max_shift: Tuple[int, int] = (2, 3)
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.max_shift = tuple(int(s) for s in self.max_shift)
        self.occluder_kinds = tuple(self.occluder_kinds)
        bad = set(self.occluder_kinds) - {"object", "pedestrian"}
        if bad:
            raise ConfigError(f"unknown occluder kinds {sorted(bad)}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must be in [0, 1]")
        if self.image_size[0] % N_BANDS:
            raise ConfigError(f"synthetic image height must be a multiple of {N_BANDS}")


@dataclass
class Appearance:
    """Band layout of one synthetic identity: per band a (color, texture, accent color) triple."""
    colors: np.ndarray
    textures: np.ndarray
    accents: np.ndarray


def random_appearance(rng: np.random.Generator) -> Appearance:
    n = len(PALETTE)
    colors = rng.integers(0, n, N_BANDS)
    accents = (colors + rng.integers(1, n, N_BANDS)) % n
    return Appearance(colors=colors, textures=rng.integers(0, N_TEXTURES, N_BANDS), accents=accents)


def _band_columns(band: int, W: int) -> Tuple[int, int]:
    # head narrower than torso and legs
    half = 0.16 if band == 0 else 0.32
    return int(round(W * (0.5 - half))), int(round(W * (0.5 + half)))


def render_figure(app: Appearance, H: int, W: int, band_offsets: Optional[np.ndarray] = None):
    """Draw an identity's figure on an empty canvas; returns ``(rgb float, body mask)``.

    ``band_offsets`` (``N_BANDS x 3``) shifts each band's colors, simulating
    lighting and clothing variation between views.
    """
    rgb = np.zeros((H, W, 3), dtype=np.float32)
    body = np.zeros((H, W), dtype=bool)
    bh = H // N_BANDS
    yy, xx = np.mgrid[0:bh, 0:W]
    for b in range(N_BANDS):
        x0, x1 = _band_columns(b, W)
        base, accent = PALETTE[app.colors[b]], PALETTE[app.accents[b]]
        if band_offsets is not None:
            base, accent = base + band_offsets[b], accent + band_offsets[b]
        t = app.textures[b]
        if t == 0:
            pat = np.zeros((bh, W), dtype=bool)
        elif t == 1:
            pat = (xx // 2) % 2 == 0
        elif t == 2:
            pat = (yy // 2) % 2 == 0
        else:
            pat = ((xx // 2) + (yy // 2)) % 2 == 0
        band = np.where(pat[..., None], accent, base)
        rows = slice(b * bh, (b + 1) * bh)
        rgb[rows, x0:x1] = band[:, x0:x1]
        body[rows, x0:x1] = True
    return rgb, body


def _paste(canvas, covered, rgb, body, dy, dx):
    """Paste ``rgb`` where ``body`` is set, shifted by (dy, dx); returns the pasted-pixel mask."""
    H, W = covered.shape
    shifted = np.zeros((H, W), dtype=bool)
    ys, xs = np.nonzero(body)
    ty, tx = ys + dy, xs + dx
    keep = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
    ty, tx, ys, xs = ty[keep], tx[keep], ys[keep], xs[keep]
    canvas[ty, tx] = rgb[ys, xs]
    shifted[ty, tx] = True
    covered |= shifted
    return shifted


def occlude_object(canvas: np.ndarray, box: Tuple[int, int, int, int], color) -> np.ndarray:
    """Fill ``box = (top, left, bottom, right)`` with a solid color; returns the mask."""
    H, W = canvas.shape[:2]
    top, left, bottom, right = box
    mask = np.zeros((H, W), dtype=np.uint8)
    canvas[top:bottom, left:right] = color
    mask[top:bottom, left:right] = 1
    return mask


def occlude_pedestrian(canvas: np.ndarray, other: Appearance, dy: int, dx: int,
                       band_offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw another identity in front of the target, shifted by (dy, dx); returns the mask."""
    H, W = canvas.shape[:2]
    rgb, body = render_figure(other, H, W, band_offsets)
    covered = np.zeros((H, W), dtype=bool)
    return _paste(canvas, covered, rgb, body, dy, dx).astype(np.uint8)


class SyntheticRenderer:
    """Renders camera-specific views of synthetic identities with optional occluders."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.cam_gain = 1.0 + rng.uniform(-0.15, 0.15, (cfg.num_cameras + 1, 3))
        self.cam_bg = rng.uniform(60, 180, (cfg.num_cameras + 1, 3))

    def jitter(self):
        if not self.cfg.color_jitter:
            return None
        return self.rng.normal(0, self.cfg.color_jitter, (N_BANDS, 3))

    def background(self, cam):
        H, W = self.cfg.image_size
        rng = self.rng
        coarse = rng.uniform(-40, 40, (H // 8 + 1, W // 8 + 1, 3))
        bg = np.kron(coarse, np.ones((8, 8, 1)))[:H, :W]
        return self.cam_bg[cam] + bg

    def render(self, app: Appearance, cam: int, occluder: Optional[str], others: Sequence[Appearance]):
        cfg, rng = self.cfg, self.rng
        H, W = cfg.image_size
        canvas = self.background(cam).astype(np.float32)
        rgb, body = render_figure(app, H, W, self.jitter())
        sy, sx = cfg.max_shift
        dy, dx = int(rng.integers(-sy, sy + 1)), int(rng.integers(-sx, sx + 1))
        _paste(canvas, np.zeros((H, W), dtype=bool), rgb, body, dy, dx)
        mask = np.zeros((H, W), dtype=np.uint8)
        if occluder == "object":
            where = rng.choice(["bottom", "bottom", "top"])
            frac = rng.uniform(0.3, 0.6) if where == "bottom" else rng.uniform(0.25, 0.45)
            h = int(round(frac * H))
            box = (H - h, 0, H, W) if where == "bottom" else (0, 0, h, W)
            color = rng.uniform(0, 255, 3)
            mask = occlude_object(canvas, box, color)
        elif occluder == "pedestrian":
            other = others[int(rng.integers(len(others)))]
            if rng.random() < 0.5:
                ody, odx = int(round(rng.uniform(0.35, 0.6) * H)), int(rng.integers(-3, 4))
            else:
                ody = int(rng.integers(-2, 3))
                odx = int(round(rng.uniform(0.35, 0.55) * W)) * (1 if rng.random() < 0.5 else -1)
            mask = occlude_pedestrian(canvas, other, ody, odx, self.jitter())
        canvas = canvas * rng.uniform(0.8, 1.2) * self.cam_gain[cam]
        canvas = canvas + rng.normal(0, cfg.noise, canvas.shape)
        return np.clip(canvas, 0, 255).round().astype(np.uint8), mask


def synth_generate(cfg: SynthConfig) -> ReidDataset:
    """Generate train/query/gallery splits with ground-truth occlusion masks.

    Training and test identities are disjoint. Test identities get
    ``queries_per_identity`` queries followed by gallery images; cameras are
    drawn uniformly so most queries have cross-camera matches.
    """
    rng = np.random.default_rng(cfg.seed)
    n_total = cfg.num_identities + cfg.num_test_identities
    apps = [random_appearance(rng) for _ in range(n_total)]
    renderer = SyntheticRenderer(cfg, rng)
    ds = ReidDataset()

    def make(pid, count):
        out = []
        others = apps[:pid] + apps[pid + 1:]
        for _ in range(count):
            cam = int(rng.integers(1, cfg.num_cameras + 1))
            occluder = None
            if cfg.occluder_kinds and rng.random() < cfg.occlusion_prob:
                occluder = str(rng.choice(list(cfg.occluder_kinds)))
            img, mask = renderer.render(apps[pid], cam, occluder, others)
            out.append(ReidSample(pid=pid, camid=cam, image=img, mask=mask, occluder=occluder))
        return out

    for pid in range(cfg.num_identities):
        ds.train.extend(make(pid, cfg.images_per_identity))
    for pid in range(cfg.num_identities, n_total):
        samples = make(pid, cfg.test_images_per_identity)
        ds.query.extend(samples[:cfg.queries_per_identity])
        ds.gallery.extend(samples[cfg.queries_per_identity:])
    return ds


def save_dataset(ds: ReidDataset, root) -> Path:
    """Write a dataset in the standard directory layout, masks as sibling ``.mask.png`` files."""
    from PIL import Image

    root = Path(root)
    dirs = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
    counter = 0
    for split, dirname in dirs.items():
        d = root / dirname
        d.mkdir(parents=True, exist_ok=True)
        for s in getattr(ds, split):
            counter += 1
            stem = f"{s.pid:04d}_c{s.camid}_{counter:06d}"
            Image.fromarray(s.load_image()).save(d / f"{stem}.png")
            if s.mask is not None:
                Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(d / f"{stem}{MASK_SUFFIX}")
    return root
