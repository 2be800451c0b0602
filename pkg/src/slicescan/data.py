"""Datasets: synthetic generation, folder ingestion, manifests and augmentation.

Images are stored as binary PPM (P6), masks as binary PGM (P5) holding class
indices. A manifest is a JSON file listing every image/mask pair with its
split and SHA-256 checksums; paths are relative to the manifest's directory.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ChecksumError, ConfigError, DataError

SPLITS = ("train", "search", "test")
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".ppm", ".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")
MASK_SUFFIXES = (".pgm", ".png", ".bmp", ".tif", ".tiff")


# ---------------------------------------------------------------- file I/O


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_image(path, rgb: np.ndarray) -> None:
    """``rgb`` is ``(H, W, 3)`` float in [0, 1] or uint8."""
    arr = rgb if rgb.dtype == np.uint8 else (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PPM")


def write_mask(path, mask: np.ndarray) -> None:
    if mask.min() < 0 or mask.max() > 255:
        raise DataError("mask values must fit in 8 bits")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PPM")


def read_image(path, resolution=None) -> np.ndarray:
    """``(3, H, W)`` float32 in [0, 1], bilinearly resized when ``resolution`` differs."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution[1], resolution[0]):
            im = im.resize((resolution[1], resolution[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path, resolution=None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16", "1"):
            raise DataError(f"{path}: mask must be a single-channel index image, got mode {im.mode}")
        if resolution is not None and im.size != (resolution[1], resolution[0]):
            im = im.resize((resolution[1], resolution[0]), Image.NEAREST)
        return np.asarray(im).astype(np.int64)


# ---------------------------------------------------------------- manifests


@dataclass
class FileEntry:
    image: str
    mask: str
    split: str
    image_sha256: str
    mask_sha256: str


@dataclass
class DatasetManifest:
    source: str
    num_classes: int
    resolution: tuple
    files: list
    seed: int = 0
    generator: dict | None = None
    root: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.files = [f if isinstance(f, FileEntry) else FileEntry(**f) for f in self.files]
        for f in self.files:
            if f.split not in SPLITS:
                raise DataError(f"unknown split {f.split!r} for {f.image}")

    def split_files(self, split: str) -> list:
        return [f for f in self.files if f.split == split]

    def counts(self) -> dict:
        return {s: len(self.split_files(s)) for s in SPLITS}

    def to_json(self) -> str:
        d = {
            "version": MANIFEST_VERSION,
            "source": self.source,
            "num_classes": self.num_classes,
            "resolution": list(self.resolution),
            "seed": self.seed,
            "generator": self.generator,
            "files": [asdict(f) for f in self.files],
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        self.root = path.parent
        return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if d.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {d.get('version')}")
    d.pop("version")
    return DatasetManifest(**d, root=path.parent)


# ---------------------------------------------------------------- in-memory data


@dataclass
class SegmentationData:
    images: np.ndarray  # (N, C, H, W) float32
    masks: np.ndarray  # (N, H, W) int64
    names: list
    num_classes: int

    def __len__(self):
        return len(self.names)

    def subset(self, idx) -> "SegmentationData":
        idx = list(idx)
        return SegmentationData(self.images[idx], self.masks[idx], [self.names[i] for i in idx], self.num_classes)


def load_dataset(manifest: DatasetManifest, split: str | None = "train", verify=True) -> SegmentationData:
    """Read the pairs of one split (all files when ``split`` is None)."""
    entries = manifest.files if split is None else manifest.split_files(split)
    images, masks, names = [], [], []
    for f in entries:
        ipath = manifest.root / f.image
        mpath = manifest.root / f.mask
        if verify:
            for p, want in ((ipath, f.image_sha256), (mpath, f.mask_sha256)):
                if not p.exists():
                    raise DataError(f"missing file {p}")
                if sha256_file(p) != want:
                    raise ChecksumError(f"checksum mismatch for {p}")
        images.append(read_image(ipath, manifest.resolution))
        m = read_mask(mpath, manifest.resolution)
        if m.max() >= manifest.num_classes:
            raise DataError(f"{mpath}: class index {m.max()} exceeds num_classes={manifest.num_classes}")
        masks.append(m)
        names.append(Path(f.image).stem)
    H, W = manifest.resolution
    if not images:
        return SegmentationData(np.zeros((0, 3, H, W), np.float32), np.zeros((0, H, W), np.int64), [], manifest.num_classes)
    return SegmentationData(np.stack(images), np.stack(masks), names, manifest.num_classes)


def split_search(manifest: DatasetManifest, fraction=0.8, seed=0) -> DatasetManifest:
    """Relabel the train split into ``fraction`` train / rest search by a seeded shuffle."""
    train_idx = [i for i, f in enumerate(manifest.files) if f.split == "train"]
    if not train_idx:
        raise DataError("manifest has no train files to split")
    order = np.random.default_rng(seed).permutation(len(train_idx))
    n_train = int(round(fraction * len(train_idx)))
    search = {train_idx[j] for j in order[n_train:]}
    files = [replace(f, split="search") if i in search else replace(f) for i, f in enumerate(manifest.files)]
    return replace(manifest, files=files)


# ---------------------------------------------------------------- augmentation


def augment_pair(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Random right-angle rotation (square maps only) plus horizontal/vertical flips, p=0.5 each.

    Always draws the same number of values so the stream position does not
    depend on the image shape.
    """
    k = int(rng.integers(4))
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    if image.shape[-1] == image.shape[-2] and k:
        image = np.rot90(image, k, axes=(-2, -1))
        mask = np.rot90(mask, k, axes=(-2, -1))
    if flip_h:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if flip_v:
        image, mask = image[..., ::-1, :], mask[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment_batch(images, masks, rng):
    out = [augment_pair(i, m, rng) for i, m in zip(images, masks)]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    count: int = 8
    resolution: tuple = (64, 64)
    num_classes: int = 2
    anisotropy: float = 0.0
    noise_level: float = 0.1
    seed: int = 0
    test_ratio: float = 0.0

    def validate(self):
        H, W = self.resolution
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if H < 32 or W < 32 or H % 32 or W % 32:
            raise ConfigError(f"resolution {H}x{W} must be a multiple of 32")
        if not -1 <= self.anisotropy <= 1:
            raise ConfigError("anisotropy must lie in [-1, 1]")
        if not 0 <= self.noise_level <= 1:
            raise ConfigError("noise_level must lie in [0, 1]")
        if not 2 <= self.num_classes <= 255:
            raise ConfigError("num_classes must lie in [2, 255]")
        if not 0 <= self.test_ratio < 1:
            raise ConfigError("test_ratio must lie in [0, 1)")


_PALETTE = np.array(
    [[0.85, 0.2, 0.15], [0.15, 0.75, 0.25], [0.2, 0.3, 0.9], [0.9, 0.8, 0.1],
     [0.7, 0.2, 0.8], [0.1, 0.8, 0.8], [0.95, 0.5, 0.1], [0.5, 0.5, 0.5]]
)
_SUPERSAMPLE = 4


def _coverage(H, W, kind, cy, cx, hh, hw):
    """Fraction of each pixel covered by the shape, from a 4x4 supersample grid."""
    s = _SUPERSAMPLE
    off = (np.arange(s) + 0.5) / s
    ys = (np.arange(H)[:, None] + off[None, :]).ravel()
    xs = (np.arange(W)[:, None] + off[None, :]).ravel()
    dy = (ys - cy)[:, None]
    dx = (xs - cx)[None, :]
    if kind == "ellipse":
        inside = (dy / hh) ** 2 + (dx / hw) ** 2 <= 1.0
    else:
        inside = (np.abs(dy) <= hh) & (np.abs(dx) <= hw)
    return inside.reshape(H, s, W, s).mean(axis=(1, 3))


def _shape_params(rng, H, W, anisotropy):
    scale = min(H, W) / 64.0
    a = abs(anisotropy)
    aspect = (1.0 + 3.0 * a) * rng.uniform(1.0, 1.2)
    short = rng.uniform(4.0, 8.0) * scale
    longest = 0.8 * (H if anisotropy > 0 else W if anisotropy < 0 else min(H, W))
    if short * aspect > longest:
        short = longest / aspect
    long_ = short * aspect
    if anisotropy > 0:
        vertical = True
    elif anisotropy < 0:
        vertical = False
    else:
        vertical = bool(rng.random() < 0.5)
    h, w = (long_, short) if vertical else (short, long_)
    kind = "ellipse" if rng.random() < 0.5 else "rect"
    return kind, h / 2.0, w / 2.0


def synth_sample(spec: SynthSpec, index: int):
    """Image ``(H, W, 3)`` in [0, 1], mask ``(H, W)`` and the list of placed shapes."""
    H, W = spec.resolution
    rng = np.random.default_rng([spec.seed, index])
    coarse = rng.uniform(0.0, 1.0, size=(8, 8))
    texture = ndimage.zoom(coarse, (H / 8, W / 8), order=1, mode="nearest")[:H, :W]
    base = np.array([0.25, 0.22, 0.2]) + 0.1 * rng.uniform(-1, 1, size=3)
    img = base[None, None, :] + 0.12 * (texture[..., None] - 0.5)
    mask = np.zeros((H, W), dtype=np.int64)

    boxes = []
    shapes = []
    n_shapes = int(rng.integers(1, 5))
    for _ in range(n_shapes):
        kind, hh, hw = _shape_params(rng, H, W, spec.anisotropy)
        cls = int(rng.integers(1, spec.num_classes))
        color = _PALETTE[(cls - 1) % len(_PALETTE)] + 0.05 * rng.uniform(-1, 1, size=3)
        for _attempt in range(50):
            cy = rng.uniform(hh + 1, H - hh - 1)
            cx = rng.uniform(hw + 1, W - hw - 1)
            box = (cy - hh - 2, cy + hh + 2, cx - hw - 2, cx + hw + 2)
            if all(box[1] < b[0] or box[0] > b[1] or box[3] < b[2] or box[2] > b[3] for b in boxes):
                break
        else:
            continue
        boxes.append(box)
        cov = _coverage(H, W, kind, cy, cx, hh, hw)
        img = img * (1 - cov[..., None]) + color[None, None, :] * cov[..., None]
        mask[cov >= 0.5] = cls
        shapes.append({"kind": kind, "class": cls, "cy": cy, "cx": cx, "half_h": hh, "half_w": hw})

    img = img + rng.normal(0.0, 0.2 * spec.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask, shapes


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write ``spec.count`` pairs plus ``manifest.json`` under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    n_test = int(round(spec.test_ratio * spec.count))
    test = set(np.random.default_rng([spec.seed, 2**31]).permutation(spec.count)[:n_test].tolist())
    files = []
    for i in range(spec.count):
        img, mask, _ = synth_sample(spec, i)
        ipath = Path("images") / f"img_{i:04d}.ppm"
        mpath = Path("masks") / f"img_{i:04d}.pgm"
        write_image(out / ipath, img)
        write_mask(out / mpath, mask)
        files.append(
            FileEntry(
                image=ipath.as_posix(),
                mask=mpath.as_posix(),
                split="test" if i in test else "train",
                image_sha256=sha256_file(out / ipath),
                mask_sha256=sha256_file(out / mpath),
            )
        )
    gen = asdict(spec)
    gen["resolution"] = list(spec.resolution)
    manifest = DatasetManifest(
        source="synthetic", num_classes=spec.num_classes, resolution=spec.resolution,
        files=files, seed=spec.seed, generator=gen,
    )
    manifest.save(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- folder ingestion


def _by_stem(directory, suffixes):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in suffixes}


def ingest_folder(images_dir, masks_dir, out_path, ratio=0.7, num_classes=2, seed=0,
                  resolution=(64, 64)) -> DatasetManifest:
    """Pair images and masks by file stem, validate them and write a train/test manifest."""
    images = _by_stem(images_dir, IMAGE_SUFFIXES)
    masks = _by_stem(masks_dir, MASK_SUFFIXES)
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise DataError(f"files without a partner: {orphans[:10]}")
    if not images:
        raise DataError(f"no images found in {images_dir}")
    out_path = Path(out_path)
    root = out_path.parent
    stems = sorted(images)
    files = []
    for stem in stems:
        ip, mp = images[stem], masks[stem]
        with Image.open(ip) as im:
            isize = im.size
        m = read_mask(mp)
        if (m.shape[1], m.shape[0]) != isize:
            raise DataError(f"{mp}: mask size {m.shape[1]}x{m.shape[0]} does not match image {isize[0]}x{isize[1]}")
        if m.min() < 0 or m.max() >= num_classes:
            raise DataError(f"{mp}: class index {m.max()} exceeds num_classes={num_classes}")
        files.append(
            FileEntry(
                image=Path(os.path.relpath(ip, root)).as_posix(),
                mask=Path(os.path.relpath(mp, root)).as_posix(),
                split="train",
                image_sha256=sha256_file(ip),
                mask_sha256=sha256_file(mp),
            )
        )
    order = np.random.default_rng(seed).permutation(len(files))
    n_train = int(round(ratio * len(files)))
    for j in order[n_train:]:
        files[j].split = "test"
    manifest = DatasetManifest(source="folder", num_classes=num_classes, resolution=tuple(resolution),
                               files=files, seed=seed)
    manifest.save(out_path)
    return manifest


def rebase_manifest(manifest: DatasetManifest, new_root) -> DatasetManifest:
    """Same files, paths rewritten relative to ``new_root`` so the manifest can be saved there."""
    new_root = Path(new_root)
    files = [
        replace(f, image=Path(os.path.relpath(manifest.root / f.image, new_root)).as_posix(),
                mask=Path(os.path.relpath(manifest.root / f.mask, new_root)).as_posix())
        for f in manifest.files
    ]
    return replace(manifest, files=files, root=new_root)
