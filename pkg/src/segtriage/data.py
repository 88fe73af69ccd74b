"""Image and mask I/O, dataset layouts, patch extraction, synthetic vessels.

Images travel as [1,H,W] float32 in [0,1]; masks as [H,W] integer {0,1}.
The canonical on-disk image format is binary PGM (P5, maxval 255).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .tensor import load_tns, save_tns


class DataError(ValueError):
    """Malformed files, unpaired datasets, or invalid pipeline arguments."""


@dataclass
class ImageRecord:
    """One named grayscale image with its vessel mask and optional FOV mask."""

    id: str
    image: np.ndarray
    mask: np.ndarray
    fov: np.ndarray | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"{self.id}: image must be [1,H,W]")
        if self.mask.shape != self.image.shape[1:]:
            raise DataError(f"{self.id}: mask shape {self.mask.shape} does not match image")
        if float(self.image.min()) < 0.0 or float(self.image.max()) > 1.0:
            raise DataError(f"{self.id}: image values must lie in [0,1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.id}: mask must be strictly binary")
        if self.fov is not None:
            if self.fov.shape != self.mask.shape:
                raise DataError(f"{self.id}: field-of-view shape mismatch")
            if not np.isin(self.fov, (0, 1)).all():
                raise DataError(f"{self.id}: field-of-view mask must be binary")


# ---------------------------------------------------------------------------
# PGM (P5)


def save_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write [H,W] or [1,H,W] values in [0,1] as an 8-bit binary PGM."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DataError("save_pgm expects [H,W] or [1,H,W]")
    if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
        raise DataError("pixel values must lie in [0,1]")
    h, w = arr.shape
    data = np.round(arr * 255.0).astype(np.uint8)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    os.replace(tmp, path)


def _read_pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, skipping comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DataError("truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i


def parse_pgm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode an 8-bit binary PGM into [1,H,W] float32 scaled to [0,1]."""
    tokens, pos = _read_pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise DataError(f"{source}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise DataError(f"{source}: malformed PGM header") from exc
    if maxval != 255:
        raise DataError(f"{source}: only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise DataError(f"{source}: bad dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos : pos + w * h]
    if len(pixels) < w * h:
        raise DataError(f"{source}: truncated pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return (arr.astype(np.float32) / 255.0)[None]


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit binary PGM into [1,H,W] float32 scaled to [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_pgm(data, source=os.fspath(path))


def _load_binary_mask(path: str | os.PathLike) -> np.ndarray:
    raw = load_pgm(path)[0]
    return (raw > 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# dataset layouts


def _leading_int(name: str) -> str | None:
    m = re.match(r"(\d+)", name)
    return m.group(1).lstrip("0") or "0" if m else None


def _load_flat(root: str) -> list[ImageRecord]:
    names = sorted(os.listdir(root))
    images = [n for n in names if n.endswith(".pgm")
              and not n.endswith("_mask.pgm") and not n.endswith("_fov.pgm")]
    records = []
    for name in images:
        rid = name[: -len(".pgm")]
        mask_path = os.path.join(root, f"{rid}_mask.pgm")
        if not os.path.exists(mask_path):
            raise DataError(f"{rid}: no mask file {rid}_mask.pgm")
        image = load_pgm(os.path.join(root, name))
        mask = _load_binary_mask(mask_path)
        fov_path = os.path.join(root, f"{rid}_fov.pgm")
        fov = _load_binary_mask(fov_path) if os.path.exists(fov_path) else None
        if mask.shape != image.shape[1:]:
            raise DataError(f"{rid}: mask size {mask.shape} does not match image {image.shape[1:]}")
        records.append(ImageRecord(rid, image, mask, fov))
    return sorted(records, key=lambda r: r.id)


def _index_dir(root: str, sub: str) -> dict[str, str]:
    path = os.path.join(root, sub)
    if not os.path.isdir(path):
        return {}
    out: dict[str, str] = {}
    for name in sorted(os.listdir(path)):
        if not name.endswith(".pgm"):
            continue
        key = _leading_int(name)
        if key is None:
            raise DataError(f"{sub}/{name}: file name carries no leading index")
        if key in out:
            raise DataError(f"{sub}: duplicate index {key}")
        out[key] = os.path.join(path, name)
    return out


def _load_drive(root: str) -> list[ImageRecord]:
    images = _index_dir(root, "images")
    manuals = _index_dir(root, "1st_manual")
    fovs = _index_dir(root, "mask")
    records = []
    for key in sorted(images, key=lambda k: (len(k), k)):
        if key not in manuals:
            raise DataError(f"{key}: image has no manual annotation")
        image = load_pgm(images[key])
        mask = _load_binary_mask(manuals[key])
        if mask.shape != image.shape[1:]:
            raise DataError(f"{key}: mask size {mask.shape} does not match image {image.shape[1:]}")
        fov = None
        if key in fovs:
            fov = _load_binary_mask(fovs[key])
            if fov.shape != mask.shape:
                raise DataError(f"{key}: field-of-view size mismatch")
        records.append(ImageRecord(key, image, mask, fov))
    missing = set(manuals) - set(images)
    if missing:
        raise DataError(f"manual annotations without images: {sorted(missing)}")
    return records


def load_dataset(root: str | os.PathLike, layout: str = "flat") -> list[ImageRecord]:
    """Load every image/mask pair under ``root``; deterministic id order."""
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise DataError(f"no such dataset directory: {root}")
    if layout == "flat":
        return _load_flat(root)
    if layout == "drive":
        return _load_drive(root)
    raise DataError(f"unknown layout {layout!r}")


def write_dataset(root: str | os.PathLike, records: list[ImageRecord]) -> None:
    """Write records in the flat layout plus a manifest JSON."""
    root = os.fspath(root)
    os.makedirs(root, exist_ok=True)
    manifest = []
    for rec in records:
        save_pgm(os.path.join(root, f"{rec.id}.pgm"), rec.image)
        save_pgm(os.path.join(root, f"{rec.id}_mask.pgm"), rec.mask.astype(np.float32))
        entry = {"id": rec.id, "image_path": f"{rec.id}.pgm", "mask_path": f"{rec.id}_mask.pgm"}
        if rec.fov is not None:
            save_pgm(os.path.join(root, f"{rec.id}_fov.pgm"), rec.fov.astype(np.float32))
            entry["fov_path"] = f"{rec.id}_fov.pgm"
        manifest.append(entry)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


# ---------------------------------------------------------------------------
# patch extraction


@dataclass
class PatchSet:
    """n image patches with aligned mask crops and their source offsets."""

    images: np.ndarray
    masks: np.ndarray
    meta: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4 or self.masks.ndim != 3:
            raise DataError("patch set must be images [n,1,s,s] and masks [n,s,s]")
        n = self.images.shape[0]
        if self.masks.shape[0] != n or len(self.meta) != n:
            raise DataError("patch set components disagree on n")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def save(self, directory: str | os.PathLike) -> None:
        directory = os.fspath(directory)
        os.makedirs(directory, exist_ok=True)
        save_tns(os.path.join(directory, "images.tns"), self.images)
        save_tns(os.path.join(directory, "masks.tns"), self.masks.astype(np.float32))
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump({"format": "patch-set-v1", "meta": self.meta}, fh, indent=2)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "PatchSet":
        directory = os.fspath(directory)
        images = load_tns(os.path.join(directory, "images.tns"))
        masks = load_tns(os.path.join(directory, "masks.tns")).astype(np.int64)
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        return cls(images, masks, manifest["meta"])


def extract_patches(records: list[ImageRecord], n: int, size: int = 48,
                    seed: int = 42) -> PatchSet:
    """n random square crops, with replacement across records.

    Record choice and offsets are uniform; ground truth is cropped at the
    same window. Deterministic given the seed.
    """
    if size % 4 != 0:
        raise DataError(f"patch size must be divisible by 4, got {size}")
    if n < 0:
        raise DataError("patch count must be >= 0")
    if n > 0 and not records:
        raise DataError("no records to sample from")
    for rec in records:
        h, w = rec.mask.shape
        if size > h or size > w:
            raise DataError(f"{rec.id}: patch size {size} exceeds image {h}x{w}")
    rng = RngStream(seed).derive("patches")
    images = np.zeros((n, 1, size, size), dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=np.int64)
    meta = []
    for i in range(n):
        ridx = int(rng.integers(0, len(records), size=1)[0])
        rec = records[ridx]
        h, w = rec.mask.shape
        top = int(rng.integers(0, h - size + 1, size=1)[0])
        left = int(rng.integers(0, w - size + 1, size=1)[0])
        images[i] = rec.image[:, top : top + size, left : left + size]
        masks[i] = rec.mask[top : top + size, left : left + size]
        meta.append({"record": rec.id, "top": top, "left": left})
    return PatchSet(images, masks, meta)


# ---------------------------------------------------------------------------
# synthetic vessels


@dataclass(frozen=True)
class SyntheticConfig:
    size: int = 96
    count: int = 20
    curves: tuple[int, int] = (3, 6)
    width: tuple[float, float] = (1.6, 4.0)
    contrast: float = 1.0
    noise_std: float = 0.03
    seed: int = 42

    def __post_init__(self):
        if self.size < 8:
            raise DataError("image size must be >= 8")
        if self.count < 0:
            raise DataError("image count must be >= 0")
        if not 0 <= self.curves[0] <= self.curves[1]:
            raise DataError("curve count range must be ordered and non-negative")
        if not 0 < self.width[0] <= self.width[1]:
            raise DataError("width range must be positive and ordered")
        if self.contrast <= 0:
            raise DataError("contrast must be positive")
        if self.noise_std < 0:
            raise DataError("noise std must be >= 0")


def _stamp_curve(depth: np.ndarray, rng: RngStream, size: int,
                 width_lo: float, width_hi: float) -> None:
    """Rasterize one random smooth curve with tapering width into ``depth``."""
    yy, xx = np.mgrid[0:size, 0:size]
    start = rng.uniform(size=2) * (size - 1)
    angle = float(rng.uniform(size=1)[0]) * 2.0 * np.pi
    length = int(size * (0.6 + 0.8 * float(rng.uniform(size=1)[0])))
    turns = rng.normal(size=length, std=0.18)
    w0 = width_lo + (width_hi - width_lo) * float(rng.uniform(size=1)[0])
    w1 = width_lo
    # depth in [0.3, 0.6]; the taper never drops below half of it, so every
    # support pixel is rendered strictly darker than the background
    strength = 0.3 + 0.3 * float(rng.uniform(size=1)[0])
    y, x = float(start[0]), float(start[1])
    for step in range(length):
        angle += float(turns[step])
        y = min(max(y + np.sin(angle), 0.0), size - 1.0)
        x = min(max(x + np.cos(angle), 0.0), size - 1.0)
        frac = step / max(length - 1, 1)
        radius = (w0 + (w1 - w0) * frac) / 2.0
        local = strength * (1.0 - 0.5 * frac)
        dist2 = (yy - y) ** 2 + (xx - x) ** 2
        inside = dist2 <= radius * radius
        np.maximum(depth, np.where(inside, local, 0.0), out=depth)


def synth_vessels(config: SyntheticConfig) -> list[ImageRecord]:
    """Dark smooth curves on a bright background; masks are the exact support.

    With zero noise every mask pixel is strictly darker than the constant
    background level. Foreground fraction lands at a few percent per image
    under the default configuration.
    """
    records = []
    for i in range(config.count):
        rng = RngStream(config.seed).derive("synth", i)
        size = config.size
        background = 0.75 + 0.17 * float(rng.derive("bg").uniform(size=1)[0])
        depth = np.zeros((size, size), dtype=np.float64)
        n_curves = int(rng.derive("count").integers(config.curves[0], config.curves[1] + 1, size=1)[0])
        for c in range(n_curves):
            _stamp_curve(depth, rng.derive("curve", c), size, config.width[0], config.width[1])
        mask = (depth > 0.0).astype(np.int64)
        image = background - config.contrast * depth
        if config.noise_std > 0:
            image = image + rng.derive("noise").normal(size=(size, size), std=config.noise_std)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        records.append(ImageRecord(f"synth-{i:04d}", image[None], mask))
    return records
