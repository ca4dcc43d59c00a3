"""Manifest-driven sample loading, resizing, augmentation, synthetic corpora.

Manifest format: UTF-8 CSV, header ``subject_id,image,mask``, LF line
endings, paths relative to the manifest's directory. Images are 8-bit
grayscale or RGB rasters scaled to [0,1]; masks are 8-bit grayscale
thresholded at 127.5 into {0,1}.

Augmentation composes rotation, shear, scale, and height shift into one
affine map (in that order, about the image center), applies it by inverse
mapping, then random-crops and resizes back. All draws come from
(spec.seed, draw_index) so sample k of epoch e is reproducible in isolation.
Images resample bilinearly (configurable to nearest), masks always nearest
and re-binarized, so the same geometric map hits both.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor

MANIFEST_HEADER = ["subject_id", "image", "mask"]
MASK_THRESHOLD = 127.5


@dataclass(frozen=True)
class SampleRecord:
    subject_id: str
    image_path: str  # resolved absolute path
    mask_path: str


@dataclass
class Manifest:
    records: list[SampleRecord]
    root: str

    def __len__(self) -> int:
        return len(self.records)

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)


def load_manifest(path) -> Manifest:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}")
    records = []
    seen_pairs = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        subject, image_rel, mask_rel = (c.strip() for c in row)
        if not subject:
            raise ValueError(f"{path}:{lineno}: empty subject_id")
        if not image_rel:
            raise ValueError(f"{path}:{lineno}: empty image field")
        if not mask_rel:
            raise ValueError(f"{path}:{lineno}: empty mask field")
        image_abs = (root / image_rel).resolve()
        mask_abs = (root / mask_rel).resolve()
        if not image_abs.is_file():
            raise ValueError(f"{path}:{lineno}: image file not found: {image_rel}")
        if not mask_abs.is_file():
            raise ValueError(f"{path}:{lineno}: mask file not found: {mask_rel}")
        pair = (image_rel, mask_rel)
        if pair in seen_pairs:
            raise ValueError(f"{path}:{lineno}: duplicate image/mask pair: {image_rel}, {mask_rel}")
        seen_pairs.add(pair)
        records.append(SampleRecord(subject, str(image_abs), str(mask_abs)))
    return Manifest(records=records, root=str(root))


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([
                r.subject_id,
                Path(r.image_path).resolve().relative_to(root).as_posix(),
                Path(r.mask_path).resolve().relative_to(root).as_posix(),
            ])


def decode_image(path) -> np.ndarray:
    """(C,H,W) float32 in [0,1] from an 8-bit raster with 1 or 3 channels."""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.asarray(img)
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if mode == "L":
        arr = arr[None, :, :]
    elif mode == "RGB":
        arr = arr.transpose(2, 0, 1)
    else:
        raise ValueError(f"{path}: unsupported image mode {mode} (need 8-bit L or RGB)")
    return arr.astype(np.float32) / 255.0


def load_sample(record: SampleRecord) -> tuple[Tensor, Tensor]:
    """(image in [0,1] of shape (C,H,W), binary mask of shape (1,H,W))."""
    image = decode_image(record.image_path)
    try:
        with Image.open(record.mask_path) as m:
            mask8 = np.asarray(m.convert("L"))
    except Exception as exc:
        raise ValueError(f"cannot decode mask {record.mask_path}: {exc}") from exc
    if mask8.shape != image.shape[1:]:
        raise ValueError(
            f"{record.mask_path}: mask size {mask8.shape} != image size {image.shape[1:]}")
    mask = (mask8 > MASK_THRESHOLD).astype(np.float32)[None, :, :]
    return Tensor(image), Tensor(mask)


def _resize_bilinear(plane_stack: np.ndarray, target: int) -> np.ndarray:
    """(C,H,W) -> (C,target,target), half-pixel-centre sampling, edge clamp."""
    c, h, w = plane_stack.shape
    if (h, w) == (target, target):
        return plane_stack.copy()

    def axis_coords(src_len):
        src = (np.arange(target) + 0.5) * (src_len / target) - 0.5
        base = np.floor(src)
        frac = src - base
        i0 = np.clip(base.astype(np.int64), 0, src_len - 1)
        i1 = np.clip(base.astype(np.int64) + 1, 0, src_len - 1)
        return i0, i1, frac.astype(plane_stack.dtype)

    y0, y1, fy = axis_coords(h)
    x0, x1, fx = axis_coords(w)
    rows = plane_stack[:, y0, :] * (1 - fy)[None, :, None] + plane_stack[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return out


def _resize_nearest(plane_stack: np.ndarray, target: int) -> np.ndarray:
    """out[i,j] = in[i*H//target, j*W//target] (floor index map)."""
    c, h, w = plane_stack.shape
    if (h, w) == (target, target):
        return plane_stack.copy()
    yi = np.arange(target) * h // target
    xi = np.arange(target) * w // target
    return plane_stack[:, yi][:, :, xi]


def resize(image: Tensor, target: int, kind: str = "image") -> Tensor:
    """Resize (C,H,W) to (C,target,target); bilinear for images, nearest
    (floor index map) for masks so they stay binary."""
    if target < 1:
        raise ValueError("resize: target must be >= 1")
    if kind not in ("image", "mask"):
        raise ValueError("resize: kind must be 'image' or 'mask'")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"resize: expected (C,H,W), got {arr.shape}")
    if kind == "mask":
        out = _resize_nearest(arr, target)
    else:
        out = _resize_bilinear(arr, target)
    return Tensor(out.astype(arr.dtype, copy=False))


@dataclass
class AugmentationSpec:
    rotation_degrees: float = 30.0
    shear_range: float = 0.3
    scale_range: tuple[float, float] = (0.9, 1.1)
    crop_fraction: float = 0.9
    height_shift_fraction: float = 0.1
    image_interp: str = "bilinear"
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0, image_interp: str = "bilinear") -> "AugmentationSpec":
        return cls(rotation_degrees=0.0, shear_range=0.0, scale_range=(1.0, 1.0),
                   crop_fraction=1.0, height_shift_fraction=0.0,
                   image_interp=image_interp, seed=seed)

    def validate(self) -> list[str]:
        errs = []
        if self.rotation_degrees < 0:
            errs.append("augment.rotation_degrees must be >= 0")
        if self.shear_range < 0:
            errs.append("augment.shear_range must be >= 0")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            errs.append("augment.scale_range must satisfy 0 < lo <= hi")
        if not 0 < self.crop_fraction <= 1:
            errs.append("augment.crop_fraction must be in (0, 1]")
        if not 0 <= self.height_shift_fraction < 1:
            errs.append("augment.height_shift_fraction must be in [0, 1)")
        if self.image_interp not in ("bilinear", "nearest"):
            errs.append("augment.image_interp must be 'bilinear' or 'nearest'")
        if self.seed < 0:
            errs.append("augment.seed must be >= 0")
        return errs

    def to_dict(self) -> dict:
        return {
            "rotation_degrees": self.rotation_degrees,
            "shear_range": self.shear_range,
            "scale_range": list(self.scale_range),
            "crop_fraction": self.crop_fraction,
            "height_shift_fraction": self.height_shift_fraction,
            "image_interp": self.image_interp,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown augmentation config keys: {', '.join(unknown)}")
        kwargs = dict(d)
        if "scale_range" in kwargs:
            kwargs["scale_range"] = tuple(kwargs["scale_range"])
        return cls(**kwargs)


def draw_transform(spec: AugmentationSpec, draw_index: int, size: int) -> dict:
    """Deterministic parameter draw for one augmentation application."""
    if draw_index < 0:
        raise ValueError("draw_transform: draw_index must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, draw_index]))
    angle = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    shear = float(rng.uniform(-spec.shear_range, spec.shear_range))
    scale = float(rng.uniform(spec.scale_range[0], spec.scale_range[1]))
    shift = float(rng.uniform(-spec.height_shift_fraction, spec.height_shift_fraction)) * size
    crop_size = max(1, int(round(spec.crop_fraction * size)))
    max_off = size - crop_size
    crop_y = int(rng.integers(0, max_off + 1)) if max_off > 0 else 0
    crop_x = int(rng.integers(0, max_off + 1)) if max_off > 0 else 0
    return {"angle": angle, "shear": shear, "scale": scale, "shift": shift,
            "crop_size": crop_size, "crop_y": crop_y, "crop_x": crop_x}


def _affine_matrix(angle_deg: float, shear: float, scale: float, shift_y: float) -> np.ndarray:
    """Forward map dst = M @ src (about the origin) composed as
    rotate -> shear -> scale -> vertical shift; returns 3x3 homogeneous."""
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t), 0.0],
                    [math.sin(t), math.cos(t), 0.0],
                    [0.0, 0.0, 1.0]])
    shr = np.array([[1.0, shear, 0.0],
                    [0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0]])
    scl = np.array([[scale, 0.0, 0.0],
                    [0.0, scale, 0.0],
                    [0.0, 0.0, 1.0]])
    sft = np.array([[1.0, 0.0, 0.0],
                    [0.0, 1.0, shift_y],
                    [0.0, 0.0, 1.0]])
    return sft @ scl @ shr @ rot


def _sample_affine(planes: np.ndarray, inv: np.ndarray, center: float, interp: str) -> np.ndarray:
    """Inverse-map each output pixel through ``inv`` (about ``center``);
    out-of-image source coordinates produce 0."""
    c, h, w = planes.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xs - center
    dy = ys - center
    sx = inv[0, 0] * dx + inv[0, 1] * dy + inv[0, 2] + center
    sy = inv[1, 0] * dx + inv[1, 1] * dy + inv[1, 2] + center
    if interp == "nearest":
        xi = np.rint(sx).astype(np.int64)
        yi = np.rint(sy).astype(np.int64)
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xi = np.clip(xi, 0, w - 1)
        yi = np.clip(yi, 0, h - 1)
        out = planes[:, yi, xi]
        out[:, ~valid] = 0.0
        return out
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(planes.dtype)
    fy = (sy - y0).astype(planes.dtype)
    out = np.zeros_like(planes)
    for oy, ox, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                        (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
        valid = (ox >= 0) & (ox < w) & (oy >= 0) & (oy < h)
        oyc = np.clip(oy, 0, h - 1)
        oxc = np.clip(ox, 0, w - 1)
        contrib = planes[:, oyc, oxc] * wgt
        contrib[:, ~valid] = 0.0
        out += contrib
    return out


def augment(image: Tensor, mask: Tensor, spec: AugmentationSpec, draw_index: int) -> tuple[Tensor, Tensor]:
    """One deterministic random augmentation of an image/mask pair.

    Both tensors get the identical affine map and crop; the mask is resampled
    nearest-neighbour and re-binarized. Shapes are preserved.
    """
    errs = spec.validate()
    if errs:
        raise ValueError("invalid augmentation spec: " + "; ".join(errs))
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    msk = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if img.ndim != 3 or msk.ndim != 3:
        raise ValueError("augment: image and mask must be (C,H,W)")
    if img.shape[1:] != msk.shape[1:]:
        raise ValueError(f"augment: image {img.shape[1:]} and mask {msk.shape[1:]} sizes differ")
    h = img.shape[1]
    if img.shape[2] != h:
        raise ValueError("augment: expects square inputs")

    params = draw_transform(spec, draw_index, h)
    m = _affine_matrix(params["angle"], params["shear"], params["scale"], params["shift"])
    need_affine = not np.array_equal(m, np.eye(3))
    if need_affine:
        inv = np.linalg.inv(m)
        center = (h - 1) / 2.0
        img = _sample_affine(img, inv, center, spec.image_interp)
        msk = _sample_affine(msk, inv, center, "nearest")

    cs = params["crop_size"]
    if cs != h:
        cy, cx = params["crop_y"], params["crop_x"]
        img = img[:, cy:cy + cs, cx:cx + cs]
        msk = msk[:, cy:cy + cs, cx:cx + cs]
        img = _resize_bilinear(img, h) if spec.image_interp == "bilinear" else _resize_nearest(img, h)
        msk = _resize_nearest(msk, h)

    msk = (msk > 0.5).astype(np.float32)
    return Tensor(img.astype(np.float32, copy=False)), Tensor(msk)


def synth_corpus(n: int, size: int, seed: int, out_dir) -> Manifest:
    """Write n synthetic grayscale image/mask pairs plus manifest.csv.

    Each image is a textured background with one bright axis-aligned ellipse;
    the mask is the exact pixel-centre rasterization of that ellipse. Subject
    ids rotate over ceil(n/2) subjects. The drawn ellipse parameters land in
    params.json beside the manifest so tests can re-derive every mask
    analytically. Same (n, size, seed) always produces identical bytes.
    """
    if n < 1:
        raise ValueError("synth_corpus: n must be >= 1")
    if size < 8:
        raise ValueError("synth_corpus: size must be >= 8")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_subjects = (n + 1) // 2
    records = []
    ellipse_params = {}
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        margin = size / 4.0
        cy = float(rng.uniform(margin, size - margin))
        cx = float(rng.uniform(margin, size - margin))
        ry = float(rng.uniform(size / 8.0, size / 4.0))
        rx = float(rng.uniform(size / 8.0, size / 4.0))
        yy, xx = np.mgrid[0:size, 0:size]
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        mask = inside.astype(np.float32)

        background = rng.uniform(0.05, 0.35, size=(size, size))
        texture = rng.uniform(-0.05, 0.05, size=(size, size))
        tumor = rng.uniform(0.7, 0.95) + texture
        img = np.where(inside, tumor, background)
        img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        mask8 = (mask * 255.0).astype(np.uint8)

        image_name = f"img_{i:03d}.png"
        mask_name = f"mask_{i:03d}.png"
        Image.fromarray(img8, mode="L").save(out / image_name)
        Image.fromarray(mask8, mode="L").save(out / mask_name)
        subject = f"s{i % n_subjects + 1:03d}"
        records.append(SampleRecord(subject, str((out / image_name).resolve()),
                                    str((out / mask_name).resolve())))
        ellipse_params[image_name] = {"cy": cy, "cx": cx, "ry": ry, "rx": rx}

    with open(out / "params.json", "w", encoding="utf-8") as f:
        json.dump(ellipse_params, f, indent=2, sort_keys=True)
        f.write("\n")
    manifest = Manifest(records=records, root=str(out.resolve()))
    write_manifest(manifest, out / "manifest.csv")
    return manifest
