"""Training-sample construction for the reconstruction and composition tasks.

Images are ``uint8`` arrays of shape (H, W, 3); masks are ``bool`` (H, W).
Bounding boxes are ``(x0, y0, x1, y1)`` pixel boxes, displacements ``(dx, dy)``.
All randomness is drawn from the ``numpy.random.Generator`` passed in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .dataset import IdentityCluster, ImageRecord

RECON = "recon"
COMPOSE = "compose"
TASKS = (RECON, COMPOSE)

SAMPLES_FORMAT = "refgen-samples"


class SkipSample(Exception):
    """Raised when a sample cannot be built; ``reason`` is machine-readable."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def save_image(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    Image.fromarray(arr).save(path)


@dataclass
class PadSpec:
    fill_color: tuple[int, int, int]
    displacement: tuple[int, int]  # (dx, dy) of the image's top-left corner
    final_size: int


def pad_to_square(image: np.ndarray, spec: PadSpec):
    """Place ``image`` at ``spec.displacement`` inside a ``final_size`` square.

    Returns ``(padded, m_content)``; ``m_content`` is True on original pixels.
    """
    h, w = image.shape[:2]
    s = spec.final_size
    dx, dy = spec.displacement
    if max(h, w) > s:
        raise ValueError(f"image {h}x{w} does not fit in {s}x{s}")
    if not (0 <= dx <= s - w and 0 <= dy <= s - h):
        raise ValueError(f"displacement {spec.displacement} puts {h}x{w} image outside {s}x{s}")
    out = np.empty((s, s, 3), dtype=image.dtype)
    out[:] = np.asarray(spec.fill_color, dtype=image.dtype)
    out[dy:dy + h, dx:dx + w] = image
    mask = np.zeros((s, s), dtype=bool)
    mask[dy:dy + h, dx:dx + w] = True
    return out, mask


def random_fill(rng) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


def random_pad_spec(h: int, w: int, size: int, rng, fill_color=None) -> PadSpec:
    if fill_color is None:
        fill_color = random_fill(rng)
    dx = int(rng.integers(0, size - w + 1))
    dy = int(rng.integers(0, size - h + 1))
    return PadSpec(fill_color, (dx, dy), size)


def fit_size(h: int, w: int, size: int) -> tuple[int, int]:
    scale = size / max(h, w)
    return max(1, min(size, round(h * scale))), max(1, min(size, round(w * scale)))


def resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    if image.shape[:2] == (h, w):
        return image
    if image.dtype == bool:
        im = Image.fromarray(image.astype(np.uint8) * 255).resize((w, h), Image.NEAREST)
        return np.asarray(im) >= 128
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def scale_bbox(bbox, src_hw, dst_hw):
    (sh, sw), (th, tw) = src_hw, dst_hw
    x0, y0, x1, y1 = bbox
    nx0 = min(tw - 1, math.floor(x0 * tw / sw))
    ny0 = min(th - 1, math.floor(y0 * th / sh))
    nx1 = max(nx0 + 1, min(tw, math.ceil(x1 * tw / sw)))
    ny1 = max(ny0 + 1, min(th, math.ceil(y1 * th / sh)))
    return (nx0, ny0, nx1, ny1)


def prepare_reference(image: np.ndarray, size: int, fill=(127, 127, 127)) -> np.ndarray:
    """Deterministic fit-and-center padding for inference-time references."""
    h, w = fit_size(*image.shape[:2], size)
    image = resize(image, h, w)
    padded, _ = pad_to_square(image, PadSpec(fill, ((size - w) // 2, (size - h) // 2), size))
    return padded


def make_face_mask(size: int, face_bbox, displacement, m_tgt: np.ndarray | None = None) -> np.ndarray:
    """Binary mask of the face box shifted by the pad displacement.

    ``face_bbox`` is in the coordinates of the (resized) content placed in the
    square; an absent box gives an all-zero mask.
    """
    m = np.zeros((size, size), dtype=bool)
    if face_bbox is None:
        return m
    x0, y0, x1, y1 = face_bbox
    dx, dy = displacement
    m[max(0, y0 + dy):max(0, y1 + dy), max(0, x0 + dx):max(0, x1 + dx)] = True
    if m_tgt is not None:
        m &= m_tgt
    return m


@dataclass
class SynthesisConfig:
    resolution: int = 128
    augment: bool = True
    crop_frac: float = 0.1
    flip_p: float = 0.5
    jitter: float = 0.1
    p_background: float = 0.5


def augment(image, rng, cfg: SynthesisConfig, bbox=None, seg=None):
    """Random crop (up to ``crop_frac`` per axis), horizontal flip and per-channel
    gain jitter. ``bbox`` and ``seg`` follow the geometric part.
    """
    h, w = image.shape[:2]
    # draw every coin even when a step is skipped so rng consumption is fixed
    cl, cr, ct, cb = rng.uniform(0, cfg.crop_frac / 2, size=4)
    flip = rng.random() < cfg.flip_p
    gains = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=3)

    left, right = int(cl * w), w - int(cr * w)
    top, bottom = int(ct * h), h - int(cb * h)
    new_bbox = bbox
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        nb = (max(x0, left) - left, max(y0, top) - top, min(x1, right) - left, min(y1, bottom) - top)
        if nb[0] >= nb[2] or nb[1] >= nb[3]:
            left, right, top, bottom = 0, w, 0, h  # cropping would lose the face
        else:
            new_bbox = nb
    image = image[top:bottom, left:right]
    if seg is not None:
        seg = seg[top:bottom, left:right]
    if flip:
        image = image[:, ::-1]
        if seg is not None:
            seg = seg[:, ::-1]
        if new_bbox is not None:
            cw = image.shape[1]
            x0, y0, x1, y1 = new_bbox
            new_bbox = (cw - x1, y0, cw - x0, y1)
    image = np.clip(np.rint(image.astype(np.float32) * gains), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(image), new_bbox, None if seg is None else np.ascontiguousarray(seg)


@dataclass
class ConceptPart:
    kind: str  # figure | face | body
    image: np.ndarray
    source_id: str
    fill_color: tuple[int, int, int] = (0, 0, 0)
    displacement: tuple[int, int] = (0, 0)
    background_removed: bool | None = None  # None: no mask, coin not flipped
    infill: bool = False
    crop_box: tuple[int, int, int, int] | None = None
    face_bbox: tuple[int, int, int, int] | None = None
    source_size: tuple[int, int] | None = None  # (H, W) after augmentation


@dataclass
class TrainingSample:
    target: np.ndarray
    m_tgt: np.ndarray
    m_face: np.ndarray
    references: list[ConceptPart]
    prompt_tags: list[str]
    identity: tuple[str, str, int]
    task: str = RECON
    target_id: str = ""
    flags: list[str] = field(default_factory=list)

    @property
    def concept_texts(self) -> list[str]:
        return [p.kind for p in self.references]


class Synthesizer:
    """Builds samples from clustered records; images are loaded through ``loader``."""

    def __init__(self, records, cfg: SynthesisConfig | None = None,
                 loader: Callable | None = None, mask_loader: Callable | None = None):
        self.records: dict[str, ImageRecord] = {r.id: r for r in records}
        self.cfg = cfg or SynthesisConfig()
        self._load = loader or load_image
        self._load_mask = mask_loader or load_mask

    def _source(self, rec: ImageRecord):
        img = self._load(rec.image_path)
        seg = self._load_mask(rec.mask_path) if rec.mask_path else None
        return img, rec.face_bbox, seg

    def _augment(self, img, bbox, seg, rng):
        if self.cfg.augment:
            return augment(img, rng, self.cfg, bbox, seg)
        return img, bbox, seg

    def _finish_part(self, kind, img, seg, rec_id, rng, fill, **meta) -> ConceptPart:
        removed = None
        if seg is not None:
            removed = bool(rng.random() < self.cfg.p_background)
            if removed:
                img = img.copy()
                img[~seg] = fill
        h, w = fit_size(*img.shape[:2], self.cfg.resolution)
        img = resize(img, h, w)
        spec = random_pad_spec(h, w, self.cfg.resolution, rng, fill)
        square, _ = pad_to_square(img, spec)
        return ConceptPart(kind, square, rec_id, fill, spec.displacement, removed, **meta)

    def figure_part(self, rec: ImageRecord, rng) -> ConceptPart:
        img, bbox, seg = self._augment(*self._source(rec), rng)
        fill = random_fill(rng)
        return self._finish_part("figure", img, seg, rec.id, rng, fill,
                                 face_bbox=bbox, source_size=img.shape[:2])

    def face_part(self, rec: ImageRecord, rng) -> ConceptPart:
        img, bbox, seg = self._augment(*self._source(rec), rng)
        fill = random_fill(rng)
        x0, y0, x1, y1 = bbox
        crop = img[y0:y1, x0:x1]
        seg_crop = None if seg is None else seg[y0:y1, x0:x1]
        return self._finish_part("face", crop, seg_crop, rec.id, rng, fill, crop_box=bbox,
                                 face_bbox=bbox, source_size=img.shape[:2])

    def body_part(self, rec: ImageRecord, rng) -> ConceptPart:
        img, bbox, seg = self._augment(*self._source(rec), rng)
        fill = random_fill(rng)
        h, w = img.shape[:2]
        x0, y0, x1, y1 = bbox
        if 3 * y1 < h or y1 >= h:
            # lower border above one third (or nothing left below it): keep the
            # whole figure and paint the face box with the pad color
            body = img.copy()
            body[y0:y1, x0:x1] = fill
            body_seg = seg
            crop_box, infill = (0, 0, w, h), True
        else:
            body = img[y1:h]
            body_seg = None if seg is None else seg[y1:h]
            crop_box, infill = (0, y1, w, h), False
        return self._finish_part("body", body, body_seg, rec.id, rng, fill, infill=infill,
                                 crop_box=crop_box, face_bbox=bbox, source_size=(h, w))

    def _target(self, rec: ImageRecord, rng):
        img, bbox, _ = self._augment(*self._source(rec), rng)
        h0, w0 = img.shape[:2]
        h, w = fit_size(h0, w0, self.cfg.resolution)
        img = resize(img, h, w)
        spec = random_pad_spec(h, w, self.cfg.resolution, rng)
        target, m_tgt = pad_to_square(img, spec)
        face = scale_bbox(bbox, (h0, w0), (h, w)) if bbox is not None else None
        m_face = make_face_mask(self.cfg.resolution, face, spec.displacement, m_tgt)
        return target, m_tgt, m_face

    def _pool(self, cluster: IdentityCluster, target_id: str, need_bbox: bool = False):
        pool = [m for m in cluster.member_ids if m != target_id]
        if need_bbox:
            pool = [m for m in pool if self.records[m].face_bbox is not None]
        return pool

    def make_reconstruction_sample(self, cluster: IdentityCluster, target_id: str, rng) -> TrainingSample:
        """Target plus four whole-figure references of the same identity.

        References exclude the target; with fewer than four other members they
        are drawn with replacement (flag ``refs_with_replacement``), and a
        singleton cluster reuses the target itself (flag ``target_in_refs``).
        """
        flags = []
        pool = self._pool(cluster, target_id)
        if len(pool) >= 4:
            ref_ids = [pool[i] for i in rng.permutation(len(pool))[:4]]
        else:
            flags.append("refs_with_replacement")
            if not pool:
                flags.append("target_in_refs")
                pool = [target_id]
            ref_ids = [pool[i] for i in rng.integers(0, len(pool), size=4)]
        refs = [self.figure_part(self.records[r], rng) for r in ref_ids]
        target, m_tgt, m_face = self._target(self.records[target_id], rng)
        return TrainingSample(target, m_tgt, m_face, refs, list(self.records[target_id].tags),
                              cluster.key, RECON, target_id, flags)

    def make_composition_refs(self, cluster: IdentityCluster, target_id: str, rng,
                              flags: list | None = None) -> list[ConceptPart]:
        """Two face parts then two body parts drawn from members with a face box."""
        pool = self._pool(cluster, target_id, need_bbox=True)
        if not pool:
            if self.records[target_id].face_bbox is None:
                raise SkipSample("empty_face_pool", f"cluster {cluster.key} has no face boxes")
            pool = [target_id]
            if flags is not None:
                flags.append("target_in_refs")

        # each slot is an independent uniform draw, so both faces (or bodies)
        # may come from the same member
        face_ids = [pool[i] for i in rng.integers(0, len(pool), size=2)]
        body_ids = [pool[i] for i in rng.integers(0, len(pool), size=2)]
        faces = [self.face_part(self.records[r], rng) for r in face_ids]
        bodies = [self.body_part(self.records[r], rng) for r in body_ids]
        return faces + bodies

    def make_composition_sample(self, cluster: IdentityCluster, target_id: str, rng) -> TrainingSample:
        flags: list[str] = []
        refs = self.make_composition_refs(cluster, target_id, rng, flags)
        target, m_tgt, m_face = self._target(self.records[target_id], rng)
        return TrainingSample(target, m_tgt, m_face, refs, list(self.records[target_id].tags),
                              cluster.key, COMPOSE, target_id, flags)

    def make_sample(self, task: str, cluster, target_id, rng) -> TrainingSample:
        if task == RECON:
            return self.make_reconstruction_sample(cluster, target_id, rng)
        if task == COMPOSE:
            return self.make_composition_sample(cluster, target_id, rng)
        raise ValueError(f"unknown task {task!r}")


def iter_targets(clusters):
    """Every cluster member serves once as a target, in manifest order."""
    for cluster in clusters:
        for mid in cluster.member_ids:
            yield cluster, mid


# ---------------------------------------------------------------- sample io

def _tuple(v):
    return None if v is None else tuple(int(x) for x in v)


def write_samples(samples: list[TrainingSample], out_dir, skipped=()) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "index.jsonl"
    with index.open("w") as f:
        f.write(json.dumps({"format": SAMPLES_FORMAT, "version": 1, "count": len(samples),
                            "skipped": [list(s) for s in skipped]}, sort_keys=True) + "\n")
        for i, s in enumerate(samples):
            d = out_dir / f"{i:06d}"
            d.mkdir(exist_ok=True)
            save_image(s.target, d / "target.png")
            save_image(s.m_tgt, d / "m_tgt.png")
            save_image(s.m_face, d / "m_face.png")
            refs = []
            for k, p in enumerate(s.references):
                save_image(p.image, d / f"ref{k}.png")
                refs.append({
                    "path": f"{i:06d}/ref{k}.png", "kind": p.kind, "source_id": p.source_id,
                    "fill_color": list(p.fill_color), "displacement": list(p.displacement),
                    "background_removed": p.background_removed, "infill": p.infill,
                    "crop_box": p.crop_box and list(p.crop_box),
                    "face_bbox": p.face_bbox and list(p.face_bbox),
                    "source_size": p.source_size and list(p.source_size),
                })
            row = {"index": i, "task": s.task, "target_id": s.target_id,
                   "identity": list(s.identity), "prompt_tags": s.prompt_tags,
                   "target": f"{i:06d}/target.png", "m_tgt": f"{i:06d}/m_tgt.png",
                   "m_face": f"{i:06d}/m_face.png", "references": refs, "flags": s.flags}
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return index


def read_samples(index_path) -> list[TrainingSample]:
    index_path = Path(index_path)
    root = index_path.parent
    samples = []
    with index_path.open() as f:
        header = json.loads(f.readline())
        if header.get("format") != SAMPLES_FORMAT:
            raise ValueError(f"{index_path} is not a sample index")
        for line in f:
            row = json.loads(line)
            refs = [ConceptPart(r["kind"], load_image(root / r["path"]), r["source_id"],
                                tuple(r["fill_color"]), tuple(r["displacement"]),
                                r["background_removed"], r["infill"], _tuple(r["crop_box"]),
                                _tuple(r["face_bbox"]), _tuple(r["source_size"]))
                    for r in row["references"]]
            ident = row["identity"]
            samples.append(TrainingSample(
                load_image(root / row["target"]), load_mask(root / row["m_tgt"]),
                load_mask(root / row["m_face"]), refs, row["prompt_tags"],
                (ident[0], ident[1], int(ident[2])), row["task"], row["target_id"], row["flags"]))
    if len(samples) != header["count"]:
        raise ValueError(f"{index_path}: expected {header['count']} samples, found {len(samples)}")
    return samples
