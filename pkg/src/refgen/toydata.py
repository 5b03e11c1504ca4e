"""Procedural toy corpus: flat-shaded figures with face boxes and masks.

Each (character, artist) pair gets one or more outfits; images are drawn with
a head box, a two-color outfit and an artist-specific background, so a color
based answer provider recovers the outfit identity.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import ImageRecord, write_records

HAIR = {"black_hair": (20, 20, 20), "blonde_hair": (235, 220, 40), "brown_hair": (120, 70, 30),
        "pink_hair": (240, 130, 180), "silver_hair": (200, 200, 200)}
OUTFIT_COLORS = ["red", "blue", "green", "purple", "orange", "black", "pink", "yellow"]
COLOR_RGB = {"red": (200, 30, 30), "blue": (40, 70, 200), "green": (40, 160, 60),
             "purple": (130, 50, 170), "orange": (240, 140, 20), "black": (20, 20, 20),
             "pink": (240, 130, 180), "yellow": (235, 220, 40)}
TOP_TAGS = ["shirt", "jacket", "blouse", "sweater"]
BOTTOM_TAGS = ["skirt", "shorts", "pants", "long_skirt"]
SKIN = (250, 215, 185)
BACKGROUNDS = [(240, 240, 240), (128, 128, 128), (180, 220, 240), (250, 240, 200)]


def draw_figure(rng, height, width, hair, top, bottom, background, head_bottom_frac):
    """Render one figure; returns (image, face_bbox, mask)."""
    img = np.empty((height, width, 3), dtype=np.float32)
    img[:] = background
    mask = np.zeros((height, width), dtype=bool)

    cx = width // 2 + int(rng.integers(-width // 10, width // 10 + 1))
    head_h = max(6, int(0.18 * height))
    head_w = max(6, min(width - 2, int(0.4 * width)))
    y1 = int(round(head_bottom_frac * height))
    y1 = min(max(y1, head_h + 1), height - 2)
    y0 = y1 - head_h
    x0 = max(0, cx - head_w // 2)
    x1 = min(width, x0 + head_w)

    img[y0:y1, x0:x1] = SKIN
    hair_rows = max(2, head_h // 4)
    img[y0:y0 + hair_rows, x0:x1] = hair
    mask[y0:y1, x0:x1] = True

    body_w = min(width - 2, int(0.6 * width))
    bx0 = max(0, cx - body_w // 2)
    bx1 = min(width, bx0 + body_w)
    rest = height - y1
    top_end = y1 + int(0.6 * rest)
    img[y1:top_end, bx0:bx1] = top
    leg_w = max(2, int(0.7 * body_w))
    lx0 = max(0, cx - leg_w // 2)
    img[top_end:height, lx0:lx0 + leg_w] = bottom
    mask[y1:top_end, bx0:bx1] = True
    mask[top_end:height, lx0:lx0 + leg_w] = True

    img += rng.normal(0, 4.0, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, (x0, y0, x1, y1), mask


def make_corpus(out_dir, seed: int = 0, n_characters: int = 4, artists_per_character: int = 2,
                outfits_per_identity: int = 2, images_per_outfit: int = 5,
                noise_fraction: float = 0.1) -> list[ImageRecord]:
    """Write images, masks and ``raw.jsonl`` under ``out_dir``.

    ``noise_fraction`` of the records get a defect the filter should catch
    (banned tag, second character, or no clothes tag). VQA answers are left
    empty for an answer provider to fill.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    idx = 0
    hair_names = list(HAIR)
    for c in range(n_characters):
        character = f"character_{c:02d}"
        hair = hair_names[c % len(hair_names)]
        for a in range(artists_per_character):
            artist = f"artist_{c:02d}_{a}"
            background = BACKGROUNDS[(c + a) % len(BACKGROUNDS)]
            for _ in range(outfits_per_identity):
                top_c, bottom_c = rng.choice(OUTFIT_COLORS, size=2, replace=False)
                top_tag = TOP_TAGS[int(rng.integers(len(TOP_TAGS)))]
                bottom_tag = BOTTOM_TAGS[int(rng.integers(len(BOTTOM_TAGS)))]
                for _ in range(images_per_outfit):
                    h = int(rng.integers(96, 129))
                    w = int(rng.integers(48, 97))
                    frac = float(rng.uniform(0.28, 0.6))
                    img, bbox, mask = draw_figure(rng, h, w, HAIR[hair], COLOR_RGB[top_c],
                                                  COLOR_RGB[bottom_c], background, frac)
                    rid = f"{idx:06d}"
                    idx += 1
                    tags = ["1girl", "solo", hair, f"{top_c}_{top_tag}", top_tag,
                            f"{bottom_c}_{bottom_tag}", bottom_tag]
                    char_field = character
                    if rng.random() < noise_fraction:
                        defect = int(rng.integers(3))
                        if defect == 0:
                            tags.append(["monochrome", "sketch"][int(rng.integers(2))])
                        elif defect == 1:
                            char_field = f"{character} character_99"
                        else:
                            tags = ["1girl", "solo", hair]
                    img_path = out_dir / "images" / f"{rid}.png"
                    mask_path = out_dir / "masks" / f"{rid}.png"
                    Image.fromarray(img).save(img_path)
                    Image.fromarray(mask.astype(np.uint8) * 255).save(mask_path)
                    records.append(ImageRecord(
                        id=rid, character=char_field, artist=artist, tags=tags,
                        image_path=str(img_path), face_bbox=bbox, mask_path=str(mask_path)))
    write_records(records, out_dir / "raw.jsonl")
    return records
