"""Answer providers and embedding backends.

The mock backends are deterministic functions of their inputs so that the
whole pipeline is reproducible without model downloads. Pretrained backends
wrap ``transformers`` models and are imported lazily.
"""

from __future__ import annotations

import hashlib
import re
import threading
from typing import Protocol, Sequence

import numpy as np

CLOTHES_QUESTION = "List top two colors of the character's cloths"
DEFAULT_DIVERSITY_QUESTION = "Describe the image in detail."

# named palette used by the mock VQA
PALETTE = {
    "black": (20, 20, 20),
    "white": (240, 240, 240),
    "grey": (128, 128, 128),
    "red": (200, 30, 30),
    "orange": (240, 140, 20),
    "yellow": (235, 220, 40),
    "green": (40, 160, 60),
    "blue": (40, 70, 200),
    "purple": (130, 50, 170),
    "pink": (240, 130, 180),
    "brown": (120, 70, 30),
}
_NAMES = list(PALETTE)
_RGB = np.array([PALETTE[n] for n in _NAMES], dtype=np.float32)


def stable_hash(text: str, salt: str = "") -> int:
    return int.from_bytes(hashlib.sha256(f"{salt}\x00{text}".encode()).digest()[:8], "little")


def hash_vector(token: str, dim: int, salt: str = "") -> np.ndarray:
    rng = np.random.default_rng(stable_hash(token, salt))
    return rng.standard_normal(dim)


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def quantize_colors(image: np.ndarray) -> np.ndarray:
    """Map each RGB pixel to the index of its nearest palette color."""
    px = np.asarray(image, dtype=np.float32).reshape(-1, 3)
    d = ((px[:, None, :] - _RGB[None, :, :]) ** 2).sum(-1)
    return d.argmin(1).reshape(image.shape[:2])


def _border_mode(q: np.ndarray) -> int:
    border = np.concatenate([q[0], q[-1], q[:, 0], q[:, -1]])
    return int(np.bincount(border, minlength=len(_NAMES)).argmax())


def _ranked_colors(q: np.ndarray, exclude: int | None = None) -> list[str]:
    counts = np.bincount(q.ravel(), minlength=len(_NAMES))
    if exclude is not None:
        counts[exclude] = 0
    # ties broken by palette order, so ranking is deterministic
    order = sorted(range(len(_NAMES)), key=lambda i: (-counts[i], i))
    return [_NAMES[i] for i in order if counts[i] > 0]


class AnswerProvider(Protocol):
    def describe(self, image: np.ndarray, question: str) -> str: ...


class MockVqa:
    """Deterministic stand-in for a VQA model, driven by quantized colors.

    The clothing question returns the two dominant foreground colors in the
    lower two thirds of the image ("red and blue"), dominant first. Any other
    question gets a short band-by-band color description.
    """

    thread_safe = True

    def describe(self, image: np.ndarray, question: str) -> str:
        image = np.asarray(image)
        q = quantize_colors(image)
        bg = _border_mode(q)
        if question.strip().lower() == CLOTHES_QUESTION.lower():
            h = q.shape[0]
            colors = _ranked_colors(q[h // 3:], exclude=bg)
            if not colors:
                return "none"
            if len(colors) == 1:
                return colors[0]
            return f"{colors[0]} and {colors[1]}"
        h = q.shape[0]
        parts = []
        for name, band in (("top", q[: h // 3]), ("middle", q[h // 3: 2 * h // 3]), ("bottom", q[2 * h // 3:])):
            colors = _ranked_colors(band)[:2]
            parts.append(f"{' and '.join(colors)} at the {name}")
        brightness = float(np.asarray(image, dtype=np.float32).mean()) / 255.0
        tone = "bright" if brightness > 0.6 else "dark" if brightness < 0.35 else "balanced"
        return f"a {tone} image with {', '.join(parts)}, background mostly {_NAMES[bg]}"


class EmbeddingBackend(Protocol):
    dim: int

    def image_embed(self, image: np.ndarray) -> np.ndarray: ...

    def text_embed(self, text: str) -> np.ndarray: ...


_WORD = re.compile(r"[a-z0-9_]+")


class MockEmbedder:
    """Hash-based text embeddings and a fixed random projection for images."""

    thread_safe = True

    def __init__(self, dim: int = 64, seed: int = 0, image_side: int = 8):
        self.dim = dim
        self.image_side = image_side
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dim, 3 * image_side * image_side))
        self._salt = f"mock-embed-{seed}"

    def text_embed(self, text: str) -> np.ndarray:
        words = _WORD.findall(text.lower())
        if not words:
            words = ["<empty>"]
        v = sum(hash_vector(w, self.dim, self._salt) for w in words)
        return unit(v)

    def image_embed(self, image: np.ndarray) -> np.ndarray:
        from PIL import Image

        im = Image.fromarray(np.asarray(image, dtype=np.uint8)).resize(
            (self.image_side, self.image_side), Image.BILINEAR)
        x = np.asarray(im, dtype=np.float64).transpose(2, 0, 1).ravel() / 127.5 - 1.0
        return unit(self._proj @ x + 1e-12)


class SerializedBackend:
    """Wrap a backend that is not thread-safe so calls are serialized."""

    def __init__(self, backend):
        self._backend = backend
        self._lock = threading.Lock()
        self.dim = getattr(backend, "dim", None)

    def __getattr__(self, name):
        attr = getattr(self._backend, name)
        if not callable(attr):
            return attr

        def call(*args, **kwargs):
            with self._lock:
                return attr(*args, **kwargs)

        return call


def maybe_serialize(backend):
    return backend if getattr(backend, "thread_safe", False) else SerializedBackend(backend)


class ClipEmbedder:
    """CLIP image/text embeddings through ``transformers`` (optional)."""

    thread_safe = False

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.device = device
        self.dim = self.model.config.projection_dim

    def image_embed(self, image):
        inputs = self.processor(images=np.asarray(image, dtype=np.uint8), return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            f = self.model.get_image_features(**inputs)[0].cpu().numpy()
        return unit(f)

    def text_embed(self, text):
        inputs = self.processor(text=[text], return_tensors="pt", padding=True, truncation=True).to(self.device)
        with self._torch.no_grad():
            f = self.model.get_text_features(**inputs)[0].cpu().numpy()
        return unit(f)


class HfVqa:
    """Visual question answering through a ``transformers`` pipeline (optional)."""

    thread_safe = False

    def __init__(self, model_name: str = "Salesforce/blip-vqa-base", device: str = "cpu"):
        from PIL import Image
        from transformers import pipeline

        self._Image = Image
        self.pipe = pipeline("visual-question-answering", model=model_name, device=device)

    def describe(self, image, question):
        out = self.pipe(image=self._Image.fromarray(np.asarray(image, dtype=np.uint8)), question=question)
        return out[0]["answer"]


def make_backends(kind: str = "mock", seed: int = 0):
    """Return ``(embedder, vqa)`` for ``kind`` in {"mock", "pretrained"}."""
    if kind == "mock":
        return MockEmbedder(seed=seed), MockVqa()
    if kind == "pretrained":
        return maybe_serialize(ClipEmbedder()), maybe_serialize(HfVqa())
    raise ValueError(f"unknown backend {kind!r}")


def annotate(records: Sequence, provider: AnswerProvider, load_image, question: str = CLOTHES_QUESTION):
    """Fill ``vqa_answer`` on records lacking one, using ``provider``."""
    for rec in records:
        if rec.vqa_answer is None:
            rec.vqa_answer = provider.describe(load_image(rec.image_path), question)
    return records
