from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from refgen.cli import dispatch
from refgen.dataset import ImageRecord
from refgen.model import ModelConfig

# Filled by tests/test_acceptance.py, printed once at the end of the session.
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(spatial=8, block_widths=[16, 32], attention_heads=4, text_embed_dim=16,
              time_embed_dim=32, vae_factor=2, text_vocab=256, max_text_tokens=8)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_config()


def make_record(rid, character="alice", artist="bob", tags=("shirt",), answer=None, **kw) -> ImageRecord:
    return ImageRecord(id=str(rid), character=character, artist=artist, tags=list(tags),
                       image_path=kw.pop("image_path", f"{rid}.png"), vqa_answer=answer, **kw)


def solid_figure(h, w, face_bbox, color=(200, 40, 40), bg=(10, 200, 10)):
    """Synthetic figure: background, a body box and a face box; returns (img, seg)."""
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = bg
    seg = np.zeros((h, w), dtype=bool)
    x0, y0, x1, y1 = face_bbox
    img[y0:y1, x0:x1] = (240, 200, 170)
    img[y1:, w // 4: 3 * w // 4] = color
    seg[y0:y1, x0:x1] = True
    seg[y1:, w // 4: 3 * w // 4] = True
    return img, seg


class MemoryStore:
    """In-memory image/mask loader keyed by path, for synthesizer tests."""

    def __init__(self):
        self.images: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}

    def add(self, rid, img, seg=None, face_bbox=None, character="alice", artist="bob", answer="red and blue"):
        path = f"mem/{rid}.png"
        self.images[path] = img
        mask_path = None
        if seg is not None:
            mask_path = f"mem/{rid}_mask.png"
            self.masks[mask_path] = seg
        return make_record(rid, character, artist, answer=answer, image_path=path,
                           face_bbox=face_bbox, mask_path=mask_path)

    def load(self, path):
        return self.images[path]

    def load_mask(self, path):
        return self.masks[path]


# ---------------------------------------------------------------- CLI chain

CHAIN_CONFIG = """\
task: compose
seed: {seed}
train:
  batch_size: 2
synthesis:
  resolution: 128
"""

CHAIN_GRID = """\
characters:
  - name: first
    refs: [samples/000000/ref0.png, samples/000000/ref1.png, samples/000000/ref2.png, samples/000000/ref3.png]
    concepts: [face, face, body, body]
prompts: ["red shirt", "blue skirt"]
runs_per_prompt: 2
samples_per_run: 2
steps: 4
seed: {seed}
"""


def chain_commands(seed: int, steps: int) -> list[list[str]]:
    s = str(seed)
    return [
        ["toydata", "--out", "corpus", "--seed", s, "--characters", "3", "--artists", "1", "--images", "4"],
        ["pipeline", "annotate", "--in", "corpus/raw.jsonl", "--out", "annotated/records.jsonl"],
        ["pipeline", "filter", "--in", "annotated/records.jsonl", "--out", "filtered/records.jsonl"],
        ["pipeline", "group", "--in", "filtered/records.jsonl", "--out", "grouped/manifest.jsonl"],
        ["synthesize", "--config", "exp.yaml", "--manifest", "grouped/manifest.jsonl", "--out", "samples",
         "--seed", s],
        ["train", "--config", "exp.yaml", "--manifest", "samples/index.jsonl", "--out", "ckpt",
         "--steps", str(steps), "--seed", s],
        ["evaluate", "--ckpt", "ckpt/ckpt_final.pt", "--grid", "grid.yaml", "--backend", "mock",
         "--out", "eval/report.json"],
    ]


def run_chain(root, seed: int = 0, steps: int = 50) -> list[int]:
    """Run every CLI stage inside ``root`` with relative paths; return exit codes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "exp.yaml").write_text(CHAIN_CONFIG.format(seed=seed))
    (root / "grid.yaml").write_text(CHAIN_GRID.format(seed=seed))
    cwd = os.getcwd()
    os.chdir(root)
    try:
        codes = []
        for argv in chain_commands(seed, steps):
            codes.append(dispatch(argv))
            if codes[-1]:
                break
        return codes
    finally:
        os.chdir(cwd)


def tree_digest(root) -> dict[str, bytes]:
    """Relative path -> bytes for every file; run manifests drop their timestamps."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name == "run_manifest.json":
            d = json.loads(data)
            d.pop("started_at", None)
            d.pop("finished_at", None)
            data = json.dumps(d, sort_keys=True).encode()
        out[str(p.relative_to(root))] = data
    return out


@pytest.fixture(scope="session")
def chain_runs(tmp_path_factory):
    """The full CLI chain, run twice from scratch with the same root seed."""
    base = tmp_path_factory.mktemp("chain")
    codes = [run_chain(base / "a", seed=3), run_chain(base / "b", seed=3)]
    return base / "a", base / "b", codes
