"""CLIP-I / CLIP-T similarity, VQA-answer diversity, and the evaluation grid."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .backends import DEFAULT_DIVERSITY_QUESTION
from .seeding import derive_seed


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def clip_i(gen_image, ref_images, backend) -> float:
    """Mean cosine similarity between the generated image and each reference."""
    if len(ref_images) == 0:
        raise ValueError("clip_i needs at least one reference image")
    g = backend.image_embed(gen_image)
    return float(np.mean([cosine(g, backend.image_embed(r)) for r in ref_images]))


def clip_t(gen_image, prompt: str, backend) -> float:
    if not prompt or not prompt.strip():
        raise ValueError("clip_t needs a non-empty prompt")
    return cosine(backend.image_embed(gen_image), backend.text_embed(prompt))


@dataclass
class GenerationBatch:
    images: list
    conditioning_id: tuple
    answers: list[str] | None = None


class BackendFailure(RuntimeError):
    pass


def mean_pairwise_cosine_distance(vectors) -> float:
    v = np.asarray(vectors, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    sims = np.clip(v @ v.T, -1.0, 1.0)
    iu = np.triu_indices(len(v), k=1)
    return float(np.mean(1.0 - sims[iu]))


def vqa_diversity(batch: GenerationBatch, vqa, embed, question: str = DEFAULT_DIVERSITY_QUESTION) -> float:
    """Mean cosine distance (1 - cos) between embedded VQA answers over all
    unordered image pairs of ``batch``. Range [0, 2].

    Pre-filled ``batch.answers`` are used as-is; otherwise ``vqa`` is asked.
    """
    if len(batch.images) < 2 and not (batch.answers and len(batch.answers) >= 2):
        raise ValueError("diversity needs at least two images")
    answers = batch.answers
    if answers is None:
        answers, failures = [], []
        for i, img in enumerate(batch.images):
            try:
                answers.append(vqa.describe(img, question))
            except Exception as exc:  # collect, then fail the batch as a whole
                failures.append(f"image {i}: {exc!r}")
        if failures:
            raise BackendFailure(f"VQA failed for batch {batch.conditioning_id}: " + "; ".join(failures))
        batch.answers = answers
    return mean_pairwise_cosine_distance([embed.text_embed(a) for a in answers])


@dataclass
class EvalGrid:
    characters: list[dict]  # {"name": str, "refs": [4 paths], "concepts": optional [4 labels]}
    prompts: list[str]
    runs_per_prompt: int = 5
    samples_per_run: int = 4
    steps: int = 20
    seed: int = 0
    sampler: str = "ddim"
    control_weight: float | None = None
    guidance_scale: float = 1.0
    question: str = DEFAULT_DIVERSITY_QUESTION
    diversity_scope: str = "run"  # run | prompt
    reweight: bool = False  # also report diversity * clip_i

    def __post_init__(self):
        if self.diversity_scope not in ("run", "prompt"):
            raise ValueError("diversity_scope must be 'run' or 'prompt'")
        if self.runs_per_prompt < 1 or self.samples_per_run < 1:
            raise ValueError("runs_per_prompt and samples_per_run must be >= 1")
        for c in self.characters:
            if isinstance(c, dict) and "refs" in c and len(c["refs"]) != 4:
                raise ValueError(f"character {c.get('name')}: need exactly 4 reference paths")

    @property
    def total(self) -> int:
        return len(self.characters) * len(self.prompts) * self.runs_per_prompt * self.samples_per_run

    def prompt_ids(self) -> list[str]:
        return [f"P{i + 1}" for i in range(len(self.prompts))]

    @classmethod
    def from_file(cls, path) -> "EvalGrid":
        import yaml

        path = Path(path)
        d = yaml.safe_load(path.read_text())
        grid = cls(**d)
        for c in grid.characters:
            c["refs"] = [str(p) for p in c["refs"]]
        return grid


def schedule(grid: EvalGrid):
    """Yield (character_index, prompt_index, run, seed) for every generation call."""
    for ci, char in enumerate(grid.characters):
        name = char["name"] if isinstance(char, dict) else str(char)
        for pi in range(len(grid.prompts)):
            for run in range(grid.runs_per_prompt):
                yield ci, pi, run, derive_seed(grid.seed, "eval", name, pi, run)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _pct(x):
    return "n/a" if x is None else f"{100 * x:.2f}%"


METRICS = ("clip_i", "clip_t", "vqa_diversity")
METRIC_LABELS = {"clip_i": "CLIP-I", "clip_t": "CLIP-T", "vqa_diversity": "VQA diversity",
                 "vqa_diversity_reweighted": "VQA diversity x CLIP-I"}


def aggregate(grid: EvalGrid, cells: list[dict], groups: list[dict]) -> dict:
    pids = grid.prompt_ids()
    metrics = list(METRICS) + (["vqa_diversity_reweighted"] if grid.reweight else [])
    per_prompt = {}
    for pid in pids:
        ok = [c for c in cells if c["prompt_id"] == pid and c["status"] == "ok"]
        gs = [g for g in groups if g["prompt_id"] == pid]
        row = {"clip_i": _mean(c["clip_i"] for c in ok), "clip_t": _mean(c["clip_t"] for c in ok),
               "vqa_diversity": _mean(g["vqa_diversity"] for g in gs)}
        if grid.reweight:
            row["vqa_diversity_reweighted"] = _mean(g.get("vqa_diversity_reweighted") for g in gs)
        per_prompt[pid] = row
    average = {m: _mean(per_prompt[p][m] for p in pids) for m in metrics}
    table = []
    for m in metrics:
        row = {"metric": METRIC_LABELS[m]}
        row.update({p: _pct(per_prompt[p][m]) for p in pids})
        row["Avg"] = _pct(average[m])
        table.append(row)
    return {"per_prompt": per_prompt, "average": average, "table": table}


def markdown_table(report: dict) -> str:
    cols = list(report["table"][0].keys()) if report["table"] else []
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(str(r[c]) for c in cols) + " |" for r in report["table"]]
    note = ("Diversity is reported next to CLIP scores and is not a ranking on its own: "
            "noisier generators also score as more diverse.")
    return "\n".join(lines) + "\n\n" + note + "\n"


def run_eval_grid(grid: EvalGrid, bundle, backends, out_path=None, dry_run: bool = False,
                  generate_fn: Callable | None = None, load_image: Callable | None = None) -> dict:
    """Generate the full grid and score it.

    ``backends`` is ``(embedder, vqa)``. With ``dry_run`` nothing is generated:
    the report only carries the schedule size. ``generate_fn(refs, prompt,
    seed, grid, concepts)`` can replace model sampling (used by tests).
    """
    scheduled = list(schedule(grid))
    report = {"grid": asdict(grid), "scheduled_calls": len(scheduled),
              "scheduled_images": len(scheduled) * grid.samples_per_run}
    if dry_run:
        report["dry_run"] = True
        return _write(report, out_path)

    from .synthesis import load_image as _load, prepare_reference

    load_image = load_image or _load
    embed, vqa = backends
    if generate_fn is None:
        generate_fn = _model_generate(bundle)
    size = bundle.cfg.image_size if bundle is not None else None

    refs_by_char = []
    for char in grid.characters:
        raw = [load_image(p) for p in char["refs"]]
        prepared = [prepare_reference(r, size) for r in raw] if size else raw
        refs_by_char.append((raw, prepared, char.get("concepts") or ["figure"] * 4))

    cells, groups = [], []
    images_by_group: dict[tuple, list] = {}
    for ci, pi, run, seed in scheduled:
        name = grid.characters[ci]["name"]
        pid = f"P{pi + 1}"
        cell = {"character": name, "prompt_id": pid, "run": run, "seed": seed}
        raw, prepared, concepts = refs_by_char[ci]
        try:
            images = generate_fn(prepared, grid.prompts[pi], seed, grid, concepts)
            cell["clip_i"] = _mean(clip_i(im, raw, embed) for im in images)
            cell["clip_t"] = _mean(clip_t(im, grid.prompts[pi], embed) for im in images)
            cell["status"] = "ok"
        except Exception as exc:
            cell.update(status="missing", error=f"{type(exc).__name__}: {exc}")
            cells.append(cell)
            continue
        cells.append(cell)
        key = (name, pid) if grid.diversity_scope == "prompt" else (name, pid, run)
        images_by_group.setdefault(key, []).append((cell, images))

    for key, entries in images_by_group.items():
        images = [im for _, ims in entries for im in ims]
        group = {"character": key[0], "prompt_id": key[1]}
        if len(key) == 3:
            group["run"] = key[2]
        if len(images) < 2:
            continue
        try:
            batch = GenerationBatch(images, key)
            group["vqa_diversity"] = vqa_diversity(batch, vqa, embed, grid.question)
            group["answers"] = batch.answers
        except Exception as exc:
            group.update(vqa_diversity=None, error=f"{type(exc).__name__}: {exc}")
            for cell, _ in entries:
                cell.update(status="missing", error=group["error"])
        if grid.reweight and group["vqa_diversity"] is not None:
            ci_mean = _mean(c["clip_i"] for c, _ in entries)
            group["vqa_diversity_reweighted"] = group["vqa_diversity"] * ci_mean
        if len(key) == 3:
            entries[0][0]["vqa_diversity"] = group["vqa_diversity"]
        groups.append(group)

    report["cells"] = cells
    report["diversity_groups"] = groups
    report.update(aggregate(grid, cells, groups))
    report["missing_cells"] = sum(c["status"] != "ok" for c in cells)
    report["complete"] = report["missing_cells"] == 0
    return _write(report, out_path)


def _write(report, out_path):
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        if "table" in report:
            out_path.with_suffix(".md").write_text(markdown_table(report))
    return report


def _model_generate(bundle):
    from .sampling import SamplerConfig, generate

    def gen(refs, prompt, seed, grid: EvalGrid, concepts):
        sc = SamplerConfig(grid.sampler, grid.samples_per_run, grid.guidance_scale, grid.control_weight)
        return generate(refs, prompt, seed, grid.steps, bundle, sc, concept_texts=concepts)

    return gen
