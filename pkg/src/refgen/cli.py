"""Command-line entry point.

Exit codes: 0 success, 1 stage failure (one JSON line on stderr), 2 usage error.
Each stage writes ``run_manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import dataset as ds
from .config import (ExperimentConfig, RunManifest, config_from_dict, load_config,
                     resolve_out, save_config)
from .seeding import derive_seed, stage_rng

log = logging.getLogger("refgen")


class StageError(RuntimeError):
    pass


def _parent(out: Path) -> Path:
    return out.parent if out.suffix else out


def _load_cfg(path, task=None) -> ExperimentConfig:
    if path is None:
        if task is None:
            raise StageError("either --config or --task is required")
        return config_from_dict({"task": task})
    cfg = load_config(path)
    if task is not None and task != cfg.task:
        cfg.task = task
    return cfg


# ------------------------------------------------------------------ pipeline

def cmd_toydata(args, argv):
    from .toydata import make_corpus

    out = resolve_out(args.out)
    run = RunManifest.start("toydata", argv, args.seed)
    make_corpus(out, seed=derive_seed(args.seed, "toydata"), n_characters=args.characters,
                artists_per_character=args.artists, outfits_per_identity=args.outfits,
                images_per_outfit=args.images, noise_fraction=args.noise)
    run.finish(out)


def _read_records(path, rejected):
    records, _ = ds.read_manifest(path, rejected)
    return records


def _write_rejected(out: Path, rejected):
    path = _parent(out) / (out.stem + ".rejected.jsonl")
    with path.open("w") as f:
        for rid, reason in rejected:
            f.write(json.dumps({"id": rid, "reason": reason}, sort_keys=True) + "\n")
    return path


def cmd_pipeline(args, argv):
    out = resolve_out(args.out)
    run = RunManifest.start(f"pipeline.{args.action}", argv, None, None,
                            [args.input] + ([args.policy] if getattr(args, "policy", None) else []))
    rejected: list = []
    records = _read_records(args.input, rejected)
    files = [out]
    if args.action == "annotate":
        from .backends import MockVqa, annotate
        from .synthesis import load_image

        if args.provider != "mock":
            raise StageError(f"answer provider {args.provider!r} is not bundled; fill vqa_answer offline")
        annotate(records, MockVqa(), load_image)
        ds.write_records(records, out)
    elif args.action == "filter":
        if args.policy:
            p = Path(args.policy)
            policy = ds.FilterPolicy.from_dict(yaml.safe_load(p.read_text()) or {}, p.parent)
        else:
            policy = ds.FilterPolicy.from_dict({})
        kept = ds.filter_records(records, policy, rejected)
        ds.write_records(kept, out)
        log.info("filter: kept %d of %d", len(kept), len(records))
    elif args.action in ("cluster", "group"):
        groups = ds.partition(records)
        if args.action == "cluster" and len(groups) > 1:
            raise StageError(f"cluster expects one (character, artist) group, got {len(groups)}; use 'group'")
        clusters = ds.group_identities(records, rejected)
        ds.emit_manifest(clusters, records, out)
        log.info("%s: %d clusters", args.action, len(clusters))
    if rejected:
        files.append(_write_rejected(out, rejected))
    run.finish(_parent(out), files)


# ------------------------------------------------------------------ synthesis

def _synthesize(cfg: ExperimentConfig, manifest, task):
    from .synthesis import SkipSample, Synthesizer, iter_targets

    records, clusters = ds.read_manifest(manifest)
    if clusters is None:
        raise StageError(f"{manifest} has no cluster assignments; run 'pipeline group' first")
    synth = Synthesizer(records, cfg.synthesis)
    samples, skipped = [], []
    for k, (cluster, target_id) in enumerate(iter_targets(clusters)):
        rng = stage_rng(cfg.seed, "synthesize", task, k)
        try:
            samples.append(synth.make_sample(task, cluster, target_id, rng))
        except SkipSample as exc:
            skipped.append((target_id, exc.reason))
    return samples, skipped


def cmd_synthesize(args, argv):
    from .synthesis import write_samples

    cfg = _load_cfg(args.config, args.task)
    if args.seed is not None:
        cfg.seed = args.seed
    out = resolve_out(args.out)
    run = RunManifest.start("synthesize", argv, cfg.seed, cfg.hash(), [args.manifest])
    samples, skipped = _synthesize(cfg, args.manifest, cfg.task)
    write_samples(samples, out, skipped)
    save_config(cfg, out / "resolved_config.yaml")
    run.finish(out)


# ------------------------------------------------------------------ training

def _is_sample_index(path) -> bool:
    from .synthesis import SAMPLES_FORMAT

    with open(path) as f:
        first = f.readline()
    try:
        return json.loads(first).get("format") == SAMPLES_FORMAT
    except (json.JSONDecodeError, AttributeError):
        return False


def cmd_train(args, argv):
    from .model import init_from_base, make_base_model, save_checkpoint
    from .synthesis import read_samples
    from .training import Trainer

    cfg = _load_cfg(args.config, args.task)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.train.seed = derive_seed(cfg.seed, "train")
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest.start("train", argv, cfg.seed, cfg.hash(), [args.manifest])

    if _is_sample_index(args.manifest):
        pool = [s for s in read_samples(args.manifest) if s.task == cfg.task]
    else:
        pool, _ = _synthesize(cfg, args.manifest, cfg.task)
    if not pool:
        raise StageError(f"no {cfg.task} samples available in {args.manifest}")

    base = make_base_model(cfg.model, derive_seed(cfg.seed, "base"))
    bundle = init_from_base(base, cfg.model, derive_seed(cfg.seed, "init"))
    save_checkpoint(bundle, out / "base_init.pt", 0)
    trainer = Trainer(bundle, cfg.train, out)
    losses = trainer.fit(pool)
    trainer.save()
    (out / "losses.json").write_text(json.dumps(losses) + "\n")
    save_config(cfg, out / "resolved_config.yaml")
    run.finish(out)


# ------------------------------------------------------------------ generate / evaluate

def cmd_generate(args, argv):
    from .model import load_checkpoint
    from .sampling import SamplerConfig, generate
    from .synthesis import load_image, prepare_reference, save_image

    if len(args.refs) != 4:
        raise StageError(f"--refs needs exactly 4 paths, got {len(args.refs)}")
    out = resolve_out(args.out)
    run = RunManifest.start("generate", argv, args.seed, None, [args.ckpt] + list(args.refs))
    bundle = load_checkpoint(args.ckpt)
    size = bundle.cfg.image_size
    refs = [prepare_reference(load_image(p), size) for p in args.refs]
    concepts = args.concepts or ["figure"] * 4
    sc = SamplerConfig(args.sampler, args.num_samples, args.guidance_scale, args.control_weight)
    images = generate(refs, args.prompt, args.seed, args.steps, bundle, sc, concept_texts=concepts)
    out.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        save_image(im, out / f"sample_{i:02d}.png")
    run.finish(out)


def cmd_evaluate(args, argv):
    from .backends import make_backends
    from .evaluation import EvalGrid, run_eval_grid
    from .model import load_checkpoint

    out = resolve_out(args.out)
    grid = EvalGrid.from_file(args.grid)
    inputs = [args.grid] + ([args.ckpt] if args.ckpt else [])
    if not args.dry_run:
        inputs += [p for c in grid.characters for p in c["refs"]]
    run = RunManifest.start("evaluate", argv, grid.seed, None, inputs)
    if args.dry_run:
        report = run_eval_grid(grid, None, None, out, dry_run=True)
        print(json.dumps({"scheduled_images": report["scheduled_images"]}))
    else:
        if not args.ckpt:
            raise StageError("--ckpt is required unless --dry-run")
        bundle = load_checkpoint(args.ckpt)
        report = run_eval_grid(grid, bundle, make_backends(args.backend, grid.seed), out)
    run.finish(_parent(out), [p for p in (out, out.with_suffix(".md")) if p.exists()])
    if not report.get("dry_run") and not report["complete"]:
        raise StageError(f"{report['missing_cells']} evaluation cells missing")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refgen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toydata", help="write a procedural toy corpus")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--characters", type=int, default=4)
    t.add_argument("--artists", type=int, default=2)
    t.add_argument("--outfits", type=int, default=2)
    t.add_argument("--images", type=int, default=5)
    t.add_argument("--noise", type=float, default=0.1)
    t.set_defaults(func=cmd_toydata)

    pl = sub.add_parser("pipeline", help="annotate / filter / cluster / group record manifests")
    psub = pl.add_subparsers(dest="action", required=True)
    for action in ("annotate", "filter", "cluster", "group"):
        a = psub.add_parser(action)
        a.add_argument("--in", dest="input", required=True)
        a.add_argument("--out", required=True)
        if action == "filter":
            a.add_argument("--policy")
        if action == "annotate":
            a.add_argument("--provider", default="mock")
        a.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("synthesize", help="build training samples from a clustered manifest")
    s.add_argument("--task", choices=("recon", "compose"))
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synthesize)

    tr = sub.add_parser("train", help="train the retrieval branch")
    tr.add_argument("--task", choices=("recon", "compose"))
    tr.add_argument("--config")
    tr.add_argument("--manifest", required=True, help="clustered manifest or sample index")
    tr.add_argument("--out", required=True, help="checkpoint directory")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample images from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--refs", nargs="+", required=True)
    g.add_argument("--concepts", nargs=4)
    g.add_argument("--prompt", default="")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=20)
    g.add_argument("--control-weight", type=float)
    g.add_argument("--sampler", choices=("ddim", "ancestral"), default="ddim")
    g.add_argument("--num-samples", type=int, default=4)
    g.add_argument("--guidance-scale", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="run the evaluation grid")
    e.add_argument("--ckpt")
    e.add_argument("--grid", required=True)
    e.add_argument("--backend", choices=("mock", "pretrained"), default="mock")
    e.add_argument("--out", required=True, help="report .json path")
    e.add_argument("--dry-run", action="store_true")
    e.set_defaults(func=cmd_evaluate)
    return p


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, ["refgen"] + argv)
    except Exception as exc:
        if args.verbose:
            log.exception("stage failed")
        err = {"error": str(exc), "type": type(exc).__name__, "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
