"""Dataset curation: record filtering, clothing clustering and identity manifests.

Records arrive as line-delimited JSON, one ``ImageRecord`` per line. Vision
annotations (face boxes, segmentation masks) and VQA answers are ingested as
fields; nothing here runs a detector or a VQA model.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

MANIFEST_FORMAT = "refgen-manifest"
MANIFEST_VERSION = 1

# reason codes for record-level rejections
MALFORMED = "malformed"
BANNED_TAG = "banned_tag"
MULTI_CHARACTER = "multi_character"
NO_CLOTHES_TAG = "no_clothes_tag"
MISSING_ANSWER = "missing_vqa_answer"

RECORD_FIELDS = (
    "id",
    "character",
    "artist",
    "tags",
    "image_path",
    "face_bbox",
    "mask_path",
    "vqa_answer",
)


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    id: str
    character: str
    artist: str
    tags: list[str]
    image_path: str
    face_bbox: tuple[int, int, int, int] | None = None
    mask_path: str | None = None
    vqa_answer: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "character": self.character,
            "artist": self.artist,
            "tags": list(self.tags),
            "image_path": self.image_path,
            "face_bbox": list(self.face_bbox) if self.face_bbox is not None else None,
            "mask_path": self.mask_path,
            "vqa_answer": self.vqa_answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        if not d.get("id") or d.get("tags") is None:
            raise ManifestError(f"malformed record (missing id/tags): {d.get('id')!r}")
        bbox = d.get("face_bbox")
        if bbox is not None:
            if len(bbox) != 4:
                raise ManifestError(f"record {d['id']}: face_bbox needs 4 integers")
            bbox = tuple(int(v) for v in bbox)
        tags = list(dict.fromkeys(d["tags"]))  # ordered set
        return cls(
            id=str(d["id"]),
            character=d.get("character", ""),
            artist=d.get("artist", ""),
            tags=tags,
            image_path=d.get("image_path", ""),
            face_bbox=bbox,
            mask_path=d.get("mask_path"),
            vqa_answer=d.get("vqa_answer"),
        )


def bbox_is_valid(bbox, width: int, height: int) -> bool:
    x0, y0, x1, y1 = bbox
    return 0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height


def default_clothes_vocab() -> set[str]:
    text = resources.files("refgen.data").joinpath("clothes_vocab.txt").read_text()
    return {line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")}


@dataclass
class FilterPolicy:
    banned_tags: set[str] = field(default_factory=set)
    clothes_vocab: set[str] = field(default_factory=set)
    require_single_character: bool = True
    filter_clothes: bool = True

    def __post_init__(self):
        self.banned_tags = set(self.banned_tags)
        self.clothes_vocab = set(self.clothes_vocab)
        if self.filter_clothes and not self.clothes_vocab:
            raise ValueError("clothes_vocab must be non-empty when filter_clothes is enabled")

    @classmethod
    def identity(cls) -> "FilterPolicy":
        return cls(require_single_character=False, filter_clothes=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "FilterPolicy":
        d = dict(d)
        unknown = set(d) - {"banned_tags", "clothes_vocab", "clothes_vocab_file",
                            "require_single_character", "filter_clothes"}
        if unknown:
            raise ValueError(f"unknown policy keys: {sorted(unknown)}")
        vocab = set(d.pop("clothes_vocab", []) or [])
        vocab_file = d.pop("clothes_vocab_file", None)
        if vocab_file is not None:
            p = Path(vocab_file)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            vocab |= {ln.strip() for ln in p.read_text().splitlines()
                      if ln.strip() and not ln.startswith("#")}
        elif not vocab and d.get("filter_clothes", True):
            vocab = default_clothes_vocab()
        return cls(
            banned_tags=set(d.get("banned_tags", [])),
            clothes_vocab=vocab,
            require_single_character=bool(d.get("require_single_character", True)),
            filter_clothes=bool(d.get("filter_clothes", True)),
        )


def rejection_reason(record: ImageRecord, policy: FilterPolicy) -> str | None:
    """Return the first violated rule for ``record`` or None if it passes."""
    if not record.id or record.tags is None:
        return MALFORMED
    if policy.banned_tags and any(t in policy.banned_tags for t in record.tags):
        return BANNED_TAG
    if policy.require_single_character and len((record.character or "").split()) != 1:
        return MULTI_CHARACTER
    if policy.filter_clothes and not any(t in policy.clothes_vocab for t in record.tags):
        return NO_CLOTHES_TAG
    return None


def filter_records(records: Iterable[ImageRecord], policy: FilterPolicy,
                   rejected: list | None = None) -> list[ImageRecord]:
    """Keep records passing ``policy``, in input order.

    Rejections are appended to ``rejected`` as ``(record_id, reason)`` when a
    list is supplied.
    """
    kept = []
    for rec in records:
        reason = rejection_reason(rec, policy)
        if reason is None:
            kept.append(rec)
        elif rejected is not None:
            rejected.append((getattr(rec, "id", None), reason))
    return kept


_WS = re.compile(r"\s+")


def normalize_answer(answer: str) -> str:
    # lowercase + whitespace collapse only; word order stays significant
    return _WS.sub(" ", answer.strip().lower())


@dataclass
class IdentityCluster:
    character: str
    artist: str
    clothing_label: int
    member_ids: list[str]

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.character, self.artist, self.clothing_label)


def cluster_clothes(group: list[ImageRecord], rejected: list | None = None) -> list[IdentityCluster]:
    """Cluster one (character, artist) group by exact normalized VQA answer.

    Two records share a cluster iff their normalized answers are equal. The
    comparison is the pairwise O(N^2) sweep: each record joins the first earlier
    record it matches, so labels follow first-occurrence order of answers.
    Records without an answer go to ``rejected``.
    """
    if not group:
        return []
    character, artist = group[0].character, group[0].artist
    for rec in group:
        if (rec.character, rec.artist) != (character, artist):
            raise ValueError(
                f"record {rec.id} is ({rec.character}, {rec.artist}), "
                f"group is ({character}, {artist})")

    answered = []
    for rec in group:
        if rec.vqa_answer is None or not rec.vqa_answer.strip():
            if rejected is not None:
                rejected.append((rec.id, MISSING_ANSWER))
            continue
        answered.append((rec, normalize_answer(rec.vqa_answer)))

    labels: list[int] = []
    n_labels = 0
    for i, (_, ans) in enumerate(answered):
        label = None
        for j in range(i):
            if answered[j][1] == ans:
                label = labels[j]
                break
        if label is None:
            label = n_labels
            n_labels += 1
        labels.append(label)

    members: list[list[str]] = [[] for _ in range(n_labels)]
    for (rec, _), label in zip(answered, labels):
        members[label].append(rec.id)
    return [IdentityCluster(character, artist, k, ids) for k, ids in enumerate(members)]


def partition(records: Iterable[ImageRecord]) -> dict[tuple[str, str], list[ImageRecord]]:
    groups: dict[tuple[str, str], list[ImageRecord]] = {}
    for rec in records:
        groups.setdefault((rec.character, rec.artist), []).append(rec)
    return groups


def group_identities(records: Iterable[ImageRecord], rejected: list | None = None) -> list[IdentityCluster]:
    clusters = []
    for group in partition(records).values():
        clusters.extend(cluster_clothes(group, rejected))
    return clusters


# ---------------------------------------------------------------- manifest io

def _header(count: int, clustered: bool) -> dict:
    return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
            "count": count, "clustered": clustered}


def write_records(records: Iterable[ImageRecord], out_path) -> Path:
    """Write a plain (unclustered) record manifest."""
    records = list(records)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w") as f:
        f.write(json.dumps(_header(len(records), False), sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return out_path


def emit_manifest(clusters: list[IdentityCluster], records: Iterable[ImageRecord], out_path) -> Path:
    """Write clustered records, one per line, each with its ``clothing_label``.

    Only cluster members are written, in cluster order.
    """
    by_id = {rec.id: rec for rec in records}
    missing = [m for c in clusters for m in c.member_ids if m not in by_id]
    if missing:
        raise ManifestError(f"dangling member ids: {missing}")
    n = sum(len(c.member_ids) for c in clusters)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w") as f:
        f.write(json.dumps(_header(n, True), sort_keys=True) + "\n")
        for c in clusters:
            for mid in c.member_ids:
                d = by_id[mid].to_dict()
                d["clothing_label"] = c.clothing_label
                f.write(json.dumps(d, sort_keys=True) + "\n")
    return out_path


def read_manifest(path, rejected: list | None = None):
    """Load a manifest written by ``write_records`` or ``emit_manifest``.

    Returns ``(records, clusters)``; ``clusters`` is None for unclustered
    manifests. A header line is optional for hand-written inputs. Malformed
    lines are skipped and reported through ``rejected``.
    """
    records: list[ImageRecord] = []
    labels: list[int | None] = []
    header = None
    with Path(path).open() as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if lineno == 1 and d.get("format") == MANIFEST_FORMAT:
                header = d
                continue
            try:
                rec = ImageRecord.from_dict(d)
            except ManifestError:
                if rejected is not None:
                    rejected.append((d.get("id"), MALFORMED))
                continue
            records.append(rec)
            labels.append(d.get("clothing_label"))

    if header is not None and header["count"] != len(records) and rejected is None:
        raise ManifestError(f"{path}: header count {header['count']} != {len(records)} records")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate record ids")

    clustered = header["clustered"] if header is not None else any(lb is not None for lb in labels)
    if not clustered:
        return records, None
    clusters: dict[tuple, IdentityCluster] = {}
    for rec, label in zip(records, labels):
        if label is None:
            raise ManifestError(f"{path}: record {rec.id} lacks clothing_label")
        key = (rec.character, rec.artist, int(label))
        if key not in clusters:
            clusters[key] = IdentityCluster(rec.character, rec.artist, int(label), [])
        clusters[key].member_ids.append(rec.id)
    return records, list(clusters.values())
