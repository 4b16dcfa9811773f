"""Query composition, gallery ranking, and retrieval metrics.

A composed query renders one of three prompt templates around the
placeholder token, encodes the full prompt text as the action, runs the
predictor over a full-grid mask block (at inference there is no known
target, so the model imagines every patch), fuses the pseudo-word token,
and re-encodes the prompt with the token injected. Candidates are ranked
by cosine similarity with a deterministic ascending-id tie-break.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .alignment import fuse_pseudo_token
from .encoders import TextEncoderBase, VisionEncoderBase
from .predictor import predictor_forward
from .training import MapperModel
from .views import (
    CropConfig,
    RawPair,
    full_grid_block,
    load_manifest,
    load_pair,
    make_triplet,
    resize_bilinear,
)

__all__ = [
    "TEMPLATES",
    "QuerySpec",
    "Gallery",
    "RankedRetrieval",
    "EvalReport",
    "render_template",
    "compose_query",
    "rank",
    "recall_at_k",
    "map_at_k",
    "embed_gallery",
    "embed_pairs",
    "save_gallery",
    "load_gallery",
    "load_queries",
    "write_composite_queries",
    "evaluate_queries",
]

GALLERY_VERSION = 1

TEMPLATES = ("domain_conversion", "object_composition", "sentence_manipulation")


@dataclass(frozen=True)
class QuerySpec:
    text: str = ""
    template: str = "sentence_manipulation"
    slots: tuple[str, ...] = ()
    truths: tuple[str, ...] = ()
    reference: str = ""  # path, for serialized query sets
    reference_image: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(
                f"unknown template {self.template!r}; expected one of {TEMPLATES}"
            )
        if self.template == "domain_conversion" and len(self.slots) != 1:
            raise ValueError("domain_conversion requires exactly one domain tag slot")
        if self.template == "object_composition" and len(self.slots) < 1:
            raise ValueError("object_composition requires at least one object tag slot")
        if self.template == "sentence_manipulation" and self.slots:
            raise ValueError("sentence_manipulation takes no slots")


def render_template(spec: QuerySpec) -> str:
    """The literal prompt text for a query, placeholder token included."""
    if spec.template == "domain_conversion":
        return f"a {spec.slots[0]} of [*]"
    if spec.template == "object_composition":
        tags = list(spec.slots)
        joined = tags[0] if len(tags) == 1 else f"{tags[0]} and {tags[1]}"
        for tag in tags[2:]:
            joined += f", and {tag}"
        return f"a photo of [*], {joined}"
    if spec.text:
        return f"a photo of [*], {spec.text}"
    return "a photo of [*]"


def compose_query(
    spec: QuerySpec,
    model: MapperModel,
    vision: VisionEncoderBase,
    text: TextEncoderBase,
) -> np.ndarray:
    """Embed a (reference image, manipulation) pair into the query space."""
    if spec.reference_image is None:
        raise ValueError("query spec carries no reference image")
    cfg = model.cfg
    prompt_text = render_template(spec)
    with ad.no_grad():
        _, action = text.encode_text(prompt_text)
        res = cfg.encoder_resolution
        feats = vision.encode_image(resize_bilinear(spec.reference_image, res, res))
        out = predictor_forward(
            None if cfg.no_action else action.vec,
            feats.patches,
            full_grid_block(cfg.encoder_g),
            model.predictor,
        )
        token = fuse_pseudo_token(
            out.enhanced_source,
            out.predicted_patches,
            feats.global_vec,
            model.fusion,
            use_gate=not cfg.no_gate,
            avg_before_map=cfg.avg_before_map,
        )
        seq = text.prompt_sequence(prompt_text).inject(token.vec)
        return text.encode_prompt(seq).data.copy()


# gallery ----------------------------------------------------------------


@dataclass(frozen=True)
class Gallery:
    ids: tuple[str, ...]
    features: np.ndarray  # (n, d)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        if len(self.ids) != self.features.shape[0]:
            raise ValueError("gallery id/feature count mismatch")
        if not np.isfinite(self.features).all():
            raise ValueError("gallery features contain non-finite entries")


def embed_pairs(
    pairs: list[RawPair], vision: VisionEncoderBase, resolution: int, workers: int = 1
) -> Gallery:
    def one(pair):
        return vision.encode_image(
            resize_bilinear(pair.image, resolution, resolution)
        ).global_vec

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            feats = list(pool.map(one, pairs))
    else:
        feats = [one(p) for p in pairs]
    return Gallery(ids=tuple(p.id for p in pairs), features=np.stack(feats))


def embed_gallery(
    manifest_path: str | Path, vision: VisionEncoderBase, resolution: int, workers: int = 1
) -> Gallery:
    """One global feature per manifest entry, in manifest order."""
    entries = load_manifest(manifest_path)
    pairs = [load_pair(e, manifest_path) for e in entries]
    return embed_pairs(pairs, vision, resolution, workers=workers)


def save_gallery(path: str | Path, gallery: Gallery) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        ids=np.array(gallery.ids),
        features=gallery.features,
        version=np.array(GALLERY_VERSION),
    )
    return path


def load_gallery(path: str | Path) -> Gallery:
    with np.load(path, allow_pickle=False) as archive:
        if int(archive["version"]) != GALLERY_VERSION:
            raise ValueError(f"unsupported gallery version {int(archive['version'])}")
        return Gallery(ids=tuple(str(s) for s in archive["ids"]), features=archive["features"])


# ranking ------------------------------------------------------------------


@dataclass(frozen=True)
class RankedRetrieval:
    ids: tuple[str, ...]  # descending score, ties broken by ascending id
    scores: tuple[float, ...]


def rank(query: np.ndarray, gallery: Gallery, metric: str = "cosine") -> RankedRetrieval:
    if len(gallery.ids) == 0:
        raise ValueError("cannot rank an empty gallery")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != gallery.features.shape[1]:
        raise ValueError(
            f"query width {q.shape[0]} != gallery width {gallery.features.shape[1]}"
        )
    feats = gallery.features.astype(np.float64)
    if metric == "cosine":
        qn = np.linalg.norm(q)
        fn = np.linalg.norm(feats, axis=1)
        if qn == 0.0 or (fn == 0.0).any():
            raise ValueError("cosine ranking undefined for zero-norm vectors")
        scores = (feats @ q) / (fn * qn)
    elif metric == "dot":
        scores = feats @ q
    else:
        raise ValueError(f"unknown similarity metric {metric!r}")
    order = sorted(range(len(gallery.ids)), key=lambda i: (-scores[i], gallery.ids[i]))
    return RankedRetrieval(
        ids=tuple(gallery.ids[i] for i in order),
        scores=tuple(float(scores[i]) for i in order),
    )


def _check_truths(rankings, truth_sets) -> None:
    if len(rankings) != len(truth_sets):
        raise ValueError("one truth set per ranking required")
    for qi, (ranking, truths) in enumerate(zip(rankings, truth_sets)):
        if not truths:
            raise ValueError(f"query {qi} has no truth ids")
        missing = set(truths) - set(ranking.ids)
        if missing:
            raise ValueError(f"query {qi}: truth ids absent from gallery: {sorted(missing)}")


def recall_at_k(rankings: list[RankedRetrieval], truth_sets, k: int) -> float:
    """Fraction of queries with any truth id in the top k."""
    _check_truths(rankings, truth_sets)
    hits = sum(
        1 for ranking, truths in zip(rankings, truth_sets)
        if set(ranking.ids[:k]) & set(truths)
    )
    return hits / len(rankings)


def map_at_k(rankings: list[RankedRetrieval], truth_sets, k: int) -> float:
    """Mean average precision truncated at rank k, normalized by min(k, |truths|)."""
    _check_truths(rankings, truth_sets)
    total = 0.0
    for ranking, truths in zip(rankings, truth_sets):
        truths = set(truths)
        hits = 0
        ap = 0.0
        for j, cid in enumerate(ranking.ids[:k], start=1):
            if cid in truths:
                hits += 1
                ap += hits / j
        total += ap / min(k, len(truths))
    return total / len(rankings)


# query-set files -----------------------------------------------------------


def load_queries(path: str | Path) -> list[QuerySpec]:
    """Read JSON-lines query records; reference paths resolve beside the file."""
    path = Path(path)
    queries = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("reference", "text", "template"):
                if key not in rec:
                    raise ValueError(f"{path}:{line_no}: query record missing '{key}'")
            img_path = path.parent / rec["reference"]
            try:
                with Image.open(img_path) as im:
                    image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except OSError as exc:
                raise OSError(f"cannot read query image {img_path}: {exc}") from exc
            queries.append(
                QuerySpec(
                    text=rec["text"],
                    template=rec["template"],
                    slots=tuple(rec.get("slots", ())),
                    truths=tuple(rec.get("truths", ())),
                    reference=rec["reference"],
                    reference_image=image,
                    id=rec.get("id", f"query-{line_no:04d}"),
                )
            )
    return queries


def write_composite_queries(
    pairs: list[RawPair],
    crop_cfg: CropConfig,
    rng: np.random.Generator,
    out_dir: str | Path,
) -> Path:
    """Emit the training-composite query set for a pair list: the reference is
    a seeded crop of each image, the manipulation text is its caption, and the
    truth is the original image's id."""
    out = Path(out_dir)
    (out / "query_images").mkdir(parents=True, exist_ok=True)
    queries_path = out / "queries.jsonl"
    with queries_path.open("w") as fh:
        for pair in pairs:
            crop = make_triplet(pair, crop_cfg, rng).source_image
            rel = f"query_images/{pair.id}.png"
            arr = np.clip(np.rint(crop * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out / rel)
            fh.write(
                json.dumps(
                    {
                        "id": f"composite-{pair.id}",
                        "reference": rel,
                        "text": pair.caption,
                        "template": "sentence_manipulation",
                        "slots": [],
                        "truths": [pair.id],
                    }
                )
                + "\n"
            )
    return queries_path


# evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    recall: dict[int, float] = field(default_factory=dict)
    mean_ap: dict[int, float] = field(default_factory=dict)
    ranks: list[int] = field(default_factory=list)  # best-truth rank per query, 1-based
    query_count: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "queries": self.query_count,
                "ks": list(self.ks),
                "recall": {str(k): self.recall[k] for k in self.ks},
                "map": {str(k): self.mean_ap[k] for k in self.ks},
                "ranks": self.ranks,
            },
            indent=2,
        )

    def to_text(self) -> str:
        lines = [f"queries: {self.query_count}", f"{'K':>6}  {'Recall@K':>10}  {'mAP@K':>10}"]
        for k in self.ks:
            lines.append(f"{k:>6}  {self.recall[k]:>10.4f}  {self.mean_ap[k]:>10.4f}")
        return "\n".join(lines)


def evaluate_queries(
    queries: list[QuerySpec],
    model: MapperModel | None,
    vision: VisionEncoderBase,
    text: TextEncoderBase | None,
    gallery: Gallery,
    ks,
    mode: str = "composed",
) -> EvalReport:
    """Rank the gallery for every query and aggregate Recall@K / mAP@K.

    ``mode="composed"`` runs the full composition path; ``mode="image"``
    uses the reference image's own global feature as the query vector (a
    plumbing sanity mode: querying the gallery with its own items must give
    perfect self-retrieval).
    """
    if mode not in ("composed", "image"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must contain positive integers")
    rankings = []
    truth_sets = []
    for spec in queries:
        if mode == "image":
            if spec.reference_image is None:
                raise ValueError(f"query {spec.id} carries no reference image")
            res = getattr(vision, "resolution", None)
            if res is None:
                raise ValueError("image mode needs an encoder with a fixed input resolution")
            vec = vision.encode_image(
                resize_bilinear(spec.reference_image, res, res)
            ).global_vec
        else:
            vec = compose_query(spec, model, vision, text)
        rankings.append(rank(vec, gallery))
        truth_sets.append(set(spec.truths))
    report = EvalReport(ks=ks, query_count=len(queries))
    for k in ks:
        report.recall[k] = recall_at_k(rankings, truth_sets, k)
        report.mean_ap[k] = map_at_k(rankings, truth_sets, k)
    for ranking, truths in zip(rankings, truth_sets):
        best = min(ranking.ids.index(t) for t in truths)
        report.ranks.append(best + 1)
    return report
