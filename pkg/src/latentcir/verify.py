"""Self-verification suites: gradient fidelity, loss and metric oracles,
and sampling invariants.

Each suite builds its own fixtures from a seed, runs to completion, and
returns a report with printable lines; nothing here depends on a test
runner, so the command-line tool can execute the same checks that the
test suite asserts on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .alignment import (
    AlignmentBatch,
    build_training_prompt,
    contrastive_loss,
    fuse_pseudo_token,
    init_fusion_params,
    total_loss,
)
from .encoders import build_toy_encoders
from .gradcheck import check_gradients
from .predictor import (
    PredictorConfig,
    init_predictor_params,
    prediction_loss,
    predictor_forward,
    project_patches,
)
from .retrieval import Gallery, map_at_k, rank, recall_at_k
from .views import CropConfig, MaskBlock, sample_crop_spec, sample_mask_block, synth_dataset

__all__ = ["SuiteReport", "grad_suite", "oracle_suite", "invariants_suite", "run_suites"]


@dataclass
class SuiteReport:
    name: str
    passed: bool
    lines: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def render(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        body = "\n".join(f"  {line}" for line in self.lines)
        return f"[{status}] {self.name}\n{body}" if body else f"[{status}] {self.name}"


# gradient fidelity -----------------------------------------------------------


def grad_suite(
    seed: int = 0,
    tolerance: float = 1e-4,
    coords_per_group: int = 12,
    batch: int = 4,
) -> SuiteReport:
    """Finite-difference check of the full training loss on a small graph
    (2 predictor blocks, width 16, 4x4 grid, 4-position mask blocks), in
    64-bit precision."""
    d, p, g = 32, 16, 4
    vision, text = build_toy_encoders(d=d, g=g, seed=seed, dtype=np.float64)
    pred_cfg = PredictorConfig(d=d, p=p, blocks=2, heads=8, grid=g)
    rng = np.random.default_rng(seed)
    predictor = init_predictor_params(pred_cfg, rng, dtype=np.float64)
    fusion = init_fusion_params(d, p, rng, dtype=np.float64)

    pairs = synth_dataset(batch, np.random.default_rng(seed + 1))
    crop_cfg = CropConfig()
    items = []
    for pair in pairs:
        from .views import make_triplet, resize_bilinear

        trip = make_triplet(pair, crop_cfg, rng)
        src = vision.encode_image(resize_bilinear(trip.source_image, 64, 64))
        tgt = vision.encode_image(trip.target_image)
        _, action = text.encode_text(pair.caption)
        row, col = rng.integers(0, g - 1, size=2)
        block = MaskBlock(
            indices=tuple(r * g + c for r in (row, row + 1) for c in (col, col + 1)),
            grid=g, block_scale=0.25, block_aspect=1.0,
        )
        items.append((src, tgt, action.vec, block))

    def loss_fn():
        pred_terms, rows, globals_ = [], [], []
        for src, tgt, action_vec, block in items:
            out = predictor_forward(action_vec, src.patches, block, predictor)
            target = project_patches(tgt.patches[np.asarray(block.indices)], predictor)
            pred_terms.append(prediction_loss(out.predicted_patches, target))
            token = fuse_pseudo_token(
                out.enhanced_source, out.predicted_patches, src.global_vec, fusion
            )
            rows.append(ad.reshape(text.encode_prompt(build_training_prompt(token, text)), (1, d)))
            globals_.append(tgt.global_vec)
        total = pred_terms[0]
        for term in pred_terms[1:]:
            total = ad.add(total, term)
        l_pred = ad.mul(total, 1.0 / len(pred_terms))
        l_align = contrastive_loss(
            AlignmentBatch(
                prompt_embeddings=ad.concat(rows, axis=0),
                target_globals=ad.Tensor(np.stack(globals_)),
                temperature=20.0,
            )
        )
        return total_loss(l_pred, l_align)

    params = {f"predictor.{k}": v for k, v in predictor.tensors.items()}
    params.update({f"fusion.{k}": v for k, v in fusion.tensors.items()})
    report = check_gradients(
        loss_fn,
        params,
        max_coords_per_group=coords_per_group,
        rng=np.random.default_rng(seed + 2),
        tolerance=tolerance,
    )
    worst = report.worst()
    lines = [
        f"checked {len(report.groups)} parameter groups, "
        f"{sum(gr.n_checked for gr in report.groups)} coordinates",
        f"max relative gradient error = {report.max_rel_error:.3e} "
        f"(tolerance {tolerance:.0e}, worst group {worst.name})",
    ]
    stats = {
        "max_rel_error": report.max_rel_error,
        "groups": len(report.groups),
        "worst_group": worst.name,
    }
    return SuiteReport(name="grad", passed=report.passed, lines=lines, stats=stats)


# loss / metric oracles ----------------------------------------------------------


def _brute_contrastive(t_p, v_g, tau):
    t_p = t_p / np.linalg.norm(t_p, axis=1, keepdims=True)
    v_g = v_g / np.linalg.norm(v_g, axis=1, keepdims=True)
    n = len(t_p)
    total = 0.0
    for a, b in ((t_p, v_g), (v_g, t_p)):
        for i in range(n):
            num = math.exp(tau * float(a[i] @ b[i]))
            den = sum(math.exp(tau * float(a[i] @ b[j])) for j in range(n))
            total -= math.log(num / den) / n
    return total


def _brute_sse(pred, tgt):
    total = 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += (pred[i, j] - tgt[i, j]) ** 2
    return total


def oracle_suite(seed: int = 0, instances: int = 100) -> SuiteReport:
    """Compare the losses, the ranker, and the retrieval metrics against
    naive brute-force implementations on random instances."""
    rng = np.random.default_rng(seed)
    mismatches = {"contrastive": 0, "prediction": 0, "rank": 0, "recall": 0, "map": 0}
    worst_abs = 0.0

    for _ in range(instances):
        n = int(rng.integers(2, 9))
        dim = int(rng.integers(3, 12))
        tau = float(rng.uniform(0.1, 100.0))
        t_p = rng.standard_normal((n, dim))
        v_g = rng.standard_normal((n, dim))
        got = contrastive_loss(
            AlignmentBatch(ad.Tensor(t_p), ad.Tensor(v_g), temperature=tau)
        ).item()
        diff = abs(got - _brute_contrastive(t_p, v_g, tau))
        worst_abs = max(worst_abs, diff)
        if diff > 1e-10:
            mismatches["contrastive"] += 1

        pred = rng.standard_normal((3, 4))
        tgt = rng.standard_normal((3, 4))
        diff = abs(prediction_loss(ad.Tensor(pred), tgt).item() - _brute_sse(pred, tgt))
        worst_abs = max(worst_abs, diff)
        if diff > 1e-10:
            mismatches["prediction"] += 1

    # tau -> 0 limit: the softmax flattens and each direction tends to log n
    t_p = rng.standard_normal((8, 16))
    v_g = rng.standard_normal((8, 16))
    limit = contrastive_loss(AlignmentBatch(ad.Tensor(t_p), ad.Tensor(v_g), 1e-9)).item()
    limit_err = abs(limit - 2 * math.log(8))
    if limit_err > 1e-6:
        mismatches["contrastive"] += 1

    for _ in range(instances):
        gallery = Gallery(
            ids=tuple(f"g{i:03d}" for i in range(50)),
            features=rng.standard_normal((50, 8)),
        )
        rankings, truths = [], []
        for _ in range(4):
            q = rng.standard_normal(8)
            ranking = rank(q, gallery)
            qn = q / np.linalg.norm(q)
            scored = sorted(
                zip(gallery.ids, gallery.features @ qn / np.linalg.norm(gallery.features, axis=1)),
                key=lambda item: (-item[1], item[0]),
            )
            if ranking.ids != tuple(cid for cid, _ in scored):
                mismatches["rank"] += 1
            rankings.append(ranking)
            n_truth = int(rng.integers(1, 4))
            truths.append({f"g{i:03d}" for i in rng.choice(50, n_truth, replace=False)})
        for k in (1, 5, 10):
            brute_r = sum(
                1 for rk, ts in zip(rankings, truths) if set(rk.ids[:k]) & ts
            ) / len(rankings)
            if recall_at_k(rankings, truths, k) != brute_r:
                mismatches["recall"] += 1
            brute_ap = 0.0
            for rk, ts in zip(rankings, truths):
                hits, ap = 0, 0.0
                for j in range(1, k + 1):
                    if rk.ids[j - 1] in ts:
                        hits += 1
                        ap += hits / j
                brute_ap += ap / min(k, len(ts))
            if abs(map_at_k(rankings, truths, k) - brute_ap / len(rankings)) > 1e-12:
                mismatches["map"] += 1

    passed = not any(mismatches.values())
    lines = [
        f"{instances} random instances per oracle",
        "mismatch counts: " + ", ".join(f"{k}={v}" for k, v in mismatches.items()),
        f"worst absolute loss deviation = {worst_abs:.3e}",
        f"flat-temperature limit error = {limit_err:.3e}",
    ]
    return SuiteReport(name="oracle", passed=passed, lines=lines)


# sampling / fusion invariants ------------------------------------------------------


def invariants_suite(seed: int = 0, samples: int = 1000) -> SuiteReport:
    """Property sweep: crop geometry laws, mask-block structure, gate-zero
    fusion identity, and predictor output partitioning."""
    rng = np.random.default_rng(seed)
    cfg = CropConfig()
    failures: list[str] = []

    for i in range(samples):
        w = int(rng.integers(32, 400))
        h = int(rng.integers(32, 400))
        spec = sample_crop_spec(w, h, cfg, rng)
        if abs(spec.width * spec.height - spec.scale * w * h) > spec.width + spec.height + 1:
            failures.append(f"area law violated at sample {i} ({w}x{h})")
        if not (0 <= spec.x <= w - spec.width and 0 <= spec.y <= h - spec.height):
            failures.append(f"crop out of bounds at sample {i}")
        aspect_tol = 0.5 * (spec.aspect + 1) / spec.height + 1e-9
        if abs(spec.width / spec.height - spec.aspect) > aspect_tol:
            failures.append(f"aspect law violated at sample {i}")

        g = int(rng.integers(2, 12))
        block = sample_mask_block(g, cfg, rng)
        if not (1 <= len(block) < g * g):
            failures.append(f"mask block subset violated at sample {i}")
        rows = sorted({j // g for j in block.indices})
        cols = sorted({j % g for j in block.indices})
        rect = [r * g + c for r in range(rows[0], rows[-1] + 1) for c in range(cols[0], cols[-1] + 1)]
        if list(block.indices) != rect:
            failures.append(f"mask block not a row-major rectangle at sample {i}")

    # determinism: resampling from an identical generator state matches
    spec_a = sample_crop_spec(100, 80, cfg, np.random.default_rng(seed))
    spec_b = sample_crop_spec(100, 80, cfg, np.random.default_rng(seed))
    if spec_a != spec_b:
        failures.append("crop sampling is not a pure function of the seed")

    # gate-zero identity and shape contract on a small model
    d, p, g = 32, 16, 4
    pred = init_predictor_params(
        PredictorConfig(d=d, p=p, blocks=2, heads=8, grid=g), np.random.default_rng(seed)
    )
    fus = init_fusion_params(d, p, np.random.default_rng(seed + 1))
    action = rng.standard_normal(d)
    patches = rng.standard_normal((g * g, d))
    block = MaskBlock(indices=(5, 6, 9, 10), grid=g, block_scale=0.25, block_aspect=1.0)
    out = predictor_forward(action, patches, block, pred)
    if out.action_out.shape != (1, p) or out.enhanced_source.shape != (g * g, p):
        failures.append("predictor output partition shapes wrong")
    if out.predicted_patches.shape != (len(block), p):
        failures.append("predicted patch count mismatch")
    v_g = rng.standard_normal(d)
    base = fuse_pseudo_token(out.enhanced_source, out.predicted_patches, v_g, fus).vec.data
    perturbed = fuse_pseudo_token(
        ad.Tensor(out.enhanced_source.data + 100.0),
        ad.Tensor(rng.standard_normal(out.predicted_patches.shape) * 1e5),
        v_g,
        fus,
    ).vec.data
    if not np.array_equal(base, perturbed):
        failures.append("gate-zero fusion depends on predictor outputs")
    if prediction_loss(out.predicted_patches, out.predicted_patches.data).item() != 0.0:
        failures.append("prediction loss nonzero on exact match")

    lines = [f"{samples} seeded samples checked"]
    lines += failures if failures else ["all crop/mask/gate/shape properties hold"]
    return SuiteReport(name="invariants", passed=not failures, lines=lines)


def run_suites(names, seed: int = 0, samples: int = 1000, instances: int = 100):
    reports = []
    for name in names:
        if name == "grad":
            reports.append(grad_suite(seed=seed))
        elif name == "oracle":
            reports.append(oracle_suite(seed=seed, instances=instances))
        elif name == "invariants":
            reports.append(invariants_suite(seed=seed, samples=samples))
        else:
            raise ValueError(f"unknown suite {name!r}")
    return reports
