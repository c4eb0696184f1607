"""Training-free greedy sub-block pruning.

Each backbone block splits into independently removable attention and
MLP halves.  The search removes one sub-block per round, picking the
candidate whose removal least perturbs the feature pyramid on a fixed
calibration set (plain L2 of the feature difference, summed over images
and levels).  Blocks carrying global attention are protected because
they are the only cross-window information path.

Candidate evaluations within a round are independent; the round's
argmin is reduced deterministically regardless of evaluation order, so
the search may run multi-threaded with bitwise-identical plans.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    DetectorModel,
    FpnFeatures,
    backbone_forward,
    fpn_from_tokens,
    patch_tokens,
    set_sub_block,
    _block_forward,
)
from .tensors import PrecisionMode

KINDS = ("attn", "mlp")


@dataclass(frozen=True)
class SubBlockId:
    block: int
    kind: str  # "attn" | "mlp"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown sub-block kind {self.kind!r}")

    @property
    def order_key(self) -> tuple[int, int]:
        return (self.block, KINDS.index(self.kind))


@dataclass(frozen=True)
class PlanStep:
    sub_block: SubBlockId
    delta: float


@dataclass(frozen=True)
class PruningPlan:
    steps: tuple[PlanStep, ...]
    protected: tuple[SubBlockId, ...]
    model_seed: int
    calib_fingerprint: str

    def __post_init__(self) -> None:
        ids = [s.sub_block for s in self.steps]
        if len(set(ids)) != len(ids):
            raise ValueError("pruning plan contains duplicate sub-blocks")
        overlap = set(ids) & set(self.protected)
        if overlap:
            raise ValueError(f"pruning plan removes protected sub-blocks: {sorted(overlap, key=lambda s: s.order_key)}")

    @property
    def k(self) -> int:
        return len(self.steps)

    def plan_id(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(plan_to_json(self).encode())
        return h.hexdigest()

    def deltas_non_decreasing(self) -> bool:
        deltas = [s.delta for s in self.steps]
        return all(a <= b for a, b in zip(deltas, deltas[1:]))


def calibration_fingerprint(calib: list[np.ndarray]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for img in calib:
        h.update(np.ascontiguousarray(img, dtype=np.float64).tobytes())
    return h.hexdigest()


def protected_sub_blocks(blocks: tuple[int, ...], attn_only: bool = False) -> tuple[SubBlockId, ...]:
    """Default reading protects both halves of each global block; the
    attn_only flag narrows protection to the attention halves."""
    kinds = ("attn",) if attn_only else KINDS
    return tuple(SubBlockId(b, k) for b in sorted(blocks) for k in kinds)


def candidate_sub_blocks(model: DetectorModel, protected: tuple[SubBlockId, ...]) -> list[SubBlockId]:
    excluded = set(protected)
    return [
        SubBlockId(b, k)
        for b in range(model.config.num_blocks)
        for k in KINDS
        if SubBlockId(b, k) not in excluded
    ]


def apply_plan(model: DetectorModel, plan: PruningPlan) -> DetectorModel:
    """A copy of the model with the plan's sub-blocks disabled."""
    for step in plan.steps:
        sb = step.sub_block
        if not 0 <= sb.block < model.config.num_blocks:
            raise ValueError(f"plan block {sb.block} out of range")
        enabled = (model.attn_enabled if sb.kind == "attn" else model.mlp_enabled)[sb.block]
        if not enabled:
            raise ValueError(f"sub-block {sb} already disabled in this model")
    pruned = model
    for step in plan.steps:
        pruned = set_sub_block(pruned, step.sub_block.block, step.sub_block.kind, False)
    return replace(pruned, plan_id=plan.plan_id())


def reference_features(model: DetectorModel, calib: list[np.ndarray]) -> list[FpnFeatures]:
    return [backbone_forward(model, img, PrecisionMode.FP32) for img in calib]


def reconstruction_loss(
    model: DetectorModel,
    plan: PruningPlan,
    calib: list[np.ndarray],
    reference: list[FpnFeatures],
) -> float:
    """Sum over calibration images and pyramid levels of the L2 norm of
    the feature difference between the pruned model and the reference."""
    if len(reference) != len(calib):
        raise ValueError(f"{len(reference)} reference feature sets for {len(calib)} calibration images")
    for ref in reference:
        if ref.model_seed != model.config.seed:
            raise ValueError("reference features come from a different model seed")
        if ref.mode is not PrecisionMode.FP32:
            raise ValueError("reference features must be full precision")
    pruned = apply_plan(model, plan)
    total = 0.0
    for img, ref in zip(calib, reference):
        out = backbone_forward(pruned, img, PrecisionMode.FP32)
        for lvl_out, lvl_ref in zip(out.levels, ref.levels):
            total += float(np.linalg.norm(lvl_out - lvl_ref))
    return total


class _CalibEvaluator:
    """Candidate-removal loss evaluation over the calibration set.

    With memoization on, the activations entering each block under the
    currently accepted removal set are cached per image, so evaluating a
    candidate at block b only recomputes blocks b..L-1.  The recomputed
    suffix performs exactly the operations of a full forward pass, so
    losses and plans are bitwise identical either way.
    """

    def __init__(self, model: DetectorModel, calib: list[np.ndarray], reference: list[FpnFeatures], memoize: bool):
        self.model = model
        self.calib = calib
        self.reference = reference
        self.memoize = memoize
        self.num_blocks = model.config.num_blocks
        if memoize:
            self._acts: list[list[np.ndarray]] = []
            for img in calib:
                x = patch_tokens(model, img, PrecisionMode.FP32)
                chain = [x]
                for b in range(self.num_blocks):
                    x = _block_forward(model, x, b, PrecisionMode.FP32)
                    chain.append(x)
                self._acts.append(chain)

    def accept(self, sb: SubBlockId) -> None:
        self.model = set_sub_block(self.model, sb.block, sb.kind, False)
        if self.memoize:
            for i in range(len(self.calib)):
                x = self._acts[i][sb.block]
                for b in range(sb.block, self.num_blocks):
                    x = _block_forward(self.model, x, b, PrecisionMode.FP32)
                    self._acts[i][b + 1] = x

    def loss(self, candidate: SubBlockId) -> float:
        trial = set_sub_block(self.model, candidate.block, candidate.kind, False)
        total = 0.0
        for i, ref in enumerate(self.reference):
            if self.memoize:
                x = self._acts[i][candidate.block]
                for b in range(candidate.block, self.num_blocks):
                    x = _block_forward(trial, x, b, PrecisionMode.FP32)
            else:
                x = patch_tokens(trial, self.calib[i], PrecisionMode.FP32)
                for b in range(self.num_blocks):
                    x = _block_forward(trial, x, b, PrecisionMode.FP32)
            levels = fpn_from_tokens(trial, x, PrecisionMode.FP32)
            for lvl_out, lvl_ref in zip(levels, ref.levels):
                total += float(np.linalg.norm(lvl_out - lvl_ref))
        return total


def greedy_prune(
    model: DetectorModel,
    calib: list[np.ndarray],
    k: int,
    protected: tuple[int, ...] | None = None,
    protect_attn_only: bool = False,
    jobs: int | None = None,
    memoize: bool = False,
) -> PruningPlan:
    """Remove k sub-blocks, each round taking the reconstruction-loss
    argmin over the surviving candidates.  Ties break deterministically
    by (block index, attn before mlp).

    Every delta is re-evaluated in full by default; memoize=True reuses
    per-image activations entering each block (bitwise-equal plans,
    proven in tests)."""
    if not calib:
        raise ValueError("calibration set is empty")
    blocks = model.config.global_block_indices if protected is None else tuple(protected)
    prot = protected_sub_blocks(blocks, attn_only=protect_attn_only)
    candidates = candidate_sub_blocks(model, prot)
    if k > len(candidates):
        raise ValueError(f"budget k={k} exceeds the {len(candidates)} available candidates")
    reference = reference_features(model, calib)
    evaluator = _CalibEvaluator(model, calib, reference, memoize)
    steps: list[PlanStep] = []
    for _ in range(k):
        if jobs is not None and jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                losses = list(pool.map(evaluator.loss, candidates))
        else:
            losses = [evaluator.loss(c) for c in candidates]
        best = min(range(len(candidates)), key=lambda i: (losses[i], candidates[i].order_key))
        chosen = candidates.pop(best)
        steps.append(PlanStep(chosen, losses[best]))
        evaluator.accept(chosen)
    return PruningPlan(
        steps=tuple(steps),
        protected=prot,
        model_seed=model.config.seed,
        calib_fingerprint=calibration_fingerprint(calib),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def plan_to_json(plan: PruningPlan) -> str:
    doc = {
        "model_seed": plan.model_seed,
        "calib_fingerprint": plan.calib_fingerprint,
        "protected": [[sb.block, sb.kind] for sb in plan.protected],
        "steps": [
            {"block": s.sub_block.block, "kind": s.sub_block.kind, "delta": s.delta}
            for s in plan.steps
        ],
    }
    return json.dumps(doc, indent=2)


def plan_from_json(text: str) -> PruningPlan:
    doc = json.loads(text)
    return PruningPlan(
        steps=tuple(PlanStep(SubBlockId(s["block"], s["kind"]), s["delta"]) for s in doc["steps"]),
        protected=tuple(SubBlockId(b, k) for b, k in doc["protected"]),
        model_seed=doc["model_seed"],
        calib_fingerprint=doc["calib_fingerprint"],
    )
