"""Merging and unmerging of task vectors, plus localization backends.

The merged state keeps the exact fixed-point sum of quantized task vectors,
so removing a task by subtraction is bit-identical to never having merged it,
regardless of order. Serving divides the summed vector by the number of
currently retained tasks (an unweighted average).

Localization backends:

* sign-fixed masks -- the per-task mask comes out of sign-fixed tuning and
  depends only on local data; localized model is
  ``m0 + dequantize(mask * accumulator) / n_retained``.
* TALL masks -- ``bit i set iff |tau_t[i]| >= lambda_t * |tau_bar[i] - tau_t[i]|``;
  lambda is tuned by targeting mask densities, with an extra rescale alpha.
* EMR -- elects the per-entry sign of the summed vector, keeps the largest
  aligned magnitude as a unified vector, masks by sign agreement, and rescales
  to match each task's l1 norm.
* TIES -- trims each vector to its top-density entries by magnitude, elects a
  global per-entry sign, and averages the entries that agree with it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .paramcore import (
    BitMask,
    FxpVector,
    SCALE_BITS_DEFAULT,
    dequantize,
    fxp_add,
    fxp_sub,
    mask_apply,
    quantize,
)
from .trainer import ModelSpec, TaskVector, accuracy

MERGE_FAMILY = ("sift_masks", "ft_merge", "tall_masks", "emr", "ties")
MASK_BEARING = ("sift_masks", "tall_masks", "emr")
REBUILD_ON_UNLEARN = ("tall_masks", "emr", "ties")
METHOD_TAGS = MERGE_FAMILY + ("central",)

DENSITY_GRID_DEFAULT = (0.1, 0.3, 0.5, 0.7, 0.9)
ALPHA_GRID_DEFAULT = (0.8, 1.0, 1.2, 1.4, 1.6)


@dataclass(frozen=True)
class LocalizationMethod:
    tag: str
    density_grid: tuple[float, ...] = DENSITY_GRID_DEFAULT
    alpha_grid: tuple[float, ...] = ALPHA_GRID_DEFAULT
    ties_density: float = 1.0

    def __post_init__(self):
        if self.tag not in METHOD_TAGS:
            raise ValueError(f"unknown method tag {self.tag!r}")
        if not self.density_grid or not self.alpha_grid:
            raise ValueError("tuning grids must be nonempty")
        if any(not (0.0 < d <= 1.0) for d in self.density_grid):
            raise ValueError("density grid values must lie in (0, 1]")
        if not (0.0 < self.ties_density <= 1.0):
            raise ValueError("ties density must lie in (0, 1]")
        object.__setattr__(self, "density_grid", tuple(self.density_grid))
        object.__setattr__(self, "alpha_grid", tuple(self.alpha_grid))


@dataclass(frozen=True)
class MergedState:
    """Exact accumulator of quantized task vectors plus per-task masks."""

    accumulator: FxpVector
    retained: tuple[int, ...]
    masks: dict[int, BitMask]
    method: str
    base_seed: int = 0
    sign_seed: int = 0

    @property
    def length(self) -> int:
        return len(self.accumulator)

    @property
    def n_retained(self) -> int:
        return len(self.retained)


def merge(
    task_vectors: list[TaskVector],
    masks: dict[int, BitMask] | None = None,
    *,
    method: str = "ft_merge",
    base_seed: int = 0,
    sign_seed: int = 0,
    scale_bits: int = SCALE_BITS_DEFAULT,
    length: int | None = None,
) -> MergedState:
    """Fold task vectors into an exact fixed-point sum.

    The accumulator is invariant to the order of task_vectors. Masks, when
    given, must cover exactly the merged ids.
    """
    ids = [tv.source_task for tv in task_vectors]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate task ids in merge: {dup}")
    if task_vectors:
        length = task_vectors[0].delta.shape[0]
        for tv in task_vectors:
            if tv.delta.shape[0] != length:
                raise ValueError("task vectors have mismatched lengths")
    elif length is None:
        raise ValueError("merging zero vectors requires an explicit length")

    acc = FxpVector.zeros(length, scale_bits)
    for tv in task_vectors:
        acc = fxp_add(acc, quantize(tv.delta, scale_bits))

    if masks is not None and set(masks) != set(ids):
        raise ValueError("masks must cover exactly the merged task ids")
    masks = dict(masks) if masks else {}
    return MergedState(
        accumulator=acc,
        retained=tuple(ids),
        masks=masks,
        method=method,
        base_seed=base_seed,
        sign_seed=sign_seed,
    )


def unmerge(state: MergedState, tau_u: TaskVector) -> MergedState:
    """Subtract one task's quantized vector and drop its bookkeeping."""
    if tau_u.source_task not in state.retained:
        raise KeyError(f"task {tau_u.source_task} is not retained")
    acc = fxp_sub(state.accumulator, quantize(tau_u.delta, state.accumulator.scale_bits))
    masks = {t: m for t, m in state.masks.items() if t != tau_u.source_task}
    retained = tuple(t for t in state.retained if t != tau_u.source_task)
    return replace(state, accumulator=acc, retained=retained, masks=masks)


def serve_merged(state: MergedState, m0: np.ndarray) -> np.ndarray:
    """Average merged model; the base model when nothing is retained."""
    if state.n_retained == 0:
        return m0.copy()
    return m0 + dequantize(state.accumulator) / state.n_retained


def localize_sift(
    state: MergedState,
    task_id: int,
    m0: np.ndarray,
    divide_by_overlap: bool = False,
) -> np.ndarray:
    """Masked average model for one retained task.

    With divide_by_overlap, each surviving entry is divided by the number of
    retained masks covering it instead of by the retained count.
    """
    if state.method != "sift_masks":
        raise ValueError(f"sift localization on method {state.method!r}")
    if task_id not in state.masks:
        raise KeyError(f"no stored mask for task {task_id}")
    masked = dequantize(
        FxpVector(
            mask_apply(state.masks[task_id], state.accumulator.values),
            state.accumulator.scale_bits,
        )
    )
    if not divide_by_overlap:
        return m0 + masked / max(state.n_retained, 1)
    overlap = np.zeros(state.length)
    for t in state.retained:
        overlap += state.masks[t].to_bools()
    return m0 + masked / np.maximum(overlap, 1.0)


def localize_masked(
    state: MergedState, mask: BitMask, m0: np.ndarray, alpha: float = 1.0
) -> np.ndarray:
    """Masked average model under an externally supplied mask and rescale."""
    masked = dequantize(
        FxpVector(mask_apply(mask, state.accumulator.values), state.accumulator.scale_bits)
    )
    return m0 + alpha * masked / max(state.n_retained, 1)


def tall_mask(tau_t: TaskVector, state: MergedState, lambda_t: float) -> BitMask:
    """Bit i set iff |tau_t[i]| >= lambda_t * |tau_bar[i] - tau_t[i]|."""
    if lambda_t < 0:
        raise ValueError("lambda must be >= 0")
    tau = tau_t.delta
    if tau.shape[0] != state.length:
        raise ValueError("length mismatch between task vector and merged state")
    rest = dequantize(state.accumulator) - tau
    return BitMask.from_bools(np.abs(tau) >= lambda_t * np.abs(rest))


def tall_lambda_for_density(
    tau_t: TaskVector, state: MergedState, target_density: float, iters: int = 60
) -> float:
    """Bisect lambda so the TALL mask density lands closest to the target.

    Mask density is non-increasing in lambda; lambda = 0 gives the full mask.
    """
    if target_density >= 1.0:
        return 0.0

    def density(lam: float) -> float:
        return tall_mask(tau_t, state, lam).density

    lo, hi = 0.0, 1.0
    while density(hi) > target_density and hi < 1e12:
        hi *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if density(mid) > target_density:
            lo = mid
        else:
            hi = mid
    return hi if abs(density(hi) - target_density) <= abs(density(lo) - target_density) else lo


def tall_tune(
    tau_t: TaskVector,
    state: MergedState,
    density_grid: tuple[float, ...],
    alpha_grid: tuple[float, ...],
    features: np.ndarray,
    labels: np.ndarray,
    spec: ModelSpec,
    m0: np.ndarray,
) -> tuple[float, float]:
    """Grid-search (lambda, alpha) by accuracy on the given split.

    Candidate lambdas hit the density targets; ties break toward the smaller
    density, then the smaller alpha.
    """
    if not density_grid or not alpha_grid:
        raise ValueError("tuning grids must be nonempty")
    best = None
    for target in sorted(density_grid):
        lam = tall_lambda_for_density(tau_t, state, target)
        mask = tall_mask(tau_t, state, lam)
        for alpha in sorted(alpha_grid):
            acc = accuracy(localize_masked(state, mask, m0, alpha), spec, features, labels)
            if best is None or acc > best[0]:
                best = (acc, lam, alpha)
    return best[1], best[2]


@dataclass(frozen=True)
class EmrArtifacts:
    """Sign-elected unified vector with per-task masks and l1 rescales."""

    unified: np.ndarray
    masks: dict[int, BitMask]
    scales: dict[int, float]


def emr_build(task_vectors: list[TaskVector]) -> EmrArtifacts:
    """Elect signs from the sum, keep max aligned magnitudes, rescale per task.

    Entries whose summed sign is exactly zero are dropped from the unified
    vector and from every mask.
    """
    if not task_vectors:
        raise ValueError("emr needs at least one task vector")
    deltas = np.stack([tv.delta for tv in task_vectors])
    elected = np.sign(deltas.sum(axis=0))
    aligned = np.where(np.sign(deltas) == elected, np.abs(deltas), 0.0)
    unified = elected * aligned.max(axis=0)

    masks: dict[int, BitMask] = {}
    scales: dict[int, float] = {}
    for tv in task_vectors:
        mask = BitMask.from_bools(tv.delta * unified > 0.0)
        kept = np.linalg.norm(mask_apply(mask, unified), ord=1)
        scale = float(np.linalg.norm(tv.delta, ord=1) / kept) if kept > 0 else 1.0
        masks[tv.source_task] = mask
        scales[tv.source_task] = scale
    return EmrArtifacts(unified=unified, masks=masks, scales=scales)


def emr_localize(emr: EmrArtifacts, task_id: int, m0: np.ndarray) -> np.ndarray:
    if task_id not in emr.masks:
        raise KeyError(f"no emr mask for task {task_id}")
    return m0 + emr.scales[task_id] * mask_apply(emr.masks[task_id], emr.unified)


def ties_trim(delta: np.ndarray, density: float) -> np.ndarray:
    """Keep the top ceil(density * M) entries by magnitude, zeroing the rest.

    Magnitude ties at the cut keep the lower index (stable ordering).
    """
    m = delta.shape[0]
    k = int(np.ceil(density * m))
    if k >= m:
        return delta.copy()
    order = np.argsort(-np.abs(delta), kind="stable")
    out = np.zeros_like(delta)
    keep = order[:k]
    out[keep] = delta[keep]
    return out


def ties_merge(task_vectors: list[TaskVector], density: float) -> np.ndarray:
    """Trim, elect per-entry signs, and average the sign-agreeing entries."""
    if not (0.0 < density <= 1.0):
        raise ValueError("density must lie in (0, 1]")
    if not task_vectors:
        raise ValueError("ties needs at least one task vector")
    trimmed = np.stack([ties_trim(tv.delta, density) for tv in task_vectors])
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    counts = agree.sum(axis=0)
    sums = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
