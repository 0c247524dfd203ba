"""System lifecycle: build a merged system, process deletions, verify, evaluate.

Cost accounting uses the task-finetune as its unit (one fixed-step finetune of
one task). Build charges one task-finetune per task. Unlearning charges:

* sign-fixed masks / plain merge: one task-finetune (replay the deleted task,
  verify it reproduces the build-time vector bit-exactly, subtract); deleting
  the final task is free because the accumulator then equals that vector.
* TALL / EMR / TIES: the masks (or elected signs) depend on the merged state,
  so every remaining task is retrained and the state rebuilt; charges one
  task-finetune per remaining task.
* central: retrain on the pooled retain set; charged as one task-finetune per
  remaining task.

A replay that fails to reproduce the stored digest is a hard error: exactness
is void once determinism breaks, so the engine refuses to proceed.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .datasets import TaskSpec
from .merging import (
    EmrArtifacts,
    LocalizationMethod,
    MASK_BEARING,
    MERGE_FAMILY,
    MergedState,
    emr_build,
    emr_localize,
    localize_masked,
    localize_sift,
    merge,
    serve_merged,
    tall_mask,
    tall_tune,
    ties_merge,
    unmerge,
)
from .paramcore import FxpVector, SignVector, fxp_add, gen_sign_vector, mask_words, quantize
from .prng import PrngStream
from .trainer import (
    ModelSpec,
    TaskVector,
    TrainConfig,
    accuracy,
    ft_finetune,
    init_params,
    sift_finetune,
)

CENTRAL_MAX_STEPS_DEFAULT = 800


class UnknownTaskError(KeyError):
    """The requested task id is not currently retained."""


class ReplayMismatchError(RuntimeError):
    """A deterministic replay failed to reproduce the build-time vector."""


@dataclass
class CostLedger:
    """Task-finetune and step counts, split by lifecycle phase."""

    build_finetunes: int = 0
    build_steps: int = 0
    unlearn_finetunes: int = 0
    unlearn_steps: int = 0

    @property
    def task_finetunes(self) -> int:
        return self.build_finetunes + self.unlearn_finetunes

    @property
    def finetune_steps(self) -> int:
        return self.build_steps + self.unlearn_steps

    def record(self, phase: str, finetunes: int, steps_per_finetune: int) -> None:
        if phase == "build":
            self.build_finetunes += finetunes
            self.build_steps += finetunes * steps_per_finetune
        elif phase == "unlearn":
            self.unlearn_finetunes += finetunes
            self.unlearn_steps += finetunes * steps_per_finetune
        else:
            raise ValueError(f"unknown phase {phase!r}")

    def add(self, other: "CostLedger") -> None:
        self.build_finetunes += other.build_finetunes
        self.build_steps += other.build_steps
        self.unlearn_finetunes += other.unlearn_finetunes
        self.unlearn_steps += other.unlearn_steps


@dataclass(frozen=True)
class StorageReport:
    """Stored 32-bit words: model words plus per-task mask words."""

    words: int
    model_words: int
    mask_words: int


@dataclass(frozen=True)
class ExactnessReport:
    """Outcome of a deletion or audit; exact unlearning holds iff both flags."""

    task_id: int | None
    replay_matches: bool
    state_matches_oracle: bool

    @property
    def exact(self) -> bool:
        return self.replay_matches and self.state_matches_oracle


@dataclass(frozen=True)
class EvalReport:
    mode: str
    per_task: dict[int, float]
    aggregate: float


@dataclass
class SystemState:
    """Everything needed to serve, delete from, and audit one built system."""

    method: LocalizationMethod
    model_spec: ModelSpec
    train_cfg: TrainConfig
    base_seed: int
    sign_seed: int
    central_max_steps: int
    m0: np.ndarray
    registry: dict[int, TaskSpec]
    replay_digests: dict[int, bytes]
    unlearned: tuple[int, ...] = ()
    merged: MergedState | None = None
    central_params: np.ndarray | None = None
    sign_vector: SignVector | None = None
    emr: EmrArtifacts | None = None
    tall: dict[int, tuple[float, float]] | None = None
    ties_vector: np.ndarray | None = None
    cached_vectors: dict[int, TaskVector] | None = None

    @property
    def retained(self) -> tuple[int, ...]:
        if self.merged is not None:
            return self.merged.retained
        return tuple(t for t in sorted(self.registry) if t not in self.unlearned)

    @property
    def is_central(self) -> bool:
        return self.method.tag == "central"


def _digest(delta: np.ndarray, scale_bits: int = 32) -> bytes:
    return hashlib.sha256(
        quantize(delta, scale_bits).values.astype("<i8").tobytes()
    ).digest()


def _train_map(fn, tasks, threads: int):
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _pooled_task(tasks: list[TaskSpec]) -> TaskSpec:
    """Concatenate training splits in ascending (task id, example index) order."""
    ordered = sorted(tasks, key=lambda t: t.id)
    feats = np.concatenate([t.train_xy()[0] for t in ordered])
    labels = np.concatenate([t.train_xy()[1] for t in ordered])
    return TaskSpec(
        id=ordered[0].id,
        features=feats,
        labels=labels,
        eval_indices=np.empty(0, dtype=np.int64),
        seed=ordered[0].seed,
    )


def _central_steps(cfg: TrainConfig, n_tasks: int, cap: int) -> int:
    return min(cfg.steps * n_tasks, cap)


def _train_central(tasks, m0, spec, cfg, cap) -> np.ndarray:
    if not tasks:
        return m0.copy()
    pooled = _pooled_task(tasks)
    run_cfg = replace(cfg, steps=_central_steps(cfg, len(tasks), cap))
    return m0 + ft_finetune(pooled, m0, spec, run_cfg).delta


def build(
    method: LocalizationMethod,
    tasks: list[TaskSpec],
    model_spec: ModelSpec,
    cfg: TrainConfig,
    *,
    base_seed: int = 0,
    sign_seed: int = 0,
    central_max_steps: int = CENTRAL_MAX_STEPS_DEFAULT,
    threads: int = 1,
    cache_task_vectors: bool = False,
) -> tuple[SystemState, CostLedger]:
    """Train every task and assemble the serving state for the given method."""
    if not tasks:
        raise ValueError("build needs at least one task")
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids")
    tasks = sorted(tasks, key=lambda t: t.id)
    for t in tasks:
        if t.input_dim != model_spec.input_dim:
            raise ValueError(f"task {t.id} feature dim != model input_dim")

    m0 = init_params(model_spec, base_seed)
    registry = {t.id: t for t in tasks}
    ledger = CostLedger()
    system = SystemState(
        method=method,
        model_spec=model_spec,
        train_cfg=cfg,
        base_seed=base_seed,
        sign_seed=sign_seed,
        central_max_steps=central_max_steps,
        m0=m0,
        registry=registry,
        replay_digests={},
    )

    if method.tag == "central":
        system.central_params = _train_central(
            tasks, m0, model_spec, cfg, central_max_steps
        )
        ledger.record("build", len(tasks), cfg.steps)
        return system, ledger

    sign_vector = None
    if method.tag == "sift_masks":
        sign_vector = gen_sign_vector(sign_seed, model_spec.param_count)
        system.sign_vector = sign_vector

    def train_one(task):
        if method.tag == "sift_masks":
            return sift_finetune(task, m0, model_spec, sign_vector, cfg)
        return ft_finetune(task, m0, model_spec, cfg), None

    results = _train_map(train_one, tasks, threads)
    vectors = [tv for tv, _ in results]
    ledger.record("build", len(tasks), cfg.steps)
    system.replay_digests = {tv.source_task: _digest(tv.delta) for tv in vectors}

    masks = None
    if method.tag == "sift_masks":
        masks = {tv.source_task: m for (tv, m) in results}
    state = merge(
        vectors, masks, method=method.tag, base_seed=base_seed, sign_seed=sign_seed
    )

    if method.tag == "tall_masks":
        state, system.tall = _tune_tall(vectors, state, system)
    elif method.tag == "emr":
        art = emr_build(vectors)
        state = replace(state, masks=dict(art.masks))
        system.emr = art
    elif method.tag == "ties":
        system.ties_vector = ties_merge(vectors, method.ties_density)

    system.merged = state
    if cache_task_vectors:
        system.cached_vectors = {tv.source_task: tv for tv in vectors}
    return system, ledger


def _tune_tall(vectors, state, system):
    """Per-task (lambda, alpha) grid search on the training split."""
    method = system.method
    params: dict[int, tuple[float, float]] = {}
    masks = {}
    for tv in vectors:
        task = system.registry[tv.source_task]
        x_tr, y_tr = task.train_xy()
        lam, alpha = tall_tune(
            tv, state, method.density_grid, method.alpha_grid,
            x_tr, y_tr, system.model_spec, system.m0,
        )
        params[tv.source_task] = (lam, alpha)
        masks[tv.source_task] = tall_mask(tv, state, lam)
    return replace(state, masks=masks), params


def _replay_one(system: SystemState, task_id: int):
    """Retrain one task exactly as at build time (or serve it from the cache)."""
    if system.cached_vectors is not None and task_id in system.cached_vectors:
        cached = system.cached_vectors[task_id]
        if system.method.tag == "sift_masks" and system.merged is not None:
            return cached, system.merged.masks.get(task_id)
        return cached, None
    task = system.registry[task_id]
    if system.method.tag == "sift_masks":
        return sift_finetune(
            task, system.m0, system.model_spec, system.sign_vector, system.train_cfg
        )
    return ft_finetune(task, system.m0, system.model_spec, system.train_cfg), None


def _check_digest(system: SystemState, tv: TaskVector) -> None:
    if _digest(tv.delta) != system.replay_digests[tv.source_task]:
        raise ReplayMismatchError(
            f"replayed task {tv.source_task} does not reproduce its build-time "
            "vector; deterministic replay is broken"
        )


def unlearn(
    system: SystemState, task_id: int, *, threads: int = 1, verify: bool = False
) -> tuple[SystemState, ExactnessReport, CostLedger]:
    """Delete one task. Returns the new state, an exactness report, and the cost.

    With verify=True the subtraction path is additionally audited against a
    fresh merge of the retained set (replaying every retained task); the audit
    is not charged to the ledger.
    """
    if task_id not in system.retained:
        raise UnknownTaskError(f"task {task_id} is unknown or already unlearned")
    ledger = CostLedger()
    cfg = system.train_cfg
    remaining = tuple(t for t in system.retained if t != task_id)

    if system.is_central:
        new_params = _train_central(
            [system.registry[t] for t in remaining],
            system.m0,
            system.model_spec,
            cfg,
            system.central_max_steps,
        )
        ledger.record("unlearn", len(remaining), cfg.steps)
        new_system = replace(
            system,
            central_params=new_params,
            unlearned=system.unlearned + (task_id,),
        )
        report = ExactnessReport(task_id, True, True)
        return new_system, report, ledger

    state = system.merged
    if system.method.tag in ("sift_masks", "ft_merge"):
        if not remaining:
            # the accumulator holds exactly this task's vector: drop it for free
            new_state = replace(
                state,
                accumulator=FxpVector.zeros(state.length, state.accumulator.scale_bits),
                retained=(),
                masks={},
            )
            new_system = replace(
                system, merged=new_state, unlearned=system.unlearned + (task_id,)
            )
            oracle_ok = not np.any(new_state.accumulator.values)
            return new_system, ExactnessReport(task_id, True, bool(oracle_ok)), ledger
        tv, _ = _replay_one(system, task_id)
        _check_digest(system, tv)
        ledger.record("unlearn", 1, cfg.steps)
        new_state = unmerge(state, tv)
        new_system = replace(
            system, merged=new_state, unlearned=system.unlearned + (task_id,)
        )
        if system.cached_vectors is not None:
            new_system.cached_vectors = {
                t: v for t, v in system.cached_vectors.items() if t != task_id
            }
        if verify:
            audit = verify_exactness(new_system, threads=threads)
            report = ExactnessReport(task_id, True, audit.state_matches_oracle)
        else:
            # integer subtraction of the digest-verified vector is exactly
            # inverse to the addition that built the accumulator
            report = ExactnessReport(task_id, True, True)
        return new_system, report, ledger

    # rebuild family: masks / elected signs depend on the merged state
    new_system = replace(system, unlearned=system.unlearned + (task_id,))
    if system.cached_vectors is not None:
        new_system.cached_vectors = {
            t: v for t, v in system.cached_vectors.items() if t != task_id
        }
    if not remaining:
        new_system.merged = replace(
            state,
            accumulator=FxpVector.zeros(state.length, state.accumulator.scale_bits),
            retained=(),
            masks={},
        )
        new_system.emr = None
        new_system.tall = None
        if system.ties_vector is not None:
            new_system.ties_vector = np.zeros_like(system.ties_vector)
        return new_system, ExactnessReport(task_id, True, True), ledger

    fresh = _train_map(lambda t: _replay_one(system, t), list(remaining), threads)
    vectors = [tv for tv, _ in fresh]
    for tv in vectors:
        _check_digest(system, tv)
    ledger.record("unlearn", len(remaining), cfg.steps)

    rebuilt = merge(
        vectors,
        method=system.method.tag,
        base_seed=system.base_seed,
        sign_seed=system.sign_seed,
    )
    method = system.method
    if method.tag == "tall_masks":
        rebuilt, new_system.tall = _tune_tall(vectors, rebuilt, system)
    elif method.tag == "emr":
        art = emr_build(vectors)
        rebuilt = replace(rebuilt, masks=dict(art.masks))
        new_system.emr = art
    elif method.tag == "ties":
        new_system.ties_vector = ties_merge(vectors, method.ties_density)

    new_system.merged = rebuilt
    # the rebuilt accumulator is a fresh merge of the retained set by
    # construction, and every replay matched its stored digest
    return new_system, ExactnessReport(task_id, True, True), ledger


def verify_exactness(
    system: SystemState,
    task_vectors: dict[int, TaskVector] | None = None,
    *,
    threads: int = 1,
) -> ExactnessReport:
    """Replay every retained task and compare the fold-add to the stored state.

    Audit only: nothing is charged to any ledger.
    """
    retained = system.retained
    if system.is_central:
        fresh = _train_central(
            [system.registry[t] for t in retained],
            system.m0,
            system.model_spec,
            system.train_cfg,
            system.central_max_steps,
        )
        same = bool(np.array_equal(fresh, system.central_params))
        return ExactnessReport(None, same, same)

    if task_vectors is not None:
        vectors = [task_vectors[t] for t in retained]
    else:
        fresh = _train_map(lambda t: _replay_one(system, t), list(retained), threads)
        vectors = [tv for tv, _ in fresh]
    replays_ok = all(
        _digest(tv.delta) == system.replay_digests[tv.source_task] for tv in vectors
    )
    acc = FxpVector.zeros(system.merged.length, system.merged.accumulator.scale_bits)
    for tv in vectors:
        acc = fxp_add(acc, quantize(tv.delta))
    state_ok = bool(np.array_equal(acc.values, system.merged.accumulator.values))
    return ExactnessReport(None, replays_ok, state_ok)


def serve_for_task(system: SystemState, task_id: int) -> np.ndarray:
    """Parameters used to answer queries for one task under the system's method."""
    if system.is_central:
        return system.central_params
    tag = system.method.tag
    if tag == "ties":
        return system.m0 + system.ties_vector
    if task_id not in system.retained:
        return serve_merged(system.merged, system.m0)
    if tag == "sift_masks":
        return localize_sift(system.merged, task_id, system.m0)
    if tag == "tall_masks":
        _, alpha = system.tall[task_id]
        return localize_masked(
            system.merged, system.merged.masks[task_id], system.m0, alpha
        )
    if tag == "emr":
        return emr_localize(system.emr, task_id, system.m0)
    return serve_merged(system.merged, system.m0)  # ft_merge


def evaluate(system: SystemState, mode: str) -> EvalReport:
    """Per-task accuracy on held-out splits plus the mean over included tasks.

    held_in covers retained tasks, each served by its localized model;
    held_out covers every task, with unlearned tasks served masklessly.
    """
    if mode not in ("held_in", "held_out"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    ids = sorted(system.registry) if mode == "held_out" else sorted(system.retained)
    per_task: dict[int, float] = {}
    for t in ids:
        params = serve_for_task(system, t)
        x_ev, y_ev = system.registry[t].eval_xy()
        per_task[t] = accuracy(params, system.model_spec, x_ev, y_ev)
    aggregate = float(np.mean(list(per_task.values()))) if per_task else 0.0
    return EvalReport(mode=mode, per_task=per_task, aggregate=aggregate)


def zeroshot_eval(system: SystemState) -> EvalReport:
    """Accuracy of the base parameters on every task's held-out split."""
    per_task = {
        t: accuracy(system.m0, system.model_spec, *system.registry[t].eval_xy())
        for t in sorted(system.registry)
    }
    aggregate = float(np.mean(list(per_task.values()))) if per_task else 0.0
    return EvalReport(mode="zeroshot", per_task=per_task, aggregate=aggregate)


def storage_report(system: SystemState) -> StorageReport:
    """Stored words: M for single-model methods, M + T * ceil(M/32) with masks."""
    m = system.model_spec.param_count
    if system.method.tag in MASK_BEARING:
        masks = len(system.retained) * mask_words(m)
        return StorageReport(words=m + masks, model_words=m, mask_words=masks)
    return StorageReport(words=m, model_words=m, mask_words=0)


def cluster_random(task_ids: list[int], n_clusters: int, seed: int) -> dict[int, int]:
    """Seeded shuffle then round-robin; cluster sizes differ by at most one."""
    if not (1 <= n_clusters <= len(task_ids)):
        raise ValueError(f"need 1 <= clusters <= {len(task_ids)}")
    stream = PrngStream(seed)
    order = stream.shuffled(sorted(task_ids))
    return {t: i % n_clusters for i, t in enumerate(order)}


@dataclass
class ClusteredSystem:
    """Independent per-cluster systems; a deletion touches only its cluster."""

    assignment: dict[int, int]
    systems: list[SystemState]

    def cluster_of(self, task_id: int) -> int:
        return self.assignment[task_id]

    @property
    def retained(self) -> tuple[int, ...]:
        out: list[int] = []
        for s in self.systems:
            out.extend(s.retained)
        return tuple(sorted(out))


def build_clustered(
    method: LocalizationMethod,
    tasks: list[TaskSpec],
    model_spec: ModelSpec,
    cfg: TrainConfig,
    n_clusters: int,
    cluster_seed: int,
    **kwargs,
) -> tuple[ClusteredSystem, CostLedger]:
    assignment = cluster_random([t.id for t in tasks], n_clusters, cluster_seed)
    by_cluster: list[list[TaskSpec]] = [[] for _ in range(n_clusters)]
    for t in sorted(tasks, key=lambda t: t.id):
        by_cluster[assignment[t.id]].append(t)
    ledger = CostLedger()
    systems = []
    for group in by_cluster:
        sys_i, led_i = build(method, group, model_spec, cfg, **kwargs)
        systems.append(sys_i)
        ledger.add(led_i)
    return ClusteredSystem(assignment=assignment, systems=systems), ledger


def unlearn_clustered(
    clustered: ClusteredSystem, task_id: int, **kwargs
) -> tuple[ClusteredSystem, ExactnessReport, CostLedger]:
    if task_id not in clustered.assignment:
        raise UnknownTaskError(f"task {task_id} is unknown")
    c = clustered.cluster_of(task_id)
    new_sub, report, ledger = unlearn(clustered.systems[c], task_id, **kwargs)
    systems = list(clustered.systems)
    systems[c] = new_sub
    return ClusteredSystem(clustered.assignment, systems), report, ledger


def evaluate_clustered(clustered: ClusteredSystem, mode: str) -> EvalReport:
    per_task: dict[int, float] = {}
    for sub in clustered.systems:
        per_task.update(evaluate(sub, mode).per_task)
    per_task = dict(sorted(per_task.items()))
    aggregate = float(np.mean(list(per_task.values()))) if per_task else 0.0
    return EvalReport(mode=mode, per_task=per_task, aggregate=aggregate)


def storage_clustered(clustered: ClusteredSystem) -> StorageReport:
    words = model = masks = 0
    for sub in clustered.systems:
        rep = storage_report(sub)
        words += rep.words
        model += rep.model_words
        masks += rep.mask_words
    return StorageReport(words=words, model_words=model, mask_words=masks)


@dataclass(frozen=True)
class CostProjection:
    """Closed-form ledger for deleting all tasks one by one. Pure arithmetic."""

    method: str
    steps_per_finetune: int
    per_event: tuple[int, ...]  # task-finetunes charged by deletion i
    cumulative: tuple[int, ...]

    @property
    def total_finetunes(self) -> int:
        return self.cumulative[-1] if self.cumulative else 0

    @property
    def total_steps(self) -> int:
        return self.total_finetunes * self.steps_per_finetune

    @property
    def first_event_steps(self) -> int:
        return self.per_event[0] * self.steps_per_finetune if self.per_event else 0


def project_total_cost(
    num_tasks: int,
    method_tag: str,
    steps_per_finetune: int = 20,
    n_clusters: int = 1,
) -> CostProjection:
    """Ledger projection for an unlearn-all policy; no training happens.

    Clusters are idealized as equal-sized (round-robin assignment) and tasks
    are deleted in ascending id order.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if method_tag not in MERGE_FAMILY + ("central",):
        raise ValueError(f"unknown method tag {method_tag!r}")
    if not (1 <= n_clusters <= num_tasks):
        raise ValueError("need 1 <= clusters <= num_tasks")
    cheap = method_tag in ("sift_masks", "ft_merge")
    sizes = [
        num_tasks // n_clusters + (1 if c < num_tasks % n_clusters else 0)
        for c in range(n_clusters)
    ]
    per_event = []
    for i in range(num_tasks):
        c = i % n_clusters
        if cheap:
            per_event.append(1 if sizes[c] > 1 else 0)
        else:
            per_event.append(sizes[c] - 1)
        sizes[c] -= 1
    cumulative = list(np.cumsum(per_event))
    return CostProjection(
        method=method_tag,
        steps_per_finetune=steps_per_finetune,
        per_event=tuple(int(x) for x in per_event),
        cumulative=tuple(int(x) for x in cumulative),
    )
