import numpy as np
import pytest

from siftmasks.datasets import HeterogeneityRegime, synth_generate
from siftmasks.engine import (
    CostLedger,
    ReplayMismatchError,
    UnknownTaskError,
    build,
    build_clustered,
    cluster_random,
    evaluate,
    evaluate_clustered,
    project_total_cost,
    storage_clustered,
    storage_report,
    unlearn,
    unlearn_clustered,
    verify_exactness,
    zeroshot_eval,
)
from siftmasks.merging import LocalizationMethod
from siftmasks.paramcore import FxpVector
from siftmasks.trainer import ModelSpec, TrainConfig, ft_finetune, init_params

SPEC = ModelSpec("logistic", 10, 3)
CFG = TrainConfig(steps=20, batch_size=16, learning_rate=0.05, seed=99)


def build_system(method_tag, tasks, **kwargs):
    return build(LocalizationMethod(method_tag), tasks, SPEC, CFG, base_seed=1,
                 sign_seed=2, **kwargs)


# ---------- build and ledger ----------


def test_build_ledger_counts(conflicting_tasks):
    _, ledger = build_system("sift_masks", conflicting_tasks[:8])
    assert ledger.task_finetunes == 8
    assert ledger.finetune_steps == 160
    assert ledger.build_finetunes == 8 and ledger.unlearn_finetunes == 0


def test_build_rejects_empty_and_duplicates(conflicting_tasks):
    with pytest.raises(ValueError, match="at least one task"):
        build_system("ft_merge", [])
    with pytest.raises(ValueError, match="duplicate"):
        build_system("ft_merge", [conflicting_tasks[0], conflicting_tasks[0]])


def test_threaded_build_bit_identical(conflicting_tasks):
    seq, _ = build_system("sift_masks", conflicting_tasks)
    par, _ = build_system("sift_masks", conflicting_tasks, threads=4)
    assert np.array_equal(
        seq.merged.accumulator.values, par.merged.accumulator.values
    )
    assert seq.merged.masks[3] == par.merged.masks[3]


# ---------- storage ----------


def test_storage_words_formula_with_ceiling():
    # M = 1000 is not a multiple of 32, so the ceiling term applies
    spec = ModelSpec("logistic", 24, 40)  # 24*40+40 = 1000
    assert spec.param_count == 1000
    tasks = synth_generate(HeterogeneityRegime("similar"), 64, 6, 24, 40, seed=3)
    cfg = TrainConfig(steps=0, batch_size=8, learning_rate=0.1, seed=1)
    system, _ = build(LocalizationMethod("sift_masks"), tasks, spec, cfg)
    report = storage_report(system)
    assert report.words == 1000 + 64 * 32 == 3048
    ft, _ = build(LocalizationMethod("ft_merge"), tasks, spec, cfg)
    assert storage_report(ft).words == 1000
    central, _ = build(LocalizationMethod("central"), tasks, spec, cfg)
    assert storage_report(central).words == 1000


def test_storage_monotone_under_unlearning(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks)
    words = [storage_report(system).words]
    for u in (0, 3, 6):
        system, _, _ = unlearn(system, u)
        words.append(storage_report(system).words)
    assert all(a >= b for a, b in zip(words, words[1:]))


# ---------- unlearning: subtraction family ----------


def test_unlearn_matches_fresh_build_bit_exact(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks)
    for u in (2, 5, 0):
        system, report, _ = unlearn(system, u)
        assert report.replay_matches and report.state_matches_oracle
    fresh, _ = build_system(
        "sift_masks", [t for t in conflicting_tasks if t.id not in (0, 2, 5)]
    )
    assert np.array_equal(
        system.merged.accumulator.values, fresh.merged.accumulator.values
    )
    assert system.merged.masks.keys() == fresh.merged.masks.keys()


def test_unlearn_order_independent_state_and_cost(conflicting_tasks):
    orders = [(2, 5, 0), (0, 2, 5), (5, 0, 2)]
    finals = []
    costs = []
    for order in orders:
        system, _ = build_system("sift_masks", conflicting_tasks)
        total = CostLedger()
        for u in order:
            system, _, delta = unlearn(system, u)
            total.add(delta)
        finals.append(system.merged.accumulator.values)
        costs.append(total.unlearn_finetunes)
    assert np.array_equal(finals[0], finals[1])
    assert np.array_equal(finals[0], finals[2])
    assert costs[0] == costs[1] == costs[2] == 3


def test_unlearn_unknown_or_repeated_id(conflicting_tasks):
    system, _ = build_system("ft_merge", conflicting_tasks[:3])
    with pytest.raises(UnknownTaskError):
        unlearn(system, 99)
    system, _, _ = unlearn(system, 1)
    with pytest.raises(UnknownTaskError):
        unlearn(system, 1)


def test_unlearn_last_task_is_free(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks[:2])
    system, _, d1 = unlearn(system, 0)
    assert d1.unlearn_finetunes == 1
    system, report, d2 = unlearn(system, 1)
    assert d2.unlearn_finetunes == 0  # accumulator equals the last vector
    assert report.exact
    assert not system.merged.accumulator.values.any()


def test_unlearn_cost_single_deletion_by_method(conflicting_tasks):
    tasks = conflicting_tasks[:6]
    for tag, expected in (("sift_masks", 1), ("ft_merge", 1), ("tall_masks", 5),
                          ("emr", 5), ("ties", 5), ("central", 5)):
        system, _ = build_system(tag, tasks)
        _, _, delta = unlearn(system, tasks[0].id)
        assert delta.unlearn_finetunes == expected, tag
        assert delta.unlearn_steps == expected * CFG.steps


def test_replay_mismatch_is_hard_error(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks[:4])
    system.replay_digests[2] = b"\x00" * 32  # corrupt the stored digest
    with pytest.raises(ReplayMismatchError, match="task 2"):
        unlearn(system, 2)


# ---------- unlearning: rebuild family ----------


@pytest.mark.parametrize("tag", ["tall_masks", "emr", "ties"])
def test_rebuild_family_matches_fresh_build(tag, conflicting_tasks):
    tasks = conflicting_tasks[:5]
    system, _ = build_system(tag, tasks)
    system, report, delta = unlearn(system, 2)
    assert report.exact
    assert delta.unlearn_finetunes == 4
    fresh, _ = build_system(tag, [t for t in tasks if t.id != 2])
    assert np.array_equal(
        system.merged.accumulator.values, fresh.merged.accumulator.values
    )
    if tag == "tall_masks":
        assert system.tall == fresh.tall
        for t in fresh.retained:
            assert system.merged.masks[t] == fresh.merged.masks[t]
    elif tag == "emr":
        assert np.array_equal(system.emr.unified, fresh.emr.unified)
        assert system.emr.scales == fresh.emr.scales
    else:
        assert np.array_equal(system.ties_vector, fresh.ties_vector)


def test_central_unlearn_matches_fresh_build(conflicting_tasks):
    tasks = conflicting_tasks[:5]
    system, _ = build_system("central", tasks)
    system, report, delta = unlearn(system, 3)
    assert delta.unlearn_finetunes == 4
    fresh, _ = build_system("central", [t for t in tasks if t.id != 3])
    assert np.array_equal(system.central_params, fresh.central_params)
    assert report.exact


def test_cached_vectors_skip_retraining_same_result(conflicting_tasks):
    tasks = conflicting_tasks[:5]
    cached, _ = build_system("emr", tasks, cache_task_vectors=True)
    plain, _ = build_system("emr", tasks)
    c_after, _, c_cost = unlearn(cached, 1)
    p_after, _, p_cost = unlearn(plain, 1)
    assert c_cost.unlearn_finetunes == p_cost.unlearn_finetunes == 4  # ledger unchanged
    assert np.array_equal(
        c_after.merged.accumulator.values, p_after.merged.accumulator.values
    )


# ---------- verification ----------


def test_verify_fresh_system(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks[:4])
    report = verify_exactness(system)
    assert report.replay_matches and report.state_matches_oracle


def test_verify_after_deletions_any_order(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks)
    for u in (7, 1, 4):
        system, _, _ = unlearn(system, u)
    report = verify_exactness(system)
    assert report.exact


def test_verify_detects_corrupted_accumulator(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks[:4])
    values = system.merged.accumulator.values.copy()
    values[0] += 1  # flip one word
    from dataclasses import replace

    system.merged = replace(
        system.merged, accumulator=FxpVector(values, system.merged.accumulator.scale_bits)
    )
    report = verify_exactness(system)
    assert report.replay_matches  # replays still reproduce their digests
    assert not report.state_matches_oracle


def test_verify_central(conflicting_tasks):
    system, _ = build_system("central", conflicting_tasks[:4])
    assert verify_exactness(system).exact
    system.central_params = system.central_params + 1e-9
    assert not verify_exactness(system).exact


def test_unlearn_with_inline_verify(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks[:4])
    system, report, _ = unlearn(system, 1, verify=True)
    assert report.state_matches_oracle


# ---------- evaluation ----------


def test_held_in_equals_held_out_before_any_deletion(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks)
    held_in = evaluate(system, "held_in")
    held_out = evaluate(system, "held_out")
    assert held_in.per_task == held_out.per_task
    assert held_in.aggregate == held_out.aggregate


def test_all_unlearned_serves_base_model(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks[:4])
    for u in (0, 1, 2, 3):
        system, _, _ = unlearn(system, u)
    held_out = evaluate(system, "held_out")
    zeroshot = zeroshot_eval(system)
    assert held_out.per_task == zeroshot.per_task


def test_unlearned_tasks_served_masklessly(conflicting_tasks):
    system, _ = build_system("sift_masks", conflicting_tasks)
    system, _, _ = unlearn(system, 0)
    from siftmasks.engine import serve_for_task
    from siftmasks.merging import serve_merged

    assert np.array_equal(
        serve_for_task(system, 0), serve_merged(system.merged, system.m0)
    )


def test_evaluate_rejects_unknown_mode(conflicting_tasks):
    system, _ = build_system("ft_merge", conflicting_tasks[:2])
    with pytest.raises(ValueError, match="unknown evaluation mode"):
        evaluate(system, "both")


# ---------- clustering ----------


def test_cluster_random_shapes_and_determinism():
    ids = list(range(10))
    a = cluster_random(ids, 3, seed=4)
    b = cluster_random(ids, 3, seed=4)
    assert a == b
    sizes = np.bincount(list(a.values()), minlength=3)
    assert sizes.max() - sizes.min() <= 1
    with pytest.raises(ValueError):
        cluster_random(ids, 0, seed=1)
    with pytest.raises(ValueError):
        cluster_random(ids, 11, seed=1)


def test_single_cluster_equals_unclustered(conflicting_tasks):
    plain, plain_led = build_system("sift_masks", conflicting_tasks)
    clustered, led = build_clustered(
        LocalizationMethod("sift_masks"), conflicting_tasks, SPEC, CFG,
        n_clusters=1, cluster_seed=11, base_seed=1, sign_seed=2,
    )
    only = clustered.systems[0]
    assert np.array_equal(
        only.merged.accumulator.values, plain.merged.accumulator.values
    )
    assert led.task_finetunes == plain_led.task_finetunes
    assert evaluate_clustered(clustered, "held_in").per_task == evaluate(plain, "held_in").per_task


def test_singleton_clusters_central_equals_local_ft(conflicting_tasks):
    tasks = conflicting_tasks[:4]
    clustered, _ = build_clustered(
        LocalizationMethod("central"), tasks, SPEC, CFG,
        n_clusters=4, cluster_seed=11, base_seed=1, sign_seed=2,
    )
    m0 = init_params(SPEC, 1)
    for sub in clustered.systems:
        (tid,) = sub.retained
        task = next(t for t in tasks if t.id == tid)
        local = m0 + ft_finetune(task, m0, SPEC, CFG).delta
        assert np.array_equal(sub.central_params, local)


def test_clustered_unlearn_touches_one_cluster(conflicting_tasks):
    clustered, _ = build_clustered(
        LocalizationMethod("central"), conflicting_tasks, SPEC, CFG,
        n_clusters=2, cluster_seed=11, base_seed=1, sign_seed=2,
    )
    target = conflicting_tasks[0].id
    c = clustered.cluster_of(target)
    other = 1 - c
    before = clustered.systems[other].central_params.copy()
    after, report, delta = unlearn_clustered(clustered, target)
    assert np.array_equal(after.systems[other].central_params, before)
    cluster_size = sum(1 for t, ci in clustered.assignment.items() if ci == c)
    assert delta.unlearn_finetunes == cluster_size - 1
    assert report.exact
    with pytest.raises(UnknownTaskError):
        unlearn_clustered(after, 999)


def test_clustered_storage_sums(conflicting_tasks):
    clustered, _ = build_clustered(
        LocalizationMethod("central"), conflicting_tasks, SPEC, CFG,
        n_clusters=4, cluster_seed=11, base_seed=1, sign_seed=2,
    )
    assert storage_clustered(clustered).words == 4 * SPEC.param_count


# ---------- cost projection ----------


def test_projection_totals_fig7():
    central = project_total_cost(500, "central")
    merge_fam = project_total_cost(500, "sift_masks")
    assert central.total_finetunes == 124750
    assert merge_fam.total_finetunes == 499
    assert central.total_finetunes / merge_fam.total_finetunes == 250.0


def test_projection_first_deletion_costs():
    assert project_total_cost(100, "sift_masks").per_event[0] == 1
    assert project_total_cost(100, "tall_masks").per_event[0] == 99
    assert project_total_cost(100, "central").per_event[0] == 99
    assert project_total_cost(500, "tall_masks", 20).first_event_steps == 9980
    assert project_total_cost(100, "central", n_clusters=4).per_event[0] == 24


def test_projection_monotone_and_shapes():
    proj = project_total_cost(10, "central", 20)
    assert len(proj.per_event) == 10
    assert proj.per_event[-1] == 0
    assert list(proj.cumulative) == list(np.cumsum(proj.per_event))
    assert proj.total_steps == proj.total_finetunes * 20


@pytest.mark.parametrize("tag", ["sift_masks", "ft_merge", "tall_masks", "central"])
def test_engine_unlearn_all_matches_projection(tag, conflicting_tasks):
    tasks = conflicting_tasks[:6]
    system, _ = build_system(tag, tasks)
    total = CostLedger()
    for t in tasks:
        system, _, delta = unlearn(system, t.id)
        total.add(delta)
    proj = project_total_cost(6, tag, CFG.steps)
    assert total.unlearn_finetunes == proj.total_finetunes
    assert total.unlearn_steps == proj.total_steps


@pytest.mark.parametrize("tag", ["sift_masks", "ft_merge", "tall_masks", "emr", "ties", "central"])
def test_evaluate_every_method_both_modes(tag, conflicting_tasks):
    tasks = conflicting_tasks[:5]
    system, _ = build_system(tag, tasks)
    system, _, _ = unlearn(system, 1)
    for mode in ("held_in", "held_out"):
        report = evaluate(system, mode)
        assert all(0.0 <= v <= 1.0 for v in report.per_task.values())
    assert set(evaluate(system, "held_in").per_task) == {0, 2, 3, 4}
    assert set(evaluate(system, "held_out").per_task) == {0, 1, 2, 3, 4}


def test_verify_with_provided_vectors(conflicting_tasks):
    tasks = conflicting_tasks[:4]
    system, _ = build_system("ft_merge", tasks)
    m0 = init_params(SPEC, 1)
    vectors = {t.id: ft_finetune(t, m0, SPEC, CFG) for t in tasks}
    report = verify_exactness(system, vectors)
    assert report.exact
    bad = dict(vectors)
    bad[2] = ft_finetune(tasks[2], m0, SPEC,
                         TrainConfig(steps=19, batch_size=16, learning_rate=0.05, seed=99))
    report = verify_exactness(system, bad)
    assert not report.replay_matches and not report.state_matches_oracle


def test_projection_rejects_bad_arguments():
    with pytest.raises(ValueError):
        project_total_cost(0, "central")
    with pytest.raises(ValueError):
        project_total_cost(10, "magic")
    with pytest.raises(ValueError):
        project_total_cost(10, "central", n_clusters=11)
