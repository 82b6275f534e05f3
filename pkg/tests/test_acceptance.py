"""
卓上規模の受け入れテスト（実データ、BIASBLEND_DATA が必要）

pytest -m slow で実行。CPU で数十分かかる。
"""
import os

import numpy as np
import pytest

from src.interp_trainer import (
    ScheduleMode,
    ScheduleSpec,
    TrainConfig,
    alpha_sweep,
    final_accuracies,
    prepare_data,
    run_interpolated_training,
)
from src.models import extract_prior_fc
from src.selftest import check_conv_equivalence
from src.tensor_core import Rng

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def desk_config(cifar_dir, subset, epochs, **kwargs):
    return TrainConfig(data_dir=cifar_dir, subset=subset, epochs=epochs, **kwargs)


@pytest.fixture(scope="module")
def desk_data():
    path = os.environ.get("BIASBLEND_DATA")
    if not path:
        pytest.skip("BIASBLEND_DATA is not set")
    return {n: prepare_data(TrainConfig(data_dir=path, subset=n)) for n in (2000, 5000)}


def test_conv_equivalence_on_every_layer_shape():
    passed, detail = check_conv_equivalence(Rng(0), pairs=20)
    assert passed, detail


def test_alpha_endpoints(cifar_dir, desk_data):
    data = desk_data[2000]
    zero = run_interpolated_training(
        desk_config(cifar_dir, 2000, 5, schedule=ScheduleSpec(ScheduleMode.CONSTANT, a=0.0)), data
    )
    plain = run_interpolated_training(
        desk_config(cifar_dir, 2000, 5, schedule=ScheduleSpec(ScheduleMode.NONE)), data
    )
    for ours, theirs in zip(zero.imlp.params, plain.imlp.params):
        np.testing.assert_array_equal(ours["weight"], theirs["weight"])

    seen = []

    one = run_interpolated_training(
        desk_config(
            cifar_dir, 2000, 5, schedule=ScheduleSpec(ScheduleMode.CONSTANT, a=1.0),
            interpolate_bias=True, interpolate_head=True,
        ),
        data, on_epoch=lambda epoch, records: seen.append(epoch),
    )
    for i, fc in zip(one.imlp.interpolable_layers(), extract_prior_fc(one.prior)):
        np.testing.assert_array_equal(one.imlp.params[i]["weight"], fc.matrix)
    top1 = final_accuracies(one.records)
    assert abs(top1["i-mlp-cnn"] - top1["s-cnn"]) <= 0.5
    assert seen == [1, 2, 3, 4, 5]


def test_zero_exponent_decay_matches_constant(cifar_dir, desk_data):
    data = desk_data[2000]
    decay = run_interpolated_training(
        desk_config(cifar_dir, 2000, 2, schedule=ScheduleSpec(ScheduleMode.POLY_DECAY, a=0.5, k=0.0)), data
    )
    constant = run_interpolated_training(
        desk_config(cifar_dir, 2000, 2, schedule=ScheduleSpec(ScheduleMode.CONSTANT, a=0.5)), data
    )
    for ours, theirs in zip(decay.imlp.params, constant.imlp.params):
        np.testing.assert_array_equal(ours["weight"], theirs["weight"])


def test_smlp_learns_at_desk_scale(cifar_dir, desk_data):
    result = run_interpolated_training(
        desk_config(cifar_dir, 5000, 10, schedule=ScheduleSpec(ScheduleMode.NONE)), desk_data[5000]
    )
    assert len(result.records) == 10
    assert final_accuracies(result.records)["s-mlp"] >= 30.0


def test_desk_run_records_every_epoch(cifar_dir, desk_data):
    result = run_interpolated_training(
        desk_config(cifar_dir, 5000, 10, schedule=ScheduleSpec(ScheduleMode.CONSTANT, a=0.5)), desk_data[5000]
    )
    for name in ("i-mlp-cnn", "s-cnn"):
        rows = [r for r in result.records if r.model == name]
        assert len(rows) == 10
        assert all(r.alpha_used == 0.5 for r in rows)


def test_test_time_interpolation_is_worse_than_both_endpoints(cifar_dir, desk_data):
    combined, endpoints = [], []
    for seed in SEEDS:
        config = desk_config(
            cifar_dir, 5000, 10, seed=seed,
            schedule=ScheduleSpec(ScheduleMode.TEST_TIME_ONLY, alpha_test=0.5),
        )
        top1 = final_accuracies(run_interpolated_training(config, desk_data[5000]).records)
        combined.append(top1["i-mlp-cnn@test-time"])
        endpoints.append(min(top1["i-mlp-cnn"], top1["s-cnn"]))
    assert np.mean(combined) < np.mean(endpoints)


def test_budget_gain_is_larger_for_concentrated_interpolation(cifar_dir, desk_data):
    gains = {}
    for arch in ("budget-1", "budget-2"):
        scores = {"baseline": [], "interpolated": []}
        for seed in SEEDS:
            for column, mode in (("baseline", ScheduleMode.NONE), ("interpolated", ScheduleMode.CONSTANT)):
                config = desk_config(
                    cifar_dir, 5000, 10, seed=seed, arch=arch, schedule=ScheduleSpec(mode, a=0.5)
                )
                result = run_interpolated_training(config, desk_data[5000])
                scores[column].append(final_accuracies(result.records)[result.imlp.arch])
        gains[arch] = np.mean(scores["interpolated"]) - np.mean(scores["baseline"])
    assert gains["budget-2"] > gains["budget-1"]


def test_alpha_sweep_has_interior_minimum(cifar_dir, desk_data):
    alphas = [0.0, 1e-3, 5e-3, 1e-1, 1.0]
    rows, table = alpha_sweep(desk_config(cifar_dir, 5000, 10), alphas, SEEDS, desk_data[5000])
    assert len(rows) == len(alphas) * len(SEEDS)
    means = [mean for _, mean, _ in table]
    assert min(means[1:-1]) < min(means[0], means[-1])
    assert any(std > 0 for _, _, std in table)
