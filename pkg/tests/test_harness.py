import csv
import functools
import json
import os

import numpy as np
import pytest

from offsetfed import dualnet, harness
from offsetfed.client import local_round
from offsetfed.config import (
    ConfigurationError,
    ExperimentConfig,
    Mode,
    Strategy,
    load_config_file,
)
from offsetfed.tensor import Tensor

TINY = ExperimentConfig(
    num_classes=4,
    per_class=20,
    dim=4,
    num_clients=4,
    classes_per_client=1,
    rounds=3,
    hidden=(8,),
    dense_width=8,
    aggregator_hidden=16,
    aggregator_steps=20,
    seed=3,
)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def assert_same_model(a, b):
    for x, y in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(x.data, y.data)


def test_single_client_single_round_is_one_local_round():
    cfg = TINY.replace(num_clients=1, classes_per_client=4, rounds=1)
    result = harness.run_experiment(cfg)

    fed = harness.build_federation(cfg)
    model, offset = fed.server.dispatch(0)
    sgd, epochs = fed.config.sgd, fed.config.epochs
    local = local_round(fed.clients[0], model, offset, sgd, epochs, fed.alpha, 0)
    assert result.dh == 1.0
    assert_same_model(result.final_model, local.model)
    final_offset = result.final_offsets[0]
    np.testing.assert_array_equal(final_offset.t.data, local.offset.t.data)


def test_fedavg_matches_distrans_without_offsets():
    distrans = harness.run_experiment(TINY.replace(alpha=0.0, strategy=Strategy.NONE))
    fedavg = harness.run_experiment(TINY.replace(mode=Mode.FEDAVG))
    assert fedavg.config.alpha == 0.0
    assert_same_model(distrans.final_model, fedavg.final_model)
    for a, b in zip(distrans.records, fedavg.records):
        assert a.test_acc == b.test_acc
        assert a.train_losses == b.train_losses
    for offset in fedavg.final_offsets:
        np.testing.assert_array_equal(offset.t.data, np.zeros(4))


def test_distrans_moves_the_offsets():
    result = harness.run_experiment(TINY)
    assert any(np.any(offset.t.data != 0.0) for offset in result.final_offsets)
    assert len(result.records) == TINY.rounds
    assert all(0.0 <= record.test_acc <= 1.0 for record in result.records)


def test_payload_accounting():
    result = harness.run_experiment(TINY)
    model_bytes = dualnet.model_nbytes(result.final_model.tensors())
    offset_bytes = dualnet.offset_nbytes(result.final_offsets[0])
    for record in result.records:
        assert record.bytes_up == [model_bytes + offset_bytes] * 4
        assert record.bytes_down == record.bytes_up
    fedavg = harness.run_experiment(TINY.replace(mode=Mode.FEDAVG))
    assert fedavg.records[0].bytes_up == [model_bytes] * 4


def test_runs_are_reproducible_across_worker_counts(tmp_path):
    first = tmp_path / "first"
    second = tmp_path / "second"
    threaded = tmp_path / "threaded"
    harness.run_experiment(TINY.replace(output_dir=str(first)))
    harness.run_experiment(TINY.replace(output_dir=str(second)))
    harness.run_experiment(TINY.replace(output_dir=str(threaded), workers=3))
    for name in ("metrics.csv", "server.csv", "partition.json"):
        assert read_bytes(first / name) == read_bytes(second / name)
        assert read_bytes(first / name) == read_bytes(threaded / name)


def test_outputs_are_written(tmp_path):
    cfg = TINY.replace(output_dir=str(tmp_path), step_log=True, debug=True)
    result = harness.run_experiment(cfg)

    rows = read_csv(tmp_path / "metrics.csv")
    assert rows[0] == harness.METRICS_HEADER
    assert len(rows) == 1 + TINY.rounds * (TINY.num_clients + 1)
    global_rows = [row for row in rows[1:] if row[1] == str(harness.GLOBAL_ROW)]
    accuracies = [r.test_acc for r in result.records]
    assert [float(row[3]) for row in global_rows] == accuracies
    assert int(global_rows[0][6]) == sum(result.records[0].bytes_up)

    server_rows = read_csv(tmp_path / "server.csv")
    assert server_rows[0] == harness.SERVER_HEADER
    assert [row[2] for row in server_rows[1:]] == ["none"] * TINY.rounds

    # 10 training samples per client, batches of 8, two phases per batch
    steps = read_csv(tmp_path / "steps.csv")
    assert len(steps) == 1 + TINY.rounds * TINY.num_clients * 2 * 2
    assert {row[4] for row in steps[1:]} == {"offset", "model"}

    assert os.path.isfile(tmp_path / harness.CONFIG_FILE)
    with open(tmp_path / "debug" / "round_0000.json", encoding="utf-8") as f:
        assert json.load(f)["round"] == 0
    with open(tmp_path / "partition.json", encoding="utf-8") as f:
        assert json.load(f)["dh"] == 1.0

    checkpoint = dualnet.load_checkpoint(str(tmp_path / "checkpoint"))
    assert checkpoint.alpha.value == TINY.alpha
    assert len(checkpoint.offsets) == TINY.num_clients
    for a, b in zip(result.final_model.tensors(), checkpoint.params.tensors()):
        np.testing.assert_array_equal(a.data.astype(np.float32), b.data)


def test_no_step_log_no_steps_file(tmp_path):
    harness.run_experiment(TINY.replace(output_dir=str(tmp_path), rounds=1))
    assert not os.path.exists(tmp_path / "steps.csv")
    assert not os.path.exists(tmp_path / "debug")


def test_saved_config_reloads(tmp_path):
    cfg = TINY.replace(output_dir=str(tmp_path), rounds=1)
    harness.run_experiment(cfg)
    values = load_config_file(str(tmp_path / harness.CONFIG_FILE))
    assert ExperimentConfig.from_mapping(values) == cfg


def test_low_heterogeneity_trains_the_offset_aggregator():
    cfg = TINY.replace(classes_per_client=4)
    result = harness.run_experiment(cfg)
    assert result.dh == 0.0
    assert [log.strategy for log in result.server_log] == [Strategy.NN] * 3
    assert result.server_log[0].aggregator_loss_initial is None
    for log in result.server_log[1:]:
        assert log.aggregator_loss_initial >= 0.0
        assert log.aggregator_loss_final is not None


def test_single_channel_mode():
    result = harness.run_experiment(TINY.replace(mode=Mode.SINGLE_CHANNEL))
    assert result.final_model.channels == 1


def test_negative_evaluation_adds_reject_samples():
    fed = harness.build_federation(TINY.replace(negative_eval=True))
    for inputs, labels in fed.test_sets:
        own = np.sum(labels != dualnet.REJECT)
        assert np.sum(labels == dualnet.REJECT) == own
        assert inputs.shape[0] == labels.shape[0]
    result = harness.run_experiment(TINY.replace(negative_eval=True, rounds=1))
    assert 0.0 <= result.final_accuracy <= 1.0


def test_frozen_partition_reproduces_the_run(tmp_path):
    harness.run_experiment(TINY.replace(output_dir=str(tmp_path / "a")))
    frozen = TINY.replace(
        partition_path=str(tmp_path / "a" / "partition.json"),
        output_dir=str(tmp_path / "b"),
    )
    harness.run_experiment(frozen)
    first = read_bytes(tmp_path / "a" / "metrics.csv")
    assert first == read_bytes(tmp_path / "b" / "metrics.csv")


def test_frozen_partition_must_fit_the_config(tmp_path):
    harness.run_experiment(TINY.replace(output_dir=str(tmp_path), rounds=1))
    path = str(tmp_path / "partition.json")
    with pytest.raises(ConfigurationError):
        harness.build_partition(
            TINY.replace(partition_path=path, num_clients=3, classes_per_client=2)
        )
    with pytest.raises(ConfigurationError):
        harness.build_partition(TINY.replace(partition_path=path, per_class=30))


def test_infeasible_configurations():
    with pytest.raises(ConfigurationError):
        TINY.replace(num_clients=2, classes_per_client=1)
    with pytest.raises(ConfigurationError):
        harness.run_experiment(TINY.replace(num_classes=32, classes_per_client=8))


def test_overhead_of_image_sized_inputs():
    report = harness.overhead_for_shape((64, 64, 3), 10, (64, 32), 32)
    assert report.offset_bytes == 49168
    assert report.weight_bytes == 3164028
    assert report.single_channel_bytes == 3159932
    assert report.delta_percent == pytest.approx(53264 / 3159932 * 100, rel=1e-12)
    assert 1.6 < report.delta_percent < 1.8


def test_overhead_formula():
    params = dualnet.init_params(6, 3, (4,), 2)
    offset = dualnet.Offset(Tensor(np.zeros(6)))
    report = harness.communication_overhead(params, offset)
    single = dualnet.model_nbytes(dualnet.single_channel_variant(params).tensors())
    double = dualnet.model_nbytes(params.tensors())
    expected = (double + 4 * 2 + 4 * 6 - single) / single * 100
    assert report.delta_percent == pytest.approx(expected)


def test_overhead_csv(tmp_path):
    path = str(tmp_path / "overhead.csv")
    harness.write_overhead_csv(path, harness.overhead_for_shape((8,), 2, (4,), 2))
    rows = read_csv(path)
    assert rows[0] == harness.OVERHEAD_HEADER
    assert len(rows) == 2


def test_alpha_sweep_at_zero_matches_fedavg(tmp_path):
    base = TINY.replace(strategy=Strategy.NONE, output_dir=str(tmp_path))
    rows = harness.ablation_sweep(base, "alpha", ["0"])
    fedavg = harness.run_experiment(TINY.replace(mode=Mode.FEDAVG))
    assert rows[0].final_accuracy == fedavg.final_accuracy
    table = read_csv(tmp_path / "sweep_alpha.csv")
    assert table[0] == harness.SWEEP_HEADER
    assert table[1][0] == "0"
    assert os.path.isfile(tmp_path / "alpha_0" / "metrics.csv")


def test_sweep_config_values():
    assert harness.sweep_config(TINY, "epochs", "3").epochs == 3
    average = harness.sweep_config(TINY, "strategy", "average")
    assert average.strategy == Strategy.AVERAGE
    assert harness.sweep_config(TINY, "channels", "single").mode == Mode.SINGLE_CHANNEL
    assert harness.sweep_config(TINY, "channels", 2).mode == Mode.DISTRANS
    assert harness.sweep_config(TINY, "clients", "6").num_clients == 6
    spread = harness.sweep_config(TINY, "classes_per_client", "2")
    assert spread.classes_per_client == 2


def test_sweep_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        harness.sweep_config(TINY, "alpha", "abc")
    with pytest.raises(ConfigurationError):
        harness.sweep_config(TINY, "alpha", "1.5")
    with pytest.raises(ConfigurationError):
        harness.sweep_config(TINY, "channels", "triple")
    with pytest.raises(ConfigurationError):
        harness.sweep_config(TINY, "strategy", "median")
    with pytest.raises(ConfigurationError):
        harness.ablation_sweep(TINY, "epochs", [])


def test_sweep_validates_every_value_before_running(tmp_path):
    with pytest.raises(ConfigurationError):
        harness.ablation_sweep(
            TINY.replace(output_dir=str(tmp_path)), "epochs", ["1", "zero"]
        )
    assert not os.path.exists(tmp_path / "epochs_1")


SINGLE_CLASS_CLIENTS = ExperimentConfig(
    num_classes=8,
    num_clients=8,
    classes_per_client=1,
    rounds=50,
    epochs=1,
    alpha=0.3,
)
SEEDS = (1, 2, 3)


@functools.lru_cache(maxsize=None)
def mean_final_accuracy(cfg):
    runs = [harness.run_experiment(cfg.replace(seed=seed)) for seed in SEEDS]
    assert all(run.dh == 1.0 for run in runs)
    return float(np.mean([run.final_accuracy for run in runs]))


@pytest.mark.slow
def test_offsets_beat_fedavg_on_single_class_clients():
    distrans = mean_final_accuracy(SINGLE_CLASS_CLIENTS)
    fedavg = mean_final_accuracy(SINGLE_CLASS_CLIENTS.replace(mode=Mode.FEDAVG))
    assert distrans >= fedavg + 0.02


@pytest.mark.slow
def test_double_channel_is_not_worse_than_single_channel():
    double = mean_final_accuracy(SINGLE_CLASS_CLIENTS)
    single = SINGLE_CLASS_CLIENTS.replace(mode=Mode.SINGLE_CHANNEL)
    assert double >= mean_final_accuracy(single)


@pytest.mark.slow
def test_one_local_epoch_is_not_worse_than_twenty():
    one = mean_final_accuracy(SINGLE_CLASS_CLIENTS)
    twenty = mean_final_accuracy(SINGLE_CLASS_CLIENTS.replace(epochs=20))
    assert one >= twenty


@pytest.mark.slow
def test_single_class_runs_are_byte_identical_across_worker_counts(tmp_path):
    for workers in (1, 4):
        out = str(tmp_path / f"workers_{workers}")
        harness.run_experiment(
            SINGLE_CLASS_CLIENTS.replace(output_dir=out, workers=workers)
        )
    for name in ("metrics.csv", "server.csv"):
        expected = read_bytes(tmp_path / "workers_1" / name)
        assert read_bytes(tmp_path / "workers_4" / name) == expected
