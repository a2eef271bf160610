"""Acceptance suite: one test per release criterion, each printing a PASS
line with the measured quantity (run with ``pytest tests/test_acceptance.py
-v -s`` to see them).

The end-to-end benchmark (criterion 5) trains both modality CNNs over five
seeded splits at desk scale; its accuracies were pinned at the first
measured run and double as regression values. The same run feeds the
cross-modality correlation table of criterion 4.
"""

import itertools
import time

import numpy as np
import pytest

from mgaf import cli, cnn, imaging, svm
from mgaf.diagnostics import ncc
from mgaf.gaf import fuse, high_boost_kernel
from mgaf.ingest import synth_generate
from mgaf.ops import sigmoid
from mgaf.pipeline import ExperimentConfig, prepare_instances, run_experiment
from reference import (fd_param_gradients, max_relative_error,
                       svm_objective_grid_search)

BENCH_CONFIG = ExperimentConfig(
    classes=4, instances=40, frames=3, noise=2.5, epochs=4, val_fraction=0.0,
    splits=5, dtype="float32", svm_epochs=60, seed=42,
    modes=("gated_average", "average", "gated_no_kernel", "concat"),
    unimodal_baselines=True,
)

# first measured run of BENCH_CONFIG on the reference environment
PINNED_MEAN_ACCURACY = {
    "gated_average": 0.9625,
    "average": 0.9625,
    "gated_no_kernel": 0.96875,
    "concat": 0.89375,
    "unimodal_si": 0.59375,
    "unimodal_sfi": 0.9125,
}


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    report = run_experiment(BENCH_CONFIG)
    return report, time.perf_counter() - t0


def test_criterion_1_gradient_correctness():
    config = cnn.CnnConfig(n_classes=3, input_shape=(8, 8, 1),
                           conv_channels=(2, 3, 3), kernel_sizes=(3, 2, 2),
                           pool_after=(0,), fc_width=4, batch_size=4)
    model = cnn.init(config, seed=1)
    rng = np.random.default_rng(100)
    for name, p in model.parameters().items():
        if name.endswith("_b"):
            p += rng.normal(0, 0.05, p.shape)  # keep ReLU inputs off the kink
    x = rng.normal(size=(8, 8, 1, 4))
    y = np.array([0, 1, 2, 1])
    t0 = time.perf_counter()
    _, grads = cnn._gradients(model, cnn._to_batch_major(model, x), y)
    for name, p in model.parameters().items():
        if name.endswith("_w"):
            grads[name] = grads[name] + config.l2 * p
    fd = fd_param_gradients(model, x, y)  # every parameter, no sampling
    worst = max_relative_error(grads, fd)
    elapsed = time.perf_counter() - t0
    assert worst < 1e-4
    assert elapsed < 30.0
    print(f"ACCEPTANCE 1 PASS: gradient check max rel err {worst:.2e} "
          f"over {model.n_parameters()} params in {elapsed:.1f}s")


def test_criterion_2_gaf_algebra():
    kernel = high_boost_kernel(1.0)
    expected = np.array([[-1.0, -1.0, -1.0], [-1.0, 9.0, -1.0], [-1.0, -1.0, -1.0]])
    assert np.array_equal(kernel, expected)

    rng = np.random.default_rng(7)
    f1, f2 = rng.normal(size=(6, 11)), rng.normal(size=(6, 11))
    assert np.array_equal(fuse([f1, f2], "average", kernel), f1 + f2)
    assert np.array_equal(fuse([f1, f2], "gated_no_kernel", kernel),
                          sigmoid(f1) * f1 + sigmoid(f2) * f2)
    for k in (1, 2, 3, 4):
        mats = [rng.normal(size=(6, 11)) for _ in range(k)]
        for mode in ("gated_average", "average", "gated_no_kernel"):
            assert fuse(mats, mode, kernel).shape == (6, 11)
    print("ACCEPTANCE 2 PASS: high-boost kernel exact; average=sum and "
          "no-kernel gating bit-exact; fused dims preserved for k=1..4")


def test_criterion_3_signal_image_contract():
    rng = np.random.default_rng(13)
    stack = imaging.signal_stack(rng.normal(size=(6, 80)), start=0, window=52)
    assert stack.shape == (24, 52)
    order = imaging.stacking_order()
    assert order == [1, 2, 3, 4, 5, 6, 1, 3, 5, 2, 4, 6,
                     1, 4, 2, 5, 3, 6, 1, 5, 2, 6, 1, 6]
    adjacent = {frozenset(p) for p in zip(order, order[1:]) if p[0] != p[1]}
    wanted = {frozenset(p) for p in itertools.combinations(range(1, 7), 2)}
    assert wanted <= adjacent
    print("ACCEPTANCE 3 PASS: 24x52 pre-resize stack, exact stacking order, "
          "all 15 channel pairs adjacent")


def test_criterion_4_ncc_properties_and_table(benchmark):
    rng = np.random.default_rng(21)
    f = rng.normal(size=(12, 9))
    g = rng.normal(size=(12, 9))
    assert abs(ncc(f, f) - 1.0) < 1e-12
    assert abs(ncc(f, -f) + 1.0) < 1e-12
    assert abs(ncc(f, g)) <= 1.0 + 1e-12
    assert abs(ncc(3.0 * f + 2.0, g) - ncc(f, g)) < 1e-10
    report, _ = benchmark
    table = dict(report.mean_ncc())
    assert set(table) == {"conv1", "conv2", "conv3"}
    for value in table.values():
        assert abs(value) <= 1.0 + 1e-12
    print("ACCEPTANCE 4 PASS: ncc identities and affine invariance hold; "
          f"trained-run table (reported, not matched): {table}")


def test_criterion_5_synthetic_benchmark(benchmark):
    report, elapsed = benchmark
    assert elapsed <= 300.0
    means = {mode: report.mean_accuracy(mode) for mode in PINNED_MEAN_ACCURACY}
    gated = means["gated_average"]
    assert gated >= means["unimodal_si"]
    assert gated >= means["unimodal_sfi"]
    assert gated >= means["concat"]
    # ablation ordering mirrors the reported tables (non-strict)
    assert gated >= means["average"] >= means["concat"]
    for mode, pinned in PINNED_MEAN_ACCURACY.items():
        assert means[mode] == pytest.approx(pinned, abs=1e-9), mode
    print(f"ACCEPTANCE 5 PASS: {elapsed:.0f}s; mean accuracies {means}")


def test_criterion_6_deterministic_reports(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--seed", "7", "--classes", "2", "--instances", "3",
                     "--frames", "2", "--out", str(data)]) == 0
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(f"data={data}\nepochs=1\nsplits=2\ndtype=float32\n"
                   "svm_epochs=10\nval_fraction=0.0\nseed=3\n")
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out1)]) == 0
    assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out2)]) == 0
    b1 = (out1 / "report.csv").read_bytes()
    b2 = (out2 / "report.csv").read_bytes()
    assert b1 == b2
    print(f"ACCEPTANCE 6 PASS: identical runs give byte-identical report.csv "
          f"({len(b1)} bytes)")


def test_criterion_7_overfit_one_batch():
    instances = synth_generate(3, 4, 16, 2.5, n_frames=2)
    prepared = prepare_instances(instances, ExperimentConfig(frames=2))
    images = [p.images["si"][0] for p in prepared][:64]
    labels = np.array([p.label for p in prepared])[:64]
    batch = cnn.stack_images(images)
    config = cnn.CnnConfig(n_classes=4, dtype="float32",
                           learning_rate=0.005, momentum=0.9, l2=0.004,
                           batch_size=64)
    model = cnn.init(config, seed=0)
    losses = [cnn.train_step(model, batch, labels)]
    while len(losses) < 200 and losses[-1] > 0.1 * losses[0]:
        losses.append(cnn.train_step(model, batch, labels))
    assert all(np.isfinite(losses))  # divergence is a failure
    drop = 1.0 - losses[-1] / losses[0]
    assert drop >= 0.9
    print(f"ACCEPTANCE 7 PASS: loss {losses[0]:.3f} -> {losses[-1]:.3f} "
          f"({drop * 100:.1f}% drop) in {len(losses)} steps")


def test_criterion_8_svm_objective_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 2))
    y_signed = np.where(x[:, 0] + 0.5 * x[:, 1] + rng.normal(0, 0.3, 20) > 0,
                        1.0, -1.0)
    c = 1.0
    model = svm.train_svm(x, np.where(y_signed > 0, 1, 0), c=c, epochs=4000)
    xs = (x - model.feature_mean) / model.feature_scale
    reference, _ = svm_objective_grid_search(xs, y_signed, c)
    achieved = svm.hinge_objective(xs, y_signed, model.weights[1],
                                   model.biases[1], c)
    assert achieved <= reference * 1.02
    print(f"ACCEPTANCE 8 PASS: hinge objective {achieved:.6f} vs grid-search "
          f"reference {reference:.6f} (within 2%)")
