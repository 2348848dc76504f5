"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (or without ``-s``;
the lines are written past the capture either way).
"""

import math
import re
import time

import numpy as np
import pytest

from msiresnet import data, zoo
from msiresnet import layers as L
from msiresnet.autograd import forward_record, grad_check, projection_objective
from msiresnet.checkpoint import load_checkpoint, save_checkpoint
from msiresnet.cli import run
from msiresnet.losses import bce_loss, bce_objective
from msiresnet.tensor import make_rng
from msiresnet.training import AdamState, TrainConfig, adam_step, clip_gradients, fit


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} | {detail}")
        assert ok, detail

    return emit


def test_criterion_1_metric_reproduction(verdict, capsys):
    t0 = time.perf_counter()
    code = run(["confmat-metrics", "--tp", "6338", "--fp", "1167", "--fn", "792", "--tn", "10936"])
    out = capsys.readouterr().out
    acc = float(re.search(r"accuracy ([0-9.]+)", out).group(1))
    f1 = float(re.search(r"f1 ([0-9.]+)", out).group(1))
    code2 = run(["confmat-metrics", "--reported"])
    rows = {r.split(",")[0]: r.split(",") for r in capsys.readouterr().out.splitlines()[1:]}
    ms = (time.perf_counter() - t0) * 1000
    ok = (code == code2 == 0 and abs(acc - 0.8981) <= 5e-5 and abs(f1 - 0.9178) <= 5e-5
          and len(rows) == 10 and rows["Logistic Regression"][5] == rows["VGG16"][5] == "0.6098")
    verdict(1, "metric reproduction", ok,
            f"accuracy {acc} f1 {f1}; {len(rows)} table rows; LR/VGG accuracy "
            f"{rows['Logistic Regression'][5]}/{rows['VGG16'][5]}; {ms:.0f} ms")


# Output Size column of the architecture table, channels first
EXPECTED_TRACE = [
    ("stem", (64, 112, 112)),
    ("maxpool", (64, 56, 56)),
    ("layer1", (256, 56, 56)),
    ("layer2", (512, 28, 28)),
    ("layer3", (1024, 14, 14)),
    ("layer4", (2048, 7, 7)),
    ("avgpool", (2048, 1, 1)),
    ("flatten", (2048,)),
    ("fc1", (2048,)),
    ("fc2", (512,)),
    ("fc3", (128,)),
    ("fc4", (1,)),
]


def test_criterion_2_architecture_fidelity(verdict):
    model = zoo.build_modified_resnet()
    t0 = time.perf_counter()
    out, tape = forward_record(model, make_rng(0).standard_normal((1, 3, 224, 224)), "eval")
    secs = time.perf_counter() - t0
    trace = [(name, shape[1:]) for name, shape in tape.shapes()]
    matched = sum(a == b for a, b in zip(trace, EXPECTED_TRACE))
    layers = zoo.count_weight_layers(model)
    ok = trace == EXPECTED_TRACE and layers == 41 and out.shape == (1, 1) and secs < 10
    verdict(2, "architecture fidelity", ok,
            f"{matched}/{len(EXPECTED_TRACE)} trace rows match; {layers} weight layers; forward {secs:.2f} s")


def single_layer_models(rng):
    """(name, model, input) for every layer type on its own."""
    conv = L.Conv2d(L.Conv2dSpec(2, 3, 3, 2, 1, bias=True), rng)
    bottleneck = zoo.build_block(zoo.BlockSpec("bottleneck", 4, 2, 8, 2), rng)
    basic = zoo.build_block(zoo.BlockSpec("basic", 3, 3, 3, 1), rng)
    return [
        ("conv2d", zoo.Model([("conv", conv)]), rng.standard_normal((2, 2, 7, 7))),
        ("batchnorm2d", zoo.Model([("bn", L.BatchNorm2d(3))]), rng.standard_normal((4, 3, 3, 3))),
        ("relu", zoo.Model([("relu", L.ReLU())]), rng.standard_normal((3, 5))),
        ("maxpool2d", zoo.Model([("pool", L.MaxPool2d())]), rng.standard_normal((2, 2, 5, 4))),
        ("avgpool", zoo.Model([("pool", L.AdaptiveAvgPool2d())]), rng.standard_normal((2, 3, 3, 2))),
        ("flatten", zoo.Model([("flat", L.Flatten())]), rng.standard_normal((2, 3, 2, 2))),
        ("linear", zoo.Model([("fc", L.Linear(5, 3, rng=rng))]), rng.standard_normal((4, 5))),
        ("dropout", zoo.Model([("drop", L.Dropout(0.3))]), rng.standard_normal((4, 6))),
        ("sigmoid", zoo.Model([("sig", L.Sigmoid())]), rng.standard_normal((3, 4))),
        ("bottleneck block", zoo.Model([("block", bottleneck)]), rng.standard_normal((4, 4, 6, 6))),
        ("basic block", zoo.Model([("block", basic)]), rng.standard_normal((4, 3, 5, 5))),
    ]


def test_criterion_3_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = make_rng(3)
    results = []
    for name, model, x in single_layer_models(rng):
        out, _ = forward_record(model, x, "train", rng=make_rng(0))
        report = grad_check(model, x, projection_objective(out.shape, seed=1), 1e-4)
        results.append((name, report.passed, report.worst(), sum(report.kinks.values())))

    desc = zoo.describe("cnn5", 1.0, 32)
    model = zoo.build(desc, seed=7)
    x = make_rng(7).standard_normal((4,) + desc.input_shape)
    report = grad_check(model, x, bce_objective(np.arange(4) % 2), 1e-4, seed=7)
    results.append(("cnn5 end-to-end", report.passed, report.worst(), sum(report.kinks.values())))
    secs = time.perf_counter() - t0

    failed = [r[0] for r in results if not r[1]]
    worst = max(r[2] for r in results)
    ok = not failed and secs < 300
    verdict(3, "gradient correctness", ok,
            f"{len(results) - len(failed)}/{len(results)} checks pass, worst rel err {worst:.2e}, "
            f"kinks skipped {sum(r[3] for r in results)}; {secs:.0f} s"
            + (f"; failed {failed}" if failed else ""))


def test_criterion_4_conv_oracle(verdict):
    t0 = time.perf_counter()
    rng = make_rng(4)
    worst = 0.0
    for _ in range(100):
        cin, cout = (int(v) for v in rng.integers(1, 5, 2))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        spec = L.Conv2dSpec(cin, cout, k, stride, k // 2, bias=bool(rng.integers(2)))
        h, w = (int(v) for v in rng.integers(k, k + 8, 2))
        x = rng.standard_normal((int(rng.integers(1, 4)), cin, h, w))
        weight = rng.standard_normal(spec.weight_shape)
        bias = rng.standard_normal(cout) if spec.bias else None
        fast = L.conv2d_forward(x, spec, weight, bias)
        slow = L.conv2d_naive(x, spec, weight, bias)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    secs = time.perf_counter() - t0
    verdict(4, "convolution oracle equivalence", worst < 1e-10 and secs < 60,
            f"100 specs, max abs diff {worst:.2e}; {secs:.1f} s")


class _Reached(Exception):
    pass


def test_criterion_5_desk_scale_learning(verdict, tmp_path):
    t0 = time.perf_counter()
    manifest = data.generate_synthetic(200, 64, seed=0, out_dir=tmp_path)
    train_m, val_m, _ = data.split_manifest(manifest, seed=0)
    train_set, val_set = data.load_dataset(train_m, 64), data.load_dataset(val_m, 64)
    cfg = TrainConfig(epochs=20, seed=0)
    assert (cfg.learning_rate, cfg.grad_clip, cfg.weight_decay) == (0.001, 0.1, 1e-4)

    history = []

    def stop_when_reached(rec):
        history.append(rec.val_accuracy)
        if rec.val_accuracy >= 0.9:
            raise _Reached

    model = zoo.build_modified_resnet(width_mult=0.25, input_hw=64, seed=0)
    try:
        fit(model, train_set, val_set, cfg, callback=stop_when_reached)
    except _Reached:
        pass
    resnet_best = max(history)
    resnet_epochs = len(history)

    logreg = zoo.build_baseline("logreg", input_hw=64, seed=0)
    records, _, _ = fit(logreg, train_set, val_set, cfg)
    logreg_best = max(r.val_accuracy for r in records)
    secs = time.perf_counter() - t0
    ok = resnet_best >= 0.9 and logreg_best < 0.7 and secs < 900
    verdict(5, "desk-scale learning", ok,
            f"modified ResNet val acc {resnet_best:.3f} at epoch {resnet_epochs}; "
            f"logistic regression best {logreg_best:.3f} over 20 epochs; {secs:.0f} s")


def test_criterion_6_determinism(verdict, tmp_path):
    assert run(["synth", "--out", str(tmp_path / "d"), "--n-per-class", "16", "--input", "32", "--seed", "1"]) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text("arch=modified-resnet\nwidth_mult=0.25\ninput=32\nepochs=2\nbatch_size=8\nseed=11\n")
    outputs = []
    for i in range(2):
        csv_path, ckpt = tmp_path / f"e{i}.csv", tmp_path / f"m{i}.ckpt"
        assert run(["train", "--config", str(cfg), "--data", str(tmp_path / "d"),
                    "--out", str(csv_path), "--ckpt", str(ckpt)]) == 0
        outputs.append((csv_path.read_bytes(), ckpt.read_bytes()))
    same_csv = outputs[0][0] == outputs[1][0]
    same_ckpt = outputs[0][1] == outputs[1][1]
    verdict(6, "determinism", same_csv and same_ckpt,
            f"epoch CSV identical: {same_csv}; checkpoint identical: {same_ckpt} ({len(outputs[0][1])} bytes)")


def test_criterion_7_loss_and_optimizer_values(verdict):
    bce = bce_loss(np.array([[0.5]]), np.array([1]))
    cfg = TrainConfig(weight_decay=0.0)
    theta = {"w": np.array([0.25])}
    state = AdamState.for_params(theta)
    adam_step(theta, {"w": np.array([1.0])}, state, cfg)
    move = theta["w"][0] - 0.25
    clipped = float(clip_gradients({"g": np.array([0.5])}, 0.1)["g"][0])
    expected_move = -cfg.learning_rate / (1 + cfg.adam_eps)
    ok = abs(bce - math.log(2)) <= 1e-9 and abs(move - expected_move) <= 1e-9 and clipped == 0.1
    verdict(7, "loss/optimizer unit values", ok,
            f"BCE {bce:.12f} vs ln2 {math.log(2):.12f}; Adam move {move:.12g} vs {expected_move:.12g}; "
            f"clip(0.5) = {clipped!r}")


def test_criterion_8_checkpoint_round_trip(verdict, tmp_path):
    model = zoo.build_modified_resnet(width_mult=0.25, input_hw=64, seed=8)
    x = make_rng(8).standard_normal((3, 3, 64, 64))
    # a few train-mode passes so the running statistics are not at their defaults
    for _ in range(3):
        forward_record(model, x, "train", rng=make_rng(0))
    before, _ = forward_record(model, x, "eval")
    save_checkpoint(model, AdamState.for_params(model.named_parameters()), TrainConfig(), tmp_path / "m.ckpt")
    after, _ = forward_record(load_checkpoint(tmp_path / "m.ckpt").model, x, "eval")
    same = before.tobytes() == after.tobytes()
    verdict(8, "checkpoint round trip", same, f"eval output bitwise identical: {same}")
