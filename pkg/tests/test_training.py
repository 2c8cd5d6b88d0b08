"""Optimizer, schedules, loss, metrics, and the training loop contracts."""

import math

import numpy as np
import pytest

import cdformer.tensor as T
import cdformer.training as TR
from cdformer.data import AugmentConfig, SyntheticSpec, gen_shapes
from cdformer.errors import ConfigError, ContractError, IndexRangeError
from cdformer.model import CdModel, ModelConfig
from cdformer.tensor import Tensor


def one_param(value, name="w.weight"):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    return {name: p}


# --- AdamW ---


def test_adamw_hand_computed_first_step():
    params = one_param(1.0)
    state = TR.adamw_init(params, weight_decay=0.0, eps=0.0)
    params["w.weight"].grad = np.array([2.0])
    TR.adamw_step(params, state, lr=0.01)
    # m_hat = 2, v_hat = 4 -> update = 2/2 = 1 -> theta = 1 - 0.01
    assert abs(params["w.weight"].data[0] - 0.99) < 1e-15


def test_adamw_zero_grad_no_decay_keeps_param():
    params = one_param(1.3)
    state = TR.adamw_init(params, weight_decay=0.0)
    params["w.weight"].grad = np.array([0.0])
    before = params["w.weight"].data.copy()
    TR.adamw_step(params, state, lr=0.05)
    assert np.array_equal(params["w.weight"].data, before)


def test_adamw_zero_grad_pure_decay():
    params = one_param(2.0)
    state = TR.adamw_init(params, weight_decay=0.1)
    params["w.weight"].grad = np.array([0.0])
    TR.adamw_step(params, state, lr=0.5)
    assert abs(params["w.weight"].data[0] - 2.0 * (1 - 0.5 * 0.1)) < 1e-15


def test_adamw_skips_decay_on_bias_and_norms():
    for name in ("x.bias", "n.gamma", "n.beta"):
        params = one_param(2.0, name)
        state = TR.adamw_init(params, weight_decay=0.1)
        params[name].grad = np.array([0.0])
        TR.adamw_step(params, state, lr=0.5)
        assert params[name].data[0] == 2.0


def test_adamw_matches_scalar_adam_reference():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=5)
    params = {"w.weight": Tensor(theta.copy(), requires_grad=True)}
    state = TR.adamw_init(params, weight_decay=0.0)
    m = np.zeros(5)
    v = np.zeros(5)
    ref = theta.copy()
    for t in range(1, 30):
        g = rng.normal(size=5)
        params["w.weight"].grad = g.copy()
        TR.adamw_step(params, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.abs(params["w.weight"].data - ref).max() < 1e-12


# --- schedules ---


def test_cosine_schedule_endpoints_and_midpoint():
    assert TR.lr_at("cosine", 0, 100, 0.001) == pytest.approx(0.001)
    assert TR.lr_at("cosine", 100, 100, 0.001) == pytest.approx(0.0, abs=1e-18)
    assert TR.lr_at("cosine", 50, 100, 0.001) == pytest.approx(0.0005)


def test_step_schedule_milestones():
    assert TR.lr_at("step", 70, 100, 0.01, milestones=(60, 80)) == pytest.approx(0.001)
    assert TR.lr_at("step", 59, 100, 0.01, milestones=(60, 80)) == pytest.approx(0.01)
    assert TR.lr_at("step", 85, 100, 0.01, milestones=(60, 80)) == pytest.approx(0.0001)


def test_schedule_rejects_out_of_range_step():
    with pytest.raises(ContractError):
        TR.lr_at("cosine", 101, 100, 0.001)


# --- label-smoothed cross entropy ---


def test_ce_uniform_logits_is_log_u():
    for eps in (0.0, 0.1, 0.5):
        logits = Tensor(np.zeros((4, 7)))
        loss = TR.ce_label_smoothing(logits, np.array([0, 1, 2, 3]), eps)
        assert abs(float(loss.data) - math.log(7)) < 1e-12


def test_ce_zero_smoothing_equals_plain_ce():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 6))
    labels = rng.integers(0, 6, 5)
    loss = float(TR.ce_label_smoothing(Tensor(logits), labels, 0.0).data)
    z = logits - logits.max(axis=1, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    plain = -lsm[np.arange(5), labels].mean()
    assert abs(loss - plain) < 1e-10


def test_ce_matches_independent_scalar_evaluation():
    rng = np.random.default_rng(2)
    u, eps = 10, 0.1
    logits = rng.normal(size=(3, u)) * 3
    labels = rng.integers(0, u, 3)
    got = float(TR.ce_label_smoothing(Tensor(logits), labels, eps).data)
    total = 0.0
    for b in range(3):
        mx = max(logits[b])
        lse = mx + math.log(sum(math.exp(v - mx) for v in logits[b]))
        for c in range(u):
            target = (1 - eps) * (1.0 if c == labels[b] else 0.0) + eps / u
            total -= target * (logits[b, c] - lse)
    assert abs(got - total / 3) < 1e-10


def test_ce_nearly_perfect_prediction_approaches_smoothed_floor():
    u, eps = 10, 0.1
    logits = np.full((1, u), -30.0)
    logits[0, 4] = 30.0
    labels = np.array([4])
    got = float(TR.ce_label_smoothing(Tensor(logits), labels, eps).data)
    # floor: -sum_c target_c * log p_c with p_true ~ 1, others ~ e^-60
    floor = (1 - eps + eps / u) * 0.0 + (u - 1) * (eps / u) * 60.0
    assert abs(got - floor) < 1e-6


def test_ce_rejects_bad_labels():
    with pytest.raises(IndexRangeError):
        TR.ce_label_smoothing(Tensor(np.zeros((2, 3))), np.array([0, 3]), 0.1)
    with pytest.raises(ContractError):
        TR.ce_label_smoothing(Tensor(np.zeros((2, 3))), np.array([0, 1]), 1.0)


def test_ce_gradient_checks():
    rng = np.random.default_rng(3)
    labels = np.array([1, 0, 2])

    def f(x):
        return TR.ce_label_smoothing(x, labels, 0.1)

    assert T.grad_check(f, rng.normal(size=(3, 4))) < 1e-6


# --- metrics ---


def test_metrics_perfect_prediction():
    acc = TR.MetricAccumulator(3)
    acc.update([0, 1, 2, 1], [0, 1, 2, 1])
    m = TR.metrics_finalize(acc)
    assert m == {"OA": 1.0, "mAcc": 1.0, "mIoU": 1.0}


def test_metrics_all_wrong_binary():
    acc = TR.MetricAccumulator(2)
    acc.update([0, 0, 0], [1, 1, 1])
    m = TR.metrics_finalize(acc)
    assert m["OA"] == 0.0 and m["mIoU"] == 0.0


def test_metrics_hand_counted_confusion():
    acc = TR.MetricAccumulator(2)
    acc.confusion[:] = np.array([[2, 1], [1, 2]])
    acc.count = 6
    m = TR.metrics_finalize(acc)
    assert m["OA"] == pytest.approx(4 / 6)
    assert m["mIoU"] == pytest.approx(0.5)


def test_metrics_oa_invariant_to_relabeling():
    rng = np.random.default_rng(4)
    pred = rng.integers(0, 4, 50)
    truth = rng.integers(0, 4, 50)
    perm = np.array([2, 0, 3, 1])
    a = TR.MetricAccumulator(4)
    a.update(pred, truth)
    b = TR.MetricAccumulator(4)
    b.update(perm[pred], perm[truth])
    assert TR.metrics_finalize(a)["OA"] == TR.metrics_finalize(b)["OA"]


def test_metrics_all_in_unit_interval():
    rng = np.random.default_rng(5)
    acc = TR.MetricAccumulator(5)
    acc.update(rng.integers(0, 5, 100), rng.integers(0, 5, 100))
    m = TR.metrics_finalize(acc)
    assert all(0.0 <= v <= 1.0 for v in m.values())


def test_metrics_empty_accumulator_rejected():
    with pytest.raises(ContractError):
        TR.metrics_finalize(TR.MetricAccumulator(2))


def test_metrics_skips_absent_classes():
    acc = TR.MetricAccumulator(4)
    acc.update([0, 1], [0, 1])  # classes 2,3 never appear
    assert TR.metrics_finalize(acc)["mIoU"] == 1.0


# --- the loop ---


def _toy_setup(task="classification", n_train=8, points=48):
    families = ("sphere", "cube") if task == "classification" else ("sphere-pair",)
    spec = SyntheticSpec(families=families, points=points, noise_sigma=0.01, seed=13)
    train = gen_shapes(spec, n_train)
    cfg = ModelConfig(
        blocks=[1], channels=[8], heads=[2], k_neighbors=4, scale_s=3,
        task=task, num_classes=2, cape_hidden_ratio=1,
    )
    return train, cfg


def test_train_loop_zero_lr_keeps_params():
    train, cfg = _toy_setup()
    model = CdModel.build(cfg, seed=0)
    before = {k: p.data.copy() for k, p in model.named_params().items()}
    tc = TR.TrainConfig(epochs=1, batch_size=4, lr=0.0, seed=0, label_smoothing=0.1)
    TR.train_loop(model, train, [], tc)
    after = model.named_params()
    assert all(np.array_equal(before[k], after[k].data) for k in before)


def test_train_loop_reduces_loss_on_fixed_batch():
    train, cfg = _toy_setup(n_train=4)
    model = CdModel.build(cfg, seed=1)
    tc = TR.TrainConfig(epochs=50, batch_size=4, lr=3e-3, seed=1, weight_decay=0.0)
    hist = TR.train_loop(model, train, [], tc)
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_train_loop_same_seed_same_trajectory():
    train, cfg = _toy_setup()
    tc = TR.TrainConfig(
        epochs=3, batch_size=4, lr=1e-3, seed=7,
        augment=AugmentConfig(jitter_sigma=0.01, jitter_clip=0.02, shift_range=0.1),
    )
    h1 = TR.train_loop(CdModel.build(cfg, seed=2), train, [], tc)
    h2 = TR.train_loop(CdModel.build(cfg, seed=2), train, [], tc)
    assert [r["train_loss"] for r in h1] == [r["train_loss"] for r in h2]


def test_train_loop_resume_matches_unbroken(tmp_path):
    train, cfg = _toy_setup()
    val = train[:2]
    tc = TR.TrainConfig(
        epochs=4, batch_size=4, lr=1e-3, seed=3,
        augment=AugmentConfig(jitter_sigma=0.01, jitter_clip=0.02),
    )
    full_model = CdModel.build(cfg, seed=4)
    full = TR.train_loop(full_model, train, val, tc)

    from cdformer.model import load_checkpoint

    part_model = CdModel.build(cfg, seed=4)
    out = tmp_path / "run"
    TR.train_loop(part_model, train, val, tc, out_dir=str(out), run_epochs=2)
    resumed, meta, opt = load_checkpoint(out / "last")
    resume_state = {"t": opt[0], "m": opt[1], "v": opt[2], "rng": meta["rng"], "epoch": meta["epoch"]}
    rest = TR.train_loop(resumed, train, val, tc, resume_state=resume_state)
    assert [r["train_loss"] for r in rest] == [r["train_loss"] for r in full[2:]]
    finals = full_model.named_params()
    finals2 = resumed.named_params()
    assert all(np.array_equal(finals[k].data, finals2[k].data) for k in finals)


def test_train_loop_rejects_label_mismatch():
    train, cfg = _toy_setup()
    bad = [(c, 5) for c, _ in train]  # class id outside num_classes=2
    model = CdModel.build(cfg, seed=5)
    tc = TR.TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=0)
    with pytest.raises(ConfigError):
        TR.train_loop(model, bad, [], tc)


def test_evaluate_empty_dataset_rejected():
    _, cfg = _toy_setup()
    with pytest.raises(ContractError):
        TR.evaluate(CdModel.build(cfg, seed=6), [])
