"""Losses, pairing, Adam, and the training loop contract."""

import math

import numpy as np
import pytest

from oodbench.errors import InvalidArgumentError, TrainingFailure
from oodbench.neuralcore import (
    Dense,
    Flatten,
    NetworkSpec,
    Relu,
    backward,
    bn_momenta,
    forward,
    init_params,
)
from oodbench.training import (
    CSV_HEADER,
    AdamState,
    TrainConfig,
    adam_step,
    cross_entropy,
    evaluate,
    invariance_loss,
    make_pairs,
    read_records_csv,
    total_loss,
    train,
    write_records_csv,
)


# -- cross entropy -------------------------------------------------------------


def test_ce_uniform_logits():
    logits = np.zeros((4, 5))
    labels = np.array([0, 1, 2, 3])
    loss, grad = cross_entropy(logits, labels)
    assert abs(loss - math.log(5)) < 1e-12
    expected = (np.full((4, 5), 0.2) - np.eye(5)[labels]) / 4
    assert np.allclose(grad, expected, atol=1e-12)


def test_ce_matches_direct_formula():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(8, 6)) * 3
    labels = rng.integers(0, 6, size=8)
    loss, grad = cross_entropy(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    direct = -np.log(p[np.arange(8), labels]).mean()
    assert abs(loss - direct) < 1e-12
    assert np.allclose(grad, (p - np.eye(6)[labels]) / 8, atol=1e-12)


def test_ce_huge_margin_stays_exact():
    # correct logit 50 above the rest: loss ~ 5 * exp(-50), far below
    # float epsilon of log(sum(exp)) composed naively
    logits = np.zeros((1, 6))
    logits[0, 2] = 50.0
    loss, _ = cross_entropy(logits, np.array([2]))
    assert abs(loss - math.log1p(5 * math.exp(-50.0))) < 1e-25
    assert loss > 0


def test_ce_wrong_confident_label():
    logits = np.zeros((1, 3))
    logits[0, 0] = 100.0
    loss, _ = cross_entropy(logits, np.array([1]))
    assert abs(loss - 100.0) < 1e-6


def test_ce_rejects_bad_labels():
    with pytest.raises(InvalidArgumentError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# -- invariance loss -----------------------------------------------------------


def test_invariance_known_distances():
    a = np.array([[0.0, 0.0], [3.0, 4.0]])
    b = np.array([[0.0, 1.0], [0.0, 0.0]])
    loss, ga, gb = invariance_loss(a, b)
    assert abs(loss - (1.0 + 5.0) / 2) < 1e-12
    # gradient of mean distance: unit vector / batch
    assert np.allclose(ga[0], [0.0, -0.5])
    assert np.allclose(ga[1], [0.3, 0.4])
    assert np.allclose(gb, -ga)


def test_invariance_zero_distance_subgradient():
    a = np.ones((3, 4))
    loss, ga, gb = invariance_loss(a, a.copy())
    assert loss == 0.0
    assert np.all(ga == 0.0)
    assert np.all(gb == 0.0)


def test_total_loss_weighting():
    assert total_loss(2.0, 3.0, 0.5) == 3.5
    with pytest.raises(InvalidArgumentError):
        total_loss(1.0, 1.0, -0.1)


def test_invariance_descent_property():
    # one small step against the invariance gradient never increases the loss
    rng = np.random.default_rng(7)
    lr = 1e-3
    for _ in range(50):
        a = rng.normal(size=(6, 5))
        b = rng.normal(size=(6, 5))
        loss, ga, gb = invariance_loss(a, b)
        loss_after, _, _ = invariance_loss(a - lr * ga, b - lr * gb)
        assert loss_after <= loss + 1e-12


# -- pairing --------------------------------------------------------------------


def test_make_pairs_same_category_no_self():
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
    pairs = make_pairs(labels, seed=5)
    assert np.array_equal(labels[pairs.partner], labels)
    assert np.all(pairs.partner != np.arange(9))


def test_make_pairs_singleton_self_pairs():
    labels = np.array([0, 1, 1])
    pairs = make_pairs(labels, seed=1)
    assert pairs.partner[0] == 0
    assert pairs.partner[1] == 2 and pairs.partner[2] == 1


def test_make_pairs_deterministic():
    labels = np.tile(np.arange(3), 10)
    a = make_pairs(labels, seed=9).partner
    b = make_pairs(labels, seed=9).partner
    c = make_pairs(labels, seed=10).partner
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_make_pairs_uniform_over_category():
    # 4 items in one category: each partner choice should hit ~1/3
    labels = np.zeros(4, dtype=int)
    counts = np.zeros((4, 4))
    draws = 6000
    for seed in range(draws):
        partner = make_pairs(labels, seed=seed).partner
        for i in range(4):
            counts[i, partner[i]] += 1
    freq = counts / draws
    for i in range(4):
        assert freq[i, i] == 0.0
        others = [freq[i, j] for j in range(4) if j != i]
        assert all(abs(f - 1 / 3) < 0.02 for f in others)


# -- Adam ------------------------------------------------------------------------


def test_adam_matches_hand_computation():
    net = NetworkSpec(
        layers=(Flatten(), Dense(1), Relu(), Dense(1)),
        probe_index=2,
        num_classes=1,
        input_shape=(1, 1, 1),
    )
    params = init_params(net, seed=0, dtype=np.float64)
    name = "layers.1.weight"
    w0 = params.tensors[name].copy()
    state = AdamState.fresh(params)
    g1 = {name: np.array([[0.5]])}
    adam_step(params, g1, state, lr=0.1)
    # t=1: m=0.1*0.5/bias=0.5 v=0.001*0.25/bias=0.25, step = lr*0.5/(sqrt(0.25)+eps)
    expected1 = w0 - 0.1 * 0.5 / (math.sqrt(0.25) + 1e-8)
    assert np.allclose(params.tensors[name], expected1, atol=1e-14)
    g2 = {name: np.array([[-0.25]])}
    adam_step(params, g2, state, lr=0.1)
    m2 = (0.9 * 0.05 + 0.1 * -0.25) / (1 - 0.9**2)
    v2 = (0.999 * 0.00025 + 0.001 * 0.0625) / (1 - 0.999**2)
    expected2 = expected1 - 0.1 * m2 / (math.sqrt(v2) + 1e-8)
    assert np.allclose(params.tensors[name], expected2, atol=1e-12)


def test_adam_untouched_tensors_stay(tiny_net, tiny_params):
    state = AdamState.fresh(tiny_params)
    running = tiny_params.tensors["layers.1.running_mean"].copy()
    grads = {k: np.zeros_like(v) for k, v in tiny_params.tensors.items()}
    adam_step(tiny_params, grads, state, lr=0.1)
    assert np.array_equal(tiny_params.tensors["layers.1.running_mean"], running)


# -- evaluation -------------------------------------------------------------------


def test_evaluate_matches_bruteforce(tiny_net, tiny_params, tiny_split):
    acc = evaluate(tiny_params, tiny_net, tiny_split.val)
    hits = 0
    for item in tiny_split.val.items:
        trace = forward(tiny_net, tiny_params, item.pixels[None].repeat(2, axis=0), mode="eval")
        if int(np.argmax(trace.logits[0])) == item.category:
            hits += 1
    assert abs(acc - hits / len(tiny_split.val.items)) < 1e-12


def test_config_epoch_resolution():
    base = TrainConfig(learning_rate=0.1)
    assert base.resolved_epochs() == 100
    late = TrainConfig(learning_rate=0.1, approach_flags=frozenset({"late_stopping"}))
    assert late.resolved_epochs() == 1000
    explicit = TrainConfig(
        learning_rate=0.1, epochs=7, approach_flags=frozenset({"late_stopping"})
    )
    assert explicit.resolved_epochs() == 7


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(InvalidArgumentError):
        TrainConfig(learning_rate=0.1, batch_size=1).validate()
    with pytest.raises(InvalidArgumentError):
        TrainConfig(learning_rate=0.1, bn_momentum=1.5).validate()
    with pytest.raises(InvalidArgumentError):
        TrainConfig(learning_rate=0.1, approach_flags=frozenset({"mystery"})).validate()


# -- training loop -----------------------------------------------------------------


def _quick_config(**kw):
    defaults = dict(learning_rate=0.003, epochs=3, batch_size=8, seed=5)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_train_smoke_and_records(tiny_net, tiny_split):
    params, records = train(_quick_config(), tiny_split, tiny_net)
    assert len(records) == 3
    assert [r.epoch for r in records] == [0, 1, 2]
    assert all(0.0 <= r.ind_val_accuracy <= 1.0 for r in records)
    assert all(r.train_inv_loss == 0.0 for r in records)
    assert not any(r.restarted for r in records)


def test_train_bitwise_reproducible(tiny_net, tiny_split, tmp_path):
    a_params, _ = train(_quick_config(), tiny_split, tiny_net, csv_path=tmp_path / "a.csv")
    b_params, _ = train(_quick_config(), tiny_split, tiny_net, csv_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for k in a_params.tensors:
        assert np.array_equal(a_params.tensors[k], b_params.tensors[k]), k


def test_lambda_zero_identical_to_disabled_path(tiny_net, tiny_split):
    # weight 0 with the invariance flag set must match the plain build bit for bit
    plain, _ = train(_quick_config(), tiny_split, tiny_net)
    flagged, _ = train(
        _quick_config(approach_flags=frozenset({"invariance_loss"}), invariance_weight=0.0),
        tiny_split,
        tiny_net,
    )
    for k in plain.tensors:
        assert np.array_equal(plain.tensors[k], flagged.tensors[k]), k


def test_invariance_batches_change_training(tiny_net, tiny_split):
    plain, _ = train(_quick_config(), tiny_split, tiny_net)
    inv, _ = train(_quick_config(invariance_weight=0.5), tiny_split, tiny_net)
    assert any(
        not np.array_equal(plain.tensors[k], inv.tensors[k]) for k in plain.tensors
    )


def test_pair_refresh_schedule(tiny_net, tiny_split, monkeypatch):
    import oodbench.training as tr

    calls = []
    real = tr.make_pairs

    def spy(labels, seed, refresh_count=0):
        calls.append(refresh_count)
        return real(labels, seed, refresh_count)

    monkeypatch.setattr(tr, "make_pairs", spy)
    train(
        _quick_config(epochs=7, invariance_weight=0.1, pair_refresh_interval=3),
        tiny_split,
        tiny_net,
    )
    # creation at epoch 0, refreshes at 3 and 6: counts 0, 1, 2
    assert calls == [0, 1, 2]


def test_no_pairs_when_weight_zero(tiny_net, tiny_split, monkeypatch):
    import oodbench.training as tr

    calls = []
    real = tr.make_pairs

    def spy(labels, seed, refresh_count=0):
        calls.append(refresh_count)
        return real(labels, seed, refresh_count)

    monkeypatch.setattr(tr, "make_pairs", spy)
    train(_quick_config(), tiny_split, tiny_net)
    assert calls == []


def test_bn_momentum_plumbed_to_layers(tiny_net, tiny_split, monkeypatch):
    import oodbench.training as tr

    seen = {}
    real = tr.set_bn_momentum

    def spy(spec, momentum):
        out = real(spec, momentum)
        seen["momenta"] = bn_momenta(out)
        return out

    monkeypatch.setattr(tr, "set_bn_momentum", spy)
    train(_quick_config(bn_momentum=0.37), tiny_split, tiny_net)
    assert set(seen["momenta"]) == {0.37}


def test_restart_rule_fires_and_fails(tiny_net, tiny_split, monkeypatch):
    import oodbench.training as tr

    # pin validation accuracy at zero so the chance trigger fires at epoch 10
    monkeypatch.setattr(tr, "_accuracy", lambda *a, **k: 0.0)
    lrs = []
    real_step = tr.adam_step
    monkeypatch.setattr(
        tr, "adam_step", lambda p, g, s, lr: (lrs.append(lr), real_step(p, g, s, lr))[1]
    )
    config = _quick_config(epochs=11, seed=2, max_restarts=1)
    with pytest.raises(TrainingFailure) as err:
        train(config, tiny_split, tiny_net)
    records = err.value.records
    assert len(records) == 22  # two attempts, 11 epochs each
    assert records[11].restarted and records[11].epoch == 0
    assert not records[0].restarted
    assert min(lrs[: len(lrs) // 2]) == pytest.approx(0.003)
    assert max(lrs[len(lrs) // 2 :]) == pytest.approx(0.0003)  # 10x cut on restart


def test_restart_grace_scales_with_budget(tiny_net, tiny_split, monkeypatch):
    import oodbench.training as tr

    # with a 24-epoch budget the stuck check only starts at epoch 12
    monkeypatch.setattr(tr, "_accuracy", lambda *a, **k: 0.0)
    config = _quick_config(epochs=24, seed=2, max_restarts=0)
    with pytest.raises(TrainingFailure) as err:
        train(config, tiny_split, tiny_net)
    assert [r.epoch for r in err.value.records] == list(range(13))


def test_restart_rule_disabled_runs_to_completion(tiny_net, tiny_split, monkeypatch):
    import oodbench.training as tr

    monkeypatch.setattr(tr, "_accuracy", lambda *a, **k: 0.0)
    config = _quick_config(epochs=12, seed=2, restart_rule_enabled=False)
    params, records = train(config, tiny_split, tiny_net)
    assert len(records) == 12


def test_csv_format_and_roundtrip(tiny_net, tiny_split, tmp_path):
    path = tmp_path / "epochs.csv"
    _, records = train(_quick_config(invariance_weight=0.1), tiny_split, tiny_net, csv_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER == "epoch,ind_val_acc,ood_acc,ce_loss,inv_loss,restarted"
    assert len(lines) == 1 + len(records)
    first = lines[1].split(",")
    assert first[0] == "0" and first[5] in ("0", "1")
    back = read_records_csv(path)
    assert [r.epoch for r in back] == [r.epoch for r in records]
    assert all(
        abs(a.train_ce_loss - b.train_ce_loss) < 1e-9 for a, b in zip(back, records)
    )
    other = tmp_path / "rewrite.csv"
    write_records_csv(records, other)
    assert other.read_bytes() == path.read_bytes()


def test_trailing_batch_of_one_merges(tiny_net, tiny_split):
    # 24 train items, batch 23 would leave a trailing 1: must still train
    params, records = train(_quick_config(batch_size=23, epochs=1), tiny_split, tiny_net)
    assert len(records) == 1
