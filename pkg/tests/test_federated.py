import math
from dataclasses import astuple, replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfedsim import rng as rngs
from dpfedsim.attack import AttackProfile
from dpfedsim.datasets import Dataset, partition_iid, synth_classification, synth_regression, train_test_split
from dpfedsim.federated import (
    ConfigError,
    FederatedData,
    FederatedSession,
    FLConfig,
    aggregate,
    build_federated_data,
    clip_update,
    local_train,
    median_sensitivity,
    run_training,
    select_clients,
)
from dpfedsim.nn import Batch, ModelSpec, ParamVector, evaluate, init_params, loss_and_gradient, sgd_step
from dpfedsim.privacy import PrivacyParams
from dpfedsim.records import ROUNDS_HEADER, render_csv

NO_DP = PrivacyParams(math.inf)


def small_task(K=10, n=600, seed=0, task="classification"):
    if task == "classification":
        ds = synth_classification(n, 5, 3, 6.0, seed)
        spec = ModelSpec((5, 16, 3))
    else:
        ds = synth_regression(n, 4, 0.1, seed)
        spec = ModelSpec((4, 8, 1), "regression")
    train, test = train_test_split(ds, 0.25, rngs.stream(seed, "split"))
    part = partition_iid(len(train), K, rngs.stream(seed, "partition"))
    return spec, build_federated_data(train, test, K, part)


# --- client selection -------------------------------------------------------

def test_select_all_when_k_equals_K():
    for seed in range(5):
        assert list(select_clients(7, 7, rngs.stream(seed, "select", 1))) == list(range(7))


def test_selection_deterministic_and_distinct():
    a = select_clients(100, 30, rngs.stream(3, "select", 4))
    b = select_clients(100, 30, rngs.stream(3, "select", 4))
    assert np.array_equal(a, b) and len(set(a.tolist())) == 30


def test_selection_frequency_within_three_standard_errors():
    rounds = 10_000
    counts = np.zeros(100)
    for t in range(rounds):
        counts[select_clients(100, 30, rngs.stream(0, "select", t))] += 1
    se = math.sqrt(0.3 * 0.7 / rounds)
    assert np.all(np.abs(counts / rounds - 0.3) <= 3 * se)


def test_k_above_K_rejected():
    with pytest.raises(ConfigError):
        select_clients(10, 11, rngs.stream(0, "select"))
    with pytest.raises(ConfigError):
        FLConfig(total_clients=100, clients_per_round=200)


def test_table_defaults():
    fl = FLConfig()
    assert (fl.total_clients, fl.clients_per_round, fl.batch_size, fl.local_epochs,
            fl.learning_rate, fl.max_rounds) == (100, 30, 32, 10, 0.01, 30)
    c = FLConfig.consumption()
    assert (c.batch_size, c.learning_rate) == (7, 0.1)


# --- local training ---------------------------------------------------------

def test_zero_learning_rate_gives_zero_update():
    spec, data = small_task()
    p = init_params(spec, np.random.default_rng(0))
    u = local_train(spec, data.clients[0], p, FLConfig(10, 5, learning_rate=0.0), rngs.stream(0, "client"))
    assert u.norm == 0.0 and not np.any(u.delta.values)


def test_one_epoch_one_batch_is_one_gradient_step():
    spec, data = small_task()
    client = data.clients[0]
    p = init_params(spec, np.random.default_rng(1))
    cfg = FLConfig(10, 5, batch_size=len(client), local_epochs=1, learning_rate=0.05)
    u = local_train(spec, client, p, cfg, rngs.stream(0, "client"))
    _, g = loss_and_gradient(spec, p, Batch(client.inputs, client.targets))
    assert np.allclose(u.delta.values, -0.05 * g.values, rtol=0, atol=1e-12)
    assert u.norm == pytest.approx(np.linalg.norm(u.delta.values))


def test_identical_clients_identical_updates():
    spec, data = small_task()
    p = init_params(spec, np.random.default_rng(2))
    cfg = FLConfig(10, 5, batch_size=8, local_epochs=3, learning_rate=0.1)
    a = local_train(spec, data.clients[0], p, cfg, rngs.stream(5, "client", 1, 0))
    b = local_train(spec, data.clients[0], p, cfg, rngs.stream(5, "client", 1, 0))
    assert a.delta == b.delta and a.norm == b.norm


def test_empty_client_rejected():
    spec = ModelSpec((2, 3, 2))
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), "classification")
    with pytest.raises(ValueError):
        local_train(spec, empty, init_params(spec, np.random.default_rng(0)), FLConfig(1, 1))


# --- sensitivity and clipping -----------------------------------------------

def test_median_examples():
    assert median_sensitivity([1, 3, 2]) == 2
    assert median_sensitivity([1, 2, 3, 4]) == 2.5
    with pytest.raises(ValueError):
        median_sensitivity([])


def test_median_matches_sort_oracle():
    norms = list(np.random.default_rng(4).exponential(size=30))
    s = sorted(norms)
    assert median_sensitivity(norms) == (s[14] + s[15]) / 2


def test_clip_examples():
    d = ParamVector(np.array([3.0, 4.0]))
    assert clip_update(d, 5.0, 6.0) is d
    half = clip_update(d, 5.0, 2.5)
    assert np.array_equal(half.values, [1.5, 2.0])
    v = np.random.default_rng(0).standard_normal(50)
    v *= 7.3 / np.linalg.norm(v)
    out = clip_update(ParamVector(v), 7.3, 2.0)
    assert abs(np.linalg.norm(out.values) - 2.0) < 1e-9
    with pytest.raises(ValueError):
        clip_update(d, 5.0, 0.0)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
@settings(max_examples=60)
def test_clipped_norm_bounded(seed, S):
    v = np.random.default_rng(seed).standard_normal(20) * 10
    zeta = float(np.linalg.norm(v))
    out = clip_update(ParamVector(v), zeta, S)
    assert np.linalg.norm(out.values) <= S + 1e-9
    assert np.linalg.norm(out.values) == pytest.approx(min(zeta, S), rel=1e-12)


# --- aggregation ------------------------------------------------------------

def test_aggregate_examples():
    w = ParamVector(np.zeros(2))
    ups = [ParamVector(np.array([1.0, 1.0])), ParamVector(np.array([3.0, 3.0]))]
    assert np.array_equal(aggregate(w, ups, np.zeros(2)).values, [2.0, 2.0])
    n = np.array([0.6, -0.3])
    zero = [ParamVector(np.zeros(2))] * 3
    assert np.allclose(aggregate(w, zero, n).values, n / 3)


def test_aggregate_independent_of_report_order():
    rng = np.random.default_rng(3)
    ups = {c: ParamVector(rng.standard_normal(40) * 10.0 ** rng.integers(-6, 6)) for c in range(12)}
    w = ParamVector(rng.standard_normal(40))
    noise = rng.standard_normal(40)
    ref = aggregate(w, ups, noise)
    for _ in range(5):
        order = rng.permutation(12)
        shuffled = {int(c): ups[int(c)] for c in order}
        assert aggregate(w, shuffled, noise) == ref


def test_aggregate_dimension_mismatch():
    with pytest.raises(ValueError):
        aggregate(ParamVector(np.zeros(2)), [ParamVector(np.zeros(3))], np.zeros(2))


# --- training loop ----------------------------------------------------------

def test_tau_zero_stops_after_first_round():
    spec, data = small_task()
    res = run_training(spec, data, FLConfig(10, 5, accuracy_threshold=0.0), NO_DP, 0.001)
    assert len(res.history.records) == 1 and res.history.stop_reason == "threshold"


def test_zero_budget_returns_initial_model():
    spec, data = small_task()
    fl = FLConfig(10, 5, max_rounds=5)
    res = run_training(spec, data, fl, PrivacyParams(4.0), 0.0)
    assert res.history.records == [] and res.history.stop_reason == "budget_exhausted"
    assert res.params == init_params(spec, rngs.stream(fl.master_seed, "init"))


def test_budget_cut_keeps_last_charged_model():
    spec, data = small_task()
    fl = FLConfig(10, 5, max_rounds=10)
    res = run_training(spec, data, fl, PrivacyParams(8.0, delta_round=1e-5), 3e-5)
    recs = res.history.records
    assert len(recs) == 3 and res.history.stop_reason == "budget_exhausted"
    assert [r.delta_spent for r in recs] == [1e-5, 2e-5, 3e-5]
    assert all(r.delta_spent <= 3e-5 for r in recs)
    loss, _ = evaluate(spec, res.params, data.test.inputs, data.test.targets)
    assert loss == recs[-1].test_loss


def test_separable_task_matches_centralized_oracle():
    ds = synth_classification(1200, 5, 3, 6.0, seed=7)
    train, test = train_test_split(ds, 0.25, rngs.stream(7, "split"))
    spec = ModelSpec((5, 16, 3))
    # oracle: plain minibatch SGD on the pooled training data
    p = init_params(spec, rngs.stream(7, "init"))
    order_rng = np.random.default_rng(7)
    for _ in range(20):
        perm = order_rng.permutation(len(train))
        for s in range(0, len(train), 32):
            idx = perm[s:s + 32]
            p = sgd_step(spec, p, Batch(train.inputs[idx], train.targets[idx]), 0.05)
    _, central_acc = evaluate(spec, p, test.inputs, test.targets)
    assert central_acc >= 0.98

    part = partition_iid(len(train), 10, rngs.stream(7, "partition"))
    data = build_federated_data(train, test, 10, part)
    fl = FLConfig(10, 5, batch_size=32, local_epochs=2, learning_rate=0.05, max_rounds=20, master_seed=7)
    res = run_training(spec, data, fl, NO_DP, 0.001)
    best = max(r.test_accuracy for r in res.history.records)
    assert best >= 0.98 and best >= central_acc - 0.02


def test_single_client_without_noise_is_centralized_sgd():
    ds = synth_regression(120, 3, 0.1, seed=2)
    train, test = train_test_split(ds, 0.25, rngs.stream(2, "split"))
    spec = ModelSpec((3, 6, 1), "regression")
    data = build_federated_data(train, test, 1, {0: np.arange(len(train))})
    fl = FLConfig(1, 1, batch_size=10, local_epochs=2, learning_rate=0.05, max_rounds=4, master_seed=2)
    res = run_training(spec, data, fl, NO_DP, 0.001)

    p = init_params(spec, rngs.stream(2, "init"))
    for t in range(1, 5):
        rng = rngs.stream(2, "client", t, 0)
        for _ in range(2):
            perm = rng.permutation(len(train))
            for s in range(0, len(train), 10):
                idx = perm[s:s + 10]
                p = sgd_step(spec, p, Batch(train.inputs[idx], train.targets[idx]), 0.05)
    # w + (w_local - w) can differ from w_local in the last bit
    assert np.allclose(res.params.values, p.values, rtol=1e-12, atol=1e-14)


def test_history_is_reproducible():
    spec, data = small_task(task="regression")
    fl = FLConfig.consumption(total_clients=10, clients_per_round=4, local_epochs=2, max_rounds=6)
    runs = [run_training(spec, data, fl, PrivacyParams(4.0), 0.001, AttackProfile(0.05, True))
            for _ in range(2)]
    text = [render_csv(ROUNDS_HEADER, (astuple(r) for r in run.history.records)) for run in runs]
    assert text[0] == text[1]
    assert runs[0].params == runs[1].params


def test_zero_gamma_attack_is_benign_run():
    spec, data = small_task()
    fl = FLConfig(10, 5, max_rounds=4)
    a = run_training(spec, data, fl, PrivacyParams(4.0), 0.001, AttackProfile(0.0, True))
    b = run_training(spec, data, fl, PrivacyParams(4.0), 0.001, None)
    assert a.params == b.params


def test_records_invariants_under_attack():
    spec, data = small_task(task="regression")
    fl = FLConfig.consumption(total_clients=10, clients_per_round=5, local_epochs=1, max_rounds=8)
    res = run_training(spec, data, fl, PrivacyParams(4.0), 0.001, AttackProfile(0.1, True))
    recs = res.history.records
    assert [r.round for r in recs] == list(range(1, 9))
    assert all(b.delta_spent >= a.delta_spent for a, b in zip(recs, recs[1:]))
    assert all(abs(r.noise_kl - 0.1) < 1e-12 for r in recs)
    assert all(r.gamma == 0.1 and r.sigma > 0 and r.sensitivity > 0 for r in recs)


def test_no_dp_rounds_carry_no_noise_or_spend():
    spec, data = small_task()
    res = run_training(spec, data, FLConfig(10, 5, max_rounds=3), NO_DP, 0.001, AttackProfile(0.1, True))
    for r in res.history.records:
        assert (r.sigma, r.noise_kl, r.delta_spent, r.attacker_loss) == (0.0, 0.0, 0.0, 0.0)


def test_session_refuses_mismatched_shards():
    spec, data = small_task(K=10)
    with pytest.raises(ConfigError):
        FederatedSession(spec, data, FLConfig(12, 5), NO_DP, 0.001)


def test_session_step_after_done_raises():
    spec, data = small_task()
    s = FederatedSession(spec, data, FLConfig(10, 5, max_rounds=1), NO_DP, 0.001)
    s.step()
    assert s.done and s.stop_reason == "max_rounds"
    with pytest.raises(RuntimeError):
        s.step()


def test_regression_threshold_is_a_loss_target():
    spec, data = small_task(task="regression")
    fl = FLConfig.consumption(total_clients=10, clients_per_round=5, local_epochs=2,
                              max_rounds=30, accuracy_threshold=0.5)
    res = run_training(spec, data, fl, NO_DP, 0.001)
    assert res.history.stop_reason == "threshold"
    assert res.history.records[-1].test_loss <= 0.5
    assert all(r.test_loss > 0.5 for r in res.history.records[:-1])


def test_federated_data_shape():
    spec, data = small_task(K=6)
    assert isinstance(data, FederatedData) and sorted(data.clients) == list(range(6))
    fl = replace(FLConfig(6, 3), max_rounds=2)
    assert len(run_training(spec, data, fl, NO_DP, 0.001).history.records) == 2
