import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedfor.client import METHODS, HyperParams, local_update_fedavg, BroadcastPayload
from fedfor.data import Dataset, ShiftConfig, gen_synthetic
from fedfor.harness import FederatedData
from fedfor.nn import ModelSpec, init_model, loss_and_grad, norm_layer_mask
from fedfor.server import (CROSS_DEVICE, CROSS_SILO, ClientPool, CommLedger, ServerOptions,
                           aggregate, build_broadcast, init_server_state, ledger_report,
                           run_round, sample_clients)

SPEC = ModelSpec((4, 6, 3))
D = SPEC.n_params


class Provider:
    """Deterministic random shard per client id; ids in ``empty`` hold no data."""

    def __init__(self, n=12, empty=()):
        self.n, self.empty = n, set(empty)
        self.val = self._make(10_000, 40)

    @staticmethod
    def _make(seed, n):
        rng = np.random.default_rng(seed)
        return Dataset(rng.standard_normal((n, 4)), rng.integers(3, size=n), 3)

    def client_data(self, cid, t):
        if cid in self.empty:
            return Dataset(np.zeros((0, 4)), np.zeros(0, int), 3)
        return self._make(cid, self.n)

    def validation(self, t):
        return self.val


def run(method, T, mode=CROSS_DEVICE, K=3, alpha=0.5, options=ServerOptions(), provider=None,
        spec=SPEC, pool_size=5):
    provider = provider or Provider()
    pool = ClientPool(mode, pool_size, seed=11)
    hp = HyperParams(eta=0.05, alpha=alpha, E=2, B=4, K=K)
    state = init_server_state(init_model(spec, 0), method)
    states, records = [state], []
    for _ in range(T):
        state, rec = run_round(state, pool, method, hp, spec, provider, options)
        states.append(state)
        records.append(rec)
    return states, records


# -- sampling ---------------------------------------------------------------

def test_cross_device_ids_are_fresh():
    pool = ClientPool(CROSS_DEVICE, seed=0)
    seen = set()
    for t in range(1, 20):
        ids = sample_clients(pool, 7, t)
        assert len(ids) == 7 and not seen & set(ids)
        seen |= set(ids)


def test_cross_silo_sampling():
    pool = ClientPool(CROSS_SILO, 10, seed=3)
    for t in (1, 2, 3):
        assert sample_clients(pool, 10, t) == list(range(10))
    a = [sample_clients(pool, 4, t) for t in range(1, 10)]
    b = [sample_clients(ClientPool(CROSS_SILO, 10, seed=3), 4, t) for t in range(1, 10)]
    assert a == b
    assert all(len(set(ids)) == 4 and max(ids) < 10 for ids in a)
    with pytest.raises(ValueError):
        sample_clients(pool, 11, 1)


def test_pool_validation():
    with pytest.raises(ValueError):
        ClientPool("mesh")
    with pytest.raises(ValueError):
        ClientPool(CROSS_SILO, 0)


# -- broadcast --------------------------------------------------------------

def payload_size(p):
    return sum(p.components().values())


def test_broadcast_sizes():
    w0, w1 = np.zeros(D), np.ones(D)
    first = init_server_state(w0, "fedfor")
    p = build_broadcast("fedfor", first, 0)
    assert payload_size(p) == D and p.first_round
    later = first.__class__(round=1, w_curr=w1, w_prev=w0)
    for method in ("fedavg", "fedprox", "fedpd"):
        assert payload_size(build_broadcast(method, later, 0)) == D
    p = build_broadcast("fedfor", later, 0)
    assert payload_size(p) == 2 * D and p.prev_global is not None
    p = build_broadcast("fedfor", later, 0, CROSS_SILO, eta=0.5)
    assert payload_size(p) == 2 * D
    np.testing.assert_array_equal(p.global_grad, (w0 - w1) / 0.5)
    assert payload_size(build_broadcast("scaffold", init_server_state(w0, "scaffold"), 0)) == 2 * D
    assert payload_size(build_broadcast("fedcurv", init_server_state(w0, "fedcurv"), 0)) == 3 * D


def test_fedcurv_broadcast_excludes_own_contribution():
    state = init_server_state(np.zeros(3), "fedcurv")
    own = (np.array([1.0, 2, 3]), np.array([4.0, 5, 6]))
    state.fedcurv_sums = (np.array([10.0, 10, 10]), np.array([20.0, 20, 20]))
    state.fedcurv_contrib = {7: own}
    p = build_broadcast("fedcurv", state, 7, CROSS_SILO)
    np.testing.assert_array_equal(p.fedcurv_fisher_sum, [9, 8, 7])
    np.testing.assert_array_equal(p.fedcurv_fisher_weighted_sum, [16, 15, 14])
    p = build_broadcast("fedcurv", state, 8, CROSS_SILO)
    np.testing.assert_array_equal(p.fedcurv_fisher_sum, [10, 10, 10])


# -- aggregation ------------------------------------------------------------

def test_aggregate_examples():
    np.testing.assert_array_equal(aggregate([np.array([0.0, 2.0]), np.array([2.0, 0.0])]), [1, 1])
    rng = np.random.default_rng(0)
    models = rng.standard_normal((5, 50))
    naive = np.zeros(50)
    for m in models:
        for i, v in enumerate(m):
            naive[i] += v
    naive /= 5
    assert np.abs(aggregate(list(models)) - naive).max() < 1e-12


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_aggregate_idempotent(K, seed):
    m = np.random.default_rng(seed).standard_normal(17) * 1e3
    assert aggregate([m] * K).tobytes() == m.tobytes()


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_aggregate_permutation_invariant_up_to_rounding(seed):
    rng = np.random.default_rng(seed)
    models = list(rng.standard_normal((6, 9)))
    perm = rng.permutation(6)
    np.testing.assert_allclose(aggregate(models), aggregate([models[i] for i in perm]),
                               rtol=1e-12, atol=1e-14)


def test_aggregate_mask_keeps_previous():
    prev = np.array([9.0, 9.0, 9.0])
    mask = np.array([True, False, True])
    out = aggregate([np.array([1.0, 1, 1]), np.array([3.0, 3, 3])], mask, prev)
    np.testing.assert_array_equal(out, [2, 9, 2])


def test_aggregate_weighted():
    out = aggregate([np.array([0.0]), np.array([3.0])], weights=[2, 1])
    np.testing.assert_allclose(out, [1.0])


def test_aggregate_rejects_bad_input():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        aggregate([np.zeros(2)], mask=np.ones(2, bool))


# -- run_round --------------------------------------------------------------

def test_first_round_fedfor_equals_fedavg():
    a, _ = run("fedfor", 1, alpha=5.0)
    b, _ = run("fedavg", 1)
    assert a[1].w_curr.tobytes() == b[1].w_curr.tobytes()


def test_cross_device_fedpd_equals_fedprox():
    a, ra = run("fedpd", 6)
    b, rb = run("fedprox", 6)
    for sa, sb in zip(a, b):
        assert sa.w_curr.tobytes() == sb.w_curr.tobytes()
    assert [r.val_acc for r in ra] == [r.val_acc for r in rb]


def test_single_client_fedavg_is_plain_sgd():
    provider = Provider(n=10)
    T, hp = 4, HyperParams(eta=0.05, E=2, B=4, K=1)
    states, _ = run("fedavg", T, mode=CROSS_SILO, K=1, pool_size=1, provider=provider)
    # independent loop: E*T epochs, each shuffled by the (seed, client, round, epoch) key
    data = provider.client_data(0, 1)
    w = init_model(SPEC, 0)
    for t in range(1, T + 1):
        for e in range(hp.E):
            order = np.random.default_rng([11, 0, t, e]).permutation(len(data.labels))
            for lo in range(0, len(order), hp.B):
                idx = order[lo:lo + hp.B]
                _, g = loss_and_grad(w, data.subset(idx), SPEC)
                w = w - hp.eta * g
    assert states[-1].w_curr.tobytes() == w.tobytes()


@pytest.mark.parametrize("method", METHODS)
def test_cross_device_never_touches_state_store(method):
    states, _ = run(method, 5)
    assert states[-1].state_store.accesses == 0
    assert len(states[-1].state_store) == 0


def test_cross_silo_stateful_methods_use_store():
    states, _ = run("fedpd", 3, mode=CROSS_SILO)
    assert states[-1].state_store.accesses > 0 and len(states[-1].state_store) > 0


@pytest.mark.parametrize("method", METHODS)
def test_prev_global_bookkeeping(method):
    states, _ = run(method, 4)
    assert states[1].w_prev is not None and states[0].w_prev is None
    for t in range(1, len(states)):
        assert states[t].w_prev.tobytes() == states[t - 1].w_curr.tobytes()
        assert states[t].round == t


@pytest.mark.parametrize("method", METHODS)
def test_ledger_conservation_and_multiples_of_d(method):
    states, records = run(method, 5)
    ledger = states[-1].ledger
    for direction in ("s2c", "c2s"):
        assert ledger.cumulative(direction) == sum(ledger.total(r, direction) for r in range(1, 6))
    for rec in records:
        assert rec.s2c_floats % D == 0 and rec.c2s_floats % D == 0
    report = ledger_report(ledger)
    assert report[-1]["s2c_cumulative"] == ledger.cumulative("s2c")
    assert report[-1]["c2s_cumulative"] == sum(r.c2s_floats for r in records)


def test_ledger_report_closed_forms():
    K = 10
    _, rec = run("fedavg", 1, K=K)
    assert (rec[0].s2c_floats, rec[0].c2s_floats) == (K * D, K * D)
    _, rec = run("scaffold", 2, K=K)
    assert (rec[1].s2c_floats, rec[1].c2s_floats) == (2 * K * D, 2 * K * D)
    states, rec = run("fedfor", 2, K=K)
    assert (rec[0].s2c_floats, rec[0].c2s_floats) == (K * D, K * D)
    assert (rec[1].s2c_floats, rec[1].c2s_floats) == (2 * K * D, K * D)
    items = ledger_report(states[-1].ledger)[1]["s2c_items"]
    assert items == {"current_global": K * D, "prev_global": K * D}


def test_ledger_record_and_report():
    ledger = CommLedger()
    ledger.record(1, "s2c", "a", 5)
    ledger.record(1, "s2c", "a", 5)
    ledger.record(2, "c2s", "b", 3)
    rows = ledger_report(ledger)
    assert rows[0]["s2c"] == 10 and rows[0]["s2c_items"] == {"a": 10}
    assert rows[1]["c2s_cumulative"] == 3 and rows[1]["s2c_cumulative"] == 10


def test_empty_client_dropped_and_mean_over_rest():
    provider = Provider(empty={1})
    states, records = run("fedavg", 1, K=3, provider=provider)
    assert records[0].dropped == (1,) and records[0].participants == (0, 2)
    hp = HyperParams(eta=0.05, alpha=0.5, E=2, B=4, K=3)
    w0 = init_model(SPEC, 0)
    locals_ = [local_update_fedavg(BroadcastPayload("fedavg", w0), provider.client_data(c, 1), hp,
                                   SPEC, (11, c, 1)) for c in (0, 2)]
    np.testing.assert_allclose(states[1].w_curr, (locals_[0] + locals_[1]) / 2, atol=1e-15)
    assert records[0].c2s_floats == 2 * D and records[0].s2c_floats == 3 * D


def test_all_clients_empty_keeps_model():
    states, records = run("fedavg", 1, K=2, provider=Provider(empty={0, 1}))
    assert states[1].w_curr.tobytes() == states[0].w_curr.tobytes()
    assert records[0].participants == ()


@pytest.mark.parametrize("method", METHODS)
def test_full_run_determinism(method):
    _, a = run(method, 4, mode=CROSS_SILO)
    _, b = run(method, 4, mode=CROSS_SILO)
    assert a == b


def test_scaffold_zero_variates_equals_fedavg():
    opts = ServerOptions(scaffold_zero_variates=True)
    a, _ = run("scaffold", 4, options=opts)
    b, _ = run("fedavg", 4)
    assert a[-1].w_curr.tobytes() == b[-1].w_curr.tobytes()


def test_scaffold_variate_is_mean_of_client_gradients():
    provider = Provider()
    states, records = run("scaffold", 1, K=3, provider=provider)
    w0 = states[0].w_curr
    grads = [loss_and_grad(w0, provider.client_data(c, 1), SPEC)[1] for c in records[0].participants]
    np.testing.assert_allclose(states[1].control_variate, np.mean(grads, axis=0), atol=1e-15)


def test_fedbn_keeps_norm_params_local():
    spec = ModelSpec((4, 6, 3), has_norm_layer=True)
    opts = ServerOptions(fedbn=True)
    states, _ = run("fedavg", 3, mode=CROSS_SILO, options=opts, spec=spec)
    mask = norm_layer_mask(spec)
    init = init_model(spec, 0)
    # global norm coordinates never move, so evaluation uses identity norm params
    assert states[-1].w_curr[~mask].tobytes() == init[~mask].tobytes()
    assert not np.array_equal(states[-1].w_curr[mask], init[mask])
    assert states[-1].norm_param_mean is not None
    assert len(states[-1].state_store) > 0


def test_with_federated_data_provider():
    train = gen_synthetic(3, 4, 40, 0)
    val = gen_synthetic(3, 4, 10, 0, split=1)
    provider = FederatedData(train, val, "prior", ShiftConfig(sample_fraction=0.5), 0)
    _, records = run("fedfor", 3, provider=provider)
    assert all(0.0 <= r.val_acc <= 1.0 for r in records)
