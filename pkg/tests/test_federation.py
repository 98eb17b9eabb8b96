from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpfl import federation as fed
from lpfl import numerics as nx
from lpfl import wire
from lpfl.harness import prepare
from lpfl.model import FP, LP, ModelConfig
from lpfl.prompting import PromptTask
from lpfl.semisup import AnnotationPolicy
from helpers import tiny_spec


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    spec = tiny_spec(tmp_path_factory.mktemp("fed") / "run")
    return spec, prepare(spec)


def fresh(setup, **fl):
    spec, s = setup
    config = replace(spec.fl, **fl)
    model = s.base.replica()
    model.set_mode(config.mode)
    return config, model


# fedavg -------------------------------------------------------------------------


def test_fedavg_worked_example():
    out = fed.fedavg([({"w": np.array(0.0)}, 1), ({"w": np.array(4.0)}, 3)])
    assert out["w"] == 3.0


def test_fedavg_identical_updates_and_single_client():
    p = {"a": np.random.default_rng(0).normal(size=(3, 2)), "b": np.arange(4.0)}
    for out in (fed.fedavg([(p, 2), (p, 7), (p, 1)]), fed.fedavg([(p, 5)])):
        for k in p:
            np.testing.assert_array_equal(out[k], p[k])


def elementwise_mean(updates):
    n = sum(w for _, w in updates)
    out = {}
    for name in updates[0][0]:
        shape = updates[0][0][name].shape
        flat = np.zeros(int(np.prod(shape)))
        for params, w in updates:
            src = params[name].ravel()
            for i in range(flat.size):
                flat[i] += src[i] * w / n
        out[name] = flat.reshape(shape)
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_fedavg_oracle_and_permutation_invariance(k, seed, equal):
    rng = np.random.default_rng(seed)
    updates = [
        ({"A": rng.normal(size=(2, 3)), "B": rng.normal(size=(3, 2))}, 5 if equal else int(rng.integers(1, 50)))
        for _ in range(k)
    ]
    out = fed.fedavg(updates)
    ref = elementwise_mean(updates)
    shuffled = fed.fedavg([updates[i] for i in rng.permutation(k)])
    for name in out:
        assert np.max(np.abs(out[name] - ref[name])) <= 1e-12
        assert np.max(np.abs(out[name] - shuffled[name])) <= 1e-12


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fed.fedavg([])
    with pytest.raises(ValueError):
        fed.fedavg([({"w": np.zeros(2)}, 0)])
    with pytest.raises(nx.ShapeError):
        fed.fedavg([({"w": np.zeros(2)}, 1), ({"w": np.zeros(3)}, 1)])
    with pytest.raises(ValueError):
        fed.fedavg([({"w": np.zeros(2)}, 1), ({"v": np.zeros(2)}, 1)])


def test_product_average_diagnostic_for_one_client():
    rng = np.random.default_rng(1)
    p = {"layers.0.query.lora_A": rng.normal(size=(2, 4)), "layers.0.query.lora_B": rng.normal(size=(4, 2))}
    out = fed.fedavg_product([(p, 3)])
    np.testing.assert_allclose(out["layers.0.query"], p["layers.0.query.lora_B"] @ p["layers.0.query.lora_A"], rtol=0, atol=1e-15)


# client update ------------------------------------------------------------------


def test_zero_epochs_returns_received_params(setup):
    spec, s = setup
    config, model = fresh(setup, local_epochs=0)
    client = fed.make_clients(s.split)[0]
    start = {k: v + 0.01 for k, v in model.trainable_state().items()}
    params, _ = fed.client_update(client, model, start, s.task, config, 1)
    for k in start:
        np.testing.assert_array_equal(params[k], start[k])


def test_local_training_lowers_single_pattern_loss(setup):
    spec, s = setup
    config, model = fresh(setup, local_epochs=4, lr=0.02)
    task = PromptTask(s.task.tokenizer, s.task.patterns[:1], s.task.verbalizer, s.task.max_len)
    client = fed.make_clients(s.split)[0]
    texts = [e.text for e in client.labeled]
    y = np.stack([e.target(2) for e in client.labeled])
    with nx.no_grad():
        before = task.loss(model, texts, y).item()
    params, _ = fed.client_update(client, model, model.trainable_state(), task, config, 1)
    model.load_state(params)
    with nx.no_grad():
        after = task.loss(model, texts, y).item()
    assert after <= before


def test_identical_clients_return_identical_params(setup):
    spec, s = setup
    config, model = fresh(setup, local_epochs=2)
    a = fed.make_clients(s.split)[0]
    b = fed.ClientState(a.id, list(a.labeled), [], 0)
    start = model.trainable_state()
    pa, _ = fed.client_update(a, model.replica(), start, s.task, config, 2)
    pb, _ = fed.client_update(b, model.replica(), start, s.task, config, 2)
    for k in pa:
        assert pa[k].tobytes() == pb[k].tobytes()


def test_client_without_labels_is_an_error(setup):
    spec, s = setup
    config, model = fresh(setup)
    with pytest.raises(ValueError):
        fed.client_update(fed.ClientState(0, [], [], 0), model, model.trainable_state(), s.task, config, 1)


# rounds and experiments -----------------------------------------------------------


def test_lp_round_bytes_and_payload_names(setup):
    spec, s = setup
    config, model = fresh(setup)
    clients = fed.make_clients(s.split)
    server = fed.init_server(model, s.task, s.split.validation, config, AnnotationPolicy())
    m = fed.run_round(server, clients, model, [model.replica() for _ in clients], s.task, s.split.validation, config, AnnotationPolicy())
    lp_bytes = 8 * model.config.lp_parameter_count()
    assert [c.bytes_up for c in m.clients] == [lp_bytes] * config.clients
    assert m.bytes_up == config.clients * lp_bytes
    assert set(server.params) == set(model.adapter_tensors())
    for name in server.params:
        wire.parse_adapter_name(name)
    assert m.n_total == sum(len(c.labeled) for c in clients)


def test_transmit_rejects_base_tensors_in_lp_mode():
    with pytest.raises(wire.WireError):
        fed._transmit({"embed.token": np.zeros((2, 2))}, LP, {})
    received, nbytes = fed._transmit({"embed.token": np.zeros((2, 2))}, FP, {})
    assert nbytes == 32 and "embed.token" in received


def test_experiment_freezes_base_exhausts_pools_and_weights_by_current_sizes(setup):
    spec, s = setup
    config, model = fresh(setup)
    before = {k: t.data.copy() for k, t in model.base.items()}
    sizes = []

    def on_round(server, clients):
        sizes.append((server.history[-1].n_total, sum(len(c.labeled) for c in clients)))

    result = fed.run_experiment(model, s.split, s.task, config, AnnotationPolicy(), on_round)
    for k, t in model.base.items():
        assert t.data.tobytes() == before[k].tobytes()
    assert len(result.history) == config.rounds
    assert all(not c.unlabeled for c in result.clients)
    assert all(a == b for a, b in sizes)
    assert sizes[0][0] < sizes[-1][0]
    assert 0.0 <= result.test_acc <= 1.0


def test_parallel_clients_do_not_change_results(setup):
    spec, s = setup
    outs = []
    for workers in (1, 2):
        config, model = fresh(setup, parallel_clients=workers, rounds=2)
        result = fed.run_experiment(model, s.split, s.task, config)
        outs.append(([m.val_acc for m in result.history], result.server.params))
    assert outs[0][0] == outs[1][0]
    for k in outs[0][1]:
        assert outs[0][1][k].tobytes() == outs[1][1][k].tobytes()


def test_fp_mode_trains_and_ships_everything(setup):
    spec, s = setup
    config, model = fresh(setup, arm="fp-fl", rounds=1)
    result = fed.run_experiment(model, s.split, s.task, config)
    fp_bytes = 8 * model.config.fp_parameter_count()
    assert result.history[0].bytes_up == config.clients * fp_bytes
    assert set(result.server.params) == set(model.parameters())


def test_run_experiment_rejects_mismatched_split(setup):
    spec, s = setup
    config, model = fresh(setup, clients=3)
    with pytest.raises(ValueError):
        fed.run_experiment(model, s.split, s.task, config)


def test_round_after_last_is_an_error(setup):
    spec, s = setup
    config, model = fresh(setup)
    server = fed.ServerState(model.trainable_state(), 3, 3, [1.0] * 4, 0.9)
    with pytest.raises(RuntimeError):
        fed.run_round(server, fed.make_clients(s.split), model, [], s.task, s.split.validation, config, AnnotationPolicy())


def test_comm_cost_default_config():
    cfg = ModelConfig(vocab_size=2200)
    lp = fed.comm_cost(fed.FLConfig(clients=2, rounds=5), cfg)
    assert lp["payload_per_client"] == 32768
    assert lp["per_round_up"] == 2 * 32768 and lp["total"] == 5 * 2 * 2 * 32768
    assert lp["lp_to_fp_ratio"] < 1
    fp = fed.comm_cost(fed.FLConfig(arm="fp-fl"), cfg)
    assert fp["payload_per_client"] == 8 * cfg.fp_parameter_count()


def test_config_violations():
    assert fed.FLConfig().violations() == []
    assert any("clients=1" in v for v in fed.FLConfig(arm="fp-ct", clients=5).violations())
    assert any("fl.arm" in v for v in fed.FLConfig(arm="xx").violations())


def test_metrics_csv_round_trip(tmp_path, setup):
    spec, s = setup
    config, model = fresh(setup, rounds=2)
    result = fed.run_experiment(model, s.split, s.task, config)
    ids = [p.id for p in s.patterns.patterns]
    fed.write_metrics_csv(tmp_path / "m.csv", result.history, ids)
    rows = fed.read_metrics_csv(tmp_path / "m.csv")
    assert list(rows[0]) == fed.metrics_header(ids)
    assert len(rows) == config.rounds * config.clients
    assert [float(r["val_acc"]) for r in rows[:: config.clients]] == [m.val_acc for m in result.history]


# wire ---------------------------------------------------------------------------


def test_wire_round_trip_and_size():
    rng = np.random.default_rng(0)
    t = {"layers.0.query.lora_A": rng.normal(size=(8, 64)), "layers.1.value.lora_B": rng.normal(size=(64, 8))}
    buf = wire.pack(t, {"round": 3})
    back, meta = wire.unpack(buf)
    assert meta == {"round": 3}
    for k in t:
        assert back[k].tobytes() == t[k].tobytes()
    assert wire.payload_nbytes(t) == 8 * 1024


@pytest.mark.parametrize("damage", ["flip", "magic", "truncate"])
def test_wire_detects_corruption(damage):
    buf = bytearray(wire.pack({"x": np.ones(3)}))
    if damage == "flip":
        buf[20] ^= 1
    elif damage == "magic":
        buf[0:4] = b"NOPE"
    else:
        buf = buf[:-5]
    with pytest.raises(wire.WireError):
        wire.unpack(bytes(buf))


def test_adapter_name_parsing():
    assert wire.parse_adapter_name("layers.3.value.lora_B") == (3, "value", "B")
    with pytest.raises(wire.WireError):
        wire.parse_adapter_name("layers.0.value.weight")
