import io

import numpy as np
import pytest

from flowtransfer import data as D
from flowtransfer import lifecycle as L
from flowtransfer import nn_core as N
from flowtransfer.errors import ContractError, CorruptFileError, DataError


@pytest.fixture(scope="module")
def windows():
    ds = D.generate_synthetic(D.SyntheticConfig(days=8, seed=4, noise_std=3.0))
    norm = D.fit_normalizer(ds, (0, 3 * 96))
    return norm.normalize_windows(D.build_windows(ds, (5, 3 * 96)))


def test_day_groups_follow_calendar():
    groups = L._day_groups(np.arange(5, 300))
    assert [(g.start, g.stop) for g in groups] == [(0, 91), (91, 187), (187, 283), (283, 295)]


def test_zero_learning_rate_leaves_weights(small_spec, windows):
    init = N.init_model(small_spec, 3)
    model, trace = L.train_batch(init.copy(), windows, L.TrainingConfig(epochs=3, learning_rate=0.0))
    assert model.weights_equal(init)
    assert trace[0] == trace[1] == trace[2]


def test_training_reduces_loss(small_spec, windows):
    _, trace = L.fit_new(small_spec, windows, L.TrainingConfig(epochs=60, learning_rate=0.05, seed=1))
    assert trace[-1] < 0.5 * trace[0]


@pytest.mark.parametrize("policy", ["day", "window"])
def test_training_deterministic(small_spec, windows, policy):
    cfg = L.TrainingConfig(epochs=2, learning_rate=0.01, seed=5, batch_policy=policy)
    a, ta = L.fit_new(small_spec, windows, cfg)
    b, tb = L.fit_new(small_spec, windows, cfg)
    assert a.weights_equal(b) and ta == tb
    assert np.all(a.hidden == 0) and np.all(a.cell == 0)


def test_training_contract(small_spec, windows):
    model = N.init_model(small_spec, 0)
    with pytest.raises(ContractError):
        L.train_batch(model, windows[:0], L.TrainingConfig(epochs=1))
    backwards = D.WindowBatch(windows.features[::-1], windows.targets[::-1], windows.slots[::-1])
    with pytest.raises(ContractError):
        L.train_batch(model, backwards, L.TrainingConfig(epochs=1))
    for bad in (dict(epochs=0), dict(learning_rate=-1.0), dict(batch_policy="week")):
        with pytest.raises(ContractError):
            L.train_batch(model, windows, L.TrainingConfig(**bad))


def test_retrain_equals_fit_new_from_same_start(small_spec, windows):
    cfg = L.TrainingConfig(epochs=3, learning_rate=0.02, seed=7)
    fresh, _ = L.fit_new(small_spec, windows, cfg)
    again, _ = L.retrain(N.init_model(small_spec, 7), windows, cfg)
    assert fresh.weights_equal(again)


def test_retrain_zero_lr_is_identity(small_spec, windows):
    src = N.init_model(small_spec, 2)
    out, _ = L.retrain(L.transfer(src), windows, L.retrain_defaults(epochs=2, learning_rate=0.0))
    assert out.weights_equal(src)


def test_retrain_defaults():
    cfg = L.retrain_defaults()
    assert cfg.epochs == 2000 and cfg.normalizer_source == "january_year2"


def test_transfer_isolated_and_idempotent(small_spec):
    src = N.init_model(small_spec, 1)
    src.hidden[:] = 0.3
    t = L.transfer(src)
    assert t.weights_equal(src) and np.all(t.hidden == 0)
    t.params["dense_w"][0, 0] += 1.0
    assert not t.weights_equal(src)
    assert L.transfer(L.transfer(src)).weights_equal(L.transfer(src))
    assert src.hidden[0] == 0.3


def test_online_step_predicts_before_learning(small_spec, windows):
    model = N.init_model(small_spec, 0)
    ref = model.copy()
    expected, _ = N.forward(ref, windows.features[0], carry_state=True)
    pred, out = L.online_step(model, windows.features[0], 1.0, L.OnlineConfig(learning_rate=0.1))
    assert pred == expected
    assert not out.weights_equal(ref)
    # carried state is the one from the prediction pass
    assert np.array_equal(out.hidden, ref.hidden) and np.array_equal(out.cell, ref.cell)


def test_online_step_descends(small_spec, windows):
    model = N.init_model(small_spec, 0)
    x, y = windows.features[10], 0.9
    loss0, _ = N.compute_gradients(model, x, y)
    L.online_step(model, x, y, L.OnlineConfig(learning_rate=1e-3, updates_per_sample=1))
    N.reset_state(model)
    loss1, _ = N.compute_gradients(model, x, y)
    assert loss1 < loss0


def test_online_zero_updates_is_plain_forward(small_spec, windows):
    a = N.init_model(small_spec, 0)
    b = a.copy()
    for i in range(5):
        pa, _ = L.online_step(a, windows.features[i], 0.5, L.OnlineConfig(learning_rate=1.0, updates_per_sample=0))
        pb, _ = N.forward(b, windows.features[i], carry_state=True)
        assert pa == pb
    assert a.weights_equal(b)


def test_online_rejects_nonfinite(small_spec, windows):
    with pytest.raises(DataError):
        L.online_step(N.init_model(small_spec, 0), windows.features[0], float("nan"), L.OnlineConfig())


# --------------------------------------------------------------------------- files


def test_round_trip_bit_exact(small_spec):
    model = N.init_model(small_spec, 11)
    back = L.model_from_bytes(L.model_to_bytes(model))
    assert back.spec == model.spec and back.weights_equal(model)
    x = np.random.default_rng(0).random((5, 9))
    assert N.forward(back, x)[0] == N.forward(model, x)[0]


def test_round_trip_default_spec_file(tmp_path):
    model = N.init_model(N.NetworkSpec(), 0)
    path = tmp_path / "m.fcw"
    L.save_model(model, path)
    assert path.stat().st_size == 4 + 7 * 8 + 42601 * 8 + 8
    assert L.load_model(path).weights_equal(model)


def test_round_trip_non_stateful():
    spec = N.NetworkSpec(5, 9, 3, 2, 4, 2, stateful=False)
    buf = io.BytesIO()
    L.save_model(N.init_model(spec, 0), buf)
    buf.seek(0)
    assert L.load_model(buf).spec.stateful is False


def _flip(blob: bytes, pos: int) -> bytes:
    b = bytearray(blob)
    b[pos] ^= 0x01
    return bytes(b)


@pytest.mark.parametrize(
    "corrupt, fragment",
    [
        (lambda b: b"XYZ" + b[3:], "magic"),
        (lambda b: b[:3] + b"9" + b[4:], "version"),
        (lambda b: b[:20], "truncated"),
        (lambda b: b[:-1], "bytes"),
        (lambda b: b + b"\0", "bytes"),
        (lambda b: _flip(b, 100), "checksum"),
        (lambda b: _flip(b, len(b) - 1), "checksum"),
    ],
)
def test_corrupt_files_rejected(small_spec, corrupt, fragment):
    blob = L.model_to_bytes(N.init_model(small_spec, 0))
    with pytest.raises(CorruptFileError, match=fragment):
        L.model_from_bytes(corrupt(blob))


def test_invalid_architecture_in_file(small_spec):
    blob = bytearray(L.model_to_bytes(N.init_model(small_spec, 0)))
    blob[4:12] = (0).to_bytes(8, "little")  # input_lags = 0
    with pytest.raises(CorruptFileError, match="architecture"):
        L.model_from_bytes(bytes(blob))
