import numpy as np
import pytest

from tavce import tensor as T
from tavce.checkpoint import (
    AdamState,
    Checkpoint,
    TrainConfig,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from tavce.encoders import ModelDims, init_params
from tavce.errors import ChecksumError, DimensionMismatchError, FormatError, NonFiniteError
from tavce.rng import SeededRng
from tavce.synthdata import GeneratorConfig, generate_dataset
from tavce.tensor import Tensor
from tavce.training import (
    LossRecord,
    adam_step,
    format_loss_log,
    parse_loss_log,
    sample_stage2_batch,
    stage2_losses,
    train_stage1,
    train_stage2,
)

DATA = generate_dataset(GeneratorConfig(seed=1, num_sequences=4, T=8))
S1 = TrainConfig(stage=1, iterations=3)
S2 = TrainConfig(stage=2, iterations=3)


@pytest.fixture(scope="module")
def metric():
    return train_stage1(DATA, S1).checkpoint


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_hand_step():
    p = {"w": Tensor(np.array(1.0))}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array(1.0)}, state, 0.1)
    # m_hat = 1, v_hat = 1 after bias correction
    assert p["w"].data == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_rejects_nonfinite_and_missing():
    p = {"w": Tensor(np.array(1.0))}
    with pytest.raises(NonFiniteError):
        adam_step(p, {"w": np.array(np.nan)}, AdamState.zeros_like(p), 0.1)
    with pytest.raises(ValueError):
        adam_step(p, {}, AdamState.zeros_like(p), 0.1)


def test_adam_deterministic():
    def run():
        p = {"w": Tensor(np.linspace(-1, 1, 5))}
        s = AdamState.zeros_like(p)
        for k in range(4):
            adam_step(p, {"w": np.sin(p["w"].data + k)}, s, 0.05)
        return p["w"].data.tobytes(), s.m["w"].tobytes(), s.v["w"].tobytes()

    assert run() == run()


def test_stage1_log_reproducible():
    a = train_stage1(DATA, S1.with_(iterations=2))
    b = train_stage1(DATA, S1.with_(iterations=2))
    assert format_loss_log(a.log) == format_loss_log(b.log)
    assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)


def test_stage1_only_updates_encoders(metric):
    fresh = init_params(S1.seed, S1.dims)
    for name, arr in metric.params().items():
        changed = arr.data.tobytes() != fresh[name].data.tobytes()
        assert changed == (name.split(".")[0] in ("E_a", "E_v")), name


def test_stage1_rejects_short_sequences():
    short = generate_dataset(GeneratorConfig(num_sequences=2, T=6))
    with pytest.raises(ValueError):
        train_stage1(short, S1)


def test_stage2_keeps_metric_frozen(metric):
    out = train_stage2(DATA, metric, S2).checkpoint
    for name in metric.params().tensors:
        if name.split(".")[0] in ("E_a", "E_v"):
            assert out.tensors[name].tobytes() == metric.tensors[name].tobytes(), name


def test_stage2_without_cerl_leaves_cerl_untouched(metric):
    out = train_stage2(DATA, metric, S2.with_(use_cerl=False, use_car=False)).checkpoint
    fresh = init_params(S2.seed, S2.dims)
    assert out.tensors["CERL.conv1"].tobytes() == fresh["CERL.conv1"].data.tobytes()
    assert all(r.reg == 0.0 for r in train_stage2(DATA, metric, S2.with_(use_car=False)).log)


def test_lambda_zero_total_equals_render(metric):
    params = metric.params()
    batch = sample_stage2_batch(DATA, SeededRng(0), 3)
    losses = stage2_losses(params, batch, S2.with_(lambda_reg=0.0))
    assert abs(losses.total.item() - losses.render.item()) <= 1e-12
    assert losses.reg is not None


def test_car_gradient_reaches_generator(metric):
    params = metric.params()
    params.set_trainable(S2.trainable_groups())
    batch = sample_stage2_batch(DATA, SeededRng(1), 2)
    losses = stage2_losses(params, batch, S2)
    T.backward(losses.reg)
    assert np.abs(params["G.w_up2"].grad).sum() > 0
    assert np.abs(params["CERL.conv1"].grad).sum() > 0
    assert params["E_v.w1"].grad is None


def test_checkpoint_round_trip(metric, tmp_path):
    path = tmp_path / "m.tvce"
    save_checkpoint(metric, path)
    back = load_checkpoint(path)
    assert back.config == metric.config
    for name, arr in metric.tensors.items():
        assert back.tensors[name].tobytes() == arr.tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()
    assert back.adam_state().t == 3


def test_checkpoint_single_byte_corruption(metric):
    raw = checkpoint_bytes(metric)
    for pos in range(8, len(raw), 401):
        bad = bytearray(raw)
        bad[pos] ^= 0x10
        with pytest.raises(ChecksumError):
            parse_checkpoint(bytes(bad))
    with pytest.raises(FormatError, match="not a TVCE"):
        parse_checkpoint(b"ABCD" + raw[4:])
    with pytest.raises(FormatError):
        parse_checkpoint(raw[:-10])


def test_dimension_mismatch_names_tensor(metric):
    wide = S2.with_(dims=ModelDims(d=8))
    with pytest.raises(DimensionMismatchError, match="E_a.w2"):
        train_stage2(DATA, metric, wide)


def test_loss_log_round_trip():
    recs = [LossRecord(0, 1.5, 0.25, 1.25), LossRecord(1, 0.1 + 0.2, 0.0, 0.0)]
    text = "# header\n" + format_loss_log(recs)
    assert parse_loss_log(text) == recs


def test_checkpoint_requires_every_tensor(metric):
    tensors = dict(metric.tensors)
    del tensors["G.b_up2"]
    with pytest.raises(FormatError, match="G.b_up2"):
        parse_checkpoint(checkpoint_bytes(Checkpoint(1, metric.config, tensors)))
