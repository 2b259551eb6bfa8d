import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tavce.encoders import (
    ModelDims,
    audio_encode,
    cerl_fuse,
    correlation_residual,
    extract_feature_map,
    init_params,
    param_shapes,
    render_frame,
    visual_encode,
)
from tavce.errors import ShapeError
from tavce.rng import SeededRng
from tavce.tensor import Tensor

DIMS = ModelDims()
PARAMS = init_params(0, DIMS, dtype=np.float64)


def test_init_is_deterministic():
    a, b = init_params(5, DIMS), init_params(5, DIMS)
    for name, t in a.items():
        assert t.data.tobytes() == b[name].data.tobytes()
    assert init_params(6, DIMS)["E_a.w1"].data.tobytes() != a["E_a.w1"].data.tobytes()


def test_audio_encoder_parameter_count():
    assert PARAMS.count("E_a") == 64 * 32 + 32 + 32 * 16 + 16 == 2608


def test_param_shapes_cover_every_group():
    groups = {n.split(".")[0] for n in param_shapes(DIMS)}
    assert groups == {"E_a", "E_v", "E_f", "CERL", "G"}
    assert param_shapes(DIMS)["CERL.conv2"] == (16, 32)


def test_zero_inputs_give_zero_outputs():
    assert not audio_encode(PARAMS, Tensor(np.zeros(64))).data.any()
    assert not visual_encode(PARAMS, Tensor(np.zeros((1, 32, 32)))).data.any()
    fmap = extract_feature_map(PARAMS, Tensor(np.zeros((1, 32, 32))))
    assert fmap.shape == (32, 8, 8) and not fmap.data.any()


def test_shapes_single_and_batched():
    rng = SeededRng(1)
    assert audio_encode(PARAMS, Tensor(rng.normal(64))).shape == (16,)
    assert audio_encode(PARAMS, Tensor(rng.normal((5, 64)))).shape == (5, 16)
    assert visual_encode(PARAMS, Tensor(rng.uniform(3 * 1024).reshape(3, 1, 32, 32))).shape == (3, 16)
    with pytest.raises(ShapeError):
        audio_encode(PARAMS, Tensor(rng.normal(63)))


def test_cerl_zero_correlation_is_identity():
    f = Tensor(SeededRng(2).normal((32, 8, 8)))
    g = cerl_fuse(PARAMS, f, Tensor(np.zeros((16, 16))))
    assert g.data.tobytes() == f.data.tobytes()


def test_cerl_zero_map_stays_zero():
    c = Tensor(SeededRng(3).normal((16, 16)))
    assert not cerl_fuse(PARAMS, Tensor(np.zeros((32, 8, 8))), c).data.any()


def test_cerl_residual_is_linear_in_correlation():
    rng = SeededRng(4)
    f = Tensor(rng.normal((1, 32, 8, 8)))
    c1, c2 = rng.normal((1, 16, 16)), rng.normal((1, 16, 16))
    r = lambda c: correlation_residual(PARAMS, f, Tensor(c)).data  # noqa: E731
    np.testing.assert_allclose(r(2.0 * c1 - c2), 2.0 * r(c1) - r(c2), rtol=1e-10, atol=1e-10)


def test_cerl_invariant_to_correlation_scale():
    rng = SeededRng(5)
    f = Tensor(rng.normal((32, 8, 8)))
    c = rng.normal((16, 16))
    np.testing.assert_allclose(
        cerl_fuse(PARAMS, f, Tensor(c)).data, cerl_fuse(PARAMS, f, Tensor(7.5 * c)).data, rtol=1e-10, atol=1e-12
    )


def test_cerl_rejects_wrong_shapes():
    with pytest.raises(ShapeError):
        cerl_fuse(PARAMS, Tensor(np.ones((16, 8, 8))), Tensor(np.ones((16, 16))))
    with pytest.raises(ShapeError):
        cerl_fuse(PARAMS, Tensor(np.ones((32, 8, 8))), Tensor(np.ones((8, 8))))


def test_render_frame_range_and_determinism():
    rng = SeededRng(6)
    g = Tensor(rng.normal((32, 8, 8)))
    fa = Tensor(rng.normal(16))
    out = render_frame(PARAMS, g, fa)
    assert out.shape == (1, 32, 32)
    assert 0.0 < out.data.min() and out.data.max() < 1.0
    assert render_frame(PARAMS, g, fa).data.tobytes() == out.data.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_encoders_finite_on_bounded_inputs(seed):
    rng = SeededRng(seed)
    params = init_params(seed % 97, DIMS)
    a = Tensor((rng.uniform(64) * 20 - 10).astype(np.float32))
    v = Tensor((rng.uniform(1024) * 20 - 10).reshape(1, 32, 32).astype(np.float32))
    for out in (audio_encode(params, a), visual_encode(params, v), extract_feature_map(params, v)):
        assert np.isfinite(out.data).all()
