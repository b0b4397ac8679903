import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamlas import checkpoint
from streamlas import tensor as tn
from streamlas.tensor import ShapeError, Tensor

from gradcheck import check_grads


def test_softmax_of_equal_logits_is_uniform():
    out = tn.softmax(Tensor([1.0, 1.0, 1.0])).data
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)


def test_sigmoid_at_zero():
    assert tn.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)


def test_square_derivative():
    x = tn.parameter(3.0)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_sigmoid_derivative_at_zero():
    x = tn.parameter(0.0)
    tn.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25)


def test_random_three_layer_composition_matches_fd():
    rng = np.random.default_rng(0)
    x = tn.parameter(rng.normal(size=(3, 4)))
    w1 = tn.parameter(rng.normal(size=(4, 5)) * 0.5)
    w2 = tn.parameter(rng.normal(size=(5, 5)) * 0.5)
    w3 = tn.parameter(rng.normal(size=(5, 2)) * 0.5)

    def loss():
        h = tn.tanh(x @ w1)
        h = tn.sigmoid(h @ w2) * h
        return tn.log_softmax(h @ w3, axis=-1).sum() + (h * h).mean()

    err, where = check_grads(loss, {"x": x, "w1": w1, "w2": w2, "w3": w3})
    assert err < 1e-5, where


PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "maximum": lambda a, b: tn.maximum(a, b),
    "minimum": lambda a, b: tn.minimum(a, b),
    "power": lambda a, b: tn.power(a * a + 1.0, 1.5) + b,
    "sqrt": lambda a, b: tn.sqrt(a * a + 1.0) * b,
    "tanh": lambda a, b: tn.tanh(a) * b,
    "relu": lambda a, b: tn.relu(a) * b,
    "exp": lambda a, b: tn.exp(a) * b,
    "log": lambda a, b: tn.log(a * a + 0.5) * b,
    "clip": lambda a, b: tn.clip(a, -0.5, 0.5) * b,
    "softmax": lambda a, b: tn.softmax(a, axis=-1) * b,
    "log_softmax": lambda a, b: tn.log_softmax(a, axis=0) * b,
    "matmul": lambda a, b: a @ b.transpose(),
    "concat": lambda a, b: tn.concat([a, b * 2.0], axis=0),
    "stack": lambda a, b: tn.stack([a, b], axis=1),
    "getitem": lambda a, b: a[1:, ::2] * b[:2, :2],
    "fancy_getitem": lambda a, b: a[np.array([0, 2, 0])] * b[0],
    "take_along": lambda a, b: tn.take_along(a, np.array([[2, 0, 1, 1], [0, 0, 3, 2], [1, 2, 3, 0]]), 1) * b,
    "gather_rows": lambda a, b: tn.gather_rows(a, np.array([2, 2, 0])) * b,
    "reshape_mean": lambda a, b: (a.reshape(4, 3) @ b.reshape(3, 4)).mean(axis=0),
    "broadcast": lambda a, b: a * b[0:1, :] + b[:, 0:1],
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_fd(name):
    rng = np.random.default_rng(1)
    a = tn.parameter(rng.normal(size=(3, 4)))
    b = tn.parameter(rng.normal(size=(3, 4)))
    fn = PRIMITIVES[name]
    weights = {}

    def loss():
        out = fn(a, b)
        if out.shape not in weights:
            weights[out.shape] = np.random.default_rng(2).normal(size=out.shape)
        return (out * weights[out.shape]).sum()

    err, where = check_grads(loss, {"a": a, "b": b})
    assert err < 1e-5, where


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(logits, c):
    x = np.array(logits)
    p = tn.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(tn.softmax(Tensor(x + c)).data, p, atol=1e-12, rtol=0)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as info:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_backward_requires_scalar():
    x = tn.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_unreachable_leaf_has_zero_grad():
    x, y = tn.parameter(np.ones(2)), tn.parameter(np.ones(2))
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(y.grad, 0.0)
    np.testing.assert_array_equal(x.grad, 3.0)


def test_fan_out_accumulates():
    x = tn.parameter(2.0)
    (x * x + x * 3.0 + x).backward()
    assert x.grad == pytest.approx(2 * 2.0 + 4.0)


def test_grads_accumulate_until_zeroed():
    x = tn.parameter(1.0)
    (x * 2.0).backward()
    (x * 2.0).backward()
    assert x.grad == 4.0
    x.zero_grad()
    assert x.grad == 0.0


def test_no_grad_records_nothing():
    x = tn.parameter(np.ones(2))
    with tn.no_grad():
        y = tn.tanh(x) * 2.0
    assert not y.requires_grad and y._parents == ()
    assert tn.grad_enabled()


def test_maximum_ties_route_gradient_to_first_operand():
    a, b = tn.parameter(1.0), tn.parameter(1.0)
    tn.maximum(a, b).backward()
    assert (a.grad, b.grad) == (1.0, 0.0)


def test_float32_mode():
    tn.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        tn.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
def _arrays(seed=0):
    rng = np.random.default_rng(seed)
    return {"b.bias": rng.normal(size=4), "a.w": rng.normal(size=(3, 2)), "g": np.array(1.5)}


def test_checkpoint_roundtrip(tmp_path):
    arrays = _arrays()
    checkpoint.save(tmp_path / "m", arrays)
    back = checkpoint.load(tmp_path / "m")
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k])
        np.testing.assert_array_equal(back[k], np.asarray(arrays[k], np.float32))


def test_checkpoint_manifest_layout(tmp_path):
    checkpoint.save(tmp_path / "m", _arrays())
    lines = (tmp_path / "m.manifest").read_text().splitlines()
    assert lines[0] == "MSCKPT1"
    assert lines[1] == "blob\tm.bin\t" + str(4 * (4 + 6 + 1))
    assert lines[2:] == ["a.w\t3,2\t0", "b.bias\t4\t24", "g\t\t40"]
    blob = (tmp_path / "m.bin").read_bytes()
    np.testing.assert_array_equal(np.frombuffer(blob[:24], "<f4"),
                                  _arrays()["a.w"].astype(np.float32).ravel())


def test_checkpoint_load_save_is_byte_identical(tmp_path):
    checkpoint.save(tmp_path / "a", _arrays(3))
    checkpoint.save(tmp_path / "b", checkpoint.load(tmp_path / "a"))
    for suffix in (".manifest", ".bin"):
        a = (tmp_path / ("a" + suffix)).read_bytes()
        b = (tmp_path / ("b" + suffix)).read_bytes()
        if suffix == ".manifest":
            a, b = a.replace(b"a.bin", b"X"), b.replace(b"b.bin", b"X")
        assert a == b


@pytest.mark.parametrize("damage", ["tag", "truncate", "missing_blob"])
def test_checkpoint_corruption_is_reported(tmp_path, damage):
    checkpoint.save(tmp_path / "m", _arrays())
    if damage == "tag":
        p = tmp_path / "m.manifest"
        p.write_text(p.read_text().replace("MSCKPT1", "MSCKPT0"))
    elif damage == "truncate":
        p = tmp_path / "m.bin"
        p.write_bytes(p.read_bytes()[:-4])
    else:
        (tmp_path / "m.bin").unlink()
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "m")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    checkpoint.save(tmp_path / "m", _arrays())
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.bin", "m.manifest"]
