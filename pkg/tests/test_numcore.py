import struct

import numpy as np
import pytest

from repdib.numcore import (
    Adam,
    CheckpointError,
    Linear,
    Mlp,
    NonFiniteError,
    Tensor,
    backward,
    clip,
    concat,
    exp,
    forward_mlp,
    gather,
    l2_normalize,
    load_checkpoint,
    log,
    log_softmax,
    relu,
    save_checkpoint,
    softmax,
    sqrt,
    square,
    stop_gradient,
    straight_through,
    tanh,
)
from repdib.numcore.checkpoint import MAGIC

from conftest import check_grads, param


# ------------------------------------------------------------- forward


def test_identity_net_passes_input():
    net = Mlp([2, 2], np.random.default_rng(0), "identity")
    net.layers[0].weight.data = np.eye(2)
    net.layers[0].bias.data = np.zeros(2)
    out = forward_mlp(net, Tensor([[1.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_relu_kills_negative_preactivations():
    x = Tensor(-np.abs(np.random.default_rng(1).normal(size=(3, 5))) - 0.1)
    np.testing.assert_array_equal(relu(x).data, 0.0)


def test_two_layer_net_matches_naive_matmul():
    rng = np.random.default_rng(7)
    net = Mlp([5, 4, 3], rng, "tanh")
    x = rng.normal(size=(6, 5))

    def naive(a, b):
        out = np.zeros((a.shape[0], b.shape[1]))
        for i in range(a.shape[0]):
            for j in range(b.shape[1]):
                out[i, j] = sum(a[i, k] * b[k, j] for k in range(a.shape[1]))
        return out

    l1, l2 = net.layers
    h = np.tanh(naive(x, l1.weight.data) + l1.bias.data)
    want = naive(h, l2.weight.data) + l2.bias.data
    np.testing.assert_allclose(net(Tensor(x)).data, want, rtol=1e-12, atol=1e-12)


def test_width_mismatch_raises():
    net = Mlp([4, 3], np.random.default_rng(0))
    with pytest.raises(ValueError, match="width"):
        net(Tensor(np.zeros((2, 5))))


def test_parameter_count_depends_only_on_widths():
    widths = [7, 5, 3]
    a = Mlp(widths, np.random.default_rng(0))
    b = Mlp(widths, np.random.default_rng(99))
    assert a.num_parameters() == b.num_parameters() == Mlp.count_parameters(widths) == 7 * 5 + 5 + 5 * 3 + 3


# ------------------------------------------------------------ backward


def test_linear_loss_gradient_is_input():
    x = np.array([1.5, -2.0, 0.25])
    w = Tensor(np.array([0.3, 0.1, -0.7]), requires_grad=True)
    backward((w * x).sum())
    np.testing.assert_array_equal(w.grad, x)


def test_quadratic_loss_gradient_is_twice_w():
    w = Tensor(np.array([0.3, 0.1, -0.7]), requires_grad=True)
    backward(square(w).sum())
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_non_scalar_loss_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(w * 2.0)


def test_gradient_accumulates_over_shared_use():
    w = Tensor(np.array([2.0]), requires_grad=True)
    backward((w * w + w * 3.0).sum())
    np.testing.assert_allclose(w.grad, [2 * 2.0 + 3.0])


LAYER_CASES = ["linear", "mlp_relu", "mlp_tanh", "mlp_identity"]


@pytest.mark.parametrize("kind", LAYER_CASES)
def test_layer_gradients_match_finite_differences_over_seeds(kind):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        if kind == "linear":
            net = Linear(4, 3, rng)
        else:
            net = Mlp([4, 5, 3], rng, kind.split("_")[1])
        # nudge biases off zero so relu kinks are not hit exactly
        for _, p in net.named_parameters():
            p.data = p.data + rng.normal(0, 0.1, size=p.shape)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        target = rng.normal(size=(3, 3))
        params = [p for _, p in net.named_parameters()] + [x]
        worst = max(worst, check_grads(lambda: square(net(x) - target).sum(), params))
    assert worst < 1e-4


OP_CASES = {
    "exp_log": lambda a, b: log(exp(a) + square(b) + 1.0).sum(),
    "div_sqrt": lambda a, b: (sqrt(square(a) + 1.0) / (square(b) + 2.0)).sum(),
    "softmax": lambda a, b: (softmax(a) * b).sum(),
    "log_softmax": lambda a, b: (log_softmax(a, axis=0) * b).sum(),
    "matmul_T": lambda a, b: tanh(a @ b.T).sum(),
    "l2_normalize": lambda a, b: (l2_normalize(a) * b).sum(),
    "concat_slice": lambda a, b: square(concat([a, b], axis=1)[:, 1:4]).sum(),
    "fancy_index": lambda a, b: square(a[np.array([0, 2, 0])]).sum() + b.mean(),
    "gather": lambda a, b: gather(a, np.array([1, 0, 3])).sum() * b.sum(),
    "mean_axis": lambda a, b: square(a.mean(axis=0) - b.mean(axis=1).sum()).sum(),
    "broadcast": lambda a, b: square(a - b[0]).sum(),
    "clip": lambda a, b: square(clip(a, -0.5, 0.5)).sum() + b.sum(),
    "reshape": lambda a, b: square(a.reshape(4, 3) @ b.reshape(4, 3).T).sum(),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn = OP_CASES[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        if name == "clip":
            # keep entries away from the clip boundary
            a.data = np.where(np.abs(np.abs(a.data) - 0.5) < 1e-3, 0.0, a.data)
        worst = max(worst, check_grads(lambda: fn(a, b), [a, b]))
    assert worst < 1e-4


def test_stop_gradient_blocks_flow():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((stop_gradient(a) * a).sum())
    np.testing.assert_array_equal(a.grad, [1.0, 2.0])


def test_straight_through_forward_value_and_identity_gradient():
    a = Tensor(np.array([0.1, 0.7]), requires_grad=True)
    value = np.array([0.0, 1.0])
    out = straight_through(a, value)
    np.testing.assert_array_equal(out.data, value)
    backward((out * np.array([3.0, -2.0])).sum())
    np.testing.assert_array_equal(a.grad, [3.0, -2.0])


def test_non_finite_result_names_operation():
    with pytest.raises(NonFiniteError, match="log"):
        log(Tensor(np.array([0.0, -1.0])))
    with pytest.raises(NonFiniteError, match="exp"):
        exp(Tensor(np.array([1e4])))


# ---------------------------------------------------------------- adam


def test_adam_single_step_matches_hand_computation():
    w = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    # two steps: g=2 then g=-1, checked against the textbook recurrence written out by hand
    w.grad = np.array([2.0])
    opt.step()
    m1, v1 = 0.1 * 2.0, 0.001 * 4.0
    w1 = 0.5 - 0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    np.testing.assert_allclose(w.data, [w1], rtol=0, atol=1e-15)
    w.grad = np.array([-1.0])
    opt.step()
    m2 = 0.9 * m1 + 0.1 * -1.0
    v2 = 0.999 * v1 + 0.001 * 1.0
    w2 = w1 - 0.1 * (m2 / (1 - 0.9 ** 2)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(w.data, [w2], rtol=0, atol=1e-15)
    assert w.grad is None


def test_adam_zero_gradient_leaves_params():
    w = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    w.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(w.data, [0.5, -1.0])
    assert opt.step_count == 1


def test_adam_constant_gradient_step_approaches_lr_sign():
    w = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01)
    prev = w.data.copy()
    for _ in range(500):
        w.grad = np.array([3.0, -0.2])
        opt.step()
        step = w.data - prev
        prev = w.data.copy()
    np.testing.assert_allclose(step, [-0.01, 0.01], rtol=1e-6)


def test_adam_nan_gradient_names_parameter():
    w = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"encoder.layers.0.weight": w}, lr=0.1)
    w.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="encoder.layers.0.weight"):
        opt.step()


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = Mlp([3, 4, 2], rng)
        opt = Adam(net.trainable(), lr=1e-2)
        x = rng.normal(size=(8, 3))
        for _ in range(20):
            backward(square(net(Tensor(x))).mean())
            opt.step()
        return [p.data.copy() for _, p in net.named_parameters()]

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"enc/w": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.array([2.5], np.float32),
              "empty": np.zeros((0, 3), np.float32)}
    meta = {"frame": 17, "name": "x"}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, arrays, meta)
    back, meta2 = load_checkpoint(path)
    assert meta2 == meta
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_checkpoint_layout_is_documented_binary(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"ab": np.array([[1.0, 2.0]], np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"RPDB"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1 and count == 1
    (name_len,) = struct.unpack("<I", raw[12:16])
    assert raw[16:16 + name_len] == b"ab"
    off = 16 + name_len
    (ndim,) = struct.unpack("<I", raw[off:off + 4])
    dims = struct.unpack("<" + "I" * ndim, raw[off + 4:off + 4 + 4 * ndim])
    assert dims == (1, 2)
    payload = np.frombuffer(raw[off + 4 + 4 * ndim:], dtype="<f4")
    np.testing.assert_array_equal(payload, [1.0, 2.0])


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"a": np.ones(3, np.float32)})
    raw = path.read_bytes()
    (tmp_path / "bad_magic.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "trailing.bin").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad_magic.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trailing.bin")


def test_module_state_dict_round_trip():
    a = Mlp([3, 4, 2], np.random.default_rng(0))
    b = Mlp([3, 4, 2], np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb
        np.testing.assert_array_equal(pa.data, pb.data)
