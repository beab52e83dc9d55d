import numpy as np
import pytest

from pcmr import autodiff as ad
from pcmr.autodiff import Tensor, gradcheck
from pcmr.nn import GRU, Adam, FeatureTransform, Linear, load_checkpoint, load_into, save_checkpoint


def test_linear_shapes_and_gradcheck():
    rng = np.random.default_rng(0)
    layer = Linear(4, 3, rng)
    x = rng.normal(size=(5, 4))
    out = layer(Tensor(x))
    assert out.shape == (5, 3)
    w = Tensor(rng.normal(size=(5, 3)))

    def f(weight, bias):
        return ((Tensor(x) @ weight.T + bias) * w).sum()

    report = gradcheck(f, [layer.weight, layer.bias])
    assert report.passed


def test_gru_zero_weights_zero_output():
    rng = np.random.default_rng(1)
    gru = GRU(3, 4, 2, rng)
    for p in gru.parameters():
        p.data[:] = 0.0
    out, _ = gru.step(Tensor(rng.normal(size=(2, 3))), gru.init_state(2))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_gru_state_threading_matches_batch_unroll():
    rng = np.random.default_rng(2)
    gru = GRU(3, 5, 2, rng)
    xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(6)]
    whole, final_state = gru.run(xs)
    state = gru.init_state(2)
    stepped = []
    for x in xs:
        out, state = gru.step(x, state)
        stepped.append(out)
    for a, b in zip(whole, stepped):
        assert np.array_equal(a.data, b.data)
    for a, b in zip(final_state, state):
        assert np.array_equal(a.data, b.data)
    # splitting the sequence and threading the state is also exact
    first, mid_state = gru.run(xs[:3])
    second, _ = gru.run(xs[3:], mid_state)
    for a, b in zip(whole, first + second):
        assert np.array_equal(a.data, b.data)


def test_gru_gradcheck_through_ten_steps():
    rng = np.random.default_rng(3)
    gru = GRU(2, 3, 2, rng)
    xs = [rng.normal(size=(1, 2)) for _ in range(10)]
    w = rng.normal(size=(1, 3))

    def f(*params):
        outs, _ = gru.run([Tensor(x) for x in xs])
        return (outs[-1] * Tensor(w)).sum() + (outs[4] * 0.5).sum()

    report = gradcheck(f, gru.parameters(), tol=1e-4)
    assert report.passed, repr(report)


def test_gru_dropout_placement():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 3)))
    gru = GRU(3, 64, 2, np.random.default_rng(5), dropout=0.97)
    gru.train()
    out, _ = gru.step(x, gru.init_state(3))
    # dropout sits between layers, not on the final output
    assert np.count_nonzero(out.data == 0.0) < out.data.size // 2
    gru_all = GRU(3, 64, 2, np.random.default_rng(5), dropout=0.97, dropout_all_layers=True)
    gru_all.train()
    out_all, _ = gru_all.step(x, gru_all.init_state(3))
    assert np.count_nonzero(out_all.data == 0.0) > out_all.data.size // 2


def test_gru_eval_mode_deterministic():
    rng = np.random.default_rng(6)
    xs = [Tensor(rng.normal(size=(1, 3)))]
    a = GRU(3, 4, 2, np.random.default_rng(7), dropout=0.5)
    b = GRU(3, 4, 2, np.random.default_rng(7), dropout=0.5)
    oa, _ = a.run(xs)
    ob, _ = b.run(xs)
    assert np.array_equal(oa[0].data, ob[0].data)


def test_gru_input_size_mismatch():
    gru = GRU(3, 4, 1, np.random.default_rng(8))
    with pytest.raises(ValueError):
        gru.step(Tensor(np.zeros((1, 5))), gru.init_state(1))


def test_feature_transform_identity_at_init():
    rng = np.random.default_rng(9)
    ft = FeatureTransform(3, rng)
    x = rng.normal(size=(20, 3))
    out = ft(Tensor(x))
    assert np.array_equal(out.data, x)


def test_feature_transform_gradcheck():
    rng = np.random.default_rng(10)
    ft = FeatureTransform(2, rng, widths=(4, 6), head_width=4)
    # break the exact-identity init so gradients are informative
    for p in ft.parameters():
        p.data += 0.01 * rng.normal(size=p.data.shape)
    x = rng.normal(size=(5, 2))
    w = rng.normal(size=(5, 2))

    def f(*params):
        return (ft(Tensor(x)) * Tensor(w)).sum()

    report = gradcheck(f, ft.parameters(), tol=1e-4)
    assert report.passed, repr(report)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_quadratic_bowl_converges():
    x = Tensor(np.array([1.0]), requires_grad=True, name="x")
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert abs(x.data[0]) < 1e-3


def test_adam_zero_gradient_no_change():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = Adam([x])
    before = x.data.copy()
    opt.zero_grad()
    opt.step()
    assert np.array_equal(x.data, before)


def test_adam_default_learning_rate():
    assert Adam([Tensor(np.zeros(1), requires_grad=True)]).lr == 1e-4


def test_adam_nonfinite_grad_names_parameter():
    x = Tensor(np.zeros(2), requires_grad=True, name="head.weight")
    x.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="head.weight"):
        Adam([x]).step()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    gru = GRU(3, 4, 2, rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "smrm", 8, gru.named_parameters())
    header, arrays = load_checkpoint(path)
    assert header["module"] == "smrm"
    assert header["joint_count"] == 8
    assert header["format_version"] == 1
    for name, tensor in gru.named_parameters():
        assert np.array_equal(arrays[name], tensor.data)
        assert header["shapes"][name] == list(tensor.data.shape)

    fresh = GRU(3, 4, 2, np.random.default_rng(99))
    load_into(fresh, path, expect_module="smrm")
    for (_, a), (_, b) in zip(fresh.named_parameters(), gru.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_module_mismatch(tmp_path):
    layer = Linear(2, 2, np.random.default_rng(12))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "skr", 4, layer.named_parameters())
    with pytest.raises(ValueError, match="skr"):
        load_into(Linear(2, 2, np.random.default_rng(13)), path, expect_module="skin")


def test_checkpoint_shape_mismatch(tmp_path):
    layer = Linear(2, 2, np.random.default_rng(14))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "skr", 4, layer.named_parameters())
    with pytest.raises(ValueError, match="shape"):
        load_into(Linear(2, 3, np.random.default_rng(15)), path)
