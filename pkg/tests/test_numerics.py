import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sortrl import numerics as nx
from sortrl.numerics import AdamWState, ParamStore, Tensor, checkpoint, grad_check, numeric_grad


def test_affine_identity():
    out = nx.affine([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    assert out.data.tolist() == [1.0, 2.0]


def test_affine_hand_value():
    out = nx.affine([1.0, -2.0], [[0.7, 0.21]], [0.5])
    assert out.data[0] == pytest.approx(0.7 * 1 + 0.21 * (-2) + 0.5, abs=1e-15)
    assert out.data[0] == pytest.approx(0.78)


def test_affine_input_gradient_matches_finite_differences():
    w = np.array([[3.0, 4.0]])
    fd = numeric_grad(lambda a: float((a @ w.T + 0.0).sum()), np.array([1.0, 2.0]), h=1e-5)
    np.testing.assert_allclose(fd, [3.0, 4.0], atol=1e-8)
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.sum_(nx.affine(x, w, [0.0])).backward()
    np.testing.assert_allclose(x.grad, fd, atol=1e-8)


def test_affine_all_argument_gradients():
    rng = np.random.default_rng(0)
    x0, w0, b0 = rng.normal(size=(5, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
    c = rng.normal(size=(5, 2))
    for which in range(3):
        def f(t, which=which):
            args = [x0, w0, b0]
            args[which] = t
            return nx.sum_(nx.mul(nx.affine(*args), c))
        assert grad_check(f, [x0, w0, b0][which]) < 1e-7


def test_affine_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.affine([1.0, 2.0, 3.0], [[1.0, 0.0]], [0.0])


def test_sort_desc_values_and_perm():
    out, perm = nx.sort_desc([3.0, -1.0, 2.0])
    assert out.data.tolist() == [3.0, 2.0, -1.0]
    assert perm.tolist() == [0, 2, 1]


def test_sort_desc_ties_are_stable():
    out, perm = nx.sort_desc([5.0, 5.0, 5.0])
    assert out.data.tolist() == [5.0, 5.0, 5.0]
    assert perm.tolist() == [0, 1, 2]
    _, perm = nx.sort_desc([1.0, 2.0, 1.0, 2.0])
    assert perm.tolist() == [1, 3, 0, 2]


def test_sort_desc_backward_is_permutation():
    x = Tensor([3.0, -1.0, 2.0], requires_grad=True)
    out, perm = nx.sort_desc(x)
    a, b, c = 0.3, -1.7, 2.9
    out.backward(np.array([a, b, c]))
    np.testing.assert_allclose(x.grad, [a, c, b])
    # finite-difference oracle of <g, sort(x)> away from ties
    g = np.array([a, b, c])
    fd = numeric_grad(lambda v: float(g @ -np.sort(-v)), np.array([3.0, -1.0, 2.0]))
    np.testing.assert_allclose(x.grad, fd, atol=1e-8)


def test_sort_desc_empty_raises():
    with pytest.raises(nx.ShapeError):
        nx.sort_desc(np.zeros(0))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_sort_desc_is_multiset_permutation(x):
    out, perm = nx.sort_desc(x)
    assert sorted(out.data.tolist()) == sorted(x.tolist())
    assert np.all(np.diff(out.data) <= 0)
    np.testing.assert_array_equal(out.data, x[perm])
    # stable tie order
    for i in range(len(perm) - 1):
        if out.data[i] == out.data[i + 1]:
            assert perm[i] < perm[i + 1]


def test_abs_values_and_subgradient():
    assert nx.abs_elem([1.5, -2.0, 0.0]).data.tolist() == [1.5, 2.0, 0.0]
    x = Tensor([3.0, -4.0], requires_grad=True)
    nx.sum_(nx.abs_elem(x)).backward()
    assert x.grad.tolist() == [1.0, -1.0]
    z = Tensor([0.0], requires_grad=True)
    nx.sum_(nx.abs_elem(z)).backward()
    assert z.grad.tolist() == [0.0]


def test_relu_values_and_subgradient():
    assert nx.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
    x = Tensor([-1.0, 2.0], requires_grad=True)
    nx.sum_(nx.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]
    z = Tensor([0.0], requires_grad=True)
    nx.sum_(nx.relu(z)).backward()
    assert z.grad.tolist() == [0.0]


def test_log_sum_exp_values():
    assert nx.log_sum_exp([0.0, 0.0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert nx.log_sum_exp([1000.0, 1000.0]).item() == pytest.approx(1000 + math.log(2), abs=1e-12)


def test_log_sum_exp_gradient_is_softmax():
    x = Tensor([2.0, 0.0], requires_grad=True)
    nx.log_sum_exp(x).backward()
    fd = numeric_grad(lambda v: math.log(np.exp(v).sum()), np.array([2.0, 0.0]))
    np.testing.assert_allclose(fd, [0.880797, 0.119203], atol=1e-6)
    np.testing.assert_allclose(x.grad, fd, atol=1e-9)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-700, 700)))
def test_log_sum_exp_bounds(z):
    v = nx.log_sum_exp(z).item()
    assert v >= z.max() - 1e-12
    assert v <= z.max() + math.log(len(z)) + 1e-12


def test_non_finite_is_an_error():
    with pytest.raises(nx.NonFiniteError):
        nx.mul([1e308], [1e308])


def test_grad_check_examples():
    assert grad_check(lambda t: nx.sum_(nx.square(t)), [1.0, 2.0]) < 1e-6
    rng = np.random.default_rng(1)
    assert grad_check(lambda t: nx.log_sum_exp(t), rng.normal(size=6)) < 1e-4


def test_fused_sortnet_matches_composed_ops():
    rng = np.random.default_rng(2)
    x0, b0 = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    w = 0.7 * 0.3 ** np.arange(5)

    def composed(x, b):
        pre = nx.add(nx.reshape(x, (3, 1, 5)), nx.reshape(b, (1, 4, 5)))
        s, _ = nx.sort_desc(nx.abs_elem(pre))
        return nx.matmul(s, w.reshape(5, 1))

    xa, ba = Tensor(x0, requires_grad=True), Tensor(b0, requires_grad=True)
    xb, bb = Tensor(x0, requires_grad=True), Tensor(b0, requires_grad=True)
    g = rng.normal(size=(3, 4))
    fused = nx.sortnet_contract(xa, ba, w)
    comp = composed(xb, bb)
    np.testing.assert_allclose(fused.data, comp.data[..., 0], atol=1e-13)
    fused.backward(g)
    comp.backward(g[..., None])
    np.testing.assert_allclose(xa.grad, xb.grad, atol=1e-13)
    np.testing.assert_allclose(ba.grad, bb.grad, atol=1e-13)


def test_fused_sortnet_recompute_path(monkeypatch):
    from sortrl.numerics import tensor
    rng = np.random.default_rng(3)
    x0, b0 = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    w = 0.7 * 0.3 ** np.arange(4)
    g = rng.normal(size=(6, 3))
    ref_x = Tensor(x0, requires_grad=True)
    nx.sortnet_contract(ref_x, b0, w).backward(g)
    monkeypatch.setattr(tensor, "_CACHE_LIMIT", 0)
    x = Tensor(x0, requires_grad=True)
    nx.sortnet_contract(x, b0, w, chunk=2).backward(g)
    np.testing.assert_allclose(x.grad, ref_x.grad, atol=1e-14)


def test_sortnet_layer_grad_check():
    rng = np.random.default_rng(4)
    b = rng.normal(size=(3, 4))
    w = 0.7 * 0.3 ** np.arange(4)
    c = rng.normal(size=(1, 3))
    f = lambda t: nx.sum_(nx.mul(nx.sortnet_contract(nx.reshape(t, (1, 4)), b, w), c))
    assert grad_check(f, rng.normal(size=4)) < 1e-4


@pytest.mark.parametrize("op", ["affine", "abs", "relu", "lse", "sort", "sortnet", "pnorm", "pick", "square"])
def test_gradients_at_random_points(op):
    """Central differences at many random non-degenerate points."""
    rng = np.random.default_rng(hash(op) % 2**32)
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=(5, 4))
    wts = 0.7 * 0.3 ** np.arange(4)
    c3, c4, c5 = rng.normal(size=3), rng.normal(size=4), rng.normal(size=5)
    funcs = {
        "affine": lambda t: nx.sum_(nx.mul(nx.affine(t, w, np.zeros(3)), c3)),
        "abs": lambda t: nx.sum_(nx.mul(nx.abs_elem(t), c4)),
        "relu": lambda t: nx.sum_(nx.mul(nx.relu(t), c4)),
        "lse": lambda t: nx.log_sum_exp(t),
        "sort": lambda t: nx.sum_(nx.mul(nx.sort_desc(t)[0], c4)),
        "sortnet": lambda t: nx.sum_(nx.mul(nx.sortnet_contract(nx.reshape(t, (1, 4)), b, wts), c5)),
        "pnorm": lambda t: nx.pnorm_last(nx.abs_elem(t), 6.0),
        "pick": lambda t: nx.pick(t, np.array(2)),
        "square": lambda t: nx.sum_(nx.mul(nx.square(t), c4)),
    }
    for _ in range(1000 if op not in ("sortnet",) else 300):
        x = rng.normal(size=4)
        if op == "sortnet":
            pre = np.abs(x[None] + b)
            if np.min(np.abs(x[None] + b)) < 1e-3 or np.min(np.abs(np.diff(np.sort(pre, -1), axis=-1))) < 1e-3:
                continue
        if op in ("abs", "relu", "pnorm") and np.min(np.abs(x)) < 1e-3:
            continue
        if op == "sort" and np.min(np.abs(np.diff(np.sort(x)))) < 1e-3:
            continue
        assert grad_check(funcs[op], x) < 1e-4


def test_backward_accumulates_through_shared_nodes():
    x = Tensor([2.0], requires_grad=True)
    y = nx.mul(x, x)
    nx.sum_(nx.add(y, y)).backward()
    assert x.grad.tolist() == [8.0]


# -- AdamW -----------------------------------------------------------------

def _store(value):
    ps = ParamStore()
    ps.add("p", np.array(value, dtype=float))
    return ps


def test_adamw_zero_grad_is_identity():
    ps = _store([1.0, -2.0, 3.0])
    st_ = AdamWState(lr=0.1, weight_decay=0.0)
    for _ in range(3):
        ps["p"].grad = np.zeros(3)
        nx.adamw_step(ps, st_)
    assert ps["p"].data.tolist() == [1.0, -2.0, 3.0]
    assert st_.t == 3


def test_adamw_first_step():
    ps = _store([1.0])
    st_ = AdamWState(lr=0.1, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8)
    ps["p"].grad = np.array([1.0])
    nx.adamw_step(ps, st_)
    assert ps["p"].data[0] == pytest.approx(1 - 0.1 * (1 / (1 + 1e-8)), abs=1e-15)
    assert st_.t == 1
    assert ps["p"].grad is None


def test_adamw_decoupled_decay():
    ps = _store([2.0])
    st_ = AdamWState(lr=0.1, weight_decay=0.02)
    ps["p"].grad = np.zeros(1)
    nx.adamw_step(ps, st_)
    assert ps["p"].data[0] == pytest.approx(0.998 * 2.0, abs=1e-15)


def test_adamw_missing_grad_is_usage_error():
    ps = _store([1.0])
    with pytest.raises(nx.UsageError):
        nx.adamw_step(ps, AdamWState())


def test_param_store_rejects_duplicates_and_keeps_order():
    ps = ParamStore()
    for name in ["z", "a", "m"]:
        ps.add(name, np.zeros(1))
    assert ps.names() == ["z", "a", "m"]
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(1))


# -- checkpoint format ------------------------------------------------------

def test_checkpoint_roundtrip_and_layout(tmp_path):
    arrays = {"layer0.bias": np.arange(6.0).reshape(2, 3), "mu": np.array([1.5]), "scalar": np.array(2.0)}
    blob = checkpoint.encode(arrays)
    assert blob[:4] == b"SRTL"
    assert int.from_bytes(blob[4:8], "little") == checkpoint.VERSION
    assert int.from_bytes(blob[8:12], "little") == 3
    name_len = int.from_bytes(blob[12:16], "little")
    assert blob[16:16 + name_len] == b"layer0.bias"
    back = checkpoint.decode(blob)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    path = tmp_path / "c.bin"
    checkpoint.save(path, arrays)
    assert path.read_bytes() == blob


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"NOPE" + b"\0" * 8)
    blob = checkpoint.encode({"a": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-4])
