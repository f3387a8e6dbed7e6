import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domaingcn import autodiff as ad
from domaingcn.autodiff import RowGroups, Tape, Tensor
from domaingcn.errors import ContractError, DimensionError


def rng(seed=0):
    return np.random.default_rng(seed)


def away_from_zero(r, shape, margin=1e-3):
    x = r.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


# --- matmul -------------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_case():
    assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).item() == 11.0


def test_matmul_gradient_of_sum():
    r = rng(1)
    b = Tensor(r.standard_normal((4, 3)))
    err = ad.grad_check(lambda a: ad.sum_all(ad.matmul(a, b)), r.standard_normal((5, 4)))
    assert err < 1e-6


def test_matmul_backward_is_dc_bt_and_at_dc():
    r = rng(2)
    a = Tensor(r.standard_normal((5, 4)), requires_grad=True)
    b = Tensor(r.standard_normal((4, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.matmul(a, b))
    tape.backward(loss)
    ones = np.ones((5, 3))
    assert np.allclose(a.grad, ones @ b.data.T, rtol=0, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ ones, rtol=0, atol=1e-14)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --- elementwise ----------------------------------------------------------------


def test_relu_values_and_zero_subgradient():
    x = Tensor([[-1.0, 0.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
        loss = ad.sum_all(y)
    assert np.array_equal(y.data, [[0, 0, 2]])
    tape.backward(loss)
    assert np.array_equal(x.grad, [[0, 0, 1]])


def test_tanh_zero():
    assert ad.tanh(Tensor(0.0)).item() == 0.0


def test_mul_gradient_check():
    r = rng(3)
    other = Tensor(r.standard_normal((3, 3)))
    assert ad.grad_check(lambda x: ad.sum_all(ad.mul(x, other)), r.standard_normal((3, 3))) < 1e-6


def test_binary_shape_mismatch():
    for op in ("add", "sub", "mul"):
        with pytest.raises(DimensionError):
            ad.elementwise(op, Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


def test_elementwise_dispatch():
    x = Tensor([[1.0, -2.0]])
    assert np.array_equal(ad.elementwise("relu", x).data, [[1, 0]])
    assert np.array_equal(ad.elementwise("scale", x, 3.0).data, [[3, -6]])
    assert np.array_equal(ad.elementwise("add", x, x).data, [[2, -4]])
    assert np.allclose(ad.elementwise("exp", x).data, np.exp(x.data))
    with pytest.raises(ContractError):
        ad.elementwise("sigmoid", x)


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: ad.sum_all(ad.relu(x)),
        lambda x: ad.sum_all(ad.tanh(x)),
        lambda x: ad.sum_all(ad.exp(ad.scale(x, 0.3))),
        lambda x: ad.sum_all(ad.mul(x, ad.tanh(x))),
        lambda x: ad.sum_all(ad.sub(ad.scale(x, 2.0), ad.shift(x, 1.0))),
        lambda x: ad.sum_all(ad.mul(ad.transpose(x), ad.transpose(x))),
        lambda x: ad.sum_all(ad.mul(ad.gather_rows(x, [2, 0, 0, 1]), ad.gather_rows(x, [1, 1, 2, 0]))),
        lambda x: ad.sum_all(ad.tanh(ad.scale_rows(x, [1.0, 2.0, 4.0]))),
        lambda x: ad.sum_all(ad.tanh(ad.concat_cols(x, ad.exp(x)))),
        lambda x: ad.sum_all(ad.tanh(ad.add_row(x, Tensor(np.arange(4.0).reshape(1, 4))))),
        lambda x: ad.cross_entropy_with_logits(ad.matmul(Tensor(np.ones((1, 3))), ad.matmul(x, Tensor(np.eye(4)[:, :2]))), 1),
    ],
)
def test_every_op_matches_finite_differences(fn):
    x = away_from_zero(rng(4), (3, 4))
    assert ad.grad_check(fn, x) < 1e-5


def test_group_ops_match_finite_differences():
    r = rng(5)
    groups = RowGroups([2, 0, 1, 0, 2, 2])
    w = Tensor(r.standard_normal((3, 2)))

    def fn(x):
        a = ad.group_softmax(x, groups)
        return ad.sum_all(ad.mul(ad.segment_sum(ad.mul(a, x), groups), w))

    assert ad.grad_check(fn, r.standard_normal((6, 2))) < 1e-5


def test_equal_size_groups_take_the_same_values_as_general_path():
    r = rng(6)
    x = r.standard_normal((12, 3))
    block = RowGroups(np.repeat(np.arange(4), 3))
    assert block.block == 3
    general = RowGroups(np.repeat(np.arange(4), 3))
    general.block = 0
    sa = ad.group_softmax(Tensor(x), block).data
    sb = ad.group_softmax(Tensor(x), general).data
    assert np.allclose(sa, sb, rtol=0, atol=1e-15)
    assert np.allclose(ad.segment_sum(Tensor(x), block).data, ad.segment_sum(Tensor(x), general).data, atol=1e-14)

    def fn(groups):
        return lambda t: ad.sum_all(ad.mul(ad.group_softmax(t, groups), ad.tanh(t)))

    assert ad.grad_check(fn(block), x) < 1e-5
    assert ad.grad_check(fn(general), x) < 1e-5


def test_gather_rows_backward_scatters_repeats():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.gather_rows(x, [0, 2, 2, 2]))
    tape.backward(loss)
    assert np.array_equal(x.grad, [[1, 1], [0, 0], [3, 3]])


def test_gather_rows_out_of_range():
    with pytest.raises(DimensionError):
        ad.gather_rows(Tensor(np.ones((3, 2))), [3])


# --- group softmax ----------------------------------------------------------------


def test_group_softmax_singleton_is_one():
    out = ad.group_softmax(Tensor([[5.0, -3.0, 100.0]]), [[0]])
    assert np.array_equal(out.data, [[1.0, 1.0, 1.0]])


def test_group_softmax_equal_pair_is_half():
    out = ad.rowwise_softmax_over_groups(Tensor([[2.0, 7.0], [2.0, 7.0]]), [[0, 1]])
    assert np.array_equal(out.data, np.full((2, 2), 0.5))


def test_group_softmax_hand_case():
    out = ad.group_softmax(Tensor([[0.0], [np.log(3.0)]]), [[0, 1]])
    assert np.allclose(out.data[:, 0], [0.25, 0.75], rtol=0, atol=1e-15)


def test_group_softmax_channels_are_independent():
    x = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = ad.group_softmax(Tensor(x), [[0, 1]]).data
    assert out[0, 0] == out[1, 1] and out[0, 1] == out[1, 0]


def test_group_softmax_empty_group_is_contract_error():
    with pytest.raises(ContractError):
        ad.group_softmax(Tensor(np.ones((2, 1))), RowGroups([0, 0], 2))


def test_group_softmax_is_stable_for_huge_values():
    out = ad.group_softmax(Tensor([[1000.0], [999.0], [-1000.0]]), [[0, 1, 2]]).data
    assert np.all(np.isfinite(out)) and abs(out.sum() - 1) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 30),
    st.integers(1, 5),
    st.integers(1, 6),
    st.integers(0, 2**31 - 1),
)
def test_group_softmax_sums_to_one(n_rows, n_cols, n_groups, seed):
    r = rng(seed)
    n_groups = min(n_groups, n_rows)
    ids = np.concatenate([np.arange(n_groups), r.integers(0, n_groups, n_rows - n_groups)])
    r.shuffle(ids)
    x = r.standard_normal((n_rows, n_cols)) * 10
    out = ad.group_softmax(Tensor(x), RowGroups(ids, n_groups)).data
    sums = np.zeros((n_groups, n_cols))
    np.add.at(sums, ids, out)
    assert np.all(np.abs(sums - 1) <= 1e-12)


def test_from_partition_rejects_overlap_and_gaps():
    with pytest.raises(ContractError):
        RowGroups.from_partition([[0, 1], [1]])
    with pytest.raises(ContractError):
        RowGroups.from_partition([[0], [2]], n_rows=3)


def test_segment_sum_empty_group_is_zero():
    out = ad.segment_sum(Tensor([[1.0], [2.0]]), RowGroups([0, 2], 3))
    assert np.array_equal(out.data, [[1.0], [0.0], [2.0]])


# --- cross-entropy ------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    assert abs(ad.cross_entropy_with_logits(Tensor([[0.0, 0.0]]), 0).item() - np.log(2)) < 1e-15


def test_cross_entropy_saturated():
    loss = ad.cross_entropy_with_logits(Tensor([[20.0, -20.0]]), 0).item()
    assert 0 <= loss < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradient_is_softmax_minus_onehot(seed):
    r = rng(seed)
    logits = Tensor(r.standard_normal((1, 2)) * 3, requires_grad=True)
    label = int(r.integers(2))
    with Tape() as tape:
        loss = ad.cross_entropy_with_logits(logits, label)
    tape.backward(loss)
    p = np.exp(logits.data - logits.data.max())
    p /= p.sum()
    p[0, label] -= 1
    assert np.max(np.abs(logits.grad - p)) <= 1e-12


@pytest.mark.parametrize("label", [2, -1, 0.5, True])
def test_cross_entropy_bad_label(label):
    with pytest.raises(ContractError):
        ad.cross_entropy_with_logits(Tensor([[0.0, 1.0]]), label)


# --- backward ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(rng(7).standard_normal((3, 5)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 5)))


def test_backward_accumulates_fan_out():
    x = Tensor([[1.5, -2.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.add(x, x))
    tape.backward(loss)
    assert np.array_equal(x.grad, [[2.0, 2.0]])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_rejects_loss_from_elsewhere():
    x = Tensor(np.ones((1, 1)), requires_grad=True)
    with Tape():
        loss = ad.sum_all(x)
    with Tape() as other:
        ad.sum_all(x)
    with pytest.raises(ContractError):
        other.backward(loss)


def test_unreached_leaf_gets_zero_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        ad.relu(y)
        loss = ad.sum_all(x)
    tape.backward(loss)
    assert np.array_equal(y.grad, np.zeros((2, 2)))


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    ad.relu(x)  # no tape open
    c = Tensor(np.ones((2, 2)))
    with Tape() as tape:
        ad.relu(c)
    assert len(tape) == 0


def test_tape_entries_are_topological():
    x = Tensor(rng(8).standard_normal((3, 3)), requires_grad=True)
    with Tape() as tape:
        y = ad.tanh(ad.matmul(x, x))
        ad.sum_all(ad.mul(y, x))
    produced = set()
    leaves = {id(t) for t in tape.leaves()}
    for e in tape.entries:
        for t in e.inputs:
            assert id(t) in produced or id(t) in leaves or not t.requires_grad
        produced.add(id(e.output))


def test_backward_and_forward_are_bitwise_repeatable():
    r = rng(9)
    w = r.standard_normal((4, 4))
    x0 = r.standard_normal((6, 4))
    groups = RowGroups([0, 1, 1, 2, 2, 2])

    def run():
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            h = ad.tanh(ad.matmul(x, Tensor(w)))
            loss = ad.sum_all(ad.segment_sum(ad.mul(ad.group_softmax(h, groups), h), groups))
        tape.backward(loss)
        return loss.item(), x.grad

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


def test_tapes_are_thread_confined():
    results = {}

    def worker(k):
        x = Tensor(np.full((2, 2), float(k)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(x, x))
        tape.backward(loss)
        results[k] = x.grad

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, g in results.items():
        assert np.array_equal(g, np.full((2, 2), 2.0 * k))


# --- grad_check --------------------------------------------------------------------------


def test_grad_check_quadratic_form():
    r = rng(10)
    a = r.standard_normal((4, 4))
    A = Tensor(a + a.T)
    err = ad.grad_check(lambda x: ad.sum_all(ad.mul(ad.matmul(x, A), x)), r.standard_normal((1, 4)))
    assert err < 1e-9


def test_grad_check_relu_off_kink():
    x = away_from_zero(rng(11), (3, 3))
    assert ad.grad_check(lambda t: ad.sum_all(ad.mul(ad.relu(t), ad.relu(t))), x) < 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_nan_for_unstable_function():
    err = ad.grad_check(lambda t: ad.sum_all(ad.exp(ad.scale(t, 1e3))), np.array([[1.0]]))
    assert np.isnan(err)


def test_tensor_rejects_higher_rank():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 2, 2)))
