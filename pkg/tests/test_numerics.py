import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pda import numerics as nx
from pda.errors import ContractError, DegenerateInputError, DeterminismError, DimensionError, ParameterError

SEEDS = st.integers(0, 2**32 - 1)


def naive_matmul(A, B):
    m, k = len(A), len(A[0])
    n = len(B[0])
    return [[sum(A[i][l] * B[l][j] for l in range(k)) for j in range(n)] for i in range(m)]


def test_matmul_identity():
    out = nx.matmul(nx.tensor(np.eye(2)), nx.tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert out.data.tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_matmul_row_by_column():
    assert nx.matmul(nx.tensor([[1.0, 2.0]]), nx.tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(nx.matmul(nx.tensor(A), nx.tensor(B)).data,
                               naive_matmul(A.tolist(), B.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))


@settings(max_examples=50, deadline=None)
@given(SEEDS)
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (nx.tensor(rng.normal(size=s)) for s in ((2, 3), (3, 4), (4, 2)))
    np.testing.assert_allclose(((A @ B) @ C).data, (A @ (B @ C)).data, atol=1e-9)


def test_softmax_symmetric_row():
    assert nx.softmax_rows(nx.tensor([[0.0, 0.0]]), t=1.0).data.tolist() == [[0.5, 0.5]]


def test_softmax_sharpens_at_low_temperature():
    s = nx.softmax_rows(nx.tensor([[1.0, 0.0]]), t=0.01).data
    assert abs(s[0, 0] - 1.0) < 1e-9


def test_softmax_scalar_values():
    s = nx.softmax_rows(nx.tensor([[0.2, 0.5, 0.3]]), t=1.0).data[0]
    np.testing.assert_allclose(s, [0.2894331103942646, 0.39069383326981566, 0.31987305633591967],
                               rtol=0, atol=1e-15)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(t):
    with pytest.raises(ParameterError):
        nx.softmax_rows(nx.tensor([[1.0, 2.0]]), t=t)


def test_softmax_no_overflow_at_clip_scale():
    s = nx.softmax_rows(nx.tensor([[1.0, -1.0, 0.5]]), t=0.01).data
    assert np.all(np.isfinite(s))


@settings(max_examples=50, deadline=None)
@given(SEEDS, st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, c):
    X = np.random.default_rng(seed).normal(size=(4, 5)) * 3
    s = nx.softmax_rows(nx.tensor(X), t=0.07).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(nx.softmax_rows(nx.tensor(X + c), t=0.07).data, s, atol=1e-9)


def test_normalize_345():
    np.testing.assert_allclose(nx.l2_normalize_rows(nx.tensor([[3.0, 4.0]])).data, [[0.6, 0.8]],
                               atol=1e-15)


def test_normalize_unit_row_unchanged():
    row = np.array([[0.0, 1.0, 0.0]])
    assert nx.l2_normalize_rows(nx.tensor(row)).data.tolist() == row.tolist()


def test_normalize_random_rows_are_unit():
    X = np.random.default_rng(0).normal(size=(5, 8))
    np.testing.assert_allclose(np.linalg.norm(nx.l2_normalize_rows(nx.tensor(X)).data, axis=1),
                               1.0, atol=1e-9)


def test_normalize_zero_row_is_an_error():
    with pytest.raises(DegenerateInputError):
        nx.l2_normalize_rows(nx.tensor([[1.0, 0.0], [0.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(SEEDS)
def test_normalize_idempotent(seed):
    X = np.random.default_rng(seed).normal(size=(3, 6))
    once = nx.l2_normalize_rows(nx.tensor(X))
    np.testing.assert_allclose(nx.l2_normalize_rows(once).data, once.data, atol=1e-12)


def test_backward_of_sum_is_ones():
    W = nx.parameter(np.random.default_rng(0).normal(size=(3, 2)))
    with nx.Tape() as tape:
        loss = nx.sum_all(W)
    grads = nx.backward(tape, loss)
    assert grads[W].tolist() == np.ones((3, 2)).tolist()


def test_backward_of_norm_of_normalized_is_zero():
    w = nx.parameter([[0.3, -1.2, 2.0]])
    with nx.Tape() as tape:
        u = nx.l2_normalize_rows(w)
        loss = nx.sum_all(u * u)
    np.testing.assert_allclose(tape.backward(loss)[w], 0.0, atol=1e-12)


def test_backward_rejects_non_scalar():
    w = nx.parameter(np.ones((2, 2)))
    with nx.Tape() as tape:
        out = w * 2.0
    with pytest.raises(ContractError):
        tape.backward(out)


def test_frozen_leaves_get_no_gradient():
    w = nx.parameter(np.ones((2, 2)))
    frozen = nx.tensor(np.full((2, 2), 3.0))
    with nx.Tape() as tape:
        loss = nx.sum_all(w @ frozen)
    grads = tape.backward(loss)
    assert frozen not in grads and w in grads


def test_tape_is_topologically_ordered():
    a = nx.parameter([[1.0, 2.0]])
    with nx.Tape() as tape:
        b = a * 2.0
        c = nx.sum_all(nx.relu(b) + b)
    positions = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for inp in node._inputs:
            if id(inp) in positions:
                assert positions[id(inp)] < positions[id(node)]
    assert tape.nodes[-1] is c


def test_composed_graph_matches_finite_differences():
    rng = np.random.default_rng(1)
    W = nx.parameter(rng.normal(size=(4, 3)))
    X = nx.tensor(rng.normal(size=(5, 4)))

    def f(_):
        h = nx.gelu(nx.layer_norm(X @ W))
        return nx.sum_all(nx.log_softmax_rows(nx.cosine_similarity(h, h), t=0.5))

    assert nx.finite_diff_check(f, [W]) < 1e-4


def test_fd_quadratic():
    x = nx.parameter(3.0)
    assert nx.finite_diff_check(lambda p: p[0] * p[0], [x], h=1e-5) < 1e-8


def test_fd_cross_entropy_of_softmax():
    z = nx.parameter([[0.3, -0.8, 1.1]])

    def f(p):
        return nx.sum_all(nx.cross_entropy_from_probs(nx.softmax_rows(p[0]), [2]))

    assert nx.finite_diff_check(f, [z]) < 1e-6


def test_fd_detects_nondeterminism():
    x = nx.parameter([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        nx.finite_diff_check(lambda p: nx.sum_all(p[0] * float(rng.normal())), [x])


def _primitive_case(name, rng):
    """``(inputs, fn)`` for one random instance of a primitive."""
    A = rng.normal(size=(3, 4))
    cases = {
        "matmul": ([A, rng.normal(size=(4, 2))], lambda a, b: nx.matmul(a, b)),
        "add": ([A, rng.normal(size=(1, 4))], lambda a, b: nx.add(a, b)),
        "sub": ([A, rng.normal(size=(3, 1))], lambda a, b: nx.sub(a, b)),
        "mul": ([A, rng.normal(size=(3, 4))], lambda a, b: nx.mul(a, b)),
        "scale": ([A], lambda a: nx.scale(a, 1.7)),
        "reciprocal": ([np.abs(A) + 0.5], lambda a: nx.reciprocal(a)),
        "log": ([np.abs(A) + 0.5], lambda a: nx.log(a)),
        "concat": ([A, rng.normal(size=(2, 4))], lambda a, b: nx.concat([a, b], axis=0)),
        "index": ([A], lambda a: nx.index(a, np.array([2, 0, 2]))),
        "pick": ([A], lambda a: nx.pick(a, [1, 3, 0])),
        "swap_last": ([A], lambda a: nx.swap_last(a)),
        "transpose": ([rng.normal(size=(2, 3, 4))], lambda a: nx.transpose(a, (2, 0, 1))),
        "reshape": ([A], lambda a: nx.reshape(a, (2, 6))),
        "broadcast_to": ([rng.normal(size=(1, 4))], lambda a: nx.broadcast_to(a, (3, 4))),
        "layer_norm": ([A], lambda a: nx.layer_norm(a)),
        "gelu": ([A], lambda a: nx.gelu(a)),
        "relu": ([A], lambda a: nx.relu(a)),
        "softmax": ([A], lambda a: nx.softmax_rows(a, t=0.7)),
        "log_softmax": ([A], lambda a: nx.log_softmax_rows(a, t=0.7)),
        "l2_normalize": ([A], lambda a: nx.l2_normalize_rows(a)),
        "sum": ([A], lambda a: nx.sum_all(a)),
        "sum_axis": ([A], lambda a: nx.sum_axis(a, 1)),
    }
    return cases[name]


@pytest.mark.parametrize("name", sorted(nx.PRIMITIVES))
@settings(max_examples=100, deadline=None)
@given(seed=SEEDS)
def test_primitive_adjoint_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    inputs, fn = _primitive_case(name, rng)
    params = [nx.parameter(x) for x in inputs]
    probe = rng.normal(size=fn(*params).shape)

    def f(ps):
        return nx.sum_all(fn(*ps) * nx.tensor(probe))

    assert nx.finite_diff_check(f, params) < 1e-4


def test_every_primitive_has_an_adjoint():
    rng = np.random.default_rng(0)
    for name in nx.PRIMITIVES:
        inputs, fn = _primitive_case(name, rng)
        out = fn(*[nx.parameter(x) for x in inputs])
        assert out._vjp is not None, name


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        W = nx.parameter(rng.normal(size=(4, 4)))
        X = nx.tensor(rng.normal(size=(3, 4)))
        with nx.Tape() as tape:
            loss = nx.sum_all(nx.softmax_rows(nx.layer_norm(X @ W), t=0.1))
        return loss.data.tobytes(), tape.backward(loss)[W].tobytes()

    assert run() == run()


def test_cosine_similarity_values():
    a = nx.tensor([[1.0, 0.0], [1.0, 1.0]])
    sim = nx.cosine_similarity(a, a).data
    np.testing.assert_allclose(sim, [[1.0, math.sqrt(0.5)], [math.sqrt(0.5), 1.0]], atol=1e-15)
