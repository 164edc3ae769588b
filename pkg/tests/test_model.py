import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mddistill import tape as T
from mddistill.errors import DimensionError, FormatError
from mddistill.losses import LossConfig, wbce_loss
from mddistill.model import (
    FrozenEncoder,
    ProjectionHead,
    TrainableEncoder,
    embed,
    encode,
    head_size,
    sgd_step,
    sgd_step_head,
    similarity_matrix,
)


def _tape():
    return T.Tape(np.float64)


def test_identity_encoder_passes_through(rng):
    m = rng.standard_normal((3, 4))
    out = encode(FrozenEncoder.identity(4), _tape().const(m))
    assert np.array_equal(out.value, m)


def test_fixed_mlp_maps_zero_to_zero_and_is_deterministic(rng):
    enc = FrozenEncoder.fixed_mlp(4, 8, 3, seed=2)
    tape = _tape()
    assert np.array_equal(encode(enc, tape.const(np.zeros((2, 4)))).value, np.zeros((2, 3)))
    x = rng.standard_normal((5, 4))
    a = encode(enc, tape.const(x)).value
    b = encode(enc, tape.const(x)).value
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a, np.tanh(x @ enc.w1) @ enc.w2, rtol=1e-14)


def test_fixed_mlp_weights_get_no_gradient(rng):
    enc = FrozenEncoder.fixed_mlp(4, 8, 3, seed=2)
    tape = _tape()
    x = tape.leaf(rng.standard_normal((2, 4)))
    tape.backward(T.sum_all(encode(enc, x)))
    assert len(tape.nodes) > 0 and not np.all(x.grad == 0)
    # only x was a leaf; the encoder constants never entered the tape's node list
    assert all(n is x or n.parents is not None for n in tape.nodes)


def test_encode_dimension_error():
    with pytest.raises(DimensionError):
        encode(FrozenEncoder.identity(3), _tape().const(np.zeros((1, 4))))


def test_embed_identity_head_on_unit_row():
    tape = _tape()
    head = ProjectionHead.identity(3).on(tape)
    row = np.array([[0.0, 0.6, 0.8]])
    assert np.array_equal(embed(head, tape.const(row)).value, row)


@given(st.integers(0, 2**32 - 1))
def test_embed_rows_are_unit_norm(seed):
    r = np.random.default_rng(seed)
    tape = _tape()
    head = ProjectionHead.init(5, 4, r).on(tape)
    out = embed(head, tape.const(3 * r.standard_normal((7, 5)))).value
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) < 1e-6)


def test_embed_gradient_wrt_weight(rng):
    reps = rng.standard_normal((4, 5))
    w, b = rng.standard_normal((5, 3)), rng.standard_normal((1, 3))

    def build(tape, n):
        return T.sum_all(embed(ProjectionHead(n[0], n[1]), tape.const(reps)))

    assert T.grad_check(build, [w, b]) < 1e-6


def test_embed_dimension_error():
    tape = _tape()
    with pytest.raises(DimensionError):
        embed(ProjectionHead.identity(3).on(tape), tape.const(np.zeros((1, 4))))


def test_similarity_simple_cases():
    tape = _tape()
    e = tape.const([[1.0, 0.0]])
    assert similarity_matrix(e, e).value.tolist() == [[1.0]]
    assert similarity_matrix(e, tape.const([[0.0, 1.0]])).value.tolist() == [[0.0]]


def test_similarity_matches_pair_loop(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    got = similarity_matrix(_tape().const(a), _tape().const(b)).value
    for i in range(3):
        for j in range(3):
            expect = sum(a[i, k] * b[j, k] for k in range(4))
            assert abs(got[i, j] - expect) < 1e-15


def test_similarity_dimension_error():
    tape = _tape()
    with pytest.raises(DimensionError):
        similarity_matrix(tape.const(np.zeros((2, 3))), tape.const(np.zeros((2, 4))))


@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)).filter(lambda x: np.all(np.linalg.norm(x, axis=1) > 1e-3)))
def test_similarity_bounded_with_unit_diagonal(x):
    tape = _tape()
    e = T.row_normalize(tape.const(x))
    s = similarity_matrix(e, e).value
    assert np.all(np.abs(s) <= 1 + 1e-5)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)


# -- sgd_step ------------------------------------------------------------------


def test_sgd_zero_lr_leaves_head_unchanged(rng):
    tape = _tape()
    head = ProjectionHead.init(3, 2, rng).on(tape, True)
    grads = [tape.const(rng.standard_normal(p.shape)) for p in head.params()]
    new = sgd_step_head(head, grads, tape.scalar(0.0))
    assert np.array_equal(new.weight.value, head.weight.value)
    assert np.array_equal(new.bias.value, head.bias.value)


def test_sgd_scalar_hand_case():
    tape = _tape()
    (w,) = sgd_step([tape.leaf([[1.0]])], [tape.const([[2.0]])], tape.scalar(0.5))
    assert w.value[0, 0] == 0.0


def test_sgd_two_steps_compose_with_constant_gradient():
    tape = _tape()
    lr = tape.scalar(0.25)
    w0 = tape.leaf([[3.0, -1.0]])
    g1, g2 = tape.const([[1.0, 2.0]]), tape.const([[0.5, -4.0]])
    (w1,) = sgd_step([w0], [g1], lr)
    (w2,) = sgd_step([w1], [g2], lr)
    np.testing.assert_array_equal(w2.value, [[3.0 - 0.25 * 1.5, -1.0 - 0.25 * -2.0]])


def test_unrolled_head_differentiable_in_data(rng):
    # d(final head weight)/d(initial data) through 8 differentiable SGD steps
    reps_i, reps_t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    w_i, w_t = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    probe = rng.standard_normal((4, 3))
    cfg = LossConfig()

    def build(tape, n):
        img, txt = n
        hi = ProjectionHead(tape.leaf(w_i), tape.leaf(np.zeros((1, 3))))
        ht = ProjectionHead(tape.leaf(w_t), tape.leaf(np.zeros((1, 3))))
        lr = tape.scalar(0.3)
        for _ in range(8):
            loss = wbce_loss(similarity_matrix(embed(hi, img), embed(ht, txt)), np.eye(3), cfg)
            g = tape.grad(loss, hi.params() + ht.params(), create_graph=True)
            hi, ht = sgd_step_head(hi, g[:2], lr), sgd_step_head(ht, g[2:], lr)
        return T.sum_all(T.mul(hi.weight, tape.const(probe)))

    assert T.grad_check(build, [reps_i, reps_t]) < 1e-5


# -- serialization -------------------------------------------------------------


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_head_flatten_and_bytes_round_trip(d_in, d_emb, seed):
    head = ProjectionHead.init(d_in, d_emb, np.random.default_rng(seed))
    head.bias = np.random.default_rng(seed + 1).standard_normal((1, d_emb))
    flat = head.flatten()
    assert flat.size == head_size(d_in, d_emb)
    back = ProjectionHead.unflatten(flat, d_in, d_emb)
    assert back.weight.tobytes() == head.weight.tobytes()
    assert back.bias.tobytes() == head.bias.tobytes()
    again = ProjectionHead.from_bytes(head.to_bytes())
    assert again.flatten().tobytes() == flat.tobytes()


def test_head_layout_is_weight_then_bias():
    head = ProjectionHead(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0]]))
    assert head.flatten().tolist() == [1, 2, 3, 4, 5, 6]
    buf = head.to_bytes()
    assert buf[:8] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(buf[8:], "<f8").tolist() == [1, 2, 3, 4, 5, 6]


def test_head_bytes_errors():
    with pytest.raises(FormatError):
        ProjectionHead.from_bytes(b"\x01")
    buf = ProjectionHead.identity(2).to_bytes()
    with pytest.raises(FormatError):
        ProjectionHead.from_bytes(buf[:-1])
    with pytest.raises(DimensionError):
        ProjectionHead.unflatten(np.zeros(5), 2, 2)


def test_trainable_encoder_round_trip():
    enc = TrainableEncoder.from_frozen(FrozenEncoder.fixed_mlp(3, 5, 2, seed=0))
    back = TrainableEncoder.unflatten(enc.flatten(), 3, 5, 2)
    assert back.flatten().tobytes() == enc.flatten().tobytes()
    with pytest.raises(DimensionError):
        TrainableEncoder.unflatten(np.zeros(3), 3, 5, 2)
