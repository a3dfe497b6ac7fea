import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surt.gradcheck import finite_difference_check
from surt.tensor import Tensor
from surt.transducer import (
    InfeasibleAlignmentError,
    JointLattice,
    count_loss_calls,
    count_paths,
    init_joint,
    joint_compute,
    rnnt_backward_vars,
    rnnt_forward,
    rnnt_grad,
    rnnt_loss,
    rnnt_loss_batch,
    rnnt_loss_oracle,
)


def lattice(rng, T, U, V, scale=2.0):
    return scale * rng.standard_normal((T, U + 1, V + 1)), rng.integers(V, size=U).tolist()


def test_single_frame_single_label_closed_form():
    # T=1, U=1: emit y then the terminal blank
    z = np.log(np.array([[[0.2, 0.3, 0.5]], [[0.1, 0.1, 0.8]]])).reshape(1, 2, 3)
    loss = float(rnnt_loss(z, [1]).data)
    assert loss == pytest.approx(-math.log(0.3 * 0.8), abs=1e-12)


def test_all_blank_when_no_labels():
    rng = np.random.default_rng(0)
    z, _ = lattice(rng, 4, 0, 3)
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    assert float(rnnt_loss(z, []).data) == pytest.approx(-lp[:, 0, -1].sum(), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_matches_path_enumeration(seed):
    rng = np.random.default_rng(seed)
    for _ in range(30):
        T, U, V = rng.integers(1, 5), rng.integers(0, 4), rng.integers(1, 5)
        z, y = lattice(rng, T, U, V)
        assert abs(float(rnnt_loss(z, y).data) - rnnt_loss_oracle(z, y)) <= 1e-9


def test_more_labels_than_frames_is_feasible():
    # several tokens may be emitted on one frame
    rng = np.random.default_rng(1)
    z, y = lattice(rng, 2, 4, 3)
    assert abs(float(rnnt_loss(z, y).data) - rnnt_loss_oracle(z, y)) <= 1e-9


def test_zero_frames_is_infeasible():
    with pytest.raises(InfeasibleAlignmentError):
        rnnt_loss(np.zeros((0, 2, 3)), [0])


def test_label_length_mismatch():
    with pytest.raises(ValueError):
        rnnt_loss(np.zeros((2, 3, 3)), [0])


def test_path_count():
    assert count_paths(3, 2) == 6
    assert count_paths(1, 5) == 1
    assert count_paths(4, 0) == 1


def test_alpha_beta_cut_consistency():
    # every path leaves row t through exactly one blank move
    rng = np.random.default_rng(3)
    z, y = lattice(rng, 4, 3, 4)
    alpha, logp = rnnt_forward(z, y)
    beta = rnnt_backward_vars(z, y)
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    assert alpha[0, 0] == 0.0
    assert beta[0, 0] == pytest.approx(logp, abs=1e-12)
    assert beta[-1, -1] == pytest.approx(lp[-1, -1, -1], abs=1e-12)
    for t in range(3):
        cut = np.logaddexp.reduce(alpha[t] + lp[t, :, -1] + beta[t + 1])
        assert cut == pytest.approx(logp, abs=1e-10)
    assert alpha[-1, -1] + lp[-1, -1, -1] == pytest.approx(logp, abs=1e-10)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(10):
        T, U, V = rng.integers(1, 5), rng.integers(0, 4), rng.integers(1, 5)
        z, y = lattice(rng, T, U, V)
        p = Tensor(z, requires_grad=True)
        assert finite_difference_check(lambda: rnnt_loss(p, y), [p], eps=1e-3) <= 1e-4


def test_gradient_rows_sum_to_zero():
    # softmax gradients live on the simplex tangent
    rng = np.random.default_rng(5)
    z, y = lattice(rng, 3, 2, 4)
    g = rnnt_grad(z, y)
    assert np.allclose(g.sum(-1), 0.0, atol=1e-12)


def test_padded_batch_equals_single():
    rng = np.random.default_rng(6)
    items = [lattice(rng, T, U, 3) for T, U in [(2, 1), (4, 3), (3, 0)]]
    Tm, Um = 4, 3
    logits = rng.standard_normal((3, Tm, Um + 1, 4))
    labels = np.zeros((3, Um), dtype=np.int64)
    for b, (z, y) in enumerate(items):
        logits[b, : z.shape[0], : z.shape[1]] = z
        labels[b, : len(y)] = y
    T_lens = np.array([z.shape[0] for z, _ in items])
    U_lens = np.array([len(y) for _, y in items])
    x = Tensor(logits, requires_grad=True)
    out = rnnt_loss_batch(x, labels, T_lens, U_lens)
    for b, (z, y) in enumerate(items):
        assert float(out.data[b]) == pytest.approx(float(rnnt_loss(z, y).data), abs=1e-12)
    out.sum().backward()
    for b, (z, y) in enumerate(items):
        T, U1 = z.shape[:2]
        assert np.allclose(x.grad[b, :T, :U1], rnnt_grad(z, y), atol=1e-12)
        assert np.all(x.grad[b, T:] == 0) and np.all(x.grad[b, :, U1:] == 0)


def test_loss_counter_counts_lattices():
    rng = np.random.default_rng(7)
    z = Tensor(rng.standard_normal((5, 2, 2, 3)))
    with count_loss_calls() as c:
        rnnt_loss_batch(z, np.zeros((5, 1), dtype=np.int64))
        rnnt_loss(z.data[0], [1])
    assert c.count == 6


def test_joint_shapes_and_lattice_wrapper():
    rng = np.random.default_rng(8)
    params = init_joint(rng, 4, 3, 5, 6)
    f = Tensor(rng.standard_normal((7, 4)))
    g = Tensor(rng.standard_normal((3, 3)))
    logits = joint_compute(f, g, params)
    assert logits.shape == (7, 3, 7)
    lat = JointLattice(logits)
    assert float(rnnt_loss(lat, [1, 2]).data) == pytest.approx(float(rnnt_loss(logits, [1, 2]).data))


def test_oracle_guard():
    with pytest.raises(ValueError):
        rnnt_loss_oracle(np.zeros((8, 6, 3)), [0] * 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_loss_is_nonnegative_and_shift_invariant(T, U, V, seed):
    rng = np.random.default_rng(seed)
    z, y = lattice(rng, T, U, V)
    a = float(rnnt_loss(z, y).data)
    b = float(rnnt_loss(z + 3.7, y).data)
    assert a >= -1e-12
    assert a == pytest.approx(b, abs=1e-9)


def test_loss_call_window_freezes_on_exit():
    z, y = lattice(np.random.default_rng(0), 3, 1, 2)
    with count_loss_calls() as outer:
        rnnt_loss(z, y)
    rnnt_loss(z, y)
    with count_loss_calls() as inner:
        rnnt_loss(z, y)
        rnnt_loss(z, y)
    assert outer.count == 1 and inner.count == 2
