import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from aga import oracles
from aga.autodiff import Tensor, finite_difference_check
from aga.grouping import (
    GateState, alignment_weights, compute_groups, compute_groups_and_update, gate_trajectory_csv,
    gate_update, group_embed, minmax_rows, similarity_matrix, sparsify,
)
from aga.verify import gate_closed_form_error, grouping_oracle_error, nonempty_group_violations

finite = st.floats(-5, 5, allow_nan=False)


def test_similarity_identity_and_bilinear():
    e = np.eye(4)
    assert np.array_equal(similarity_matrix(Tensor(e), Tensor(e)).data, e)
    rng = np.random.default_rng(0)
    t, v = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    S = similarity_matrix(Tensor(t), Tensor(v)).data
    assert np.allclose(similarity_matrix(Tensor(2.5 * t), Tensor(v)).data, 2.5 * S, atol=1e-14)
    assert np.abs(S - np.array(oracles.similarity(t, v))).max() <= 1e-12


def test_minmax_examples():
    assert np.array_equal(minmax_rows(Tensor([[1.0, 2.0, 3.0]])).data, [[0.0, 0.5, 1.0]])
    assert np.array_equal(minmax_rows(Tensor([[4.0, 4.0, 4.0]])).data, [[1.0, 1.0, 1.0]])


def test_minmax_oracle_and_gradient():
    rng = np.random.default_rng(1)
    S = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    assert np.abs(minmax_rows(S).data - np.array(oracles.minmax(S.data))).max() <= 1e-12
    w = rng.normal(size=(5, 7))
    assert finite_difference_check(lambda: (minmax_rows(S) * w).sum(), [S]) <= 1e-6


def test_sparsify_examples():
    row = Tensor([[0.0, 0.5, 1.0]])
    assert np.array_equal(sparsify(row, 0.0).data, row.data)
    assert np.array_equal(sparsify(row, 1.0).data, [[0.0, 0.0, 1.0]])
    assert np.array_equal(sparsify(row, 0.4).data, [[0.0, 0.5, 1.0]])
    with pytest.raises(ValueError):
        sparsify(row, 1.5)


def test_alignment_examples():
    assert np.allclose(alignment_weights(Tensor([[0.0, 0.5, 1.0]])).data, [[0, 1 / 3, 2 / 3]], atol=1e-15)
    assert np.array_equal(alignment_weights(Tensor([[0.0, 1.0, 0.0]])).data, [[0.0, 1.0, 0.0]])
    with pytest.raises(ValueError):
        alignment_weights(Tensor([[0.0, 0.0]]))


def test_alignment_oracle():
    rng = np.random.default_rng(2)
    S_tilde = sparsify(minmax_rows(Tensor(rng.normal(size=(4, 6)))), 0.3).data
    a = alignment_weights(Tensor(S_tilde)).data
    assert np.abs(a - np.array(oracles.alignment(S_tilde))).max() <= 1e-12
    assert np.abs(a.sum(axis=1) - 1).max() <= 1e-12


def test_group_embed_examples():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(5, 3))
    onehot = np.zeros((1, 5))
    onehot[0, 2] = 1
    assert np.array_equal(group_embed(Tensor(onehot), Tensor(src)).data[0], src[2])
    uni = group_embed(Tensor(np.full((1, 5), 0.2)), Tensor(src)).data[0]
    assert np.allclose(uni, src.mean(axis=0), atol=1e-15)
    alpha = rng.dirichlet(np.ones(5), size=4)
    got = group_embed(Tensor(alpha), Tensor(src)).data
    assert np.abs(got - alpha @ src).max() <= 1e-12
    assert np.abs(got - np.array(oracles.group(alpha, src))).max() <= 1e-12


def test_orthonormal_matched_tokens_pick_their_patch():
    e = np.eye(4)
    for sigma in (0.0, 0.3, 1.0):
        # at sigma=0 every entry survives, but the off-diagonal ones are exactly zero
        _, groups = compute_groups(Tensor(e), Tensor(e), sigma, sigma)
        assert np.array_equal(groups.tgv.data, e)


@given(st.integers(1, 8), st.integers(1, 12), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_pipeline_matches_scalar_oracle(m, n, s_tg, s_vg, seed):
    rng = np.random.default_rng(seed)
    t, v = rng.normal(size=(m, 4)), rng.normal(size=(n, 4))
    state, groups = compute_groups(Tensor(t), Tensor(v), s_tg, s_vg)
    ref = oracles.grouping_pipeline(t, v, s_tg, s_vg)
    for key, got in [("alpha", state.alpha), ("tgv", groups.tgv), ("alpha_v", state.alpha_v), ("pgl", groups.pgl)]:
        assert np.abs(got.data - np.array(ref[key])).max() <= 1e-10, key


def test_pipeline_oracle_sweep():
    assert grouping_oracle_error(np.random.default_rng(4)) <= 1e-10


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite),
       st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
def test_group_contains_argmax(S, sigma):
    S_hat = minmax_rows(Tensor(S))
    alpha = alignment_weights(sparsify(S_hat, sigma)).data
    top = np.argmax(S_hat.data, axis=1)
    assert (alpha[np.arange(len(S)), top] > 0).all()
    assert (alpha >= 0).all()
    assert np.abs(alpha.sum(axis=1) - 1).max() <= 1e-9


def test_nonempty_sweep():
    bad, dev = nonempty_group_violations(np.random.default_rng(5), trials=200)
    assert bad == 0 and dev <= 1e-9


def test_gate_examples():
    g = GateState(0.5, 0.99)
    gate_update(g, [np.full((2, 3), 0.3)])
    assert np.isclose(g.sigma, 0.498, atol=1e-15)
    for gamma in (0.0, 0.5, 0.99, 0.999):
        g = GateState(0.3, gamma)
        gate_update(g, [np.full((2, 2), 0.3), np.full((1, 5), 0.3)])
        assert g.sigma == pytest.approx(0.3, abs=1e-15)


def test_gate_weights_entries_not_matrices():
    g = GateState(0.0, 0.5)
    gate_update(g, [np.zeros((1, 1)), np.ones((1, 3))])
    assert g.sigma == pytest.approx(0.5 * 0.75)


@pytest.mark.parametrize("gamma", [0.99, 0.999])
def test_gate_closed_form(gamma):
    assert gate_closed_form_error(gamma) <= 1e-10


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.999))
def test_gate_stays_in_unit_interval(s0, m, gamma):
    g = GateState(s0, gamma)
    for _ in range(20):
        gate_update(g, [np.full((2, 2), m)])
        assert 0.0 <= g.sigma <= 1.0


def test_frozen_gate_keeps_sigma_and_logs():
    g = GateState(1 / 361, 0.99, frozen=True)
    for _ in range(3):
        gate_update(g, [np.ones((2, 2))])
    assert g.sigma == 1 / 361
    assert g.trajectory == [(1, 1 / 361), (2, 1 / 361), (3, 1 / 361)]


def test_gate_validation():
    with pytest.raises(ValueError):
        GateState(1.5)
    with pytest.raises(ValueError):
        GateState(0.1, 1.0)
    with pytest.raises(ValueError):
        gate_update(GateState(), [])


def test_fixed_thresholds_drop_row_minima():
    from aga.trainer import FIXED_THRESHOLDS
    assert FIXED_THRESHOLDS == (1 / 361, 1 / 97)
    rng = np.random.default_rng(6)
    state, _ = compute_groups(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(9, 3))), *FIXED_THRESHOLDS)
    # such low thresholds drop only the row minima
    assert ((state.S_tilde.data > 0).sum(axis=1) == 8).all()


def test_compute_and_update_and_csv():
    rng = np.random.default_rng(7)
    g_tg, g_vg = GateState(), GateState(gamma=0.999)
    for _ in range(3):
        compute_groups_and_update(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4))), g_tg, g_vg)
    lines = gate_trajectory_csv(g_tg, g_vg).strip().splitlines()
    assert lines[0] == "step,sigma_tg,sigma_vg"
    rows = [l.split(",") for l in lines[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 3]
    assert all(0 <= float(x) <= 1 for r in rows for x in r[1:])


def test_grouping_gradient_away_from_threshold():
    rng = np.random.default_rng(8)
    t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    state, _ = compute_groups(t, v, 0.4, 0.4)
    assert np.abs(state.S_hat.data - 0.4).min() > 1e-3
    w1, w2 = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))

    def f():
        _, g = compute_groups(t, v, 0.4, 0.4)
        return (g.tgv * w1).sum() + (g.pgl * w2).sum()

    assert finite_difference_check(f, [t, v]) <= 1e-6


def test_dim_mismatch():
    from aga.autodiff import ShapeError
    with pytest.raises(ShapeError):
        similarity_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
