import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msranker import model as M
from msranker import numerics as nx
from msranker.config import TrainConfig
from msranker.numerics import ParamStore

SMALL = TrainConfig(d_e=6, d_g=3, mlp_hidden=5, dropout=0.0)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_gru_scalar_step_matches_hand_computation():
    # d_g = 1, d_in = 1, one step from h0 = 0.2
    x, h = 0.7, 0.2
    wz, wr, wh, uz, ur, uh, bz, br, bh = 0.3, -0.4, 0.9, 0.5, 0.1, -0.6, 0.05, -0.02, 0.1
    z = _sig(wz * x + bz + uz * h)
    r = _sig(wr * x + br + ur * h)
    cand = np.tanh(wh * x + bh + uh * r * h)
    expected = (1 - z) * h + z * cand
    out = M.gru_cell(nx.constant([[x]]), nx.constant([[h]]), nx.constant([[wz], [wr], [wh]]),
                     nx.constant([[uz], [ur]]), nx.constant([[uh]]), nx.constant([bz, br, bh]))
    assert out.data[0, 0] == pytest.approx(expected, abs=1e-15)


def _gru_store(rng, d_in, d_g, B, L):
    s = ParamStore()
    s.add("X", rng.normal(size=(B, L, d_in)))
    s.add("Wx", rng.normal(size=(3 * d_g, d_in)) * 0.5)
    s.add("Uzr", rng.normal(size=(2 * d_g, d_g)) * 0.5)
    s.add("Uh", rng.normal(size=(d_g, d_g)) * 0.5)
    s.add("b", rng.normal(size=3 * d_g) * 0.1)
    return s


def _composed(s, mask, reverse):
    B, L, _ = s["X"].shape
    d_g = s["Uh"].shape[0]
    h = nx.constant(np.zeros((B, d_g)))
    outs = [None] * L
    for t in (range(L - 1, -1, -1) if reverse else range(L)):
        hn = M.gru_cell(s["X"][:, t], h, s["Wx"], s["Uzr"], s["Uh"], s["b"])
        m = nx.constant(mask[:, t:t + 1])
        h = m * hn + (1.0 - m) * h
        outs[t] = h
    return nx.stack(outs, axis=1)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_gru_matches_composed_cells(reverse):
    rng = np.random.default_rng(0)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=float)
    weights = rng.normal(size=(3, 4, 2))
    grads = []
    outs = []
    for fused in (True, False):
        s = _gru_store(np.random.default_rng(1), 5, 2, 3, 4)
        H = M.gru_sequence(s["X"], mask, s["Wx"], s["Uzr"], s["Uh"], s["b"], reverse) if fused \
            else _composed(s, mask, reverse)
        nx.backward(nx.sum(H * weights), s)
        outs.append(H.data)
        grads.append({k: p.grad.copy() for k, p in s.items()})
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-13)
    for k in grads[0]:
        np.testing.assert_allclose(grads[0][k], grads[1][k], atol=1e-12, err_msg=k)


def test_fused_gru_grad_check():
    s = _gru_store(np.random.default_rng(2), 3, 2, 2, 3)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    w = np.random.default_rng(3).normal(size=(2, 3, 2))
    report = nx.grad_check(lambda p: nx.sum(M.gru_sequence(p["X"], mask, p["Wx"], p["Uzr"], p["Uh"], p["b"]) * w), s)
    assert report.ok, report.format()


def test_padding_does_not_change_real_states():
    params = M.init_params(SMALL, 10, kind="preranker")
    short = M.encode(np.array([[3, 4, 5]]), np.ones((1, 3)), params, SMALL)
    padded = M.encode(np.array([[3, 4, 5, 0, 0]]), np.array([[1, 1, 1, 0, 0.0]]), params, SMALL)
    np.testing.assert_allclose(padded.H.data[:, :3], short.H.data, atol=1e-14)
    np.testing.assert_allclose(padded.summary.data, short.summary.data, atol=1e-14)


def test_encode_rejects_empty_rows():
    params = M.init_params(SMALL, 10, kind="preranker")
    with pytest.raises(ValueError):
        M.encode(np.array([[3, 0]]), np.array([[0, 0.0]]), params, SMALL)


def test_qc_attention_shape_error_names_shapes():
    params = M.init_params(SMALL, 10, kind="preranker")
    with pytest.raises(nx.ShapeError, match=r"\(4, 5\)"):
        M.qc_attention(nx.constant(np.ones((4, 5))), nx.constant(np.ones((3, 6))), params)


def test_qc_attention_batched_equals_single():
    rng = np.random.default_rng(0)
    params = M.init_params(SMALL, 10, kind="preranker")
    HQ = nx.constant(rng.normal(size=(4, 6)))
    HC = rng.normal(size=(2, 5, 6))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0.0]])
    batched = M.qc_attention(HQ, nx.constant(HC), params, c_mask=mask).data
    single = M.qc_attention(HQ, nx.constant(HC[1, :3]), params).data
    np.testing.assert_allclose(batched[1], single, atol=1e-13)


def test_ec_attention_v4_cancels():
    rng = np.random.default_rng(0)
    params = M.init_params(SMALL, 10)
    E, HC = nx.constant(rng.normal(size=6)), nx.constant(rng.normal(size=(4, 6)))
    before = M.ec_attention(E, HC, params).data
    params["ec.v4"].data[...] = rng.normal(size=6) * 10
    after = M.ec_attention(E, HC, params)
    np.testing.assert_allclose(before, after.data, atol=1e-13)
    nx.backward(nx.sum(after), params)
    np.testing.assert_allclose(params["ec.v4"].grad, 0.0, atol=1e-14)


def test_evidence_copy_below_threshold_is_identity():
    params = M.init_params(SMALL, 10)
    E = nx.constant(np.arange(6.0))
    out = M.update_evidence(E, nx.constant(np.ones(6)), nx.constant(0.3), 0.5, params)
    assert out is E


def test_evidence_zero_gate_weights_average():
    params = M.init_params(SMALL, 10)
    params["gate.We"].data[...] = 0.0
    params["gate.Wo"].data[...] = 0.0
    E, O = np.arange(6.0), np.linspace(-1, 1, 6)
    out = M.update_evidence(nx.constant(E), nx.constant(O), nx.constant(1.0), 0.5, params)
    np.testing.assert_allclose(out.data, 0.5 * E + 0.5 * O, atol=1e-15)


def test_evidence_ablation_variants():
    E, O = nx.constant(np.ones(6)), nx.constant(np.full(6, 3.0))
    no_gate = M.update_evidence(E, O, nx.constant(0.8), 0.5, None, use_gate=False)
    np.testing.assert_allclose(no_gate.data, 0.5 + 0.5 * 0.8 * 3.0)
    no_action = M.update_evidence(E, O, nx.constant(0.8), 0.5, None, use_gate=False, use_rl_action=False)
    np.testing.assert_allclose(no_action.data, 2.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)),
       st.floats(0.5, 1.0), st.integers(0, 1000))
def test_evidence_update_is_convex_combination(E, O, p, seed):
    params = M.init_params(SMALL, 10, seed=seed)
    out = M.update_evidence(nx.constant(E), nx.constant(O), nx.constant(p), 0.5, params).data
    O_w = p * O
    lo, hi = np.minimum(E, O_w), np.maximum(E, O_w)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), st.floats(0.0, 0.4999))
def test_evidence_below_threshold_bit_exact(E, p):
    params = M.init_params(SMALL, 10)
    t = nx.constant(E)
    out = M.update_evidence(t, nx.constant(np.ones(6)), nx.constant(p), 0.5, params)
    assert out.data.tobytes() == E.tobytes()


def test_policy_probabilities_normalised():
    params = M.init_params(SMALL, 10)
    rng = np.random.default_rng(0)
    dist = M.policy(nx.constant(rng.normal(size=12)), params)
    assert dist.p0 + dist.p1 == pytest.approx(1.0, abs=1e-12)
    assert dist.greedy() == int(dist.p1 > 0.5)


def test_warm_start_reproduces_preranker_scores():
    rng = np.random.default_rng(0)
    pre = M.init_params(SMALL, 12, kind="preranker", seed=1)
    agent = M.init_params(SMALL, 12, seed=2)
    M.warm_start(agent, pre)
    q = np.array([2, 3, 4])
    cands = [rng.integers(2, 12, size=n) for n in (3, 5, 2)]
    pre_p = nx.softmax(M.prerank_logits(q, cands, pre, SMALL), axis=-1).data[:, 1]
    enc = M.encode_question(q, cands, agent, SMALL)
    E = M.init_evidence(enc.question)
    for t in range(3):
        HC = enc.candidates.H[t, :len(cands[t])]
        s = nx.concat([enc.V_qc[t], M.ec_attention(E, HC, agent)])
        assert M.policy(s, agent).p1 == pytest.approx(pre_p[t], abs=1e-12)


def test_no_evidence_agent_has_no_evidence_parameters():
    agent = M.init_params(SMALL.replace(no_evidence=True), 10)
    assert not [k for k in agent if k.startswith(("ec.", "gate."))]
    assert agent["policy.W1"].shape == (5, 6)


def test_separate_summary_encoder_is_used():
    cfg = SMALL.replace(share_summary_encoder=False)
    agent = M.init_params(cfg, 10)
    enc = M.encode_question(np.array([2, 3]), [np.array([4, 5])], agent, cfg)
    nx.backward(nx.sum(M.init_evidence(enc.question)), agent)
    assert agent["sum.fwd.Wx"].grad.any()
    assert not agent["enc.fwd.Wx"].grad.any()


def test_embeddings_frozen_receive_no_gradient():
    cfg = SMALL.replace(train_embeddings=False)
    pre = M.init_params(cfg, 10, kind="preranker")
    nx.backward(nx.sum(M.prerank_logits(np.array([2, 3]), [np.array([4, 5])], pre, cfg)), pre)
    assert not pre["embed"].grad.any()
