"""Matching Module (BiGRU encoder, QC/EC attention, inference MLP) and Evidence Module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .numerics import ParamStore, Tensor


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_gru(store: ParamStore, rng, prefix: str, d_in: int, d_g: int):
    store.add(f"{prefix}.Wx", _uniform(rng, (3 * d_g, d_in), d_in))
    store.add(f"{prefix}.Uzr", _uniform(rng, (2 * d_g, d_g), d_g))
    store.add(f"{prefix}.Uh", _uniform(rng, (d_g, d_g), d_g))
    store.add(f"{prefix}.b", np.zeros(3 * d_g))


def _add_mlp(store: ParamStore, rng, prefix: str, d_in: int, hidden: int):
    store.add(f"{prefix}.W1", _uniform(rng, (hidden, d_in), d_in))
    store.add(f"{prefix}.b1", np.zeros(hidden))
    store.add(f"{prefix}.W2", _uniform(rng, (2, hidden), hidden))
    store.add(f"{prefix}.b2", np.zeros(2))


def init_params(cfg: TrainConfig, vocab_size: int, embeddings: np.ndarray | None = None,
                seed: int | None = None, kind: str = "agent") -> ParamStore:
    """Fresh parameters for the RL agent (``kind="agent"``) or the pre-ranker.

    Matrices are U[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
    """
    if kind not in ("agent", "preranker"):
        raise ValueError(f"unknown parameter set {kind!r}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d_e, d_g, two_g = cfg.d_e, cfg.d_g, 2 * cfg.d_g
    store = ParamStore()
    if embeddings is None:
        embeddings = rng.uniform(-0.1, 0.1, size=(vocab_size, d_e))
        embeddings[0] = 0.0
    if embeddings.shape != (vocab_size, d_e):
        raise nx.ShapeError(f"embedding table {embeddings.shape} != ({vocab_size}, {d_e})")
    store.add("embed", embeddings)
    _add_gru(store, rng, "enc.fwd", d_e, d_g)
    _add_gru(store, rng, "enc.bwd", d_e, d_g)
    for v in ("v1", "v2", "v3"):
        store.add(f"qc.{v}", _uniform(rng, (two_g,), two_g))
    store.add("qc.W", _uniform(rng, (two_g, 8 * d_g), 8 * d_g))
    store.add("qc.b", np.zeros(two_g))
    if kind == "preranker":
        _add_mlp(store, rng, "pre", two_g, cfg.mlp_hidden)
        return store

    if not cfg.share_summary_encoder:
        _add_gru(store, rng, "sum.fwd", d_e, d_g)
        _add_gru(store, rng, "sum.bwd", d_e, d_g)
    if not cfg.no_evidence:
        for v in ("v4", "v5", "v6"):
            store.add(f"ec.{v}", _uniform(rng, (two_g,), two_g))
        store.add("ec.W", _uniform(rng, (two_g, 4 * d_g), 4 * d_g))
        store.add("ec.b", np.zeros(two_g))
        store.add("gate.We", _uniform(rng, (two_g, two_g), two_g))
        store.add("gate.Wo", _uniform(rng, (two_g, two_g), two_g))
    state_dim = two_g if cfg.no_evidence else 4 * d_g
    _add_mlp(store, rng, "policy", state_dim, cfg.mlp_hidden)
    return store


SHARED_WITH_PRERANKER = ("embed", "enc.", "qc.")


def warm_start(agent: ParamStore, preranker: ParamStore, copy_mlp: bool = True):
    """Copy encoder and QC attention from a trained pre-ranker into the agent.

    With ``copy_mlp`` the pre-ranker's MLP is embedded into the policy MLP
    (zero weights on the evidence half of the state), so the untrained agent
    reproduces the pre-ranker score exactly.
    """
    for name, t in preranker.items():
        if name.startswith(SHARED_WITH_PRERANKER) and name in agent:
            agent[name].data[...] = t.data
    if not copy_mlp:
        return
    w1 = agent["policy.W1"].data
    pre_w1 = preranker["pre.W1"].data
    if w1.shape[0] != pre_w1.shape[0]:
        raise nx.ShapeError("policy and pre-ranker MLP widths differ; cannot warm-start")
    w1[...] = 0.0
    w1[:, :pre_w1.shape[1]] = pre_w1
    agent["policy.b1"].data[...] = preranker["pre.b1"].data
    agent["policy.W2"].data[...] = preranker["pre.W2"].data
    agent["policy.b2"].data[...] = preranker["pre.b2"].data


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def _gru_weights(params: ParamStore, prefix: str):
    return params[f"{prefix}.Wx"], params[f"{prefix}.Uzr"], params[f"{prefix}.Uh"], params[f"{prefix}.b"]


def gru_cell(x: Tensor, h_prev: Tensor, Wx: Tensor, Uzr: Tensor, Uh: Tensor, b: Tensor) -> Tensor:
    """One GRU step composed from primitive ops; gates are ordered [z, r, candidate]."""
    d_g = h_prev.shape[-1]
    if Wx.shape[0] != 3 * d_g or x.shape[-1] != Wx.shape[1]:
        raise nx.ShapeError(f"gru_cell: x {x.shape}, h {h_prev.shape} do not fit Wx {Wx.shape}")
    gx = nx.linear(x, Wx, b)
    gh = nx.linear(h_prev, Uzr)
    z = nx.sigmoid(gx[..., :d_g] + gh[..., :d_g])
    r = nx.sigmoid(gx[..., d_g:2 * d_g] + gh[..., d_g:])
    cand = nx.tanh(gx[..., 2 * d_g:] + nx.linear(r * h_prev, Uh))
    return (1.0 - z) * h_prev + z * cand


def gru_sequence(X: Tensor, mask: np.ndarray, Wx: Tensor, Uzr: Tensor, Uh: Tensor, b: Tensor,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over ``X`` [B, L, d_in] as a single graph node with hand-written BPTT.

    Masked (padding) steps carry the previous state unchanged, so with
    right-padding the forward pass ends on the last real token and the
    reverse pass starts on it.
    """
    B, L, _ = X.shape
    d_g = Uh.shape[0]
    m = np.asarray(mask, dtype=np.float64)[..., None]  # B, L, 1
    gx = X.data @ Wx.data.T + b.data
    steps = range(L - 1, -1, -1) if reverse else range(L)
    H = np.zeros((B, L, d_g))
    cache = {}
    h = np.zeros((B, d_g))
    for t in steps:
        gh = h @ Uzr.data.T
        z = nx._sigmoid(gx[:, t, :d_g] + gh[:, :d_g])
        r = nx._sigmoid(gx[:, t, d_g:2 * d_g] + gh[:, d_g:])
        rh = r * h
        cand = np.tanh(gx[:, t, 2 * d_g:] + rh @ Uh.data.T)
        hn = (1.0 - z) * h + z * cand
        h_out = m[:, t] * hn + (1.0 - m[:, t]) * h
        cache[t] = (h, z, r, rh, cand)
        H[:, t] = h_out
        h = h_out

    def bw(gH):
        dgx = np.zeros_like(gx)
        dUzr = np.zeros_like(Uzr.data)
        dUh = np.zeros_like(Uh.data)
        dh_next = np.zeros((B, d_g))
        for t in reversed(list(steps)):
            h_prev, z, r, rh, cand = cache[t]
            dh = gH[:, t] + dh_next
            dhn = m[:, t] * dh
            dh_prev = (1.0 - m[:, t]) * dh + dhn * (1.0 - z)
            dz = dhn * (cand - h_prev)
            da_h = dhn * z * (1.0 - cand * cand)
            dUh += da_h.T @ rh
            drh = da_h @ Uh.data
            dh_prev += drh * r
            da_zr = np.concatenate([dz * z * (1.0 - z), drh * h_prev * r * (1.0 - r)], axis=1)
            dUzr += da_zr.T @ h_prev
            dh_prev += da_zr @ Uzr.data
            dgx[:, t, :2 * d_g] = da_zr
            dgx[:, t, 2 * d_g:] = da_h
            dh_next = dh_prev
        flat = dgx.reshape(-1, 3 * d_g)
        dX = dgx @ Wx.data
        dWx = flat.T @ X.data.reshape(-1, X.shape[-1])
        return dX, dWx, dUzr, dUh, flat.sum(axis=0)

    return nx._node(H, (X, Wx, Uzr, Uh, b), bw)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class SequenceEncoding:
    H: Tensor  # B, L, 2d_g
    mask: np.ndarray  # B, L
    summary: Tensor  # B, 2d_g: [last forward state; last backward state]


def _bigru(X, mask, params, prefix):
    Hf = gru_sequence(X, mask, *_gru_weights(params, f"{prefix}.fwd"))
    Hb = gru_sequence(X, mask, *_gru_weights(params, f"{prefix}.bwd"), reverse=True)
    return Hf, Hb


def embed(ids: np.ndarray, params: ParamStore, cfg: TrainConfig, rng=None, train: bool = False) -> Tensor:
    table = params["embed"]
    if cfg.train_embeddings:
        X = nx.embedding(table, ids)
    else:
        X = nx.constant(table.data[ids])
    return nx.dropout(X, cfg.dropout, rng, train)


def encode(ids: np.ndarray, mask: np.ndarray, params: ParamStore, cfg: TrainConfig,
           rng=None, train: bool = False, summary_from: str = "enc") -> SequenceEncoding:
    """BiGRU over right-padded index rows ``ids`` [B, L] (1-D input is treated as one row)."""
    ids = np.atleast_2d(np.asarray(ids))
    mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    if ids.shape != mask.shape:
        raise nx.ShapeError(f"encode: ids {ids.shape} vs mask {mask.shape}")
    if ids.shape[1] == 0 or not mask.any(axis=1).all():
        raise ValueError("encode: every sequence needs at least one real token")
    X = embed(ids, params, cfg, rng, train)
    Hf, Hb = _bigru(X, mask, params, "enc")
    H = nx.concat([Hf, Hb], axis=-1)
    if summary_from != "enc":
        Hf, Hb = _bigru(X, mask, params, summary_from)
    summary = nx.concat([Hf[:, -1], Hb[:, 0]], axis=-1)
    return SequenceEncoding(H, mask, summary)


def init_evidence(question: SequenceEncoding, row: int = 0) -> Tensor:
    """E_1: the question's BiGRU summary."""
    return question.summary[row]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def qc_attention(HQ: Tensor, HC: Tensor, params: ParamStore, q_mask=None, c_mask=None,
                 dropout: float = 0.0, rng=None, train: bool = False) -> Tensor:
    """Question-candidate attention pooled to V_qc.

    ``HQ`` [Lq, 2g]; ``HC`` [B, Lc, 2g] (or [Lc, 2g]). Returns [B, 2g] (or [2g]).
    """
    squeeze = HC.ndim == 2
    if squeeze:
        HC = nx.expand_dims(HC, 0)
        c_mask = None if c_mask is None else np.atleast_2d(c_mask)
    B, Lc, two_g = HC.shape
    Lq = HQ.shape[0]
    if HQ.shape[1] != two_g:
        raise nx.ShapeError(f"qc_attention: HQ {HQ.shape} vs HC {HC.shape}")
    q_mask = np.ones(Lq) if q_mask is None else np.asarray(q_mask, dtype=np.float64)
    c_mask = np.ones((B, Lc)) if c_mask is None else np.asarray(c_mask, dtype=np.float64)
    v1, v2, v3 = params["qc.v1"], params["qc.v2"], params["qc.v3"]

    a_q = nx.reshape(HQ @ v1, (1, Lq, 1))
    a_c = nx.reshape(HC @ v2, (B, 1, Lc))
    a_qc = nx.matmul(HQ * v3, nx.swapaxes(HC, 1, 2))  # B, Lq, Lc
    alpha = a_qc + a_q + a_c
    qm = q_mask[None, :, None]
    p_ij = nx.softmax(alpha, axis=1, mask=qm)  # over question words
    U_C = nx.matmul(nx.swapaxes(p_ij, 1, 2), HQ)  # B, Lc, 2g
    beta = nx.max_pool(alpha, axis=1, mask=qm)  # B, Lc
    p_j = nx.softmax(beta, axis=1, mask=c_mask)
    U_Q = nx.matmul(nx.reshape(p_j, (B, 1, Lc)), HC)  # B, 1, 2g
    M = nx.concat([HC, U_C, HC * U_C, U_Q * U_C], axis=-1)
    M = nx.dropout(M, dropout, rng, train)
    M = nx.tanh(nx.linear(M, params["qc.W"], params["qc.b"]))
    V = nx.max_pool(M, axis=1, mask=c_mask[:, :, None])
    return V[0] if squeeze else V


def ec_attention(E: Tensor, HC: Tensor, params: ParamStore, c_mask=None,
                 dropout: float = 0.0, rng=None, train: bool = False) -> Tensor:
    """Evidence-candidate attention pooled to V_ec. ``E`` [2g], ``HC`` [Lc, 2g] -> [2g]."""
    if E.shape[-1] != HC.shape[-1]:
        raise nx.ShapeError(f"ec_attention: E {E.shape} vs HC {HC.shape}")
    v4, v5, v6 = params["ec.v4"], params["ec.v5"], params["ec.v6"]
    # v4 . E is the same for every j; kept for fidelity, it cancels in the softmax
    alpha = HC @ v5 + HC @ (E * v6) + nx.sum(v4 * E)
    p = nx.softmax(alpha, axis=0, mask=c_mask)
    U_E = p @ HC
    u = nx.concat([HC, HC * U_E], axis=-1)
    u = nx.dropout(u, dropout, rng, train)
    M = nx.tanh(nx.linear(u, params["ec.W"], params["ec.b"]))
    return nx.max_pool(M, axis=0, mask=None if c_mask is None else np.asarray(c_mask)[:, None])


# ---------------------------------------------------------------------------
# inference layer
# ---------------------------------------------------------------------------

@dataclass
class ActionDistribution:
    logits: Tensor
    log_probs: Tensor  # [2]
    p_pos: Tensor  # scalar, p(a=1|s)

    @property
    def p1(self) -> float:
        return float(self.p_pos.data)

    @property
    def p0(self) -> float:
        return float(np.exp(self.log_probs.data[0]))

    @property
    def logp0(self) -> float:
        return float(self.log_probs.data[0])

    @property
    def logp1(self) -> float:
        return float(self.log_probs.data[1])

    def greedy(self) -> int:
        return int(self.log_probs.data[1] > self.log_probs.data[0])


def mlp_logits(x: Tensor, params: ParamStore, prefix: str, dropout: float = 0.0, rng=None,
               train: bool = False) -> Tensor:
    x = nx.dropout(x, dropout, rng, train)
    f = nx.tanh(nx.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return nx.linear(f, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def policy(s: Tensor, params: ParamStore, dropout: float = 0.0, rng=None, train: bool = False) -> ActionDistribution:
    logits = mlp_logits(s, params, "policy", dropout, rng, train)
    probs = nx.softmax(logits, axis=-1)
    return ActionDistribution(logits, nx.log_softmax(logits, axis=-1), probs[..., 1])


# ---------------------------------------------------------------------------
# evidence module
# ---------------------------------------------------------------------------

def update_evidence(E: Tensor, O: Tensor, p_pos: Tensor, threshold: float, params: ParamStore | None,
                    *, use_rl_action: bool = True, use_gate: bool = True, admit: bool | None = None) -> Tensor:
    """E_{t+1} from E_t and the candidate summary O_t.

    The candidate is admitted when ``p_pos >= threshold`` (or per ``admit`` when
    the caller decides, e.g. from the sampled action); otherwise E_t is
    returned untouched.
    """
    if admit is None:
        admit = float(p_pos.data) >= threshold
    if not admit:
        return E
    O_w = p_pos * O if use_rl_action else O
    if not use_gate:
        return 0.5 * E + 0.5 * O_w
    g = nx.sigmoid(nx.linear(E, params["gate.We"]) + nx.linear(O_w, params["gate.Wo"]))
    return (1.0 - g) * E + g * O_w


# ---------------------------------------------------------------------------
# whole-question forward passes
# ---------------------------------------------------------------------------

@dataclass
class QuestionEncoding:
    question: SequenceEncoding
    candidates: SequenceEncoding
    lengths: np.ndarray
    V_qc: Tensor  # T, 2g


def encode_question(question_ids: np.ndarray, candidate_ids, params: ParamStore, cfg: TrainConfig,
                    rng=None, train: bool = False) -> QuestionEncoding:
    """Encode a question and all its candidates (batched) and run QC attention."""
    from .data import pad_sequences

    summary_from = "sum" if "sum.fwd.Wx" in params else "enc"
    q_ids = np.asarray(question_ids)[None, :]
    q_enc = encode(q_ids, np.ones_like(q_ids, dtype=np.float64), params, cfg, rng, train, summary_from)
    c_ids, c_mask, lengths = pad_sequences(list(candidate_ids))
    c_enc = encode(c_ids, c_mask, params, cfg, rng, train, summary_from)
    V_qc = qc_attention(q_enc.H[0], c_enc.H, params, c_mask=c_mask, dropout=cfg.dropout, rng=rng, train=train)
    return QuestionEncoding(q_enc, c_enc, lengths, V_qc)


def prerank_logits(question_ids, candidate_ids, params: ParamStore, cfg: TrainConfig,
                   rng=None, train: bool = False) -> Tensor:
    """Pre-ranker logits [T, 2] for every candidate of one question."""
    enc = encode_question(question_ids, candidate_ids, params, cfg, rng, train)
    return mlp_logits(enc.V_qc, params, "pre", cfg.dropout, rng, train)
