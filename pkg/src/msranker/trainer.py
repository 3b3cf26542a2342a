"""Two-stage training: supervised pre-ranker, then REINFORCE fine-tuning of the agent."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import numerics as nx
from .config import TrainConfig
from .data import IndexedInstance
from .numerics import ParamStore, Tensor
from .ranking import RankedList, average_precision, metrics_report, step_reward

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, store: ParamStore, lr: float):
        self.store, self.lr = store, lr

    def step(self):
        for _, p in self.store.items():
            p.data -= self.lr * p.grad
        self.store.version += 1


class Adam:
    def __init__(self, store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store, self.lr, self.betas, self.eps = store, lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.store.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.store.version += 1


def make_optimizer(store: ParamStore, cfg: TrainConfig, lr: float | None = None):
    lr = cfg.lr if lr is None else lr
    if cfg.optimizer == "sgd":
        return SGD(store, lr)
    return Adam(store, lr)


def batches(items, size: int):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _map_episodes(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# pre-ranker
# ---------------------------------------------------------------------------

def prerank_scores(inst: IndexedInstance, params: ParamStore, cfg: TrainConfig) -> np.ndarray:
    """P(correct) for every candidate, in dataset order."""
    logits = M.prerank_logits(inst.question, inst.candidates, params, cfg)
    return nx.softmax(logits, axis=-1).data[:, 1]


def prerank_score(inst: IndexedInstance, index: int, params: ParamStore, cfg: TrainConfig) -> float:
    logits = M.prerank_logits(inst.question, [inst.candidates[index]], params, cfg)
    return float(nx.softmax(logits, axis=-1).data[0, 1])


def order_candidates(inst: IndexedInstance, params: ParamStore | None, cfg: TrainConfig) -> np.ndarray:
    """Pre-rank order (highest score first, ties by dataset order); identity without a pre-ranker."""
    if cfg.no_preranker or params is None:
        return np.arange(len(inst))
    return np.argsort(-prerank_scores(inst, params, cfg), kind="stable")


def preranker_loss(batch, params: ParamStore, cfg: TrainConfig, rng, train: bool = True) -> Tensor:
    """Mean cross-entropy over every question-candidate pair in ``batch``."""
    total, pairs = None, 0
    for inst in batch:
        logp = nx.log_softmax(M.prerank_logits(inst.question, inst.candidates, params, cfg, rng, train), axis=-1)
        picked = nx.sum(logp[np.arange(len(inst)), inst.labels])
        total = picked if total is None else total + picked
        pairs += len(inst)
    return nx.scale(total, -1.0 / pairs)


def train_preranker(train, cfg: TrainConfig, vocab_size: int, embeddings=None, dev=None,
                    params: ParamStore | None = None, on_epoch=None):
    """Fit the pre-ranker with cross-entropy; returns (params, per-epoch history)."""
    params = params or M.init_params(cfg, vocab_size, embeddings, kind="preranker")
    opt = make_optimizer(params, cfg)
    history = []
    for epoch in range(1, cfg.preranker_epochs + 1):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        order = rng.permutation(len(train))
        losses = []
        for b in batches([train[i] for i in order], cfg.batch_questions):
            params.zero_grad()
            loss = preranker_loss(b, params, cfg, rng, train=True)
            nx.backward(loss, params)
            opt.step()
            losses.append(loss.item() * sum(len(x) for x in b))
        record = {"epoch": epoch, "stage": "preranker", "lr": opt.lr,
                  "loss": float(np.sum(losses) / sum(len(x) for x in train))}
        opt.lr *= cfg.lr_decay
        if dev:
            rep = evaluate_preranker(dev, params, cfg)
            record.update(dev_map=rep["MAP"], dev_mrr=rep["MRR"])
        log.info("%s", record)
        history.append(record)
        if on_epoch:
            on_epoch(record)
    params.zero_grad()
    return params, history


def evaluate_preranker(data, params: ParamStore, cfg: TrainConfig, workers: int = 1) -> dict:
    def rank(inst):
        ranked = RankedList()
        for i, (s, y) in enumerate(zip(prerank_scores(inst, params, cfg), inst.labels)):
            ranked = ranked.insert(i, float(s), int(y))
        return ranked

    lists = _map_episodes(rank, data, workers)
    return metrics_report([inst.qid for inst in data], lists)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Step:
    index: int
    state_digest: str
    action: int
    log_prob: float
    p_pos: float
    ap: float
    reward: float
    admitted: bool


@dataclass
class EpisodeTrace:
    qid: str
    order: list[int]
    steps: list[Step]
    ranked: RankedList
    version: int
    evidence_initial: np.ndarray | None = None
    evidence_final: np.ndarray | None = None
    # graph handles needed by the update; empty in eval mode
    log_prob_tensors: list[Tensor] = field(default_factory=list, repr=False)
    log_prob_vectors: list[Tensor] = field(default_factory=list, repr=False)
    gold: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def rewards(self):
        return [s.reward for s in self.steps]

    @property
    def aps(self):
        return [s.ap for s in self.steps]

    @property
    def actions(self):
        return [s.action for s in self.steps]

    @property
    def final_ap(self) -> float:
        return average_precision(self.ranked)


def _digest(x: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(x).tobytes(), digest_size=6).hexdigest()


def run_episode(inst: IndexedInstance, params: ParamStore, cfg: TrainConfig, rng=None,
                mode: str = "train", order=None, actions=None, admits=None) -> EpisodeTrace:
    """Visit the candidates one at a time, ranking each and updating the evidence.

    ``actions`` and ``admits`` force the sampled actions and the evidence
    admission decisions (used for gradient checks, where a perturbed
    parameter must not flip a discrete choice).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train-mode episodes need an rng")
    order = list(range(len(inst))) if order is None else [int(i) for i in order]
    drop_on = train and cfg.rl_dropout
    rate = cfg.dropout if drop_on else 0.0
    sub = cfg.replace(dropout=rate)

    enc = M.encode_question(inst.question, [inst.candidates[i] for i in order], params, sub, rng, drop_on)
    E = M.init_evidence(enc.question)
    E_init = E.data.copy()
    ranked, ap_prev = RankedList(), 0.0
    trace = EpisodeTrace(inst.qid, order, [], ranked, params.version, E_init, gold=[int(y) for y in inst.labels])

    for t, ci in enumerate(order):
        V_qc = enc.V_qc[t]
        if cfg.no_evidence:
            s = V_qc
        else:
            HC = enc.candidates.H[t, :int(min(enc.lengths[t], enc.candidates.H.shape[1]))]
            V_ec = M.ec_attention(E, HC, params, dropout=rate, rng=rng, train=drop_on)
            s = nx.concat([V_qc, V_ec])
        dist = M.policy(s, params, rate, rng, drop_on)
        p_pos = dist.p1
        if actions is not None:
            a = int(actions[t])
        elif train:
            a = int(rng.random() < p_pos)
        else:
            a = dist.greedy()
        label = int(inst.labels[ci])
        tier = a if cfg.reward_ranking == "action" else 0
        ranked = ranked.insert(ci, min(max(p_pos, 0.0), 1.0), label, tier)
        ap = average_precision(ranked)
        r = step_reward(ap, ap_prev)
        ap_prev = ap

        admitted = False
        if not cfg.no_evidence:
            if admits is not None:
                admit = bool(admits[t])
            else:
                admit = (a == 1) if cfg.gate_on_sampled_action else p_pos >= cfg.threshold
            admitted = bool(admit)
            E = M.update_evidence(E, enc.candidates.summary[t], dist.p_pos, cfg.threshold, params,
                                  use_rl_action=not cfg.no_rl_action, use_gate=not cfg.no_gate, admit=admit)
        trace.steps.append(Step(ci, _digest(s.data), a, float(dist.log_probs.data[a]), p_pos, ap, r, admitted))
        if train:
            trace.log_prob_tensors.append(dist.log_probs[a])
            trace.log_prob_vectors.append(dist.log_probs)
    trace.ranked = ranked
    trace.evidence_final = E.data.copy()
    return trace


def _returns(rewards):
    """Undiscounted reward-to-go for each step."""
    return list(np.cumsum(rewards[::-1])[::-1])


def surrogate_loss(traces, cfg: TrainConfig) -> Tensor:
    """Loss whose gradient is minus the REINFORCE estimate (or per-step CE with ``no_rewards``)."""
    terms = []
    if cfg.no_rewards:
        for tr in traces:
            for logp, st in zip(tr.log_prob_vectors, tr.steps):
                terms.append(nx.scale(logp[tr.gold[st.index]], -1.0))
    else:
        baseline = 0.0
        if cfg.baseline:
            credits = [_returns(tr.rewards) if cfg.reward_to_go else tr.rewards for tr in traces]
            baseline = float(np.mean([r for c in credits for r in c]))
        for tr in traces:
            credit = _returns(tr.rewards) if cfg.reward_to_go else tr.rewards
            for logp, r in zip(tr.log_prob_tensors, credit):
                terms.append(nx.scale(logp, -(r - baseline)))
    if not terms:
        raise ValueError("no train-mode steps to learn from")
    return nx.sum(nx.stack(terms))


def frozen_surrogate(inst: IndexedInstance, params: ParamStore, cfg: TrainConfig, trace: EpisodeTrace,
                     dropout_seed: int | None = None) -> Tensor:
    """Re-run ``trace``'s episode with its actions, admissions and rewards held fixed.

    The result is a smooth function of the parameters, suitable for finite
    differences. Dropout masks are reproduced by reseeding from ``dropout_seed``.
    """
    rng = np.random.default_rng(dropout_seed if dropout_seed is not None else 0)
    tr = run_episode(inst, params, cfg, rng, "train", trace.order, trace.actions, [s.admitted for s in trace.steps])
    for st, frozen in zip(tr.steps, trace.steps):
        st.reward = frozen.reward
    return surrogate_loss([tr], cfg)


def reinforce_update(traces, params: ParamStore, optimizer, cfg: TrainConfig) -> float:
    """One optimizer step on a batch of train-mode traces; returns the surrogate loss value."""
    for tr in traces:
        if tr.version != params.version:
            raise RuntimeError(f"trace for {tr.qid} was produced by parameter version {tr.version}, "
                               f"current is {params.version}")
        if not tr.log_prob_tensors:
            raise ValueError(f"trace for {tr.qid} carries no graph (eval mode?)")
    params.zero_grad()
    loss = surrogate_loss(traces, cfg)
    nx.backward(loss, params)
    optimizer.step()
    params.zero_grad()
    return loss.item()


# ---------------------------------------------------------------------------
# RL stage
# ---------------------------------------------------------------------------

def compute_orders(data, pre_params: ParamStore | None, cfg: TrainConfig) -> dict[str, np.ndarray]:
    return {inst.qid: order_candidates(inst, pre_params, cfg) for inst in data}


def evaluate(data, params: ParamStore, cfg: TrainConfig, orders: dict | None = None, workers: int = 1,
             scorer=None) -> dict:
    """Eval-mode episodes for every question; MAP/MRR plus per-question AP.

    ``scorer(inst) -> scores`` bypasses the model and ranks by the given scores.
    """
    def one(inst):
        if scorer is not None:
            ranked = RankedList()
            for i, (s, y) in enumerate(zip(scorer(inst), inst.labels)):
                ranked = ranked.insert(i, float(s), int(y))
            return ranked
        order = None if orders is None else orders.get(inst.qid)
        return run_episode(inst, params, cfg, mode="eval", order=order).ranked

    lists = _map_episodes(one, data, workers)
    return metrics_report([inst.qid for inst in data], lists)


def train_rl(train, params: ParamStore, cfg: TrainConfig, dev=None, pre_params: ParamStore | None = None,
             orders: dict | None = None, workers: int = 1, on_epoch=None):
    """REINFORCE fine-tuning; returns (best-dev params, history).

    ``params`` is updated in place; the returned store holds the best-dev state.
    """
    if orders is None:
        orders = compute_orders(list(train) + list(dev or []), pre_params, cfg)
    opt = make_optimizer(params, cfg, cfg.rl_lr)
    history = []
    best_map, best_state = -1.0, params.state()
    for epoch in range(1, cfg.rl_epochs + 1):
        shuffle_rng = np.random.default_rng([cfg.seed, 2, epoch])
        perm = shuffle_rng.permutation(len(train))
        losses, rewards = [], []
        for bno, b in enumerate(batches([train[i] for i in perm], cfg.batch_questions)):
            def episode(job):
                k, inst = job
                rng = np.random.default_rng([cfg.seed, 3, epoch, bno, k])
                return run_episode(inst, params, cfg, rng, "train", orders[inst.qid])

            traces = _map_episodes(episode, list(enumerate(b)), workers)
            losses.append(reinforce_update(traces, params, opt, cfg))
            rewards.extend(r for tr in traces for r in tr.rewards)
        record = {"epoch": epoch, "stage": "rl", "lr": opt.lr, "loss": float(np.mean(losses)),
                  "mean_reward": float(np.mean(rewards))}
        opt.lr *= cfg.lr_decay
        if dev:
            rep = evaluate(dev, params, cfg, orders, workers)
            record.update(dev_map=rep["MAP"], dev_mrr=rep["MRR"])
            if rep["MAP"] > best_map:
                best_map, best_state = rep["MAP"], params.state()
        else:
            best_state = params.state()
        log.info("%s", record)
        history.append(record)
        if on_epoch:
            on_epoch(record)
    best = params.copy()
    best.load_state(best_state)
    return best, history


# ---------------------------------------------------------------------------
# gradient check of the full episode surrogate
# ---------------------------------------------------------------------------

def episode_gradcheck(d_g: int = 4, d_e: int = 8, seed: int = 0, question_len: int = 3,
                      candidate_lens=(3, 4), eps: float = 1e-5, tol: float = 1e-4,
                      cfg: TrainConfig | None = None, vocab_size: int = 12):
    """Finite-difference check of every parameter's gradient of one episode's surrogate.

    A tiny agent is built with random weights; one train-mode episode is
    sampled and its actions and rewards are frozen. Every candidate is
    admitted to the evidence so the gate parameters are exercised; dropout
    masks are reproduced exactly on each re-evaluation.
    Returns (report, trace).
    """
    cfg = (cfg or TrainConfig(dropout=0.1, mlp_hidden=2 * d_g)).replace(d_g=d_g, d_e=d_e, seed=seed)
    rng = np.random.default_rng(seed)
    params = M.init_params(cfg, vocab_size, seed=seed)
    labels = [1] + [0] * (len(candidate_lens) - 1)
    inst = IndexedInstance("gradcheck", rng.integers(2, vocab_size, size=question_len),
                           tuple(rng.integers(2, vocab_size, size=n) for n in candidate_lens),
                           np.asarray(labels))
    order = np.arange(len(inst))
    admits = [not cfg.no_evidence] * len(inst)
    trace = run_episode(inst, params, cfg, np.random.default_rng([seed, 1]), "train", order, None, admits)
    report = nx.grad_check(lambda p: frozen_surrogate(inst, p, cfg, trace, dropout_seed=seed), params,
                           eps=eps, tol=tol)
    return report, trace
