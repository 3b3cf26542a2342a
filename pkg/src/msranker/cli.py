"""Command-line entry point: data preparation, training, evaluation, ranking, gradient checks.

Exit codes: 0 success, 1 validation error (bad flags, config or input data),
2 runtime failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from . import data as D
from . import model as M
from . import numerics as nx
from . import trainer as T
from .ranking import rank_by_scores
from .config import ABLATIONS, SYNTHETIC_PRESET, TrainConfig, load_config

log = logging.getLogger("msranker")

DATA_ENV = "MSRANKER_DATA"
SPLITS = ("train", "dev", "test")
WIKIQA_FILES = {"train": "WikiQA-train.tsv", "dev": "WikiQA-dev.tsv", "test": "WikiQA-test.tsv"}


class ValidationError(Exception):
    """Bad flags, config or inputs; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run manifest and file helpers
# ---------------------------------------------------------------------------

def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path: str, obj):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict
    outputs: list
    wall_clock_s: float = 0.0
    version: str = __version__

    def write(self, path: str):
        write_json_atomic(path, dataclasses.asdict(self))


def _digests(paths) -> dict:
    return {p: file_digest(p) for p in paths if p and os.path.isfile(p)}


# ---------------------------------------------------------------------------
# config resolution: flags > config file > (checkpoint) > preset > defaults
# ---------------------------------------------------------------------------

def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args, base: dict | None = None, lr_field: str = "lr") -> TrainConfig:
    values = dict(base or {})
    if getattr(args, "preset", None) == "synthetic":
        values.update(SYNTHETIC_PRESET)
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise ValidationError(f"config file not found: {args.config}")
        try:
            values.update(load_config(args.config))
        except (OSError, ValueError) as exc:
            raise ValidationError(f"{args.config}: {exc}") from None
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip().replace("-", "_")] = _parse_value(raw)
    for name in ("seed", "lr", "dropout", "d_g", "d_e", "rl_epochs", "preranker_epochs"):
        value = getattr(args, name, None)
        if value is not None:
            values[lr_field if name == "lr" else name] = value
    for flag in ABLATIONS + ("baseline",):
        if getattr(args, flag, False):
            values[flag] = True
    try:
        return TrainConfig.from_dict(values).validate()
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# data directory
# ---------------------------------------------------------------------------

def _data_dir(args) -> str:
    path = args.data or os.environ.get(DATA_ENV)
    if not path:
        raise ValidationError(f"no data directory: pass --data or set {DATA_ENV}")
    if not os.path.isdir(path):
        raise ValidationError(f"data directory not found: {path}")
    return path


def _split_path(folder: str, split: str) -> str:
    return os.path.join(folder, f"{split}.jsonl")


def _read_split(folder: str, split: str):
    path = _split_path(folder, split)
    if not os.path.isfile(path):
        raise ValidationError(f"missing split file {path}")
    return D.read_canonical(path)


def _read_vocab(folder: str) -> D.Vocabulary:
    path = os.path.join(folder, "vocab.txt")
    if not os.path.isfile(path):
        raise ValidationError(f"missing vocabulary {path}")
    return D.Vocabulary.load(path)


def _write_dataset(out: str, splits: dict, min_count: int = 1) -> list[str]:
    os.makedirs(out, exist_ok=True)
    written = []
    for name, insts in splits.items():
        path = _split_path(out, name)
        D.write_canonical(insts, path)
        written.append(path)
    vocab = D.build_vocab(splits["train"], min_count)
    vocab_path = os.path.join(out, "vocab.txt")
    vocab.save(vocab_path)
    written.append(vocab_path)
    return written


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

PRE_PREFIX = "preranker/"


def save_model(path: str, kind: str, params: nx.ParamStore, cfg: TrainConfig, vocab: D.Vocabulary,
               preranker: nx.ParamStore | None = None, extra: dict | None = None):
    store = nx.ParamStore()
    for name, t in params.items():
        store.add(name, t.data)
    if preranker is not None:
        for name, t in preranker.items():
            store.add(PRE_PREFIX + name, t.data)
    meta = {"kind": kind, "config": cfg.to_dict(), "vocab": vocab.itos[2:], **(extra or {})}
    nx.save_checkpoint(path, store, meta)


def load_model(path: str):
    """Returns (kind, params, preranker params or None, config, vocabulary)."""
    if not os.path.isfile(path):
        raise ValidationError(f"checkpoint not found: {path}")
    try:
        state, meta = nx.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(meta, dict) or meta.get("kind") not in ("preranker", "agent"):
        raise ValidationError(f"{path}: not a model checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    vocab = D.Vocabulary(meta["vocab"])
    params, pre = nx.ParamStore(), nx.ParamStore()
    for name, value in state.items():
        if name.startswith(PRE_PREFIX):
            pre.add(name[len(PRE_PREFIX):], value)
        else:
            params.add(name, value)
    return meta["kind"], params, (pre if len(pre) else None), cfg, vocab


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prep(args):
    if bool(args.wikiqa_dir) == bool(args.canonical_in):
        raise ValidationError("pass exactly one of --wikiqa-dir or --canonical-in")
    src = args.wikiqa_dir or args.canonical_in
    if not os.path.isdir(src):
        raise ValidationError(f"input directory not found: {src}")
    inputs, splits = [], {}
    for split in SPLITS:
        path = os.path.join(src, WIKIQA_FILES[split]) if args.wikiqa_dir else _split_path(src, split)
        if not os.path.isfile(path):
            raise ValidationError(f"missing input file {path}")
        inputs.append(path)
    for split, path in zip(SPLITS, inputs):
        raw = D.load_wikiqa_tsv(path) if args.wikiqa_dir else D.read_canonical(path)
        splits[split] = D.filter_answerable(raw)
        log.info("%s: %d questions (%d answerable)", split, len(raw), len(splits[split]))
    outputs = _write_dataset(args.out, splits, args.min_count)
    summary = {split: len(v) for split, v in splits.items()}
    print(json.dumps({"questions": summary}))
    return {"inputs": inputs, "outputs": outputs, "config": {"min_count": args.min_count}, "seed": None,
            "manifest": os.path.join(args.out, "manifest.json")}


def cmd_synth(args):
    try:
        cfg = D.SynthConfig(vocab_size=args.vocab_size, candidates=args.candidates, correct=args.correct,
                            layout=args.layout,
                            splits={"train": args.questions, "dev": args.dev_questions,
                                    "test": args.test_questions})
        cfg.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if min(cfg.splits.values()) < 1:
        raise ValidationError("every split needs at least one question")
    splits = D.gen_synthetic_splits(cfg, args.seed)
    outputs = _write_dataset(args.out, splits)
    print(json.dumps({"questions": {k: len(v) for k, v in splits.items()}, "seed": args.seed}))
    return {"inputs": [], "outputs": outputs, "config": dataclasses.asdict(cfg), "seed": args.seed,
            "manifest": os.path.join(args.out, "manifest.json")}


def _embeddings(args, vocab: D.Vocabulary, cfg: TrainConfig):
    if args.embeddings:
        if not os.path.isfile(args.embeddings):
            raise ValidationError(f"embeddings file not found: {args.embeddings}")
        return D.load_embeddings(args.embeddings, vocab, cfg.d_e, cfg.seed)
    scale = args.embedding_scale
    table = np.random.default_rng([cfg.seed, 7]).uniform(-scale, scale, size=(len(vocab), cfg.d_e))
    table[D.PAD_INDEX] = 0.0
    return table


def _index(insts, vocab, cfg):
    return D.index_instances(insts, vocab, cfg.max_q_len, cfg.max_c_len)


def cmd_train_preranker(args):
    folder = _data_dir(args)
    cfg = resolve_config(args)
    if args.embedding_scale <= 0:
        raise ValidationError("--embedding-scale must be positive")
    vocab = _read_vocab(folder)
    train = _index(_read_split(folder, "train"), vocab, cfg)
    dev = _index(_read_split(folder, "dev"), vocab, cfg)
    emb = _embeddings(args, vocab, cfg)
    params, history = T.train_preranker(train, cfg, len(vocab), embeddings=emb, dev=dev,
                                        on_epoch=lambda r: print(json.dumps(r), flush=True))
    save_model(args.out_checkpoint, "preranker", params, cfg, vocab, extra={"history": history})
    return {"inputs": [_split_path(folder, s) for s in ("train", "dev")] + [args.embeddings],
            "outputs": [args.out_checkpoint], "config": cfg.to_dict(), "seed": cfg.seed,
            "manifest": args.out_checkpoint + ".manifest.json"}


def cmd_train_rl(args):
    folder = _data_dir(args)
    kind, pre, _, pre_cfg, vocab = load_model(args.init_checkpoint)
    if kind != "preranker":
        raise ValidationError(f"{args.init_checkpoint} is not a pre-ranker checkpoint")
    base = pre_cfg.to_dict()
    cfg = resolve_config(args, base, lr_field="rl_lr")
    for key, value in pre_cfg.model_fingerprint().items():
        if key != "no_evidence" and getattr(cfg, key) != value:
            raise ValidationError(f"{key}={getattr(cfg, key)} does not match the pre-ranker checkpoint ({value})")
    workers = 1 if args.deterministic else args.workers
    train = _index(_read_split(folder, "train"), vocab, cfg)
    dev = _index(_read_split(folder, "dev"), vocab, cfg)
    agent = M.init_params(cfg, len(vocab), pre["embed"].data)
    if not cfg.no_preranker:
        M.warm_start(agent, pre, copy_mlp=cfg.warm_start_policy)
    best, history = T.train_rl(train, agent, cfg, dev=dev, pre_params=pre, workers=workers,
                               on_epoch=lambda r: print(json.dumps(r), flush=True))
    save_model(args.out_checkpoint, "agent", best, cfg, vocab, preranker=pre, extra={"history": history})
    return {"inputs": [_split_path(folder, s) for s in ("train", "dev")] + [args.init_checkpoint],
            "outputs": [args.out_checkpoint], "config": cfg.to_dict(), "seed": cfg.seed,
            "manifest": args.out_checkpoint + ".manifest.json"}


def _scorer(name):
    if name == "oracle":
        return lambda inst: inst.labels.astype(float)
    if name == "anti-oracle":
        return lambda inst: 1.0 - inst.labels.astype(float)
    return None


def evaluate_checkpoint(kind, params, pre, cfg, data, scorer=None, workers=1) -> dict:
    if scorer is not None or kind == "agent":
        orders = None if scorer is not None else T.compute_orders(data, pre, cfg)
        return T.evaluate(data, params, cfg, orders, workers, scorer=scorer)
    return T.evaluate_preranker(data, params, cfg, workers)


def cmd_eval(args):
    folder = _data_dir(args)
    kind, params, pre, cfg, vocab = load_model(args.checkpoint)
    data = _index(_read_split(folder, args.split), vocab, cfg)
    report = evaluate_checkpoint(kind, params, pre, cfg, data, _scorer(args.scorer),
                                 1 if args.deterministic else args.workers)
    report = {"split": args.split, "checkpoint": args.checkpoint, "kind": kind, "scorer": args.scorer, **report}
    print(json.dumps({"MAP": report["MAP"], "MRR": report["MRR"]}))
    out = args.out or args.checkpoint + f".eval-{args.split}.json"
    write_json_atomic(out, report)
    return {"inputs": [_split_path(folder, args.split), args.checkpoint], "outputs": [out],
            "config": cfg.to_dict(), "seed": cfg.seed, "manifest": out + ".manifest.json"}


def _read_questions(path: str):
    """Canonical records; candidate labels are optional here."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for c in rec.get("candidates", []):
                    c.setdefault("label", 0)
            except (json.JSONDecodeError, AttributeError) as exc:
                raise D.DataError(f"{path}:{lineno}: invalid record ({exc})") from None
            out.append(D.instance_from_record(rec, f"{path}:{lineno}"))
    return out


def rank_question(inst: D.IndexedInstance, kind, params, pre, cfg) -> list[dict]:
    """Candidates in final ranked order with their scores."""
    if kind == "agent":
        order = T.order_candidates(inst, pre, cfg)
        trace = T.run_episode(inst, params, cfg, mode="eval", order=order)
        entries = list(trace.ranked)
    else:
        scores = T.prerank_scores(inst, params, cfg)
        entries = list(rank_by_scores(scores, inst.labels))
    return [{"index": e.index, "p_pos": e.score} for e in entries]


def cmd_rank(args):
    if not os.path.isfile(args.question_file):
        raise ValidationError(f"question file not found: {args.question_file}")
    kind, params, pre, cfg, vocab = load_model(args.checkpoint)
    raw = _read_questions(args.question_file)
    results = []
    for inst, ix in zip(raw, _index(raw, vocab, cfg)):
        ranking = rank_question(ix, kind, params, pre, cfg)
        results.append({"qid": inst.qid, "ranking": [
            {"rank": r + 1, "cid": inst.candidates[e["index"]].cid, "p_pos": e["p_pos"],
             "text": inst.candidates[e["index"]].text} for r, e in enumerate(ranking)]})
    lines = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in results)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(lines)
    else:
        sys.stdout.write(lines)
    return {"inputs": [args.question_file, args.checkpoint], "outputs": [args.out] if args.out else [],
            "config": cfg.to_dict(), "seed": cfg.seed,
            "manifest": (args.out + ".manifest.json") if args.out else None}


def cmd_gradcheck(args):
    if args.d_g < 1 or args.d_e < 1:
        raise ValidationError("--d-g and --d-e must be positive")
    cfg = resolve_config(args, {"dropout": 0.1, "mlp_hidden": 2 * args.d_g})
    report, _ = T.episode_gradcheck(d_g=args.d_g, d_e=args.d_e, seed=args.seed or 0, cfg=cfg,
                                    eps=args.eps, tol=args.tol)
    print(report.format())
    if args.out:
        write_json_atomic(args.out, {"max_rel_error": report.max_rel_error, "checked": report.checked,
                                     "worst": report.worst, "tol": report.tol, "ok": report.ok})
    return {"inputs": [], "outputs": [args.out] if args.out else [], "config": cfg.to_dict(),
            "seed": cfg.seed, "manifest": (args.out + ".manifest.json") if args.out else None,
            "exit": 0 if report.ok else 2}


def cmd_synth_experiment(args):
    from .experiments import SyntheticExperiment, run_synthetic_seed

    exp = SyntheticExperiment(workers=1 if args.deterministic else args.workers)
    rows = []
    for seed in args.seeds:
        row = run_synthetic_seed(seed, exp)
        print(json.dumps(row), flush=True)
        rows.append(row)
    if args.out:
        write_json_atomic(args.out, {"runs": rows, "experiment": exp.describe()})
    return {"inputs": [], "outputs": [args.out] if args.out else [], "config": exp.describe(),
            "seed": None, "manifest": (args.out + ".manifest.json") if args.out else None}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _config_flags(p, ablations=False):
    p.add_argument("--config", help="JSON or YAML file with TrainConfig fields")
    p.add_argument("--preset", choices=["synthetic"], help="sizes tuned for synthetic corpora")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="learning rate of this stage")
    p.add_argument("--dropout", type=float)
    if ablations:
        for flag in ABLATIONS:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
        p.add_argument("--baseline", action="store_true", help="subtract the batch-mean reward")


def _run_flags(p):
    p.add_argument("--workers", type=int, default=1, help="threads for episodes within a batch")
    p.add_argument("--deterministic", action="store_true", help="single-thread, bit-reproducible run")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msranker", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="ingest WikiQA or canonical data, keep answerable questions")
    p.add_argument("--wikiqa-dir")
    p.add_argument("--canonical-in")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic evidence-chain corpus")
    defaults = D.SynthConfig()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--questions", type=int, default=defaults.splits["train"], help="training questions")
    p.add_argument("--dev-questions", type=int, default=defaults.splits["dev"])
    p.add_argument("--test-questions", type=int, default=defaults.splits["test"])
    p.add_argument("--candidates", type=int, default=defaults.candidates)
    p.add_argument("--correct", type=int, default=defaults.correct)
    p.add_argument("--vocab-size", type=int, default=defaults.vocab_size)
    p.add_argument("--layout", default=defaults.layout, choices=["tail", "blocks", "shuffled"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-preranker", help="supervised pre-ranker training")
    p.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    p.add_argument("--embeddings", help="word vectors in text format (token v1 ... vd)")
    p.add_argument("--embedding-scale", type=float, default=0.1,
                   help="U[-s, s] init for the table when no embeddings file is given")
    p.add_argument("--d-g", dest="d_g", type=int)
    p.add_argument("--d-e", dest="d_e", type=int)
    p.add_argument("--epochs", dest="preranker_epochs", type=int)
    p.add_argument("--out-checkpoint", required=True)
    _config_flags(p)
    p.set_defaults(fn=cmd_train_preranker)

    p = sub.add_parser("train-rl", help="REINFORCE training of the agent")
    p.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    p.add_argument("--init-checkpoint", required=True, help="pre-ranker checkpoint")
    p.add_argument("--epochs", dest="rl_epochs", type=int)
    p.add_argument("--out-checkpoint", required=True)
    _config_flags(p, ablations=True)
    _run_flags(p)
    p.set_defaults(fn=cmd_train_rl)

    p = sub.add_parser("eval", help="MAP/MRR of a checkpoint on one split")
    p.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    p.add_argument("--split", "--data-split", dest="split", default="test", choices=SPLITS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scorer", default="model", choices=["model", "oracle", "anti-oracle"])
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    _run_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rank", help="rank the candidates of each question in a file")
    p.add_argument("--question-file", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("gradcheck", help="finite-difference check of the episode surrogate")
    p.add_argument("--d-g", dest="d_g", type=int, default=4)
    p.add_argument("--d-e", dest="d_e", type=int, default=8)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    _config_flags(p, ablations=True)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth-experiment", help="full vs no-evidence vs pre-ranker on synthetic seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out")
    _run_flags(p)
    p.set_defaults(fn=cmd_synth_experiment)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    started = time.time()
    try:
        result = args.fn(args)
    except (ValidationError, D.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if result.get("manifest"):
        RunManifest(command=args.command, argv=argv, config=result["config"], seed=result["seed"],
                    inputs=_digests(result["inputs"]), outputs=[p for p in result["outputs"] if p],
                    wall_clock_s=round(time.time() - started, 3)).write(result["manifest"])
    return result.get("exit", 0)


if __name__ == "__main__":
    sys.exit(main())
