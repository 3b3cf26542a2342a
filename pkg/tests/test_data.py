import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msranker import data as D
from msranker.data import Candidate, QAInstance


def _inst(qid, question, *cands):
    return QAInstance(qid, question, tuple(Candidate(f"{qid}-{i}", t, y) for i, (t, y) in enumerate(cands)))


def _tokset(text):
    return set(D.tokenize(text))


def test_tokenize_lowercases_and_peels_punctuation():
    assert D.tokenize("Who wrote 'Hamlet'?") == ["who", "wrote", "'", "hamlet", "'", "?"]


def test_tokenize_keeps_internal_hyphens():
    assert D.tokenize("a well-known fact.") == ["a", "well-known", "fact", "."]


def test_filter_answerable_examples():
    a = _inst("a", "q", ("x", 0), ("y", 0), ("z", 0))
    b = _inst("b", "q", ("x", 0), ("y", 1))
    assert D.filter_answerable([a, b]) == [b]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 1), min_size=1, max_size=4), max_size=8))
def test_filter_answerable_idempotent(label_lists):
    insts = [_inst(str(i), "q", *[(f"t{j}", y) for j, y in enumerate(ls)]) for i, ls in enumerate(label_lists)]
    once = D.filter_answerable(insts)
    assert D.filter_answerable(once) == once
    assert [i.qid for i in once] == [i.qid for i in insts if 1 in i.labels]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=12).filter(lambda s: D.tokenize(s)),
                          st.integers(0, 1)), min_size=1, max_size=5))
def test_canonical_round_trip(tmp_path_factory, cands):
    path = tmp_path_factory.mktemp("rt") / "data.jsonl"
    insts = [_inst("q1", "what is it ?", *cands), _inst("q2", "naïve ü question", ("answer", 1))]
    D.write_canonical(insts, str(path))
    assert D.read_canonical(str(path)) == insts


def test_canonical_reader_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"qid": "a", "question": "q", "candidates": [{"cid": "1", "text": "t", "label": 1}]}\n'
                    '{"qid": "b", "question": "q", "candidates": [{"cid": "1", "text": "t", "label": 3}]}\n')
    with pytest.raises(D.DataError, match=":2:"):
        D.read_canonical(str(path))


def test_vocab_is_deterministic_and_train_only():
    corpus = [_inst("a", "the cat", ("the dog", 1)), _inst("b", "a cat", ("dog", 0))]
    v1, v2 = D.build_vocab(corpus), D.build_vocab(list(reversed(corpus)))
    assert v1 == v2
    assert v1.itos[:4] == ["<pad>", "<unk>", "cat", "dog"]
    assert v1.index("unseen") == D.OOV_INDEX


def test_vocab_min_count_and_save_load(tmp_path):
    corpus = [_inst("a", "x x y", ("z", 1))]
    v = D.build_vocab(corpus, min_count=2)
    assert "x" in v and "y" not in v
    v.save(str(tmp_path / "v.txt"))
    assert D.Vocabulary.load(str(tmp_path / "v.txt")) == v


def test_build_vocab_rejects_empty_corpus():
    with pytest.raises(D.DataError):
        D.build_vocab([])


def test_load_embeddings_fills_known_rows(tmp_path):
    v = D.Vocabulary(["cat", "dog"])
    path = tmp_path / "emb.txt"
    path.write_text("cat 1 2 3\nbird 4 5 6\n")
    table = D.load_embeddings(str(path), v, dim=3, seed=0)
    np.testing.assert_array_equal(table[v.index("cat")], [1, 2, 3])
    assert np.abs(table[v.index("dog")]).max() <= 0.1
    np.testing.assert_array_equal(table[D.PAD_INDEX], 0.0)
    # random rows do not depend on what the file covers
    path.write_text("bird 4 5 6\n")
    other = D.load_embeddings(str(path), v, dim=3, seed=0)
    np.testing.assert_array_equal(table[v.index("dog")], other[v.index("dog")])


def test_load_embeddings_dimension_mismatch_names_line(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("cat 1 2 3\ndog 1 2\n")
    with pytest.raises(D.DataError, match=r"emb.txt:2"):
        D.load_embeddings(str(path), D.Vocabulary(["cat", "dog"]), dim=3)


def test_wikiqa_loader_groups_rows(tmp_path):
    header = "\t".join(D.WIKIQA_COLUMNS)
    rows = ["Q1\tWho?\tD1\tT\tD1-0\tFirst answer .\t0",
            "Q1\tWho?\tD1\tT\tD1-1\tSecond answer .\t1",
            "Q2\tWhat?\tD2\tT\tD2-0\tOther .\t0"]
    path = tmp_path / "w.tsv"
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    insts = D.load_wikiqa_tsv(str(path))
    assert [i.qid for i in insts] == ["Q1", "Q2"]
    assert insts[0].labels == [0, 1]
    assert [i.qid for i in D.filter_answerable(insts)] == ["Q1"]


def test_wikiqa_loader_rejects_bad_label(tmp_path):
    path = tmp_path / "w.tsv"
    path.write_text("\t".join(D.WIKIQA_COLUMNS) + "\nQ1\tWho?\tD1\tT\tD1-0\tAnswer\t2\n")
    with pytest.raises(D.DataError, match=":2:"):
        D.load_wikiqa_tsv(str(path))


def test_pad_sequences_examples():
    ids, mask, lengths = D.pad_sequences([[5, 6, 7], [1, 2, 3, 4, 5]], max_len=5)
    assert ids.shape == (2, 5)
    assert list(ids[0]) == [5, 6, 7, 0, 0]
    np.testing.assert_array_equal(lengths, [3, 5])
    ids, mask, _ = D.pad_sequences([list(range(1, 9))], max_len=5)
    assert list(ids[0]) == [1, 2, 3, 4, 5]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=6), st.integers(1, 10))
def test_mask_sums_equal_clipped_lengths(lengths, cap):
    seqs = [list(range(1, n + 1)) for n in lengths]
    ids, mask, got = D.pad_sequences(seqs, max_len=cap)
    np.testing.assert_array_equal(mask.sum(axis=1), np.minimum(lengths, cap))
    assert (ids[mask == 0] == D.PAD_INDEX).all()


def test_pad_sequences_rejects_empty():
    with pytest.raises(ValueError):
        D.pad_sequences([[1], []])


def test_synth_config_validation():
    with pytest.raises(ValueError):
        D.gen_synthetic(D.SynthConfig(candidates=2, correct=3), seed=0)


def test_synth_is_deterministic_per_seed():
    cfg = D.SynthConfig()
    assert D.gen_synthetic(cfg, 3, 20) == D.gen_synthetic(cfg, 3, 20)
    assert D.gen_synthetic(cfg, 3, 20) != D.gen_synthetic(cfg, 4, 20)


def check_chain(inst, cfg):
    q = _tokset(inst.question)
    correct = [_tokset(c.text) for c in inst.candidates if c.label == 1]
    wrong = [_tokset(c.text) for c in inst.candidates if c.label == 0]
    anchors = [c for c in correct if len(c & q) >= 2]
    assert len(anchors) == 1
    anchor = anchors[0]
    for c in correct:
        if c is not anchor:
            assert not (c & q)
            assert len(c & anchor) >= 2
    for w in wrong:
        assert not (w & q) and not (w & anchor)
    assert len(inst.candidates) == cfg.candidates and len(correct) == cfg.correct


@pytest.mark.parametrize("layout", ["tail", "blocks", "shuffled"])
def test_synth_chain_property_on_100_questions(layout):
    cfg = D.SynthConfig(layout=layout)
    for inst in D.gen_synthetic(cfg, 0, 100):
        check_chain(inst, cfg)


def test_synth_single_correct_overlaps_question():
    cfg = D.SynthConfig(correct=1)
    for inst in D.gen_synthetic(cfg, 1, 20):
        q = _tokset(inst.question)
        for c in inst.candidates:
            if c.label:
                assert len(_tokset(c.text) & q) >= 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(0, 4))
def test_synth_chain_property_random_shapes(seed, correct, extra):
    cfg = D.SynthConfig(correct=correct, candidates=correct + extra)
    for inst in D.gen_synthetic(cfg, seed, 5):
        check_chain(inst, cfg)


def test_index_instances_truncates_and_maps_oov():
    v = D.Vocabulary(["a", "b"])
    (ix,) = D.index_instances([_inst("q", "a b c", ("a a a a", 1))], v, max_q_len=2, max_c_len=3)
    assert list(ix.question) == [v.index("a"), v.index("b")]
    assert list(ix.candidates[0]) == [v.index("a")] * 3
    assert list(D.index_instances([_inst("q", "zzz", ("a", 1))], v)[0].question) == [D.OOV_INDEX]
