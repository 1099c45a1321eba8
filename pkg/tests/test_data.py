import numpy as np
import pytest

from fusenmt.data import (
    BOS, EOS, PAD, UNK, CorpusError, Vocab, build_vocab, load_parallel,
    make_batches, save_parallel, synth_task,
)


def test_build_vocab_frequency_order():
    v = build_vocab([["a", "a", "b"]])
    assert v.index["a"] < v.index["b"]


def test_build_vocab_min_count_maps_to_unk():
    v = build_vocab([["a", "a", "b"]], min_count=2)
    assert "b" not in v.index
    assert v.encode(["b"]) == [UNK]


def test_build_vocab_tie_breaks_lexicographically():
    v = build_vocab([["b", "b", "a", "a"]])
    assert v.index["a"] < v.index["b"]


def test_build_vocab_empty_corpus_is_error():
    with pytest.raises(CorpusError):
        build_vocab([])


def test_vocab_reserved_ids_fixed():
    v = build_vocab([["x"]])
    assert v.tokens[PAD] == "<pad>" and v.tokens[BOS] == "<bos>"
    assert v.tokens[EOS] == "<eos>" and v.tokens[UNK] == "<unk>"
    assert len(v) == 6


def test_vocab_round_trip_and_hash(tmp_path):
    v = build_vocab([["hallo", "welt"]])
    path = tmp_path / "vocab.txt"
    v.save(path)
    loaded = Vocab.load(path)
    assert loaded.tokens == v.tokens
    assert loaded.content_hash() == v.content_hash()


def test_load_parallel_happy_path(tmp_path):
    p = tmp_path / "corpus.tsv"
    p.write_text("hallo welt\thello world\n", encoding="utf-8")
    pairs, dropped = load_parallel(p)
    assert pairs == [(["hallo", "welt"], ["hello", "world"])]
    assert dropped == 0


def test_load_parallel_missing_tab_names_line(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("ok src\tok tgt\nno tab here\n", encoding="utf-8")
    with pytest.raises(CorpusError) as err:
        load_parallel(p)
    assert "line 2" in str(err.value)


def test_load_parallel_double_tab_is_error(tmp_path):
    p = tmp_path / "bad2.tsv"
    p.write_text("a\tb\tc\n", encoding="utf-8")
    with pytest.raises(CorpusError) as err:
        load_parallel(p)
    assert "line 1" in str(err.value)


def test_load_parallel_drops_overlong_with_count(tmp_path):
    p = tmp_path / "mixed.tsv"
    long_side = " ".join(["w"] * 151)
    lines = ["a\tb", "c d\te f", "g\th", long_side + "\tx"]
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    pairs, dropped = load_parallel(p)
    assert len(pairs) == 3
    assert dropped == 1


def test_tokenize_round_trip(tmp_path):
    sentence = "der schnelle braune fuchs"
    p = tmp_path / "c.tsv"
    p.write_text(f"{sentence}\t{sentence}\n", encoding="utf-8")
    pairs, _ = load_parallel(p)
    src, tgt = pairs[0]
    assert " ".join(src) == sentence and " ".join(tgt) == sentence


def test_save_load_parallel_round_trip(tmp_path):
    pairs = [(["a", "b"], ["c"]), (["d"], ["e", "f", "g"])]
    p = tmp_path / "rt.tsv"
    save_parallel(pairs, p)
    loaded, _ = load_parallel(p)
    assert loaded == pairs


# ---------------------------------------------------------------------------
# batching


def _toy_vocab():
    return build_vocab([[f"w{i}" for i in range(30)]])


def _toy_pairs(n=20, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(1, 8))
        sent = [f"w{int(i)}" for i in rng.integers(0, 30, size=length)]
        pairs.append((sent, list(reversed(sent))))
    return pairs


def test_single_batch_when_budget_exceeds_corpus():
    v = _toy_vocab()
    batches = make_batches(_toy_pairs(), v, v, token_budget=10_000, seed=1)
    assert len(batches) == 1
    assert batches[0].n_pairs == 20


def test_batching_partitions_pairs_exactly():
    v = _toy_vocab()
    pairs = _toy_pairs(40, seed=3)
    batches = make_batches(pairs, v, v, token_budget=40, seed=1)
    seen = []
    for b in batches:
        for i in range(b.n_pairs):
            src = [x for x in b.src[i] if x != PAD][:-1]  # strip EOS
            seen.append(tuple(src))
    expected = sorted(tuple(v.encode(s)) for s, _ in pairs)
    assert sorted(seen) == expected


def test_batching_budget_respected_unless_singleton():
    v = _toy_vocab()
    budget = 30
    batches = make_batches(_toy_pairs(50, seed=4), v, v, token_budget=budget, seed=2)
    for b in batches:
        if b.n_pairs > 1:
            assert b.n_src_tokens + b.n_tgt_tokens <= budget


def test_batching_deterministic_given_seed():
    v = _toy_vocab()
    pairs = _toy_pairs(30, seed=5)
    a = make_batches(pairs, v, v, token_budget=60, seed=7)
    b = make_batches(pairs, v, v, token_budget=60, seed=7)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.src, y.src)
        np.testing.assert_array_equal(x.tgt_out, y.tgt_out)


def test_batch_shapes_and_masks():
    v = _toy_vocab()
    batches = make_batches([(["w1", "w2"], ["w3"]), (["w4"], ["w5", "w6"])],
                           v, v, token_budget=100, seed=0)
    b = batches[0]
    assert b.src.shape == b.src_mask.shape
    assert b.tgt_in.shape == b.tgt_out.shape == b.tgt_mask.shape
    assert (b.src_mask == (b.src != PAD)).all()
    assert (b.tgt_in[:, 0] == BOS).all()


# ---------------------------------------------------------------------------
# synthetic tasks


def test_synth_copy_and_reverse():
    pairs, _ = synth_task("copy", 5, 20, (3, 5), seed=1)
    assert all(s == t for s, t in pairs)
    pairs, _ = synth_task("reverse", 5, 20, (3, 5), seed=1)
    assert all(t == list(reversed(s)) for s, t in pairs)


def test_lexswap_degenerates_to_copy():
    pairs, _ = synth_task("lexswap-reorder", 8, 20, (3, 6), seed=2,
                          swap_prob=0.0, identity_lexicon=True)
    assert all(s == t for s, t in pairs)


def test_lexswap_applies_bijective_lexicon():
    pairs, _ = synth_task("lexswap-reorder", 30, 15, (4, 8), seed=3, swap_prob=0.0)
    mapping = {}
    for s, t in pairs:
        for a, b in zip(s, t):
            assert mapping.setdefault(a, b) == b
    assert len(set(mapping.values())) == len(mapping)


def test_synth_deterministic_and_mono_size():
    a_pairs, a_mono = synth_task("lexswap-reorder", 10, 25, (2, 6), seed=9)
    b_pairs, b_mono = synth_task("lexswap-reorder", 10, 25, (2, 6), seed=9)
    assert a_pairs == b_pairs and a_mono == b_mono
    assert len(a_mono) == 100


def test_synth_rejects_tiny_vocab_and_bad_kind():
    with pytest.raises(ValueError):
        synth_task("copy", 5, 10, (2, 4), seed=0)
    with pytest.raises(ValueError):
        synth_task("shuffle", 5, 20, (2, 4), seed=0)
