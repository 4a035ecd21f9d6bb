"""
Tests for synthetic populations, vocabularies and bug injection
"""

import numpy as np
import pytest

from dpfedgen.datasets import (EOS_MARKER, OOV_MARKER, BugSpec, ClientDataset, Population, Vocabulary,
                               apply_concat_bug, apply_pixel_inversion, build_vocabulary, inverted_clients,
                               make_glyph_population, make_text_population, mark_oov, oov_rate,
                               oov_word_population)
from dpfedgen.exceptions import DatasetError


def token_count(population):
    return sum(len(s) for s in population.sentences())


class TestVocabulary:

    def test_id_order(self):
        vocab = Vocabulary(("x", "y"))
        assert (vocab.oov_id, vocab.eos_id, vocab.bos_id) == (2, 3, 4)
        assert vocab.output_size == 4 and vocab.input_size == 5
        assert vocab.encode(["y", "zzz", "x"]) == [1, 2, 0]
        assert vocab.decode([0, 2, 3]) == ["x", OOV_MARKER, EOS_MARKER]

    def test_without_oov(self):
        vocab = Vocabulary(("x",), with_oov=False)
        assert vocab.oov_id is None and vocab.eos_id == 1
        with pytest.raises(DatasetError):
            vocab.encode(["zzz"])

    def test_characters(self):
        vocab = Vocabulary.characters()
        assert vocab.character_level and vocab.size == 27
        assert vocab.encode(list("a b")) == [0, 26, 1]

    @pytest.mark.parametrize("tokens", [("a", "a"), ("a b",), ("",)])
    def test_invalid_tokens(self, tokens):
        with pytest.raises(DatasetError):
            Vocabulary(tokens)

    def test_dict_round_trip(self):
        vocab = Vocabulary(("x", "y"))
        assert Vocabulary.from_dict(vocab.to_dict()) == vocab


class TestClientDataset:

    def test_needs_exactly_one_kind(self):
        with pytest.raises(DatasetError):
            ClientDataset(0)
        with pytest.raises(DatasetError):
            ClientDataset(0, images=np.zeros((1, 8, 8)), labels=[0], sentences=(("a",),))

    def test_rejects_negative_id(self):
        with pytest.raises(DatasetError):
            ClientDataset(-1, sentences=(("a",),))

    def test_labels_must_match(self):
        with pytest.raises(DatasetError):
            ClientDataset(0, images=np.zeros((2, 8, 8)), labels=[0])

    def test_subset(self, glyphs):
        client = glyphs.clients[0]
        part = client.subset([0, 2])
        assert part.num_examples == 2
        np.testing.assert_array_equal(part.labels, client.labels[[0, 2]])

    def test_population_rejects_duplicate_ids(self):
        client = ClientDataset(0, sentences=(("a",),))
        with pytest.raises(DatasetError):
            Population("text", (client, client))


class TestGlyphs:

    def test_shape_and_balance(self):
        population = make_glyph_population(40, (20, 40), 4, 8, seed=1)
        assert len(population) == 40
        for client in population:
            assert 20 <= client.num_examples <= 40
            counts = np.bincount(client.labels, minlength=4)
            expected = client.num_examples / 4
            assert np.all(np.abs(counts - expected) <= max(1.0, 0.2 * expected))
            assert client.pixels.min() >= 0.0 and client.pixels.max() <= 1.0

    def test_writers_have_distinct_styles(self, glyphs):
        assert glyphs.clients[0].style != glyphs.clients[1].style

    def test_deterministic(self, glyphs):
        again = make_glyph_population(12, (8, 12), 4, 8, seed=3)
        assert again == glyphs
        assert again.content_hash() == glyphs.content_hash()
        assert make_glyph_population(12, (8, 12), 4, 8, seed=4).content_hash() != glyphs.content_hash()

    def test_first_client_id(self):
        population = make_glyph_population(3, (2, 2), 2, 8, seed=0, first_client_id=100)
        assert population.client_ids == [100, 101, 102]

    @pytest.mark.parametrize("args", [(0, (1, 2), 4, 8), (3, (3, 2), 4, 8), (3, (1, 2), 1, 8), (3, (1, 2), 4, 7)])
    def test_invalid_arguments(self, args):
        with pytest.raises(DatasetError):
            make_glyph_population(*args, seed=0)


class TestPixelInversion:

    def test_zero_fraction_is_identity(self, glyphs):
        assert apply_pixel_inversion(glyphs, 0.0, seed=1) == glyphs

    def test_affected_count_is_floor(self, glyphs):
        bugged = apply_pixel_inversion(glyphs, 0.5, seed=1)
        changed = [c.client_id for c, o in zip(bugged, glyphs) if not np.array_equal(c.images, o.images)]
        assert len(changed) == 6
        assert inverted_clients(bugged) == changed
        assert len(inverted_clients(apply_pixel_inversion(glyphs, 0.3, seed=1))) == 3

    def test_involution(self, glyphs):
        twice = apply_pixel_inversion(apply_pixel_inversion(glyphs, 1.0, seed=1), 1.0, seed=2)
        assert twice == glyphs
        assert inverted_clients(twice) == []

    def test_inverts_pixels_and_keeps_labels(self, glyphs):
        bugged = apply_pixel_inversion(glyphs, 1.0, seed=1)
        for clean, flipped in zip(glyphs, bugged):
            np.testing.assert_allclose(flipped.pixels, 1.0 - clean.pixels)
            np.testing.assert_array_equal(flipped.labels, clean.labels)
        assert bugged.client_ids == glyphs.client_ids

    def test_input_not_modified(self, glyphs):
        before = glyphs.content_hash()
        apply_pixel_inversion(glyphs, 1.0, seed=1)
        assert glyphs.content_hash() == before

    def test_rejects_text(self, corpus):
        with pytest.raises(DatasetError):
            apply_pixel_inversion(corpus, 0.5, seed=0)


class TestText:

    def test_sentence_lengths(self, corpus):
        assert all(4 <= len(s) <= 10 for s in corpus.sentences())

    def test_deterministic(self, corpus):
        assert make_text_population(30, (10, 14), grammar_seed=1) == corpus

    def test_fixed_sentence_count(self):
        population = make_text_population(4, 5, grammar_seed=2)
        assert all(c.num_examples == 5 for c in population)

    def test_clean_oov_rate_in_range(self, corpus):
        vocab = build_vocabulary(corpus)
        assert 0.03 <= oov_rate(corpus, vocab) <= 0.10

    def test_clean_oov_is_flat_across_positions(self):
        population = make_text_population(200, (20, 40), grammar_seed=3)
        vocab = build_vocabulary(population, target_oov_rate=0.032)
        overall = oov_rate(population, vocab)
        tokens = np.zeros(10)
        oov = np.zeros(10)
        for sentence in population.sentences():
            for position, flag in enumerate(mark_oov(sentence, vocab)):
                tokens[position] += 1
                oov[position] += flag
        fractions = oov / tokens
        assert fractions[0] <= 1.5 * overall
        assert fractions.max() <= 2.0 * overall
        assert fractions.min() >= 0.5 * overall

    def test_mark_oov(self):
        vocab = Vocabulary(("i", "have"))
        assert mark_oov(("i", "have"), vocab) == [False, False]
        assert mark_oov(("i have", "x"), vocab) == [True, True]
        assert mark_oov((), vocab) == []


class TestConcatBug:

    def test_zero_fraction_is_identity(self, corpus):
        assert apply_concat_bug(corpus, 0.0, seed=1) == corpus

    def test_full_fraction_joins_every_sentence(self, corpus):
        bugged = apply_concat_bug(corpus, 1.0, seed=1)
        for clean, joined in zip(corpus.sentences(), bugged.sentences()):
            assert len(joined) == len(clean) - 1
            assert joined[0] == f"{clean[0]} {clean[1]}"
            assert joined[1:] == clean[2:]

    def test_token_count_drops_by_affected(self, corpus):
        bugged = apply_concat_bug(corpus, 0.1, seed=1)
        affected = bugged.metadata["bugs"][-1]["affected"]
        assert token_count(corpus) - token_count(bugged) == affected

    def test_fraction_of_sentences(self):
        population = make_text_population(200, 50, grammar_seed=9)
        bugged = apply_concat_bug(population, 0.1, seed=2)
        affected = bugged.metadata["bugs"][-1]["affected"]
        assert abs(affected / population.total_examples - 0.1) <= 0.01

    def test_short_sentences_are_skipped(self):
        population = Population("text", (ClientDataset(0, sentences=(("a",), ("b", "c"))),))
        bugged = apply_concat_bug(population, 1.0, seed=0)
        assert list(bugged.sentences()) == [("a",), ("b c",)]
        assert bugged.metadata["bugs"][-1]["skipped"] == 1

    def test_oov_rate_grows_with_fraction(self, corpus):
        vocab = build_vocabulary(corpus)
        rates = [oov_rate(apply_concat_bug(corpus, f, seed=5), vocab) for f in (0.0, 0.01, 0.1, 1.0)]
        assert all(a <= b for a, b in zip(rates, rates[1:]))
        assert rates[-1] > rates[0]

    def test_bug_spec(self, corpus):
        assert BugSpec("token-concatenation", 1.0, 1).apply(corpus) == apply_concat_bug(corpus, 1.0, 1)
        with pytest.raises(DatasetError):
            BugSpec("token-concatenation", 1.5)
        with pytest.raises(DatasetError):
            BugSpec("label-noise", 0.5)


class TestOovWords:

    def test_collects_oov_tokens_as_characters(self, corpus):
        bugged = apply_concat_bug(corpus, 1.0, seed=1)
        vocab = build_vocabulary(corpus)
        words = oov_word_population(bugged, vocab)
        assert words.kind == "characters"
        joined = ["".join(w) for w in words.sentences()]
        assert any(" " in w for w in joined)
        assert all(w not in vocab for w in joined)

    def test_no_oov_words(self, corpus):
        vocab = Vocabulary(tuple(sorted({t for s in corpus.sentences() for t in s})))
        with pytest.raises(DatasetError):
            oov_word_population(corpus, vocab)
