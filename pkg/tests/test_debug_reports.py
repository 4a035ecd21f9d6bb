"""
Tests for OOV profiles, OOV word lists, histograms, image grids and report files
"""

import json
from pathlib import Path

import numpy as np
import pytest

from dpfedgen.datasets import ClientDataset, Population, Vocabulary
from dpfedgen.debug_reports import (DebugReportBuilder, PositionalOovProfile, accuracy_histogram, emit_image_grid,
                                    histogram_from_accuracies, json_serializer, oov_rate_by_position,
                                    overall_oov_rate, polarity_stats, read_pgm, render_grid, top_oov_words)
from dpfedgen.dp_core import ParamVector
from dpfedgen.exceptions import ReportError
from dpfedgen.models import ClassifierNet, RecurrentLm, lm_joint_prob


def constant_lm(vocab, log_weights):
    """An LM whose next-token distribution is softmax(log_weights) after every prefix"""
    lm = RecurrentLm.initialize(vocab, 0, embedding_dim=2, hidden_dim=2, zero=True)
    arrays = {name: array.copy() for name, array in lm.params.arrays().items()}
    arrays["bo"] = np.asarray(log_weights, dtype=np.float64)
    return lm.with_params(ParamVector.from_arrays(lm.layout, arrays))


class TestPositionalProfile:

    def test_lm_without_oov(self):
        vocab = Vocabulary(("a", "b"))
        lm = constant_lm(vocab, [0.0, 0.0, -60.0, -1.0])
        profile = oov_rate_by_position(lm, vocab, num_samples=500, max_len=5, seed=1)
        assert profile.fractions == (0.0,) * 5
        assert profile.sample_count == 500

    def test_fixed_oov_probability(self):
        vocab = Vocabulary(("a", "b"))
        lm = constant_lm(vocab, np.log([0.3, 0.3, 0.2, 0.2]))
        profile = oov_rate_by_position(lm, vocab, num_samples=4000, max_len=6, seed=2)
        # end markers are excluded, so the expected share is 0.2 / 0.8
        for position in range(4):
            assert profile.fractions[position] == pytest.approx(0.25, abs=0.05)
        assert all(0.0 <= f <= 1.0 for f in profile.fractions)

    def test_spike_ratio(self):
        profile = PositionalOovProfile((0.4, 0.1, 0.1, 0.0), (10, 10, 10, 0), 10)
        assert profile.spike_ratio() == pytest.approx(4.0)
        assert list(profile.to_dataframe().columns) == ["position", "oov_fraction", "tokens"]

    def test_spike_baseline_is_token_weighted(self):
        profile = PositionalOovProfile((0.1, 0.05, 0.5), (100, 100, 1), 100)
        assert profile.supported_positions() == [0, 1]
        assert profile.spike_ratio() == pytest.approx(2.0)
        assert profile.spike_ratio(min_share=0.0) == pytest.approx(0.1 / (5.5 / 101))

    def test_sparse_tail_position_does_not_spike(self):
        profile = PositionalOovProfile((0.03,) * 8 + (0.4,), (1000,) * 8 + (12,), 1000)
        assert 8 not in profile.peak_ratios()
        assert profile.max_peak_ratio() == pytest.approx(1.0)
        assert profile.mean_fraction() == pytest.approx(0.03)

    def test_leading_spike_against_profile_mean(self):
        profile = PositionalOovProfile((0.13, 0.03, 0.03, 0.03), (100,) * 4, 100)
        ratios = profile.peak_ratios()
        assert ratios[0] == pytest.approx(0.13 / 0.03)
        assert ratios[1] == pytest.approx(0.03 / (0.19 / 3))
        assert profile.max_peak_ratio() == ratios[0]

    def test_empty_profile(self):
        profile = PositionalOovProfile((0.0, 0.0), (0, 0), 10)
        assert profile.mean_fraction() == 0.0
        assert profile.max_peak_ratio() == 0.0
        assert profile.spike_ratio() == 0.0

    def test_needs_samples(self):
        vocab = Vocabulary(("a",))
        with pytest.raises(ValueError):
            oov_rate_by_position(constant_lm(vocab, [0.0, 0.0, 0.0]), vocab, 0, 5, seed=0)


class TestTopOovWords:

    def test_ranked_by_joint_probability(self):
        vocab = Vocabulary.characters("ab")
        lm = constant_lm(vocab, [0.0, -60.0, 0.0])
        words = top_oov_words(lm, k=3, num_samples=500, seed=3, max_len=12)
        assert words.words == ["a", "aa", "aaa"]
        probabilities = [p for _, p in words.entries]
        assert probabilities == pytest.approx([0.25, 0.125, 0.0625], rel=1e-9)

    def test_scores_match_joint_probability(self):
        vocab = Vocabulary.characters("ab ")
        lm = RecurrentLm.initialize(vocab, 5, embedding_dim=3, hidden_dim=4)
        words = top_oov_words(lm, k=10, num_samples=300, seed=4, max_len=10)
        probabilities = [p for _, p in words.entries]
        assert probabilities == sorted(probabilities, reverse=True)
        for word, probability in words.entries:
            assert 0.0 < probability <= 1.0
            assert probability == pytest.approx(lm_joint_prob(lm, vocab.encode(list(word))), abs=1e-12)
        assert words.count_with_space() == sum(" " in w for w in words.words)

    def test_k_must_be_positive(self):
        vocab = Vocabulary.characters("ab")
        with pytest.raises(ValueError):
            top_oov_words(constant_lm(vocab, [0.0, 0.0, 0.0]), k=0, num_samples=10, seed=0)


class TestAccuracyHistogram:

    def test_all_perfect(self):
        histogram = histogram_from_accuracies([1.0] * 5, num_bins=10)
        assert histogram.counts[-1] == 5
        assert histogram.total == 5

    def test_bins_are_left_closed(self):
        histogram = histogram_from_accuracies([0.0, 0.25, 0.5, 0.75], num_bins=4)
        assert histogram.counts == (1, 1, 1, 1)
        assert histogram.mass_below(0.5) == 2
        assert histogram.share_below(0.5) == pytest.approx(0.5)
        assert histogram_from_accuracies([], num_bins=4).share_below(0.5) == 0.0

    def test_population_histogram(self, glyphs):
        arch = ClassifierNet.build_architecture(64, glyphs.num_classes, hidden=())
        classifier = ClassifierNet.initialize(arch, 0)
        histogram = accuracy_histogram(glyphs, classifier, num_bins=5)
        assert histogram.total == len(glyphs)
        assert len(histogram.to_dataframe()) == 5

    def test_invalid_bins(self):
        with pytest.raises(ValueError):
            histogram_from_accuracies([0.5], 0)


class TestOverallOovRate:

    @pytest.fixture
    def hundred_tokens(self):
        sentences = [("a",) * 5] * 20
        sentences[0] = ("zz",) * 5
        sentences[1] = ("zz", "zz", "a", "a", "a")
        return Population("text", (ClientDataset(0, sentences=tuple(sentences)),))

    def test_counts(self, hundred_tokens):
        assert overall_oov_rate(hundred_tokens, Vocabulary(("a",))) == pytest.approx(0.07)
        assert overall_oov_rate(hundred_tokens, Vocabulary(("a", "zz"))) == 0.0
        assert overall_oov_rate(hundred_tokens, Vocabulary(())) == 1.0


class TestImageGrids:

    def test_single_black_image(self, tmp_path):
        path = emit_image_grid(np.zeros((1, 8, 8)), 1, 1, tmp_path / "black.pgm")
        assert path.read_bytes() == b"P5\n8 8\n255\n" + bytes(64)

    def test_separators_and_empty_cells(self):
        canvas = render_grid(np.ones((3, 4, 4)), 2, 2)
        assert canvas.shape == (9, 9)
        assert np.all(canvas[4, :] == 255) and np.all(canvas[:, 4] == 255)
        assert np.all(canvas[:4, :4] == 255)
        assert np.all(canvas[5:, 5:] == 0)

    def test_flat_images_are_squared(self):
        canvas = render_grid(np.full((2, 64), 0.5), 1, 2)
        assert canvas.shape == (8, 17)
        assert canvas[0, 0] == 128

    def test_deterministic_and_readable(self, tmp_path):
        images = np.random.default_rng(0).uniform(size=(16, 64))
        first = emit_image_grid(images, 4, 4, tmp_path / "a.pgm", comment="manifest_hash=abc")
        second = emit_image_grid(images, 4, 4, tmp_path / "b.pgm", comment="manifest_hash=abc")
        assert first.read_bytes() == second.read_bytes()
        np.testing.assert_array_equal(read_pgm(first), render_grid(images, 4, 4))

    def test_grid_too_small(self):
        with pytest.raises(ReportError):
            render_grid(np.zeros((5, 8, 8)), 2, 2)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        with pytest.raises(ReportError):
            emit_image_grid(np.zeros((1, 8, 8)), 1, 1, blocker / "grid.pgm")

    def test_polarity(self):
        stats = polarity_stats(np.array([[0.0, 1.0, 1.0, 0.2]]))
        assert stats["mean_intensity"] == pytest.approx(0.55)
        assert stats["bright_fraction"] == 0.5


class TestReportBuilder:

    def test_files_carry_manifest_hash(self, tmp_path):
        builder = DebugReportBuilder(tmp_path / "reports", "run42", "feedbeef")
        histogram = histogram_from_accuracies([0.1, 0.9], 2)
        table = builder.write_histogram("histogram", histogram)
        document = builder.write_json("summary", {"users": np.int64(2)})
        grid = builder.write_grid("samples", np.zeros((1, 8, 8)), 1, 1)
        text = builder.write_text("phrases", ["i have the thing"])

        assert table.name == "run42_histogram.csv"
        assert table.read_text().splitlines()[0] == "# manifest_hash=feedbeef"
        assert table.read_text().splitlines()[1] == "bin_low,bin_high,users"
        assert json.loads(document.read_text()) == {"manifest_hash": "feedbeef", "run_id": "run42", "users": 2}
        assert b"# manifest_hash=feedbeef" in grid.read_bytes()
        assert text.read_text().splitlines() == ["# manifest_hash=feedbeef", "i have the thing"]
        assert builder.written == [table, document, grid, text]


class TestJsonSerializer:

    def test_numpy_values_and_paths(self):
        payload = {"n": np.int64(3), "x": np.float32(0.5), "a": np.arange(3), "p": Path("runs") / "x"}
        assert json.loads(json.dumps(payload, default=json_serializer)) == {
            "n": 3, "x": 0.5, "a": [0, 1, 2], "p": str(Path("runs") / "x")}

    def test_unknown_objects_are_rejected(self):
        with pytest.raises(TypeError):
            json.dumps({"s": {1, 2}}, default=json_serializer)
