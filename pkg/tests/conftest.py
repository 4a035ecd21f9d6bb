"""
Shared fixtures; puts src/ on the import path
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from dpfedgen.datasets import make_glyph_population, make_text_population  # noqa: E402


@pytest.fixture(scope="session")
def glyphs():
    return make_glyph_population(12, (8, 12), 4, 8, seed=3)


@pytest.fixture(scope="session")
def corpus():
    return make_text_population(30, (10, 14), grammar_seed=1)


def _tiny_gan():
    return {
        "schema_version": 1,
        "name": "tiny-gan",
        "task": "gan",
        "master_seed": 1,
        "dataset": {"kind": "glyphs", "num_users": 12, "seed": 3, "examples_per_user": [8, 12],
                    "num_classes": 4, "image_side": 8, "classifier_train_users": 8},
        "bug": {"kind": "pixel-inversion", "fraction": 0.5, "seed": 2},
        "model": {"noise_dim": 4, "generator_hidden": [8], "discriminator_hidden": [8],
                  "classifier_hidden": [8], "classifier_epochs": 3},
        "fed": {"dp": {"clip": 0.1, "noise_multiplier": 0.01, "clients_per_round": 2, "rounds": 2,
                       "delta_preset": "inv-100n"},
                "gan_steps": 1, "gan_batch_size": 4, "log_every": 1},
        "selection": {"mode": "by-user", "min_examples": 1},
        "report": {"grid_rows": 2, "grid_cols": 2, "grid_samples": 4, "histogram_bins": 5},
    }


def _tiny_lm():
    return {
        "schema_version": 1,
        "name": "tiny-lm",
        "task": "lm",
        "master_seed": 1,
        "dataset": {"kind": "text", "num_users": 30, "seed": 1, "sentences_per_user": [10, 14]},
        "bug": {"kind": "token-concatenation", "fraction": 0.5, "seed": 5},
        "model": {"lm_embedding_dim": 4, "lm_hidden_dim": 4, "char_embedding_dim": 4, "char_hidden_dim": 4},
        "fed": {"dp": {"clip": 1.0, "noise_multiplier": 0.01, "clients_per_round": 3, "rounds": 2},
                "local_batch_size": 16, "log_every": 1},
        "report": {"oov_samples": 20, "oov_max_len": 6, "top_k": 3, "char_samples": 20, "char_max_len": 8,
                   "phrase_samples": 2},
    }


@pytest.fixture(scope="session")
def scenario_factory():
    """Fresh copies of scenarios small enough to run end to end in a test"""
    builders = {"gan": _tiny_gan, "lm": _tiny_lm}
    return lambda task: builders[task]()


@pytest.fixture
def tiny_gan_scenario(scenario_factory):
    return scenario_factory("gan")


@pytest.fixture
def tiny_lm_scenario(scenario_factory):
    return scenario_factory("lm")
