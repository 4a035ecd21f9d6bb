"""
Scenario Runner
Runs a scenario end to end (data, bug, classifier, selection, federated
training, reports) and regenerates reports from a finished run directory
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd

from . import __version__
from .config import DpBlock, FedBlock, ScenarioConfig, build_dp_spec, parse_scenario
from .datasets import (BugSpec, Population, Vocabulary, apply_concat_bug, build_vocabulary, inverted_clients,
                       make_glyph_population, make_text_population, oov_word_population)
from .debug_reports import (DebugReportBuilder, accuracy_histogram, oov_rate_by_position, overall_oov_rate,
                            polarity_stats, top_oov_words)
from .dp_core import DpSpec, project_to_scale
from .exceptions import DatasetError, ReportError
from .fed_sim import FedConfig, FederatedSimulator, SimulationResult
from .models import (CharLm, ClassifierNet, DiscriminatorNet, GeneratorNet, LanguageModelTrainer, WordLm,
                     classifier_accuracy, lm_sample_many, load_checkpoint, save_checkpoint, train_classifier)
from .population_storage import export_population, load_external_federated_images
from .run_export import RunDirectory, privacy_row
from .seeding import derive_seed
from .selection import SelectionCriteria, calibrate_from_accuracies, select, user_accuracies

logger = logging.getLogger(__name__)

REPORT_KINDS = ("image-grid", "oov-profile", "top-oov", "histogram", "samples")
CONCAT_SWEEP = (0.0, 0.01, 0.1, 1.0)


@dataclass
class RunSummary:
    """What a scenario run produced"""
    run_dir: Path
    manifest_hash: str
    results: List[SimulationResult] = field(default_factory=list)
    details: Dict[str, Any] = field(default_factory=dict)


def fed_config(block: FedBlock, spec: DpSpec, local_lr: Optional[float] = None) -> FedConfig:
    return FedConfig(
        dp=spec,
        local_epochs=block.local_epochs,
        local_batch_size=block.local_batch_size,
        local_lr=block.local_lr if local_lr is None else local_lr,
        gan_steps=block.gan_steps,
        gan_batch_size=block.gan_batch_size,
        disc_lr=block.disc_lr,
        gen_lr=block.gen_lr,
        gp_weight=block.gp_weight,
        server_lr=block.server_lr,
        server_momentum=block.server_momentum,
        disc_rounds_per_gen_update=block.disc_rounds_per_gen_update,
    )


def training_spec(block: DpBlock, population_size: int, label: str) -> DpSpec:
    """DpSpec for an actual training population, clamping qN to N with a warning"""
    if population_size < 1:
        raise DatasetError(f"{label}: training population is empty")
    if block.clients_per_round > population_size:
        logger.warning(f"{label}: clients_per_round {block.clients_per_round} exceeds the population of "
                       f"{population_size}; using {population_size}")
        block = block.model_copy(update={"clients_per_round": population_size})
    return build_dp_spec(block, population_size)


# Data preparation shared by runs and report regeneration

def glyph_populations(config: ScenarioConfig) -> Tuple[Population, Population]:
    """(clean, bugged) glyph populations of a scenario"""
    data = config.dataset
    clean = make_glyph_population(data.num_users, data.examples_per_user, data.num_classes, data.image_side,
                                  data.seed)
    bugged = BugSpec(config.bug.kind, config.bug.fraction, config.bug.seed).apply(clean) if config.bug else clean
    return clean, bugged


def classifier_population(config: ScenarioConfig) -> Population:
    """Writers the primary classifier is trained on; their ids follow the scenario population's"""
    data = config.dataset
    return make_glyph_population(data.classifier_train_users, data.examples_per_user, data.num_classes,
                                 data.image_side, data.seed, first_client_id=data.num_users)


def text_populations(config: ScenarioConfig) -> Tuple[Population, Population, Vocabulary]:
    """(clean, bugged, vocabulary) of an LM scenario; the vocabulary comes from the clean corpus"""
    data = config.dataset
    clean = make_text_population(data.num_users, data.sentences_per_user, data.seed)
    vocab = build_vocabulary(clean, size=data.vocab_size, target_oov_rate=data.target_oov_rate)
    bugged = BugSpec(config.bug.kind, config.bug.fraction, config.bug.seed).apply(clean) if config.bug else clean
    return clean, bugged, vocab


def decode_phrase(vocab: Vocabulary, ids: List[int]) -> str:
    return " ".join(vocab.decode([i for i in ids if i != vocab.eos_id]))


class ScenarioRunner:
    """
    Executes one scenario into its run directory.

    GAN scenarios train one DP-FedAvg-GAN per selected subpopulation; LM
    scenarios train a word LM on the (possibly buggy) corpus and a char LM
    on its OOV words.
    """

    def __init__(self, config: ScenarioConfig, threads: int = 1):
        self.config = config
        self.threads = threads
        self.logger = logging.getLogger(__name__)
        self.run_dir = RunDirectory.for_config(config)
        self.manifest_hash = config.manifest_hash()

    def _simulator(self, model: str, cfg: FedConfig) -> FederatedSimulator:
        """Each model draws its cohorts and noise from its own seed stream"""
        return FederatedSimulator(cfg, derive_seed(self.config.master_seed, model, "federated"), self.threads,
                                  self.config.fed.log_every)

    def run(self) -> RunSummary:
        self.logger.info(f"Running scenario {self.config.name} (seed {self.config.master_seed}, "
                         f"threads {self.threads}) into {self.run_dir.root}")
        self.run_dir.create()
        builder = DebugReportBuilder(self.run_dir.reports_dir, self.run_dir.run_id, self.manifest_hash)
        summary = RunSummary(self.run_dir.root, self.manifest_hash)
        if self.config.task == "gan":
            privacy_rows = self._run_gan(builder, summary)
        else:
            privacy_rows = self._run_lm(builder, summary)

        self.run_dir.write_rounds(summary.results)
        self.run_dir.write_privacy(privacy_rows)
        summary.details["final_privacy"] = {
            r.model: ({"epsilon": r.final_privacy.epsilon, "delta": r.final_privacy.delta,
                       "order": r.final_privacy.order} if r.final_privacy else None)
            for r in summary.results
        }
        summary.details["reports"] = [str(p.relative_to(self.run_dir.root)) for p in builder.written]
        summary.details["package_version"] = __version__
        self.run_dir.write_manifest(self.config, summary.details)
        self.logger.info(f"Scenario {self.config.name} complete: {len(builder.written)} reports")
        return summary

    # GAN scenarios

    def _run_gan(self, builder: DebugReportBuilder, summary: RunSummary) -> List[Dict[str, Any]]:
        config = self.config
        report = config.report

        # 1. Clean and bugged populations
        clean, bugged = glyph_populations(config)
        pixels = config.dataset.image_side ** 2

        # 2. Primary classifier, pre-trained on separate writers
        architecture = ClassifierNet.build_architecture(pixels, config.dataset.num_classes,
                                                        config.model.classifier_hidden)
        classifier = train_classifier(classifier_population(config), architecture,
                                      derive_seed(config.master_seed, "classifier"),
                                      epochs=config.model.classifier_epochs,
                                      learning_rate=config.model.classifier_lr,
                                      batch_size=config.model.classifier_batch_size)
        save_checkpoint(classifier, self.run_dir.checkpoint_path("classifier"))
        clean_accuracy = classifier_accuracy(classifier, clean)
        self.logger.info(f"Classifier accuracy on clean writers: {clean_accuracy:.4f}")

        # 3. Thresholds frozen from the clean population
        selection_block = config.selection
        clean_accuracies = user_accuracies(classifier, clean)
        cuts = calibrate_from_accuracies(list(clean_accuracies.values()), selection_block.low_percent,
                                         selection_block.high_percent)
        self.logger.info(f"Frozen thresholds from clean run: low={cuts[0]:.4f}, high={cuts[1]:.4f}")
        builder.write_table("percentiles", pd.DataFrame([
            {"percentile": selection_block.low_percent, "accuracy": cuts[0]},
            {"percentile": selection_block.high_percent, "accuracy": cuts[1]},
        ]))
        builder.write_histogram("histogram-clean", accuracy_histogram(clean, classifier, report.histogram_bins))
        builder.write_histogram("histogram-bugged", accuracy_histogram(bugged, classifier, report.histogram_bins))

        # 4. Subpopulations and one GAN per subpopulation
        rows = []
        sizes = []
        polarity = {}
        subpopulations = {}
        for mode in selection_block.subpopulation_modes:
            criteria = SelectionCriteria(mode, cuts[0], cuts[1], selection_block.min_examples,
                                         classifier.fingerprint())
            subpopulation = select(bugged, classifier, criteria, cuts)
            manifest_path = subpopulation.save_manifest(self.run_dir.reports_dir /
                                                        f"{self.run_dir.run_id}_subpopulation-{mode}.json")
            builder.written.append(manifest_path)
            sizes.append({"mode": mode, "N": subpopulation.size, "share": subpopulation.size / len(bugged),
                          "inverted_members": len(set(subpopulation.members) & set(inverted_clients(bugged)))})
            subpopulations[mode] = subpopulation.to_manifest()
            if subpopulation.size == 0:
                self.logger.warning(f"Subpopulation '{mode}' is empty; its GAN is not trained")
                continue

            model = f"gan-{mode}"
            result, generator, spec = self._train_gan(model, subpopulation.apply(bugged))
            summary.results.append(result)
            samples = generator.sample(report.grid_samples, report.sample_seed)
            builder.write_grid(f"{model}-samples", samples, report.grid_rows, report.grid_cols)
            polarity[mode] = polarity_stats(samples)

            rows.append(privacy_row(model, "simulation", spec))
            realistic = project_to_scale(spec, len(bugged), report.project_population,
                                         report.project_clients_per_round, "inv-100n")
            rows.append(privacy_row(model, "realistic", realistic))

        builder.write_table("subpopulations", pd.DataFrame(sizes))
        first, second = selection_block.subpopulation_modes
        separation = None
        if first in polarity and second in polarity:
            separation = polarity[first]["mean_intensity"] - polarity[second]["mean_intensity"]
        builder.write_json("polarity", {"polarity": polarity, "separation": separation,
                                        "separation_modes": [first, second]})

        summary.details.update({
            "population_hash": clean.content_hash(),
            "bugged_population_hash": bugged.content_hash(),
            "classifier_id": classifier.fingerprint(),
            "classifier_clean_accuracy": clean_accuracy,
            "thresholds": {"low_cut": cuts[0], "high_cut": cuts[1]},
            "subpopulations": subpopulations,
            "polarity": polarity,
        })
        return rows

    def _train_gan(self, model: str, population: Population) -> Tuple[SimulationResult, GeneratorNet, DpSpec]:
        config = self.config
        pixels = config.dataset.image_side ** 2
        spec = training_spec(config.fed.dp, len(population), model)
        simulator = self._simulator(model, fed_config(config.fed, spec))
        generator = GeneratorNet.initialize(
            GeneratorNet.build_architecture(pixels, config.model.noise_dim, config.model.generator_hidden),
            derive_seed(config.master_seed, model, "generator-init"))
        discriminator = DiscriminatorNet.initialize(
            DiscriminatorNet.build_architecture(pixels, config.model.discriminator_hidden,
                                                config.model.discriminator_slope),
            derive_seed(config.master_seed, model, "discriminator-init"))
        result = simulator.run_gan(model, discriminator, generator, population)
        generator = generator.with_params(result.generator_state.params)
        save_checkpoint(generator, self.run_dir.checkpoint_path(f"{model}-generator"))
        save_checkpoint(discriminator.with_params(result.state.params),
                        self.run_dir.checkpoint_path(f"{model}-discriminator"))
        return result, generator, spec

    # LM scenarios

    def _run_lm(self, builder: DebugReportBuilder, summary: RunSummary) -> List[Dict[str, Any]]:
        config = self.config
        report = config.report

        # 1. Corpus, vocabulary and bug
        clean, bugged, vocab = text_populations(config)
        sweep = []
        for fraction in sorted(set(CONCAT_SWEEP) | ({config.bug.fraction} if config.bug else set())):
            seed = config.bug.seed if config.bug else 0
            swept = apply_concat_bug(clean, fraction, seed) if fraction > 0 else clean
            sweep.append({"fraction": fraction, "oov_rate": overall_oov_rate(swept, vocab)})
        builder.write_table("oov-rates", pd.DataFrame(sweep))
        bugged_rate = overall_oov_rate(bugged, vocab)
        self.logger.info(f"Training corpus OOV rate {bugged_rate:.4f} "
                         f"(clean {overall_oov_rate(clean, vocab):.4f})")

        rows = []

        # 2. Word LM on the training corpus
        word_spec = training_spec(config.fed.dp, len(bugged), "word-lm")
        simulator = self._simulator("word-lm", fed_config(config.fed, word_spec))
        word_lm = WordLm.initialize(vocab, derive_seed(config.master_seed, "word-lm-init"),
                                    config.model.lm_embedding_dim, config.model.lm_hidden_dim,
                                    config.model.lm_layers)
        word_result = simulator.run_fedavg("word-lm", LanguageModelTrainer(word_lm), word_lm.params, bugged)
        word_lm = word_lm.with_params(word_result.state.params)
        save_checkpoint(word_lm, self.run_dir.checkpoint_path("word-lm"))
        summary.results.append(word_result)
        rows.append(privacy_row("word-lm", "simulation", word_spec))

        # 3. Char LM on the users' OOV words
        oov_words = oov_word_population(bugged, vocab)
        char_spec = training_spec(config.char_dp, len(oov_words), "char-lm")
        simulator = self._simulator("char-lm", fed_config(config.fed, char_spec, config.fed.char_local_lr))
        char_lm = CharLm.initialize(Vocabulary.characters(), derive_seed(config.master_seed, "char-lm-init"),
                                    config.model.char_embedding_dim, config.model.char_hidden_dim, 1)
        char_result = simulator.run_fedavg("char-lm", LanguageModelTrainer(char_lm), char_lm.params, oov_words)
        char_lm = char_lm.with_params(char_result.state.params)
        save_checkpoint(char_lm, self.run_dir.checkpoint_path("char-lm"))
        summary.results.append(char_result)
        rows.append(privacy_row("char-lm", "simulation", char_spec))

        # 4. Debugging reports
        profile = oov_rate_by_position(word_lm, vocab, report.oov_samples, report.oov_max_len, report.sample_seed)
        builder.write_profile("oov-profile", profile)
        top = top_oov_words(char_lm, report.top_k, report.char_samples, report.sample_seed, report.char_max_len)
        builder.write_oov_list("top-oov", top)
        phrases = lm_sample_many(word_lm, report.phrase_samples, report.sample_seed, report.oov_max_len) \
            if report.phrase_samples else []
        builder.write_text("samples", [decode_phrase(vocab, p) for p in phrases])
        builder.write_json("summary", {
            "training_oov_rate": bugged_rate,
            "oov_rates": sweep,
            "position0_spike_ratio": profile.spike_ratio(),
            "position0_peak_ratio": profile.peak_ratios().get(0, 0.0),
            "max_peak_ratio": profile.max_peak_ratio(),
            "profile_mean_oov": profile.mean_fraction(),
            "top_oov_with_space": top.count_with_space(),
            "top_oov_words": top.words,
        })

        summary.details.update({
            "population_hash": clean.content_hash(),
            "bugged_population_hash": bugged.content_hash(),
            "vocabulary_size": vocab.size,
            "oov_users": len(oov_words),
            "training_oov_rate": bugged_rate,
        })
        return rows


def cmd_run(config: ScenarioConfig, threads: int = 1) -> RunSummary:
    """Run a validated scenario"""
    return ScenarioRunner(config, threads).run()


def _load_model(run_dir: RunDirectory, name: str):
    path = run_dir.checkpoint_path(name)
    if not path.exists():
        raise ReportError(f"Missing checkpoint '{name}' in {run_dir.root}")
    return load_checkpoint(path)


def cmd_report(run_dir: Union[str, Path], report_kind: str, out: Optional[Union[str, Path]] = None,
               samples: Optional[int] = None) -> List[Path]:
    """
    Regenerate one kind of report from stored checkpoints, without retraining.

    Files go to a new numbered directory under reports/regenerated/ (or under
    `out`); nothing existing in the run directory is modified.
    """
    if report_kind not in REPORT_KINDS:
        raise ReportError(f"Unknown report kind '{report_kind}'; expected one of {', '.join(REPORT_KINDS)}")
    directory = RunDirectory(run_dir)
    manifest = directory.read_manifest()
    try:
        config = parse_scenario(manifest["scenario"], str(directory.root))
    except KeyError as exc:
        raise ReportError(f"Run manifest in {directory.root} has no scenario") from exc
    report = config.report
    available = directory.list_checkpoints()

    if report_kind == "image-grid":
        generators = [name for name in available if name.startswith("gan-") and name.endswith("-generator")]
        if not generators:
            raise ReportError(f"No generator checkpoints in {directory.root}")
    elif report_kind in ("oov-profile", "samples"):
        _load_model(directory, "word-lm")
    elif report_kind == "top-oov":
        _load_model(directory, "char-lm")
    else:
        _load_model(directory, "classifier")

    target = directory.regenerated_dir(out)
    builder = DebugReportBuilder(target, directory.run_id, manifest.get("manifest_hash", ""))

    if report_kind == "image-grid":
        count = samples or report.grid_samples
        rows = report.grid_rows
        cols = max(report.grid_cols, -(-count // rows))
        for name in generators:
            generator = _load_model(directory, name)
            builder.write_grid(f"{name[:-len('-generator')]}-samples", generator.sample(count, report.sample_seed),
                               rows, cols)
    elif report_kind == "oov-profile":
        word_lm = _load_model(directory, "word-lm")
        profile = oov_rate_by_position(word_lm, word_lm.vocabulary, samples or report.oov_samples,
                                       report.oov_max_len, report.sample_seed)
        builder.write_profile("oov-profile", profile)
    elif report_kind == "samples":
        word_lm = _load_model(directory, "word-lm")
        phrases = lm_sample_many(word_lm, samples or max(report.phrase_samples, 1), report.sample_seed,
                                 report.oov_max_len)
        builder.write_text("samples", [decode_phrase(word_lm.vocabulary, p) for p in phrases])
    elif report_kind == "top-oov":
        char_lm = _load_model(directory, "char-lm")
        builder.write_oov_list("top-oov", top_oov_words(char_lm, report.top_k, samples or report.char_samples,
                                                        report.sample_seed, report.char_max_len))
    else:
        classifier = _load_model(directory, "classifier")
        clean, bugged = glyph_populations(config)
        bins = samples or report.histogram_bins
        builder.write_histogram("histogram-clean", accuracy_histogram(clean, classifier, bins))
        builder.write_histogram("histogram-bugged", accuracy_histogram(bugged, classifier, bins))

    logger.info(f"Regenerated {report_kind} into {target}")
    return builder.written


def cmd_export_population(config: ScenarioConfig, directory: Union[str, Path], bugged: bool = False) -> Path:
    """Write a scenario's clean (or bugged) population as a container directory"""
    if config.task == "gan":
        clean, with_bug = glyph_populations(config)
    else:
        clean, with_bug, _ = text_populations(config)
    return export_population(with_bug if bugged else clean, directory)


def cmd_inspect_population(path: Union[str, Path]) -> Dict[str, Any]:
    """Load a container and summarize it"""
    population = load_external_federated_images(path)
    summary: Dict[str, Any] = {
        "kind": population.kind,
        "clients": len(population),
        "examples": population.total_examples,
        "content_hash": population.content_hash(),
    }
    if population.kind == "images":
        summary["image_side"] = population.image_side
        summary["num_classes"] = population.num_classes
    return summary
