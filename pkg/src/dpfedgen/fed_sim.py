"""
Federated Simulation
DP-FedAvg and DP-FedAvg-GAN rounds over simulated client populations, with a
simulator that drives whole training runs and records per-round reports
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .datasets import ClientDataset, Population
from .dp_core import (DEFAULT_ORDERS, DpSpec, ParamLayout, ParamVector, PrivacySpend, RdpCurve, clip_update,
                      compose_rounds, gaussianize, noise_stddev, one_round_curve, rdp_to_eps)
from .exceptions import (DatasetError, LayoutMismatchError, NonFiniteError, RoundAbortedError,
                         TrainingDivergedError)
from .models import DiscriminatorNet, GeneratorNet, disc_loss, gen_loss
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

ClientId = int


class FederatedTask(Protocol):
    """Per-client objective trained by DP-FedAvg"""

    @property
    def layout(self) -> ParamLayout: ...

    def num_examples(self, client: ClientDataset) -> int: ...

    def loss_and_grad(self, params: ParamVector, client: ClientDataset,
                      indices: Sequence[int]) -> Tuple[float, ParamVector]: ...


@dataclass(frozen=True)
class FedConfig:
    """
    Federated hyperparameters.

    local_* drive DP-FedAvg user updates; gan_steps, gan_batch_size, disc_lr
    and gen_lr drive DP-FedAvg-GAN. Learning rates of zero are accepted so
    degenerate runs can be checked.
    """
    dp: DpSpec
    local_epochs: int = 1
    local_batch_size: int = 8
    local_lr: float = 0.5
    gan_steps: int = 6
    gan_batch_size: int = 32
    disc_lr: float = 0.0005
    gen_lr: float = 0.005
    gp_weight: float = 10.0
    server_lr: float = 1.0
    server_momentum: float = 0.0
    disc_rounds_per_gen_update: int = 1

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.local_batch_size < 1 or self.gan_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.gan_steps < 0:
            raise ValueError(f"gan_steps must be >= 0, got {self.gan_steps}")
        for name in ("local_lr", "disc_lr", "gen_lr", "server_lr", "gp_weight"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.server_momentum < 1.0:
            raise ValueError(f"server_momentum must lie in [0, 1), got {self.server_momentum}")
        if self.disc_rounds_per_gen_update < 1:
            raise ValueError("disc_rounds_per_gen_update must be >= 1")


@dataclass(frozen=True)
class ServerState:
    """Server model, optional momentum buffer, completed rounds and one-round RDP curve"""
    params: ParamVector
    round: int = 0
    momentum: Optional[ParamVector] = None
    round_curve: Optional[RdpCurve] = None

    def __post_init__(self):
        if self.momentum is not None and self.momentum.tag != self.params.tag:
            raise LayoutMismatchError(self.params.tag, self.momentum.tag)

    @classmethod
    def initial(cls, params: ParamVector, spec: Optional[DpSpec] = None, momentum: bool = False,
                orders: Sequence[float] = DEFAULT_ORDERS) -> "ServerState":
        curve = one_round_curve(spec, orders) if spec is not None else None
        return cls(params, 0, ParamVector.zeros(params.layout) if momentum else None, curve)

    @property
    def privacy_curve(self) -> Optional[RdpCurve]:
        """Accumulated RDP: round x one-round curve"""
        if self.round_curve is None or self.round == 0:
            return None
        return compose_rounds(self.round_curve, self.round)


@dataclass(frozen=True)
class ClientUpdate:
    """Clipped model delta of one client plus bookkeeping"""
    client_id: ClientId
    delta: ParamVector
    pre_clip_norm: float
    mean_loss: float


@dataclass(frozen=True)
class RoundReport:
    """Per-round bookkeeping written to rounds.csv"""
    round_index: int
    cohort: Tuple[ClientId, ...]
    pre_clip_norms: Tuple[float, ...]
    clip_fraction: float
    sigma: float
    mean_loss: float
    privacy: Optional[PrivacySpend]
    gen_loss: Optional[float] = None
    model: str = ""

    def to_row(self) -> Dict[str, object]:
        norms = np.asarray(self.pre_clip_norms)
        return {
            "model": self.model,
            "round": self.round_index,
            "cohort_size": len(self.cohort),
            "cohort": " ".join(str(c) for c in self.cohort),
            "mean_pre_clip_norm": float(norms.mean()) if norms.size else 0.0,
            "max_pre_clip_norm": float(norms.max()) if norms.size else 0.0,
            "clip_fraction": self.clip_fraction,
            "sigma": self.sigma,
            "mean_loss": self.mean_loss,
            "gen_loss": self.gen_loss if self.gen_loss is not None else float("nan"),
            "epsilon": self.privacy.epsilon if self.privacy else float("nan"),
            "delta": self.privacy.delta if self.privacy else float("nan"),
            "order": self.privacy.order if self.privacy else float("nan"),
        }


def sample_cohort(population: Sequence[ClientId], clients_per_round: int, round_seed: int) -> Tuple[ClientId, ...]:
    """qN distinct ids sampled uniformly without replacement, sorted ascending"""
    ids = sorted(population)
    if clients_per_round > len(ids):
        raise ValueError(f"Cannot sample {clients_per_round} clients from a population of {len(ids)}")
    if clients_per_round < 1:
        raise ValueError(f"clients_per_round must be >= 1, got {clients_per_round}")
    chosen = make_rng(round_seed, "cohort").choice(len(ids), size=clients_per_round, replace=False)
    return tuple(sorted(ids[int(i)] for i in chosen))


def _minibatches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def user_update(client_id: ClientId, initial: ParamVector, data: ClientDataset, task: FederatedTask,
                cfg: FedConfig, seed: int) -> ClientUpdate:
    """
    Local SGD followed by clipping.

    Runs E epochs of minibatch SGD over shuffled batches of size B (the
    final batch may be smaller) and returns clip(theta - theta0, S).
    """
    count = task.num_examples(data)
    if count == 0:
        raise DatasetError(f"Client {client_id} has no examples")
    rng = make_rng(seed, "local-sgd", client_id)
    params = initial
    losses = []
    for _ in range(cfg.local_epochs):
        for batch in _minibatches(count, cfg.local_batch_size, rng):
            loss, grad = task.loss_and_grad(params, data, batch)
            params = params - grad.scale(cfg.local_lr)
            losses.append(loss)
    delta = params - initial
    return ClientUpdate(client_id, clip_update(delta, cfg.dp.clip), delta.norm(), float(np.mean(losses)))


def user_disc_update(client_id: ClientId, discriminator: DiscriminatorNet, generator: GeneratorNet,
                     data: ClientDataset, cfg: FedConfig, round_seed: int) -> ClientUpdate:
    """
    Local discriminator training on one client's real images.

    The client's examples are shuffled and split into batches of B; at most
    n batches are used, so small clients contribute every example once and
    their final batch may be smaller than B.
    """
    if data.num_examples == 0:
        raise DatasetError(f"Client {client_id} has no examples")
    rng = make_rng(round_seed, "disc-batches", client_id)
    batches = _minibatches(data.num_examples, cfg.gan_batch_size, rng)[:cfg.gan_steps]
    pixels = data.pixels
    disc = discriminator
    losses = []
    for step, batch in enumerate(batches):
        noise = make_rng(round_seed, "disc-noise", client_id, step).normal(size=(len(batch), generator.noise_dim))
        fake = generator.generate(noise)
        penalty_seed = derive_seed(round_seed, "gp", client_id, step)
        loss, grad = disc_loss(disc, pixels[batch], fake, cfg.gp_weight, penalty_seed).value_and_gradient()
        disc = disc.with_params(disc.params - grad.scale(cfg.disc_lr))
        losses.append(loss)
    delta = disc.params - discriminator.params
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return ClientUpdate(client_id, clip_update(delta, cfg.dp.clip), delta.norm(), mean_loss)


def gen_update(discriminator: DiscriminatorNet, generator: GeneratorNet, cfg: FedConfig,
               round_seed: int) -> Tuple[ParamVector, float]:
    """
    Server-side generator training against a fixed discriminator.

    Takes no client data; returns the new generator parameters and the mean
    generator loss (nan when no step ran).
    """
    gen = generator
    losses = []
    for step in range(cfg.gan_steps):
        noise = make_rng(round_seed, "gen-noise", step).normal(size=(cfg.gan_batch_size, gen.noise_dim))
        loss, grad = gen_loss(gen, discriminator, noise).value_and_gradient()
        gen = gen.with_params(gen.params - grad.scale(cfg.gen_lr))
        losses.append(loss)
    return gen.params, float(np.mean(losses)) if losses else float("nan")


def _run_clients(cohort: Sequence[ClientId], work: Callable[[ClientId], ClientUpdate], round_index: int,
                 threads: int) -> List[ClientUpdate]:
    """Run client work, possibly in parallel, and return updates in ascending id order"""
    outcomes: Dict[ClientId, object] = {}

    def guarded(client_id: ClientId):
        try:
            return work(client_id)
        except Exception as exc:  # reported below in client order
            return exc

    if threads > 1 and len(cohort) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(cohort))) as pool:
            for client_id, outcome in zip(cohort, pool.map(guarded, cohort)):
                outcomes[client_id] = outcome
    else:
        for client_id in cohort:
            outcomes[client_id] = guarded(client_id)

    updates = []
    for client_id in sorted(outcomes):
        outcome = outcomes[client_id]
        if isinstance(outcome, NonFiniteError):
            raise TrainingDivergedError(round_index, outcome) from outcome
        if isinstance(outcome, Exception):
            logger.error(f"Round {round_index}: client {client_id} failed: {outcome}")
            raise RoundAbortedError(round_index, client_id, outcome) from outcome
        updates.append(outcome)
    return updates


def _aggregate(updates: Sequence[ClientUpdate], layout: ParamLayout, spec: DpSpec, noise_seed: int) -> ParamVector:
    """Sum in client order, divide by qN, add Gaussian noise"""
    total = np.zeros(layout.size)
    for update in updates:
        if update.delta.tag != layout.tag:
            raise LayoutMismatchError(layout.tag, update.delta.tag)
        total = total + update.delta.values
    average = ParamVector(total / spec.clients_per_round, layout)
    return gaussianize(average, noise_stddev(spec), noise_seed)


def _server_step(state: ServerState, update: ParamVector, cfg: FedConfig) -> ServerState:
    """theta += lr * update, or the Nesterov form with a momentum buffer"""
    try:
        if cfg.server_momentum > 0:
            buffer = state.momentum if state.momentum is not None else ParamVector.zeros(update.layout)
            buffer = buffer.scale(cfg.server_momentum) + update
            step = buffer.scale(cfg.server_momentum) + update
            params = state.params + step.scale(cfg.server_lr)
            return replace(state, params=params, momentum=buffer, round=state.round + 1)
        params = state.params + update.scale(cfg.server_lr)
        return replace(state, params=params, round=state.round + 1)
    except NonFiniteError as exc:
        raise TrainingDivergedError(state.round, exc) from exc


def _privacy_after(state: ServerState, spec: DpSpec) -> Optional[PrivacySpend]:
    curve = state.privacy_curve
    if curve is None:
        return None
    return rdp_to_eps(curve, spec.delta)


def _report(round_index: int, cohort: Sequence[ClientId], updates: Sequence[ClientUpdate], cfg: FedConfig,
            state: ServerState, model: str, generator_loss: Optional[float] = None) -> RoundReport:
    norms = tuple(u.pre_clip_norm for u in updates)
    clipped = sum(1 for n in norms if n > cfg.dp.clip)
    return RoundReport(
        round_index=round_index,
        cohort=tuple(cohort),
        pre_clip_norms=norms,
        clip_fraction=clipped / len(norms) if norms else 0.0,
        sigma=noise_stddev(cfg.dp),
        mean_loss=float(np.mean([u.mean_loss for u in updates])) if updates else float("nan"),
        privacy=_privacy_after(state, cfg.dp),
        gen_loss=generator_loss,
        model=model,
    )


def dp_fedavg_round(state: ServerState, population: Population, task: FederatedTask, cfg: FedConfig,
                    master_seed: int, threads: int = 1, model: str = "") -> Tuple[ServerState, RoundReport]:
    """
    One DP-FedAvg round.

    Samples qN clients, averages their clipped updates over exactly qN, adds
    N(0, sigma^2) noise with sigma = zS/qN, applies the server optimiser and
    ticks the accountant by one round.
    """
    round_index = state.round
    cohort = sample_cohort(population.client_ids, cfg.dp.clients_per_round,
                           derive_seed(master_seed, round_index, "cohort"))

    def work(client_id: ClientId) -> ClientUpdate:
        seed = derive_seed(master_seed, round_index, client_id, "client")
        return user_update(client_id, state.params, population.get(client_id), task, cfg, seed)

    updates = _run_clients(cohort, work, round_index, threads)
    noised = _aggregate(updates, state.params.layout, cfg.dp, derive_seed(master_seed, round_index, "noise"))
    new_state = _server_step(state, noised, cfg)
    return new_state, _report(round_index, cohort, updates, cfg, new_state, model)


def dp_fedavg_gan_round(disc_state: ServerState, gen_state: ServerState, discriminator: DiscriminatorNet,
                        generator: GeneratorNet, population: Population, cfg: FedConfig, master_seed: int,
                        threads: int = 1, model: str = "") -> Tuple[ServerState, ServerState, RoundReport]:
    """
    One DP-FedAvg-GAN round.

    The discriminator is updated with DP-FedAvg mechanics on the cohort's
    real data; the generator is then trained at the server against the new
    discriminator, once every disc_rounds_per_gen_update rounds. Only the
    discriminator step touches client data.
    """
    round_index = disc_state.round
    round_seed = derive_seed(master_seed, round_index)
    cohort = sample_cohort(population.client_ids, cfg.dp.clients_per_round,
                           derive_seed(master_seed, round_index, "cohort"))
    disc = discriminator.with_params(disc_state.params)
    gen = generator.with_params(gen_state.params)

    def work(client_id: ClientId) -> ClientUpdate:
        return user_disc_update(client_id, disc, gen, population.get(client_id), cfg, round_seed)

    updates = _run_clients(cohort, work, round_index, threads)
    noised = _aggregate(updates, disc_state.params.layout, cfg.dp, derive_seed(master_seed, round_index, "noise"))
    new_disc_state = _server_step(disc_state, noised, cfg)

    generator_loss = None
    new_gen_state = gen_state
    if (round_index + 1) % cfg.disc_rounds_per_gen_update == 0:
        new_gen_params, generator_loss = gen_update(disc.with_params(new_disc_state.params), gen, cfg,
                                                    derive_seed(master_seed, round_index, "generator"))
        new_gen_state = replace(gen_state, params=new_gen_params, round=gen_state.round + 1)
    report = _report(round_index, cohort, updates, cfg, new_disc_state, model, generator_loss)
    return new_disc_state, new_gen_state, report


@dataclass
class SimulationResult:
    """Final states and the per-round report stream of one training run"""
    model: str
    state: ServerState
    reports: List[RoundReport] = field(default_factory=list)
    generator_state: Optional[ServerState] = None

    @property
    def final_privacy(self) -> Optional[PrivacySpend]:
        return self.reports[-1].privacy if self.reports else None

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.reports])


class FederatedSimulator:
    """
    Drives T rounds of DP-FedAvg or DP-FedAvg-GAN.

    Exactly one round runs at a time; within a round client updates may run
    on up to `threads` workers without changing results.
    """

    def __init__(self, cfg: FedConfig, master_seed: int, threads: int = 1, log_every: int = 10):
        self.cfg = cfg
        self.master_seed = master_seed
        self.threads = max(1, int(threads))
        self.log_every = max(1, int(log_every))
        self.logger = logging.getLogger(__name__)

    def _log_round(self, model: str, report: RoundReport, total: int) -> None:
        if (report.round_index + 1) % self.log_every and report.round_index + 1 != total:
            return
        epsilon = report.privacy.epsilon if report.privacy else math.inf
        self.logger.info(f"[{model}] round {report.round_index + 1}/{total}: cohort {len(report.cohort)}, "
                         f"clip fraction {report.clip_fraction:.2f}, sigma {report.sigma:.3g}, "
                         f"loss {report.mean_loss:.4f}, eps {epsilon:.4g}")

    def run_fedavg(self, model: str, task: FederatedTask, initial: ParamVector, population: Population,
                   rounds: Optional[int] = None) -> SimulationResult:
        rounds = self.cfg.dp.rounds if rounds is None else rounds
        state = ServerState.initial(initial, self.cfg.dp, momentum=self.cfg.server_momentum > 0)
        result = SimulationResult(model, state)
        self.logger.info(f"[{model}] DP-FedAvg: {rounds} rounds, qN={self.cfg.dp.clients_per_round}, "
                         f"N={len(population)}, z={self.cfg.dp.noise_multiplier}, S={self.cfg.dp.clip}")
        for _ in range(rounds):
            state, report = dp_fedavg_round(state, population, task, self.cfg, self.master_seed,
                                            self.threads, model)
            result.reports.append(report)
            self._log_round(model, report, rounds)
        result.state = state
        return result

    def run_gan(self, model: str, discriminator: DiscriminatorNet, generator: GeneratorNet,
                population: Population, rounds: Optional[int] = None) -> SimulationResult:
        rounds = self.cfg.dp.rounds if rounds is None else rounds
        disc_state = ServerState.initial(discriminator.params, self.cfg.dp, momentum=self.cfg.server_momentum > 0)
        gen_state = ServerState.initial(generator.params)
        result = SimulationResult(model, disc_state, generator_state=gen_state)
        self.logger.info(f"[{model}] DP-FedAvg-GAN: {rounds} rounds, qN={self.cfg.dp.clients_per_round}, "
                         f"N={len(population)}, z={self.cfg.dp.noise_multiplier}, S={self.cfg.dp.clip}")
        for _ in range(rounds):
            disc_state, gen_state, report = dp_fedavg_gan_round(disc_state, gen_state, discriminator, generator,
                                                                population, self.cfg, self.master_seed,
                                                                self.threads, model)
            result.reports.append(report)
            self._log_round(model, report, rounds)
        result.state = disc_state
        result.generator_state = gen_state
        return result
