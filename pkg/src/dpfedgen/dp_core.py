"""
Differential Privacy Core
User-level clipping, Gaussian noising and the subsampled-Gaussian RDP
accountant used to report (epsilon, delta) for federated training runs
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .exceptions import LayoutMismatchError, NonFiniteError, PrivacyParameterError
from .seeding import make_rng

logger = logging.getLogger(__name__)

# Coarse order grid; a refinement pass adds fractional orders near the optimum
DEFAULT_ORDERS: Tuple[float, ...] = tuple(
    [1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5]
    + [float(a) for a in range(5, 64)]
    + [64.0, 128.0, 256.0, 512.0]
)

DELTA_PRESETS = ("inv-n", "inv-100n", "explicit")


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape) entries that a ParamVector flattens"""
    tag: str
    entries: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(shape)) for _, shape in self.entries))

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    def shape_of(self, name: str) -> Tuple[int, ...]:
        for entry, shape in self.entries:
            if entry == name:
                return shape
        raise KeyError(f"Layout '{self.tag}' has no entry '{name}'")

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        parts = []
        for name, shape in self.entries:
            array = np.asarray(arrays[name], dtype=np.float64)
            if array.shape != shape:
                raise ValueError(f"Entry '{name}' has shape {array.shape}, layout expects {shape}")
            parts.append(array.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, values: np.ndarray) -> Dict[str, np.ndarray]:
        if values.shape != (self.size,):
            raise ValueError(f"Expected {self.size} values for layout '{self.tag}', got {values.shape}")
        arrays = {}
        offset = 0
        for name, shape in self.entries:
            count = int(np.prod(shape))
            arrays[name] = values[offset:offset + count].reshape(shape)
            offset += count
        return arrays

    def to_dict(self) -> Dict:
        return {"tag": self.tag, "entries": [[name, list(shape)] for name, shape in self.entries]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ParamLayout":
        return cls(data["tag"], tuple((name, tuple(shape)) for name, shape in data["entries"]))


class ParamVector:
    """Flat, immutable view of a model's trainable parameters"""

    __slots__ = ("_values", "_layout")

    def __init__(self, values: np.ndarray, layout: ParamLayout):
        array = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if array.size != layout.size:
            raise ValueError(f"Layout '{layout.tag}' holds {layout.size} values, got {array.size}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Parameter vector for '{layout.tag}' has non-finite values")
        array.setflags(write=False)
        self._values = array
        self._layout = layout

    @classmethod
    def from_arrays(cls, layout: ParamLayout, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        return cls(layout.flatten(arrays), layout)

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def layout(self) -> ParamLayout:
        return self._layout

    @property
    def tag(self) -> str:
        return self._layout.tag

    def arrays(self) -> Dict[str, np.ndarray]:
        return self._layout.unflatten(self._values)

    def norm(self) -> float:
        return float(np.linalg.norm(self._values))

    def _check(self, other: "ParamVector") -> None:
        if self._layout.tag != other._layout.tag:
            raise LayoutMismatchError(self._layout.tag, other._layout.tag)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self._values + other._values, self._layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self._values - other._values, self._layout)

    def scale(self, factor: float) -> "ParamVector":
        return ParamVector(self._values * factor, self._layout)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.tag == other.tag and np.array_equal(self._values, other._values)

    def __hash__(self) -> int:
        return hash((self.tag, self._values.tobytes()))

    def __repr__(self) -> str:
        return f"ParamVector(tag='{self.tag}', size={self._values.size}, norm={self.norm():.6g})"


@dataclass(frozen=True)
class DpSpec:
    """Privacy hyperparameters of one DP-FedAvg training run"""
    clip: float
    noise_multiplier: float
    clients_per_round: int
    population: int
    rounds: int
    delta: float

    def __post_init__(self):
        if not self.clip > 0:
            raise PrivacyParameterError(f"clip S must be > 0, got {self.clip}")
        if not (self.noise_multiplier >= 0 and math.isfinite(self.noise_multiplier)):
            raise PrivacyParameterError(f"noise multiplier z must be finite and >= 0, got {self.noise_multiplier}")
        if math.isinf(self.clip) and self.noise_multiplier > 0:
            raise PrivacyParameterError("an unbounded clip is only allowed without noise (z = 0)")
        if not 0 < self.clients_per_round <= self.population:
            raise PrivacyParameterError(
                f"need 0 < qN <= N, got qN={self.clients_per_round}, N={self.population}")
        if self.rounds < 1:
            raise PrivacyParameterError(f"rounds T must be >= 1, got {self.rounds}")
        if not 0 < self.delta < 1:
            raise PrivacyParameterError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def sampling_rate(self) -> float:
        return self.clients_per_round / self.population

    @property
    def sigma(self) -> float:
        return noise_stddev(self)


@dataclass(frozen=True)
class RdpCurve:
    """RDP values per order; values may be infinite when no noise is added"""
    orders: Tuple[float, ...]
    values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise PrivacyParameterError("orders and values differ in length")
        if any(a <= 1 for a in self.orders):
            raise PrivacyParameterError("all RDP orders must exceed 1")
        if any(not (v >= 0) for v in self.values):
            raise PrivacyParameterError("RDP values must be nonnegative")

    @classmethod
    def unbounded(cls, orders: Sequence[float] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(float(a) for a in orders), tuple(math.inf for _ in orders))

    def value_at(self, order: float) -> float:
        return self.values[self.orders.index(order)]


@dataclass(frozen=True)
class PrivacySpend:
    """(epsilon, delta) guarantee with the order that achieves it"""
    epsilon: float
    delta: float
    order: float


def clip_update(delta: ParamVector, clip: float) -> ParamVector:
    """
    Scale an update so its L2 norm is at most clip.

    Updates already inside the ball are returned unchanged.
    """
    if not clip > 0:
        raise PrivacyParameterError(f"clip S must be > 0, got {clip}")
    norm = delta.norm()
    if not math.isfinite(norm):
        raise NonFiniteError("Cannot clip an update with non-finite norm")
    if norm <= clip:
        return delta
    return delta.scale(clip / norm)


def noise_stddev(spec: DpSpec) -> float:
    """sigma = z * S / qN"""
    if spec.noise_multiplier == 0:
        return 0.0
    return spec.noise_multiplier * spec.clip / spec.clients_per_round


def gaussianize(vector: ParamVector, sigma: float, seed: int) -> ParamVector:
    """Add i.i.d. N(0, sigma^2) noise to every coordinate"""
    if not sigma >= 0:
        raise PrivacyParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return vector
    noise = make_rng(seed, "gaussian-mechanism").normal(0.0, sigma, size=vector.values.size)
    return ParamVector(vector.values + noise, vector.layout)


# Subsampled Gaussian accountant (sampling without replacement, replace-one
# neighbouring relation). Integer orders use the exact binomial expansion with
# forward differences of the Gaussian CGF; fractional orders interpolate the CGF
# between the neighbouring integers.

_STIRLING_ORDER = 256


def _log_add(log_x: float, log_y: float) -> float:
    low, high = min(log_x, log_y), max(log_x, log_y)
    if low == -math.inf:
        return high
    return math.log1p(math.exp(low - high)) + high


def _log_sub_signed(log_x: float, log_y: float) -> Tuple[bool, float]:
    """log|exp(log_x) - exp(log_y)| and whether the difference is positive"""
    if log_x > log_y:
        return True, log_x + math.log1p(-math.exp(log_y - log_x))
    if log_x < log_y:
        return False, log_y + math.log1p(-math.exp(log_x - log_y))
    return True, -math.inf


def _log_binom(n: int, k: int) -> float:
    return float(special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1))


def _forward_differences(cgf, order: int) -> np.ndarray:
    """log|k-th forward difference of exp(cgf) at 0| for k = 0..order+1"""
    size = order + 3
    log_values = np.zeros(size)
    signs = np.ones(size, dtype=bool)
    for i in range(1, size):
        log_values[i] = cgf(float(i - 1))
    differences = np.zeros(order + 2)
    for k in range(order + 2):
        # in-place differencing in log space, one level per pass
        for j in range(order + 2 - k):
            if signs[j] == signs[j + 1]:
                positive, magnitude = _log_sub_signed(log_values[j + 1], log_values[j])
                signs[j] = positive if signs[j + 1] else not positive
                log_values[j] = magnitude
            else:
                log_values[j] = _log_add(log_values[j], log_values[j + 1])
                signs[j] = signs[j + 1]
        differences[k] = log_values[0]
    return differences


@lru_cache(maxsize=4096)
def _log_moment_wor(q: float, z: float, order: int) -> float:
    """(order - 1) * RDP(order) for integer orders >= 2"""
    if order == 1:
        return 0.0

    def cgf(x: float) -> float:
        return x * (x + 1.0) / (2.0 * z ** 2)

    def gaussian_rdp(x: float) -> float:
        return x / (2.0 * z ** 2)

    log_q = math.log(q)
    eps2 = gaussian_rdp(2.0)
    second = 2 * log_q + _log_binom(order, 2) + min(
        math.log(4) + eps2 + math.log(-math.expm1(-eps2)),
        eps2 + math.log(2),
    )
    log_a = _log_add(0.0, second)
    if order <= _STIRLING_ORDER:
        deltas = _forward_differences(cgf, order)
        for i in range(3, order + 1):
            low = deltas[int(2 * math.floor(i / 2.0)) - 1]
            high = deltas[int(2 * math.ceil(i / 2.0)) - 1]
            term = min(math.log(4) + 0.5 * (low + high), math.log(2) + cgf(i - 1))
            log_a = _log_add(log_a, term + i * log_q + _log_binom(order, i))
    else:
        for i in range(3, order + 1):
            term = math.log(2) + cgf(i - 1) + i * log_q + _log_binom(order, i)
            log_a = _log_add(log_a, term)
    return float(log_a)


def _rdp_one_order(q: float, z: float, order: float) -> float:
    if q == 1.0:
        return order / (2.0 * z ** 2)
    if float(order).is_integer():
        return _log_moment_wor(q, z, int(order)) / (order - 1)
    floor_order, ceil_order = math.floor(order), math.ceil(order)
    weight = order - floor_order
    low = _log_moment_wor(q, z, floor_order)
    high = _log_moment_wor(q, z, ceil_order)
    return ((1 - weight) * low + weight * high) / (order - 1)


def rdp_subsampled_gaussian(q: float, z: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """
    One-round RDP of the subsampled Gaussian mechanism.

    Args:
        q: Sampling rate qN / N, in (0, 1]
        z: Noise multiplier, > 0
        orders: RDP orders, all > 1

    Returns:
        RdpCurve over the given orders
    """
    if not 0 < q <= 1:
        raise PrivacyParameterError(f"sampling rate q must lie in (0, 1], got {q}")
    if not z > 0:
        raise PrivacyParameterError(f"noise multiplier z must be > 0, got {z}")
    if not orders:
        raise PrivacyParameterError("order grid is empty")
    if any(a <= 1 for a in orders):
        raise PrivacyParameterError("all RDP orders must exceed 1")
    values = []
    for order in orders:
        value = _rdp_one_order(float(q), float(z), float(order))
        # tiny negative values come from log-space cancellation
        values.append(max(0.0, value))
    return RdpCurve(tuple(float(a) for a in orders), tuple(values))


def compose_rounds(curve: RdpCurve, rounds: int) -> RdpCurve:
    """RDP composes additively: T identical rounds scale every value by T"""
    if rounds < 1:
        raise PrivacyParameterError(f"rounds must be >= 1, got {rounds}")
    return RdpCurve(curve.orders, tuple(v * rounds for v in curve.values))


def rdp_to_eps(curve: RdpCurve, delta: float) -> PrivacySpend:
    """epsilon = min over orders of rdp(a) + log(1/delta) / (a - 1)"""
    if not 0 < delta < 1:
        raise PrivacyParameterError(f"delta must lie in (0, 1), got {delta}")
    if not curve.orders:
        raise PrivacyParameterError("order grid is empty")
    orders = np.asarray(curve.orders)
    epsilons = np.asarray(curve.values) + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(epsilons))
    return PrivacySpend(float(epsilons[best]), float(delta), float(orders[best]))


def one_round_curve(spec: DpSpec, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Single-round curve for a spec; unbounded when z = 0"""
    if spec.noise_multiplier == 0:
        return RdpCurve.unbounded(orders)
    return rdp_subsampled_gaussian(spec.sampling_rate, spec.noise_multiplier, orders)


def _refined_orders(orders: Sequence[float], best: float, points: int = 24) -> List[float]:
    grid = sorted(orders)
    index = grid.index(best)
    low = grid[max(index - 1, 0)]
    high = grid[min(index + 1, len(grid) - 1)]
    extra = [float(a) for a in np.linspace(low, high, points) if a > 1]
    return sorted(set(grid) | set(round(a, 6) for a in extra))


def compute_privacy_spend(spec: DpSpec, orders: Sequence[float] = DEFAULT_ORDERS,
                          refine: bool = True, rounds: Optional[int] = None) -> PrivacySpend:
    """
    (epsilon, delta) after `rounds` rounds (default spec.rounds).

    With refine=True the coarse minimiser's neighbourhood is re-searched with
    fractional orders; the returned order belongs to the refined grid.
    """
    rounds = spec.rounds if rounds is None else rounds
    curve = compose_rounds(one_round_curve(spec, orders), rounds)
    spend = rdp_to_eps(curve, spec.delta)
    if refine and math.isfinite(spend.epsilon):
        fine = _refined_orders(orders, spend.order)
        spend = rdp_to_eps(compose_rounds(one_round_curve(spec, fine), rounds), spec.delta)
    logger.debug(f"q={spec.sampling_rate:.6g} z={spec.noise_multiplier} T={rounds} "
                 f"delta={spec.delta:.3g} -> eps={spend.epsilon:.4g} at order {spend.order}")
    return spend


def preset_delta(population: int, preset: str, explicit: Optional[float] = None) -> float:
    """delta for a preset: inv-n = 1/N, inv-100n = 1/(100 N), explicit = given value"""
    if preset == "inv-n":
        return 1.0 / population
    if preset == "inv-100n":
        return 1.0 / (100.0 * population)
    if preset == "explicit":
        if explicit is None:
            raise PrivacyParameterError("explicit delta preset needs a delta value")
        return float(explicit)
    raise PrivacyParameterError(f"Unknown delta preset '{preset}', expected one of {DELTA_PRESETS}")


def project_to_scale(simulated: DpSpec, simulated_total: int, real_total: int,
                     real_clients_per_round: int, delta_preset: str = "inv-100n") -> DpSpec:
    """
    Project a desk-scale subpopulation run to a realistic deployment.

    The subpopulation keeps its share of the overall population, the cohort
    grows to real_clients_per_round and z grows by the same factor so sigma
    stays the same. Clip and rounds are kept.
    """
    if simulated_total < simulated.population or real_total < 1:
        raise PrivacyParameterError("population totals must cover the simulated subpopulation")
    factor = real_clients_per_round / simulated.clients_per_round
    population = int(round(simulated.population / simulated_total * real_total))
    return DpSpec(
        clip=simulated.clip,
        noise_multiplier=simulated.noise_multiplier * factor,
        clients_per_round=real_clients_per_round,
        population=population,
        rounds=simulated.rounds,
        delta=preset_delta(population, delta_preset, simulated.delta),
    )


def spend_table(specs: Iterable[DpSpec], refine: bool = True) -> List[Dict[str, float]]:
    """One accountant row per spec: qN, N, q, z, S, T, delta, epsilon, order"""
    rows = []
    for spec in specs:
        spend = compute_privacy_spend(spec, refine=refine)
        rows.append({
            "qN": spec.clients_per_round,
            "N": spec.population,
            "q": spec.sampling_rate,
            "z": spec.noise_multiplier,
            "S": spec.clip,
            "T": spec.rounds,
            "delta": spec.delta,
            "epsilon": spend.epsilon,
            "order": spend.order,
        })
    return rows
