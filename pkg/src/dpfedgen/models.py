"""
Desk-Scale Models
Generator, discriminator, classifier and recurrent language models with their
losses, sampling routines, sequence probabilities and checkpoints
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .datasets import ClientDataset, Population, Vocabulary
from .dp_core import ParamLayout, ParamVector
from .exceptions import ShapeError
from .grad_core import Graph, Node, evaluate, finite_diff_check, value_and_gradient
from .seeding import make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


# Dense building blocks

@dataclass(frozen=True)
class DenseArchitecture:
    """Fully connected net: input -> hidden layers -> output"""
    input_dim: int
    hidden: Tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "none"
    leaky_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"Layer widths must be positive: {self.dims}")
        if self.hidden_activation not in ("relu", "leaky_relu"):
            raise ValueError(f"Unknown hidden activation '{self.hidden_activation}'")
        if self.output_activation not in ("none", "sigmoid"):
            raise ValueError(f"Unknown output activation '{self.output_activation}'")

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.input_dim,) + tuple(self.hidden) + (self.output_dim,)

    def layout(self, kind: str) -> ParamLayout:
        entries = []
        dims = self.dims
        for i in range(len(dims) - 1):
            entries.append((f"W{i}", (dims[i], dims[i + 1])))
            entries.append((f"b{i}", (dims[i + 1],)))
        tag = f"{kind}:" + "-".join(str(d) for d in dims)
        return ParamLayout(tag, tuple(entries))

    def to_dict(self) -> Dict[str, Any]:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "output_dim": self.output_dim,
                "hidden_activation": self.hidden_activation, "output_activation": self.output_activation,
                "leaky_slope": self.leaky_slope}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DenseArchitecture":
        return cls(int(data["input_dim"]), tuple(data["hidden"]), int(data["output_dim"]),
                   data["hidden_activation"], data["output_activation"], float(data["leaky_slope"]))


def init_dense(architecture: DenseArchitecture, layout: ParamLayout, seed: int) -> ParamVector:
    """Gaussian weights scaled by fan-in plus fan-out, zero biases"""
    rng = make_rng(seed, "dense-init", layout.tag)
    arrays = {}
    for name, shape in layout.entries:
        if name.startswith("W"):
            arrays[name] = rng.normal(0.0, math.sqrt(2.0 / (shape[0] + shape[1])), size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParamVector.from_arrays(layout, arrays)


def _activate_np(x: np.ndarray, architecture: DenseArchitecture) -> np.ndarray:
    if architecture.hidden_activation == "relu":
        return np.maximum(x, 0.0)
    return np.where(x > 0, x, architecture.leaky_slope * x)


def dense_forward(architecture: DenseArchitecture, arrays: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Numpy inference path, matching dense_graph"""
    layers = len(architecture.dims) - 1
    out = np.asarray(x, dtype=np.float64)
    for i in range(layers):
        out = out @ arrays[f"W{i}"] + arrays[f"b{i}"]
        if i < layers - 1:
            out = _activate_np(out, architecture)
    if architecture.output_activation == "sigmoid":
        out = special.expit(out)
    return out


@dataclass(frozen=True)
class DenseNodes:
    """Graph handles of one application of a dense net"""
    output: Node
    weights: Tuple[Node, ...]
    preactivations: Tuple[Node, ...]


def dense_leaves(graph: Graph, architecture: DenseArchitecture, layout: ParamLayout, prefix: str,
                 trainable: bool) -> Dict[str, Node]:
    """Create one leaf per layout entry, named prefix + entry"""
    make = graph.param if trainable else graph.input
    return {name: make(f"{prefix}{name}", shape) for name, shape in layout.entries}


def dense_graph(graph: Graph, x: Node, architecture: DenseArchitecture, leaves: Mapping[str, Node]) -> DenseNodes:
    """Apply a dense net inside a graph"""
    layers = len(architecture.dims) - 1
    out = x
    weights = []
    preacts = []
    for i in range(layers):
        weights.append(leaves[f"W{i}"])
        out = graph.affine(out, leaves[f"W{i}"], leaves[f"b{i}"])
        if i < layers - 1:
            preacts.append(out)
            if architecture.hidden_activation == "relu":
                out = graph.relu(out)
            else:
                out = graph.leaky_relu(out, architecture.leaky_slope)
    if architecture.output_activation == "sigmoid":
        out = graph.sigmoid(out)
    return DenseNodes(out, tuple(weights), tuple(preacts))


def _bind(prefix: str, params: ParamVector) -> Dict[str, np.ndarray]:
    return {f"{prefix}{name}": array for name, array in params.arrays().items()}


@dataclass(frozen=True)
class LossGraph:
    """A scalar loss graph with its bindings; trainable leaves follow `layout` under `prefix`"""
    graph: Graph
    bindings: Mapping[str, np.ndarray]
    output: str
    layout: ParamLayout
    prefix: str

    def value(self) -> float:
        return evaluate(self.graph, self.bindings, [self.output])[self.output].item()

    def value_and_gradient(self) -> Tuple[float, ParamVector]:
        value, grads = value_and_gradient(self.graph, self.bindings, self.output)
        arrays = {name: grads[f"{self.prefix}{name}"].data for name in self.layout.names}
        return value.item(), ParamVector.from_arrays(self.layout, arrays)

    def gradient(self) -> ParamVector:
        return self.value_and_gradient()[1]

    def check_gradients(self, eps: float = 1e-5) -> float:
        return finite_diff_check(self.graph, self.bindings, self.output, eps)


# Networks

@dataclass(frozen=True)
class GeneratorNet:
    """G(U; theta_G): noise of size n_U -> flattened image in [0, 1]"""
    architecture: DenseArchitecture
    params: ParamVector

    KIND = "generator"

    def __post_init__(self):
        if self.architecture.output_activation != "sigmoid":
            raise ValueError("Generator output must pass through a sigmoid")
        if self.params.tag != self.layout.tag:
            raise ValueError(f"Generator params tagged '{self.params.tag}', expected '{self.layout.tag}'")

    @staticmethod
    def build_architecture(pixels: int, noise_dim: int = 128, hidden: Sequence[int] = (64,)) -> DenseArchitecture:
        return DenseArchitecture(noise_dim, tuple(hidden), pixels, "relu", "sigmoid")

    @classmethod
    def initialize(cls, architecture: DenseArchitecture, seed: int) -> "GeneratorNet":
        return cls(architecture, init_dense(architecture, architecture.layout(cls.KIND), seed))

    @property
    def layout(self) -> ParamLayout:
        return self.architecture.layout(self.KIND)

    @property
    def noise_dim(self) -> int:
        return self.architecture.input_dim

    def with_params(self, params: ParamVector) -> "GeneratorNet":
        return replace(self, params=params)

    def generate(self, noise: np.ndarray) -> np.ndarray:
        return dense_forward(self.architecture, self.params.arrays(), noise)

    def sample(self, count: int, seed: int) -> np.ndarray:
        noise = make_rng(seed, "generator-noise").normal(size=(count, self.noise_dim))
        return self.generate(noise)


@dataclass(frozen=True)
class DiscriminatorNet:
    """D(x; theta_D): flattened image -> unbounded scalar score"""
    architecture: DenseArchitecture
    params: ParamVector

    KIND = "discriminator"

    def __post_init__(self):
        if self.architecture.output_dim != 1 or self.architecture.output_activation != "none":
            raise ValueError("Discriminator must have one output and no final nonlinearity")
        if self.params.tag != self.layout.tag:
            raise ValueError(f"Discriminator params tagged '{self.params.tag}', expected '{self.layout.tag}'")

    @staticmethod
    def build_architecture(pixels: int, hidden: Sequence[int] = (64, 32), slope: float = 0.2) -> DenseArchitecture:
        return DenseArchitecture(pixels, tuple(hidden), 1, "leaky_relu", "none", slope)

    @classmethod
    def initialize(cls, architecture: DenseArchitecture, seed: int) -> "DiscriminatorNet":
        return cls(architecture, init_dense(architecture, architecture.layout(cls.KIND), seed))

    @property
    def layout(self) -> ParamLayout:
        return self.architecture.layout(self.KIND)

    def with_params(self, params: ParamVector) -> "DiscriminatorNet":
        return replace(self, params=params)

    def score(self, images: np.ndarray) -> np.ndarray:
        return dense_forward(self.architecture, self.params.arrays(), images)[:, 0]


@dataclass(frozen=True)
class ClassifierNet:
    """Primary model: flattened image -> class logits"""
    architecture: DenseArchitecture
    params: ParamVector

    KIND = "classifier"

    def __post_init__(self):
        if self.params.tag != self.layout.tag:
            raise ValueError(f"Classifier params tagged '{self.params.tag}', expected '{self.layout.tag}'")

    @staticmethod
    def build_architecture(pixels: int, num_classes: int, hidden: Sequence[int] = (64,)) -> DenseArchitecture:
        return DenseArchitecture(pixels, tuple(hidden), num_classes, "relu", "none")

    @classmethod
    def initialize(cls, architecture: DenseArchitecture, seed: int) -> "ClassifierNet":
        return cls(architecture, init_dense(architecture, architecture.layout(cls.KIND), seed))

    @property
    def layout(self) -> ParamLayout:
        return self.architecture.layout(self.KIND)

    @property
    def num_classes(self) -> int:
        return self.architecture.output_dim

    def with_params(self, params: ParamVector) -> "ClassifierNet":
        return replace(self, params=params)

    def logits(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 2 or images.shape[1] != self.architecture.input_dim:
            raise ShapeError(f"Classifier expects (n, {self.architecture.input_dim}) inputs, got {images.shape}")
        return dense_forward(self.architecture, self.params.arrays(), images)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """argmax labels; np.argmax keeps the lowest index on ties"""
        return np.argmax(self.logits(images), axis=1)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.layout.tag.encode("utf-8") + self.params.values.tobytes()).hexdigest()[:16]


def classify(net: ClassifierNet, image: np.ndarray) -> Tuple[int, np.ndarray]:
    """Label and logits for one image (flattened or square)"""
    flat = np.asarray(image, dtype=np.float64).reshape(1, -1)
    if flat.shape[1] != net.architecture.input_dim:
        raise ShapeError(f"Image has {flat.shape[1]} pixels, classifier expects {net.architecture.input_dim}")
    logits = net.logits(flat)[0]
    return int(np.argmax(logits)), logits


def classifier_loss(net: ClassifierNet, images: np.ndarray, labels: np.ndarray) -> LossGraph:
    """Mean cross-entropy of softmax(logits) against one-hot labels"""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("Classifier loss needs a nonempty batch")
    graph = _classifier_graph(net.architecture)
    onehot = np.eye(net.num_classes)[np.asarray(labels, dtype=np.int64)]
    bindings = {"images": images, "onehot": onehot, "inv_count": 1.0 / images.shape[0]}
    bindings.update(_bind("C/", net.params))
    return LossGraph(graph, bindings, "loss", net.layout, "C/")


@lru_cache(maxsize=32)
def _classifier_graph(architecture: DenseArchitecture) -> Graph:
    graph = Graph()
    images = graph.input("images", (None, architecture.input_dim))
    onehot = graph.input("onehot", (None, architecture.output_dim))
    inv_count = graph.input("inv_count", ())
    leaves = dense_leaves(graph, architecture, architecture.layout(ClassifierNet.KIND), "C/", True)
    logits = dense_graph(graph, images, architecture, leaves).output
    log_probs = graph.log(graph.softmax(logits))
    total = graph.sum(graph.multiply(log_probs, onehot))
    graph.negate(graph.multiply(total, inv_count), name="loss")
    return graph


def train_classifier(population: Population, architecture: DenseArchitecture, seed: int,
                     epochs: int = 30, learning_rate: float = 0.1, batch_size: int = 32) -> ClassifierNet:
    """Central minibatch SGD on every example of a (clean) population"""
    images = np.concatenate([c.pixels for c in population])
    labels = np.concatenate([c.labels for c in population])
    net = ClassifierNet.initialize(architecture, seed)
    rng = make_rng(seed, "classifier-training")
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            loss, grad = classifier_loss(net, images[batch], labels[batch]).value_and_gradient()
            net = net.with_params(net.params - grad.scale(learning_rate))
            losses.append(loss)
        logger.debug(f"Classifier epoch {epoch + 1}/{epochs}: mean loss {np.mean(losses):.4f}")
    logger.info(f"Trained classifier on {len(labels)} examples: training accuracy "
                f"{classifier_accuracy(net, population):.4f}")
    return net


def classifier_accuracy(net: ClassifierNet, population: Population) -> float:
    correct = 0
    total = 0
    for client in population:
        correct += int(np.sum(net.predict(client.pixels) == client.labels))
        total += client.num_examples
    return correct / total if total else 0.0


# GAN losses

def _canonical_rows(batch: np.ndarray) -> np.ndarray:
    """Rows in lexicographic order, so pairing does not depend on batch order"""
    return batch[np.lexsort(batch.T[::-1])]


def interpolate_batches(batch_real: np.ndarray, batch_fake: np.ndarray, seed: int) -> np.ndarray:
    """Per-example random convex combination of paired real and fake rows"""
    real = _canonical_rows(np.asarray(batch_real, dtype=np.float64))
    fake = _canonical_rows(np.asarray(batch_fake, dtype=np.float64))
    weights = make_rng(seed, "gp-interpolation").uniform(size=(real.shape[0], 1))
    return weights * real + (1.0 - weights) * fake


def disc_loss(discriminator: DiscriminatorNet, batch_real: np.ndarray, batch_fake: np.ndarray,
              gp_weight: float, seed: int) -> LossGraph:
    """
    WGAN-GP discriminator loss.

    mean D(fake) - mean D(real) + gp_weight * mean (||grad_x D(x_hat)|| - 1)^2
    where x_hat interpolates real and fake examples with seeded coefficients.
    The input gradient is built inside the graph from the layer weights and
    leaky-relu derivative masks, so the penalty is differentiated exactly.
    """
    batch_real = np.asarray(batch_real, dtype=np.float64)
    batch_fake = np.asarray(batch_fake, dtype=np.float64)
    if batch_real.shape[0] == 0 or batch_fake.shape[0] == 0:
        raise ValueError("Discriminator loss needs nonempty batches")
    if batch_real.shape != batch_fake.shape:
        raise ValueError(f"Real and fake batches differ in shape: {batch_real.shape} vs {batch_fake.shape}")
    if gp_weight < 0:
        raise ValueError(f"Gradient penalty weight must be >= 0, got {gp_weight}")
    with_penalty = gp_weight > 0
    graph = _disc_graph(discriminator.architecture, with_penalty)
    bindings = {"real": batch_real, "fake": batch_fake}
    if with_penalty:
        bindings["interp"] = interpolate_batches(batch_real, batch_fake, seed)
        bindings["ones"] = np.ones((batch_real.shape[0], 1))
        bindings["gp_weight"] = float(gp_weight)
    bindings.update(_bind("D/", discriminator.params))
    return LossGraph(graph, bindings, "loss", discriminator.layout, "D/")


@lru_cache(maxsize=32)
def _disc_graph(architecture: DenseArchitecture, with_penalty: bool) -> Graph:
    graph = Graph()
    pixels = architecture.input_dim
    real = graph.input("real", (None, pixels))
    fake = graph.input("fake", (None, pixels))
    leaves = dense_leaves(graph, architecture, architecture.layout(DiscriminatorNet.KIND), "D/", True)
    fake_score = graph.mean(dense_graph(graph, fake, architecture, leaves).output, name="fake_score")
    real_score = graph.mean(dense_graph(graph, real, architecture, leaves).output, name="real_score")
    wasserstein = graph.subtract(fake_score, real_score, name="wasserstein")
    if not with_penalty:
        graph.add(wasserstein, graph.constant(0.0), name="loss")
        return graph

    interp = graph.input("interp", (None, pixels))
    ones = graph.input("ones", (None, 1))
    gp_weight = graph.input("gp_weight", ())
    nodes = dense_graph(graph, interp, architecture, leaves)
    slope = architecture.leaky_slope if architecture.hidden_activation == "leaky_relu" else 0.0
    # d score / d activations, walked back layer by layer
    upstream = graph.matmul(ones, nodes.weights[-1], transpose_b=True)
    for layer in reversed(range(len(nodes.preactivations))):
        mask = graph.leaky_relu_slope(nodes.preactivations[layer], slope)
        upstream = graph.matmul(graph.multiply(upstream, mask), nodes.weights[layer], transpose_b=True)
    norms = graph.l2_norm(upstream, axis=1, name="input_grad_norm")
    penalty = graph.mean(graph.power(graph.add(norms, graph.constant(-1.0)), 2.0), name="penalty")
    graph.add(wasserstein, graph.multiply(gp_weight, penalty), name="loss")
    return graph


def gen_loss(generator: GeneratorNet, discriminator: DiscriminatorNet, noise: np.ndarray) -> LossGraph:
    """
    Wasserstein generator loss -mean D(G(U)).

    theta_D is bound as a plain input, so gradients reach theta_G only.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 2 or noise.shape[0] == 0:
        raise ValueError("Generator loss needs a nonempty (n, n_U) noise batch")
    graph = _gen_graph(generator.architecture, discriminator.architecture)
    bindings = {"noise": noise}
    bindings.update(_bind("G/", generator.params))
    bindings.update(_bind("D/", discriminator.params))
    return LossGraph(graph, bindings, "loss", generator.layout, "G/")


@lru_cache(maxsize=32)
def _gen_graph(gen_architecture: DenseArchitecture, disc_architecture: DenseArchitecture) -> Graph:
    graph = Graph()
    noise = graph.input("noise", (None, gen_architecture.input_dim))
    gen_leaves = dense_leaves(graph, gen_architecture, gen_architecture.layout(GeneratorNet.KIND), "G/", True)
    disc_leaves = dense_leaves(graph, disc_architecture, disc_architecture.layout(DiscriminatorNet.KIND),
                               "D/", False)
    fake = dense_graph(graph, noise, gen_architecture, gen_leaves).output
    scores = dense_graph(graph, fake, disc_architecture, disc_leaves).output
    graph.negate(graph.mean(scores), name="loss")
    return graph


# Recurrent language models

@dataclass(frozen=True)
class RecurrentArchitecture:
    """Gated recurrent cell stack with token embeddings and a softmax head"""
    input_size: int
    output_size: int
    embedding_dim: int = 16
    hidden_dim: int = 32
    layers: int = 1

    def __post_init__(self):
        if min(self.input_size, self.output_size, self.embedding_dim, self.hidden_dim, self.layers) < 1:
            raise ValueError(f"Recurrent architecture sizes must be positive: {self}")

    def layout(self, kind: str) -> ParamLayout:
        e, h = self.embedding_dim, self.hidden_dim
        entries = [("E", (self.input_size, e))]
        for layer in range(self.layers):
            fan_in = (e if layer == 0 else h) + h
            for gate in ("z", "r", "c"):
                entries.append((f"W{gate}{layer}", (fan_in, h)))
                entries.append((f"b{gate}{layer}", (h,)))
        entries.append(("Wo", (h, self.output_size)))
        entries.append(("bo", (self.output_size,)))
        tag = f"{kind}:{self.input_size}-{self.output_size}-{e}-{h}-{self.layers}"
        return ParamLayout(tag, tuple(entries))

    def to_dict(self) -> Dict[str, Any]:
        return {"input_size": self.input_size, "output_size": self.output_size,
                "embedding_dim": self.embedding_dim, "hidden_dim": self.hidden_dim, "layers": self.layers}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RecurrentArchitecture":
        return cls(**{key: int(value) for key, value in data.items()})


@dataclass(frozen=True)
class RecurrentLm:
    """Autoregressive LM over a Vocabulary; never emits the start marker"""
    architecture: RecurrentArchitecture
    vocabulary: Vocabulary
    params: ParamVector

    KIND = "lm"

    def __post_init__(self):
        if self.architecture.input_size != self.vocabulary.input_size:
            raise ValueError("Architecture input size does not match the vocabulary")
        if self.architecture.output_size != self.vocabulary.output_size:
            raise ValueError("Architecture output size does not match the vocabulary")
        if self.params.tag != self.layout.tag:
            raise ValueError(f"LM params tagged '{self.params.tag}', expected '{self.layout.tag}'")

    @classmethod
    def initialize(cls, vocabulary: Vocabulary, seed: int, embedding_dim: int = 16, hidden_dim: int = 32,
                   layers: int = 1, zero: bool = False) -> "RecurrentLm":
        architecture = RecurrentArchitecture(vocabulary.input_size, vocabulary.output_size,
                                             embedding_dim, hidden_dim, layers)
        layout = architecture.layout(cls.KIND)
        if zero:
            return cls(architecture, vocabulary, ParamVector.zeros(layout))
        rng = make_rng(seed, "lm-init", layout.tag)
        arrays = {}
        for name, shape in layout.entries:
            if name == "E":
                arrays[name] = rng.normal(0.0, 0.1, size=shape)
            elif name.startswith("W"):
                arrays[name] = rng.normal(0.0, math.sqrt(1.0 / shape[0]), size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls(architecture, vocabulary, ParamVector.from_arrays(layout, arrays))

    @property
    def layout(self) -> ParamLayout:
        return self.architecture.layout(self.KIND)

    @property
    def eos_id(self) -> int:
        return self.vocabulary.eos_id

    @property
    def bos_id(self) -> int:
        return self.vocabulary.bos_id

    def with_params(self, params: ParamVector) -> "RecurrentLm":
        return replace(self, params=params)

    def initial_state(self, batch: int) -> List[np.ndarray]:
        return [np.zeros((batch, self.architecture.hidden_dim)) for _ in range(self.architecture.layers)]

    def step(self, arrays: Mapping[str, np.ndarray], tokens: np.ndarray,
             state: List[np.ndarray]) -> Tuple[List[np.ndarray], np.ndarray]:
        """One cell step for a batch of token ids; returns new state and logits"""
        x = arrays["E"][tokens]
        new_state = []
        for layer, h in enumerate(state):
            xh = np.concatenate([x, h], axis=1)
            z = special.expit(xh @ arrays[f"Wz{layer}"] + arrays[f"bz{layer}"])
            r = special.expit(xh @ arrays[f"Wr{layer}"] + arrays[f"br{layer}"])
            c = np.tanh(np.concatenate([x, r * h], axis=1) @ arrays[f"Wc{layer}"] + arrays[f"bc{layer}"])
            h = h + z * (c - h)
            new_state.append(h)
            x = h
        return new_state, x @ arrays["Wo"] + arrays["bo"]

    def encode_example(self, tokens: Sequence[str]) -> List[int]:
        return self.vocabulary.encode(tokens)


class CharLm(RecurrentLm):
    """Character-level LM over a character vocabulary plus word start/end markers"""
    KIND = "char_lm"

    def __post_init__(self):
        super().__post_init__()
        if not self.vocabulary.character_level:
            raise ValueError("CharLm needs a character-level vocabulary")


class WordLm(RecurrentLm):
    """Word-level LM over a fixed vocabulary with a distinguished OOV id"""
    KIND = "word_lm"

    def __post_init__(self):
        super().__post_init__()
        if self.vocabulary.oov_id is None:
            raise ValueError("WordLm needs a vocabulary with an OOV id")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - special.logsumexp(logits, axis=-1, keepdims=True)


def _validate_ids(lm: RecurrentLm, ids: Sequence[int]) -> List[int]:
    checked = []
    for token_id in ids:
        token_id = int(token_id)
        if not 0 <= token_id < lm.vocabulary.output_size:
            raise ValueError(f"Token id {token_id} is outside the vocabulary (emittable ids 0..{lm.vocabulary.output_size - 1})")
        checked.append(token_id)
    return checked


def lm_next_dist(lm: RecurrentLm, prefix: Sequence[int]) -> np.ndarray:
    """
    p(x_{i+1} | x_i, ..., x_0) over every emittable id.

    The start marker is implicit and the result is strictly positive.
    """
    prefix = _validate_ids(lm, prefix)
    arrays = lm.params.arrays()
    state = lm.initial_state(1)
    logits = None
    for token in [lm.bos_id] + prefix:
        state, logits = lm.step(arrays, np.array([token]), state)
    probs = np.exp(_log_softmax(logits[0]))
    if np.any(probs <= 0):
        probs = np.maximum(probs, np.finfo(np.float64).tiny)
    return probs / probs.sum()


def lm_log_joint_prob(lm: RecurrentLm, sequence: Sequence[int]) -> float:
    """Sum of log conditionals; the end marker is appended when missing"""
    ids = _validate_ids(lm, sequence)
    if not ids or ids[-1] != lm.eos_id:
        ids.append(lm.eos_id)
    if lm.eos_id in ids[:-1]:
        raise ValueError("End marker may only appear as the last token")
    arrays = lm.params.arrays()
    state = lm.initial_state(1)
    total = 0.0
    previous = lm.bos_id
    for token in ids:
        state, logits = lm.step(arrays, np.array([previous]), state)
        total += float(_log_softmax(logits[0])[token])
        previous = token
    return total


def lm_joint_prob(lm: RecurrentLm, sequence: Sequence[int]) -> float:
    """p(x_0) * prod p(x_{i+1} | x_i..x_0), accumulated in log space"""
    return math.exp(lm_log_joint_prob(lm, sequence))


def _draw(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(probs, axis=-1)
    targets = uniforms[:, None] * cumulative[:, -1:]
    choice = np.sum(cumulative <= targets, axis=-1)
    return np.minimum(choice, probs.shape[-1] - 1)


def lm_sample(lm: RecurrentLm, seed: int, max_len: int) -> List[int]:
    """
    Ancestral sample of at most max_len tokens.

    Stops after the end marker, which is included in the result when drawn.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    rng = make_rng(seed, "lm-sample")
    arrays = lm.params.arrays()
    state = lm.initial_state(1)
    token = lm.bos_id
    sequence: List[int] = []
    for _ in range(max_len):
        state, logits = lm.step(arrays, np.array([token]), state)
        probs = np.exp(_log_softmax(logits))
        token = int(_draw(probs, rng.random(1))[0])
        sequence.append(token)
        if token == lm.eos_id:
            break
    return sequence


def lm_sample_many(lm: RecurrentLm, num_samples: int, seed: int, max_len: int) -> List[List[int]]:
    """Batched ancestral sampling; one seeded stream drives every row"""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    rng = make_rng(seed, "lm-sample-many")
    arrays = lm.params.arrays()
    state = lm.initial_state(num_samples)
    tokens = np.full(num_samples, lm.bos_id)
    active = np.ones(num_samples, dtype=bool)
    sequences: List[List[int]] = [[] for _ in range(num_samples)]
    for _ in range(max_len):
        state, logits = lm.step(arrays, tokens, state)
        tokens = _draw(np.exp(_log_softmax(logits)), rng.random(num_samples))
        for row in np.flatnonzero(active):
            sequences[row].append(int(tokens[row]))
        active &= tokens != lm.eos_id
        if not active.any():
            break
    return sequences


def lm_loss(lm: RecurrentLm, sequences: Sequence[Sequence[int]]) -> LossGraph:
    """
    Mean next-token cross-entropy of a batch of id sequences.

    Inputs are the start marker followed by the sequence, targets are the
    sequence followed by the end marker; padding positions carry no loss.
    """
    if not sequences:
        raise ValueError("LM loss needs a nonempty batch")
    batch = [_validate_ids(lm, s) for s in sequences]
    steps = max(len(s) for s in batch) + 1
    graph = _lm_graph(lm.architecture, steps)
    vocab = lm.vocabulary
    inputs = np.zeros((steps, len(batch), vocab.input_size))
    targets = np.zeros((steps, len(batch), vocab.output_size))
    count = 0
    for row, ids in enumerate(batch):
        source = [lm.bos_id] + ids
        target = ids + [lm.eos_id]
        for t in range(len(source)):
            inputs[t, row, source[t]] = 1.0
            targets[t, row, target[t]] = 1.0
            count += 1
    bindings: Dict[str, Any] = {"inv_count": 1.0 / count}
    for t in range(steps):
        bindings[f"x{t}"] = inputs[t]
        bindings[f"y{t}"] = targets[t]
    for layer in range(lm.architecture.layers):
        bindings[f"h0_{layer}"] = np.zeros((len(batch), lm.architecture.hidden_dim))
    bindings.update(_bind("L/", lm.params))
    return LossGraph(graph, bindings, "loss", lm.layout, "L/")


@lru_cache(maxsize=64)
def _lm_graph(architecture: RecurrentArchitecture, steps: int) -> Graph:
    graph = Graph()
    h_dim = architecture.hidden_dim
    leaves = {name: graph.param(f"L/{name}", shape) for name, shape in architecture.layout(RecurrentLm.KIND).entries}
    inv_count = graph.input("inv_count", ())
    state = [graph.input(f"h0_{layer}", (None, h_dim)) for layer in range(architecture.layers)]
    step_terms = []
    for t in range(steps):
        x = graph.matmul(graph.input(f"x{t}", (None, architecture.input_size)), leaves["E"])
        target = graph.input(f"y{t}", (None, architecture.output_size))
        new_state = []
        for layer, h in enumerate(state):
            xh = graph.concat([x, h], axis=1)
            z = graph.sigmoid(graph.affine(xh, leaves[f"Wz{layer}"], leaves[f"bz{layer}"]))
            r = graph.sigmoid(graph.affine(xh, leaves[f"Wr{layer}"], leaves[f"br{layer}"]))
            candidate_in = graph.concat([x, graph.multiply(r, h)], axis=1)
            c = graph.tanh(graph.affine(candidate_in, leaves[f"Wc{layer}"], leaves[f"bc{layer}"]))
            h = graph.add(h, graph.multiply(z, graph.subtract(c, h)))
            new_state.append(h)
            x = h
        state = new_state
        logits = graph.affine(x, leaves["Wo"], leaves["bo"])
        log_probs = graph.log(graph.softmax(logits))
        step_terms.append(graph.sum(graph.multiply(log_probs, target)))
    total = step_terms[0]
    for term in step_terms[1:]:
        total = graph.add(total, term)
    graph.negate(graph.multiply(total, inv_count), name="loss")
    return graph


# Federated training adapters

class ClassifierTrainer:
    """Per-client supervised objective for DP-FedAvg on image populations"""

    def __init__(self, template: ClassifierNet):
        self.template = template

    @property
    def layout(self) -> ParamLayout:
        return self.template.layout

    def num_examples(self, client: ClientDataset) -> int:
        return client.num_examples

    def loss_and_grad(self, params: ParamVector, client: ClientDataset,
                      indices: Sequence[int]) -> Tuple[float, ParamVector]:
        net = self.template.with_params(params)
        return classifier_loss(net, client.pixels[list(indices)], client.labels[list(indices)]).value_and_gradient()


class LanguageModelTrainer:
    """Per-client next-token objective for DP-FedAvg on text populations"""

    def __init__(self, template: RecurrentLm):
        self.template = template

    @property
    def layout(self) -> ParamLayout:
        return self.template.layout

    def num_examples(self, client: ClientDataset) -> int:
        return client.num_examples

    def encode(self, client: ClientDataset) -> List[List[int]]:
        return [self.template.encode_example(s) for s in client.sentences]

    def loss_and_grad(self, params: ParamVector, client: ClientDataset,
                      indices: Sequence[int]) -> Tuple[float, ParamVector]:
        lm = self.template.with_params(params)
        encoded = self.encode(client)
        return lm_loss(lm, [encoded[i] for i in indices]).value_and_gradient()


# Checkpoints

ModelType = Union[GeneratorNet, DiscriminatorNet, ClassifierNet, RecurrentLm]

_DENSE_KINDS = {cls.KIND: cls for cls in (GeneratorNet, DiscriminatorNet, ClassifierNet)}
_LM_KINDS = {cls.KIND: cls for cls in (RecurrentLm, CharLm, WordLm)}


def checkpoint_payload(model: ModelType) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": model.KIND,
        "architecture": model.architecture.to_dict(),
        "layout": model.layout.to_dict(),
        "params": model.params.values.tolist(),
    }
    if isinstance(model, RecurrentLm):
        payload["vocabulary"] = model.vocabulary.to_dict()
    return payload


def save_checkpoint(model: ModelType, path: Union[str, Path]) -> Path:
    """Write a versioned JSON checkpoint; floats round-trip exactly"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(checkpoint_payload(model), f)
    logger.info(f"Saved {model.KIND} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelType:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format version {version} in {path}")
    kind = payload["kind"]
    layout = ParamLayout.from_dict(payload["layout"])
    params = ParamVector(np.asarray(payload["params"], dtype=np.float64), layout)
    if kind in _DENSE_KINDS:
        return _DENSE_KINDS[kind](DenseArchitecture.from_dict(payload["architecture"]), params)
    if kind in _LM_KINDS:
        return _LM_KINDS[kind](RecurrentArchitecture.from_dict(payload["architecture"]),
                               Vocabulary.from_dict(payload["vocabulary"]), params)
    raise ValueError(f"Unknown checkpoint kind '{kind}' in {path}")
