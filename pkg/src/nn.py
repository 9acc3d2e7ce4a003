"""
Neural Network Component for advspeech
Small NHWC conv/dense engine with hand-derived gradients, Adam and ANN1 checkpoints
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm.auto import trange

from .errors import DivergenceError, DomainError, FormatError, ShapeError, StateError
from .seeding import hash_bytes

# Tensors are numpy arrays: batch-first, NHWC for conv stacks
Tensor = np.ndarray
Shape = Tuple[Optional[int], ...]

LAYER_KINDS = ("conv2d", "maxpool2d", "dense", "flatten", "frame_flatten", "relu", "selu", "linear", "softmax")
CHECKPOINT_MAGIC = b"ANN1"

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

logger = logging.getLogger("NN")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network: kind plus its size, receptive field or pool window"""

    kind: str
    size: int = 0
    kernel: Tuple[int, int] = (1, 1)
    pool: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"Unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "pool", tuple(int(p) for p in self.pool))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if self.stride != (1, 1):
            raise ShapeError("Only stride (1, 1) is supported")
        if self.kind in ("conv2d", "dense") and self.size < 1:
            raise ShapeError(f"{self.kind} needs size >= 1, got {self.size}")
        if min(self.kernel) < 1 or min(self.pool) < 1:
            raise ShapeError(f"Kernel and pool dims must be >= 1 ({self.kernel}, {self.pool})")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "size": self.size, "kernel": list(self.kernel),
                "pool": list(self.pool), "stride": list(self.stride)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        return cls(data["kind"], int(data.get("size", 0)), tuple(data.get("kernel", (1, 1))),
                   tuple(data.get("pool", (1, 1))), tuple(data.get("stride", (1, 1))))


def conv2d(size: int, kernel=(2, 2)) -> LayerSpec:
    return LayerSpec("conv2d", size=size, kernel=kernel)


def maxpool2d(pool) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=pool)


def dense(size: int) -> LayerSpec:
    return LayerSpec("dense", size=size)


def activation(kind: str) -> LayerSpec:
    return LayerSpec(kind)


# ---------------------------------------------------------------------------
# Layers

class Layer:
    """Base layer: parameter-free identity"""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: List[np.ndarray] = []
        self.grads: List[np.ndarray] = []
        self._cache: Any = None

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def init_params(self, in_shape: Shape, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: Tensor) -> Tensor:
        return x

    def backward(self, grad: Tensor) -> Tensor:
        return grad

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.spec.kind} backward called before forward")
        return self._cache


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2D(Layer):
    """Valid cross-correlation, stride 1; weights (m, r, C_in, C_out)"""

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects (T, F, C) input, got {in_shape}")
        t, f, _ = in_shape
        m, r = self.spec.kernel
        if (t is not None and m > t) or (f is None or r > f):
            raise ShapeError(f"Receptive field {self.spec.kernel} does not fit input {in_shape}")
        return (None if t is None else t - m + 1, f - r + 1, self.spec.size)

    def init_params(self, in_shape: Shape, rng: np.random.Generator) -> None:
        m, r = self.spec.kernel
        c_in = in_shape[2]
        self.params = [_he_uniform(rng, (m, r, c_in, self.spec.size), m * r * c_in),
                       np.zeros(self.spec.size)]

    def forward(self, x: Tensor) -> Tensor:
        m, r = self.spec.kernel
        if x.shape[1] < m or x.shape[2] < r:
            raise ShapeError(f"Input {x.shape[1:]} smaller than receptive field {self.spec.kernel}")
        weight, bias = self.params
        h_out, w_out = x.shape[1] - m + 1, x.shape[2] - r + 1
        # one matmul per kernel offset; no im2col buffer
        out = np.zeros((x.shape[0], h_out, w_out, self.spec.size)) + bias
        for i in range(m):
            for j in range(r):
                out += x[:, i:i + h_out, j:j + w_out, :] @ weight[i, j]
        self._cache = x
        return out

    def backward(self, grad: Tensor) -> Tensor:
        x = self._require_cache()
        weight, _ = self.params
        m, r = self.spec.kernel
        c_in = x.shape[3]
        h_out, w_out = grad.shape[1], grad.shape[2]
        flat_grad = grad.reshape(-1, grad.shape[3])
        grad_w = np.zeros_like(weight)
        grad_x = np.zeros_like(x)
        for i in range(m):
            for j in range(r):
                patch = x[:, i:i + h_out, j:j + w_out, :]
                grad_w[i, j] = patch.reshape(-1, c_in).T @ flat_grad
                grad_x[:, i:i + h_out, j:j + w_out, :] += grad @ weight[i, j].T
        self.grads = [grad_w, grad.sum(axis=(0, 1, 2))]
        return grad_x


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped"""

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects (T, F, C) input, got {in_shape}")
        t, f, c = in_shape
        p, q = self.spec.pool
        t_out = None if t is None else t // p
        if (t_out is not None and t_out < 1) or f is None or f // q < 1:
            raise ShapeError(f"Pool window {self.spec.pool} larger than input {in_shape}")
        return (t_out, f // q, c)

    @property
    def is_identity(self) -> bool:
        return self.spec.pool == (1, 1)

    def forward(self, x: Tensor) -> Tensor:
        if self.is_identity:
            self._cache = ()
            return x
        p, q = self.spec.pool
        n, h, w, c = x.shape
        h_out, w_out = h // p, w // q
        if h_out < 1 or w_out < 1:
            raise ShapeError(f"Pool window {self.spec.pool} larger than input {x.shape[1:]}")
        blocks = (x[:, : h_out * p, : w_out * q, :]
                  .reshape(n, h_out, p, w_out, q, c)
                  .transpose(0, 1, 3, 5, 2, 4)
                  .reshape(n, h_out, w_out, c, p * q))
        winner = blocks.argmax(axis=-1)
        self._cache = (x.shape, winner)
        return np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(self, grad: Tensor) -> Tensor:
        cache = self._require_cache()
        if self.is_identity:
            return grad
        in_shape, winner = cache
        p, q = self.spec.pool
        n, h_out, w_out, c = grad.shape
        grad_blocks = np.zeros((n, h_out, w_out, c, p * q))
        np.put_along_axis(grad_blocks, winner[..., None], grad[..., None], axis=-1)
        grad_x = np.zeros(in_shape)
        grad_x[:, : h_out * p, : w_out * q, :] = (grad_blocks
                                                 .reshape(n, h_out, w_out, c, p, q)
                                                 .transpose(0, 1, 4, 2, 5, 3)
                                                 .reshape(n, h_out * p, w_out * q, c))
        return grad_x


class Flatten(Layer):
    def output_shape(self, in_shape: Shape) -> Shape:
        if any(d is None for d in in_shape):
            raise ShapeError(f"flatten needs a fully known input shape, got {in_shape}")
        return (int(np.prod(in_shape)),)

    def forward(self, x: Tensor) -> Tensor:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Tensor) -> Tensor:
        return grad.reshape(self._require_cache())


class FrameFlatten(Layer):
    """(N, T, F, C) -> (N, T, F*C): keeps the time axis for per-frame outputs"""

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[1] is None or in_shape[2] is None:
            raise ShapeError(f"frame_flatten expects (T, F, C) input, got {in_shape}")
        return (in_shape[0], in_shape[1] * in_shape[2])

    def forward(self, x: Tensor) -> Tensor:
        self._cache = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1)

    def backward(self, grad: Tensor) -> Tensor:
        return grad.reshape(self._require_cache())


class Dense(Layer):
    """y = x W + b over the last axis; weights (F_in, F_out)"""

    def output_shape(self, in_shape: Shape) -> Shape:
        if not in_shape or in_shape[-1] is None:
            raise ShapeError(f"dense needs a known last dimension, got {in_shape}")
        return tuple(in_shape[:-1]) + (self.spec.size,)

    def init_params(self, in_shape: Shape, rng: np.random.Generator) -> None:
        fan_in = in_shape[-1]
        self.params = [_he_uniform(rng, (fan_in, self.spec.size), fan_in), np.zeros(self.spec.size)]

    def forward(self, x: Tensor) -> Tensor:
        weight, bias = self.params
        self._cache = x
        return x @ weight + bias

    def backward(self, grad: Tensor) -> Tensor:
        x = self._require_cache()
        weight, _ = self.params
        flat_x = x.reshape(-1, x.shape[-1])
        flat_g = grad.reshape(-1, grad.shape[-1])
        self.grads = [flat_x.T @ flat_g, flat_g.sum(axis=0)]
        return grad @ weight.T


class ReLU(Layer):
    def forward(self, x: Tensor) -> Tensor:
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad: Tensor) -> Tensor:
        return grad * self._require_cache()


class SELU(Layer):
    def forward(self, x: Tensor) -> Tensor:
        self._cache = x
        return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))

    def backward(self, grad: Tensor) -> Tensor:
        x = self._require_cache()
        return grad * SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


class Softmax(Layer):
    """Softmax over the last axis"""

    def forward(self, x: Tensor) -> Tensor:
        out = softmax(x)
        self._cache = out
        return out

    def backward(self, grad: Tensor) -> Tensor:
        s = self._require_cache()
        return s * (grad - np.sum(grad * s, axis=-1, keepdims=True))


_LAYER_TYPES = {
    "conv2d": Conv2D,
    "maxpool2d": MaxPool2D,
    "dense": Dense,
    "flatten": Flatten,
    "frame_flatten": FrameFlatten,
    "relu": ReLU,
    "selu": SELU,
    "linear": Layer,
    "softmax": Softmax,
}


def softmax(x: Tensor) -> Tensor:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_softmax_backward(grad_log_probs: Tensor, log_probs: Tensor) -> Tensor:
    """Map dLoss/dlog_softmax(z) to dLoss/dz"""
    return grad_log_probs - np.exp(log_probs) * np.sum(grad_log_probs, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Network

class Gradients(NamedTuple):
    params: List[List[np.ndarray]]
    input: np.ndarray


class Network:
    """Ordered layers with shapes validated symbolically at build time"""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Shape, rng_seed: int = 0):
        self.specs = list(specs)
        self.input_shape: Shape = tuple(input_shape)
        self.rng_seed = int(rng_seed)
        self.layers: List[Layer] = [_LAYER_TYPES[s.kind](s) for s in self.specs]
        self.shapes: List[Shape] = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))
        rng = np.random.default_rng(self.rng_seed)
        for layer, in_shape in zip(self.layers, self.shapes[:-1]):
            layer.init_params(in_shape, rng)
        self._has_cache = False

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def parameter_count(self) -> int:
        return int(sum(p.size for layer in self.layers for p in layer.params))

    def _check_input(self, x: Tensor) -> None:
        expected = self.input_shape
        actual = x.shape[1:]
        if len(actual) != len(expected) or any(e is not None and e != a for e, a in zip(expected, actual)):
            raise ShapeError(f"Input shape {actual} does not match network input {expected}")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out)
        self._has_cache = True
        return out

    def forward_logits(self, x: Tensor) -> Tensor:
        """Forward pass stopping before a final softmax; pair with backward(wrt='logits')"""
        if not isinstance(self.layers[-1], Softmax):
            raise StateError("forward_logits needs a network ending in softmax")
        self._check_input(x)
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers[:-1]:
            out = layer.forward(out)
        self._has_cache = True
        return out

    def backward(self, loss_grad: Tensor, wrt: str = "output") -> Gradients:
        """Backpropagate dLoss/d(output), or dLoss/d(logits) with wrt='logits' (skips a final softmax)"""
        if not self._has_cache:
            raise StateError("backward called before forward")
        layers = self.layers
        if wrt == "logits":
            if not isinstance(layers[-1], Softmax):
                raise StateError("wrt='logits' needs a network ending in softmax")
            layers = layers[:-1]
        elif wrt != "output":
            raise DomainError(f"wrt must be 'output' or 'logits', got {wrt!r}")
        grad = loss_grad
        for layer in reversed(layers):
            grad = layer.backward(grad)
        if wrt == "logits":
            self.layers[-1].grads = []
        return Gradients([list(layer.grads) for layer in self.layers], grad)

    def weights(self) -> List[List[np.ndarray]]:
        return [layer.params for layer in self.layers]

    def clone(self) -> "Network":
        """Independent copy with value-copied weights and no forward cache"""
        twin = Network.__new__(Network)
        twin.specs = list(self.specs)
        twin.input_shape = self.input_shape
        twin.rng_seed = self.rng_seed
        twin.shapes = list(self.shapes)
        twin.layers = []
        for layer in self.layers:
            copy = type(layer)(layer.spec)
            copy.params = [p.copy() for p in layer.params]
            twin.layers.append(copy)
        twin._has_cache = False
        return twin

    def describe(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [s.to_dict() for s in self.specs],
            "rng_seed": self.rng_seed,
        }


# ---------------------------------------------------------------------------
# Loss and optimiser

def cross_entropy(probs: Tensor, label) -> Tuple[float, Tensor]:
    """Mean -log p[label] (floored at 1e-12) and its gradient w.r.t. pre-softmax logits"""
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    batch = probs[None, :] if single else probs
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape[0] != batch.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {batch.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= batch.shape[1]):
        raise DomainError(f"Label out of range [0, {batch.shape[1]})")
    rows = np.arange(batch.shape[0])
    loss = float(np.mean(-np.log(np.maximum(batch[rows, labels], 1e-12))))
    grad = batch.copy()
    grad[rows, labels] -= 1.0
    grad /= batch.shape[0]
    return loss, (grad[0] if single else grad)


@dataclass
class AdamState:
    m: List[List[np.ndarray]]
    v: List[List[np.ndarray]]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: Network) -> "AdamState":
        return cls([[np.zeros_like(p) for p in layer.params] for layer in net.layers],
                   [[np.zeros_like(p) for p in layer.params] for layer in net.layers])


def sgd_adam_step(net: Network, grads: Sequence[Sequence[np.ndarray]], lr: float, state: AdamState) -> Network:
    """One Adam update of every parameter, in place"""
    if len(grads) != len(net.layers):
        raise ShapeError(f"{len(grads)} gradient groups for {len(net.layers)} layers")
    for li, (layer, layer_grads) in enumerate(zip(net.layers, grads)):
        if len(layer_grads) != len(layer.params):
            raise ShapeError(f"Layer {li}: {len(layer_grads)} gradients for {len(layer.params)} parameters")
        for p, g in zip(layer.params, layer_grads):
            if p.shape != g.shape:
                raise ShapeError(f"Layer {li}: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                logger.error(f"Non-finite gradient in layer {li} ({layer.spec.kind}) at step {state.step + 1}")
                raise DivergenceError(f"Non-finite gradient in layer {li} ({layer.spec.kind})")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for layer, layer_grads, ms, vs in zip(net.layers, grads, state.m, state.v):
        for p, g, m, v in zip(layer.params, layer_grads, ms, vs):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return net


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def fit_classifier(net: Network, inputs: np.ndarray, labels: np.ndarray, epochs: int, seed: int,
                   lr: float = 1e-3, batch_size: int = 16, progress: bool = False,
                   name: str = "classifier") -> List[EpochStats]:
    """Mini-batch Adam + cross-entropy; deterministic given seed and input order"""
    labels = np.asarray(labels, dtype=np.int64)
    if inputs.shape[0] != labels.shape[0]:
        raise ShapeError(f"{inputs.shape[0]} inputs for {labels.shape[0]} labels")
    rng = np.random.default_rng(seed)
    state = AdamState.for_network(net)
    curve: List[EpochStats] = []
    for epoch in trange(epochs, desc=f"train {name}", disable=not progress):
        order = rng.permutation(inputs.shape[0])
        total_loss = 0.0
        correct = 0
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            probs = net.forward(inputs[idx])
            loss, grad_logits = cross_entropy(probs, labels[idx])
            grads = net.backward(grad_logits, wrt="logits")
            sgd_adam_step(net, grads.params, lr, state)
            total_loss += loss * idx.size
            correct += int(np.sum(np.argmax(probs, axis=-1) == labels[idx]))
        stats = EpochStats(epoch + 1, total_loss / order.size, correct / order.size)
        curve.append(stats)
        logger.debug(f"{name} epoch {stats.epoch}: loss {stats.loss:.4f}, accuracy {stats.accuracy:.3f}")
    return curve


# ---------------------------------------------------------------------------
# Checkpoints

def checkpoint_bytes(net: Network, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    """ANN1: magic, uint32 descriptor length, JSON descriptor, then uint64-length-prefixed float32 blobs"""
    blobs = []
    entries = []
    for li, layer in enumerate(net.layers):
        for pi, p in enumerate(layer.params):
            blob = np.ascontiguousarray(p, dtype="<f4").tobytes()
            blobs.append(blob)
            entries.append({"layer": li, "index": pi, "shape": list(p.shape), "dtype": "float32",
                            "nbytes": len(blob)})
    descriptor = dict(net.describe(), params=entries, metadata=metadata or {})
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(desc)), desc]
    for blob in blobs:
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def network_from_bytes(blob: bytes) -> Tuple[Network, Dict[str, Any]]:
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("Not an ANN1 checkpoint")
    (desc_len,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + desc_len
    try:
        descriptor = json.loads(blob[8:offset].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Corrupt checkpoint descriptor: {e}") from e
    try:
        specs = [LayerSpec.from_dict(d) for d in descriptor["layers"]]
        input_shape = tuple(None if d is None else int(d) for d in descriptor["input_shape"])
        net = Network(specs, input_shape, descriptor.get("rng_seed", 0))
        entries = list(descriptor["params"])
    except (KeyError, TypeError, ValueError, ShapeError) as e:
        raise FormatError(f"Checkpoint descriptor does not describe a network: {e}") from e
    for entry in entries:
        if offset + 8 > len(blob):
            raise FormatError("Checkpoint truncated")
        (nbytes,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if nbytes != entry["nbytes"] or offset + nbytes > len(blob):
            raise FormatError(f"Checkpoint blob length mismatch for layer {entry['layer']}")
        values = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).astype(np.float64)
        offset += nbytes
        target = net.layers[entry["layer"]].params[entry["index"]]
        if target.shape != tuple(entry["shape"]):
            raise FormatError(f"Checkpoint shape {entry['shape']} != architecture shape {target.shape}")
        net.layers[entry["layer"]].params[entry["index"]] = values.reshape(target.shape)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in checkpoint")
    return net, descriptor.get("metadata", {})


def save_checkpoint(net: Network, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> str:
    """Write a checkpoint; returns its SHA-256"""
    blob = checkpoint_bytes(net, metadata)
    Path(path).write_bytes(blob)
    logger.info(f"Saved checkpoint {path} ({net.parameter_count()} parameters)")
    return hash_bytes(blob)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Network, Dict[str, Any]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Cannot read checkpoint {path}: {e}")
        raise FormatError(f"Cannot read checkpoint {path}: {e}") from e
    return network_from_bytes(blob)


def quantize_weights(net: Network) -> Network:
    """Round weights to float32 precision so the in-memory model equals its checkpoint"""
    for layer in net.layers:
        layer.params = [p.astype(np.float32).astype(np.float64) for p in layer.params]
    return net
