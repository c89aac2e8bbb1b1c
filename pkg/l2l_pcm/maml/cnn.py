"""
Four-block convolutional few-shot classifier for l2l-pcm.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from l2l_pcm.config import AnalogConfig
from l2l_pcm.deploy.deployment import Deployment, layer_matrix
from l2l_pcm.deploy.im2col import im2col
from l2l_pcm.deploy.placement import cnn_layers, plan_placement
from l2l_pcm.grad.primitives import PRIMITIVES
from l2l_pcm.grad.tape import Tape, Tensor
from l2l_pcm.utils.persistence import MetricsSink

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

Quantizer = Callable[[Tape, Tensor], Tensor]


@dataclass
class CnnParams:
    """
    Weights of the classifier: per block a (3, 3, C, F) kernel, bias and
    batchnorm scale/shift; then a (F, classes) dense layer without bias.
    """

    conv_w: List[np.ndarray]
    conv_b: List[np.ndarray]
    bn_gamma: List[np.ndarray]
    bn_beta: List[np.ndarray]
    dense: np.ndarray

    @property
    def blocks(self) -> int:
        return len(self.conv_w)

    @property
    def filters(self) -> int:
        return int(self.dense.shape[0])

    @property
    def classes(self) -> int:
        return int(self.dense.shape[1])

    def as_dict(self) -> Dict[str, np.ndarray]:
        """Flat name -> tensor table (checkpoint and tape parameter names)."""
        table: Dict[str, np.ndarray] = {}
        for i in range(self.blocks):
            table[f"conv{i + 1}.w"] = self.conv_w[i]
            table[f"conv{i + 1}.b"] = self.conv_b[i]
            table[f"bn{i + 1}.gamma"] = self.bn_gamma[i]
            table[f"bn{i + 1}.beta"] = self.bn_beta[i]
        table["dense.w"] = self.dense
        return table

    @classmethod
    def from_dict(cls, table: Dict[str, np.ndarray]) -> "CnnParams":
        blocks = sum(
            1 for name in table if name.endswith(".w") and name.startswith("conv")
        )

        def pick(fmt):
            return [
                np.asarray(table[fmt.format(i + 1)], dtype=np.float32)
                for i in range(blocks)
            ]

        return cls(
            conv_w=pick("conv{}.w"),
            conv_b=pick("conv{}.b"),
            bn_gamma=pick("bn{}.gamma"),
            bn_beta=pick("bn{}.beta"),
            dense=np.asarray(table["dense.w"], dtype=np.float32),
        )

    def copy(self) -> "CnnParams":
        return CnnParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})

    def fingerprint(self, prefix: str = "conv") -> str:
        """SHA-256 over every tensor whose name starts with ``prefix``."""
        digest = hashlib.sha256()
        for name, value in sorted(self.as_dict().items()):
            if name.startswith(prefix):
                digest.update(name.encode("utf-8"))
                digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_cnn(
    rng: np.random.Generator,
    filters: int = 56,
    channels: int = 1,
    classes: int = 5,
    blocks: int = 4,
) -> CnnParams:
    """
    Kaiming-uniform kernels and dense weights, zero biases, unit batchnorm scale.

    Args:
        rng: Seeded generator
        filters: Filters per block (also the feature count)
        channels: Input channels
        classes: Output classes N
        blocks: Conv blocks

    Returns:
        params: Fresh parameters
    """
    conv_w, conv_b, gamma, beta = [], [], [], []
    c = channels
    for _ in range(blocks):
        conv_w.append(_kaiming_uniform(rng, (3, 3, c, filters), 9 * c))
        conv_b.append(np.zeros(filters, dtype=np.float32))
        gamma.append(np.ones(filters, dtype=np.float32))
        beta.append(np.zeros(filters, dtype=np.float32))
        c = filters
    dense = _kaiming_uniform(rng, (filters, classes), filters)
    return CnnParams(conv_w, conv_b, gamma, beta, dense)


def build_features(
    tape: Tape,
    params: Dict[str, Tensor],
    x: Tensor,
    blocks: int,
    quantizer: Optional[Quantizer] = None,
) -> Tensor:
    """
    Record conv -> relu -> batchnorm per block, then global max-pool.

    Args:
        tape: Tape to record on
        params: Tape tensors named as in ``CnnParams.as_dict``
        x: (B, H, W, C) images
        blocks: Number of conv blocks
        quantizer: Applied to kernels and biases before use (4-bit mode)

    Returns:
        features: (B, filters)
    """
    h = x
    for i in range(1, blocks + 1):
        w, b = params[f"conv{i}.w"], params[f"conv{i}.b"]
        if quantizer is not None:
            w, b = quantizer(tape, w), quantizer(tape, b)
        h = tape.conv2d(h, w, b, stride=2, padding="same")
        h = tape.relu(h)
        h = tape.batchnorm(h, params[f"bn{i}.gamma"], params[f"bn{i}.beta"])
    return tape.global_maxpool(h)


def delta_rule(
    tape: Tape,
    features: Tensor,
    dense: Tensor,
    labels: Tensor,
    lr: float,
    first_order: bool = False,
    quantizer: Optional[Quantizer] = None,
) -> Tensor:
    """
    One inner update of the dense layer, recorded as a differentiable node.

    W' = W - lr * h^T (softmax(h W) - y) / B, i.e. the mean over the batch of
    lr * (y - f) h, which is exactly a gradient step on the softmax
    cross-entropy.
    """
    w = quantizer(tape, dense) if quantizer is not None else dense
    probs = tape.softmax(tape.matmul(features, w))
    batch = tape.value(features).shape[0]
    error = tape.sub(probs, labels)
    grad = tape.scale(tape.matmul(tape.transpose(features), error), 1.0 / batch)
    return tape.weight_update(dense, grad, lr=lr, first_order=first_order)


def delta_update(
    features: np.ndarray,
    dense: np.ndarray,
    labels: np.ndarray,
    lr: float,
    logits: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    The delta-rule increment lr * mean_d (y - f) h^T as plain numpy.

    Args:
        features: (B, F) activations h
        dense: (F, N) current weights (used when ``logits`` is None)
        labels: (B, N) one-hot targets y
        lr: Step size alpha
        logits: Precomputed h W (e.g. read from a crossbar)

    Returns:
        delta: (F, N) increment to add to the weights
    """
    z = features @ dense if logits is None else logits
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    return lr * features.T @ (labels - probs) / features.shape[0]


def software_features(
    params: CnnParams, x: np.ndarray, quantizer: Optional[Quantizer] = None
) -> np.ndarray:
    """Evaluate the feature extractor once (no gradients kept)."""
    tape = Tape(np.float32)
    tensors = {
        name: tape.constant(value, name) for name, value in params.as_dict().items()
    }
    features = build_features(tape, tensors, tape.input(x), params.blocks, quantizer)
    return features.data.copy()


class CrossbarCnn:
    """
    The classifier deployed on crossbar cores.

    Conv layers run as im2col MVMs with a bias row, batchnorm stays digital
    and the dense layer is reprogrammed whenever its weights change.
    """

    def __init__(self, params: CnnParams, deployment: Deployment):
        """
        Initialize the CrossbarCnn.

        Args:
            params: Parameters the deployment was programmed with
            deployment: Programmed deployment of every layer
        """
        self.params = params
        self.deployment = deployment
        logger.info(
            "CrossbarCnn initialized with %d blocks on %d cores",
            params.blocks,
            len(deployment.cores),
        )

    @classmethod
    def deploy(
        cls,
        params: CnnParams,
        config: Optional[AnalogConfig] = None,
        rngs: Optional[Sequence[np.random.Generator]] = None,
        sink: Optional[MetricsSink] = None,
        context: Optional[dict] = None,
    ) -> "CrossbarCnn":
        """
        Place and program all layers (conv kernels with bias rows, dense).

        ``context`` columns are written with every device event.
        """
        config = config or AnalogConfig()
        channels = int(params.conv_w[0].shape[2])
        layers = cnn_layers(params.filters, channels, params.classes, params.blocks)
        plan = plan_placement(layers, config.cores)
        deployment = Deployment(plan, config, rngs, sink, context)
        for i in range(params.blocks):
            matrix = layer_matrix(params.conv_w[i], params.conv_b[i])
            deployment.program_layer(f"conv{i + 1}", matrix)
        deployment.program_layer("dense", layer_matrix(params.dense))
        return cls(params, deployment)

    def features(self, x: np.ndarray) -> np.ndarray:
        """(B, H, W, C) images -> (B, filters) features computed on the cores."""
        batchnorm = PRIMITIVES["batchnorm"]
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.params.blocks):
            buf = im2col(h, kernel=3, stride=2, padding="same")
            y = self.deployment.dispatch_mvm(f"conv{i + 1}", buf.patches)
            y = np.maximum(y.reshape(buf.batch, buf.out_height, buf.out_width, -1), 0.0)
            gamma = self.params.bn_gamma[i].astype(np.float64)
            beta = self.params.bn_beta[i].astype(np.float64)
            h, _ = batchnorm.forward([y, gamma, beta], {})
        return h.max(axis=(1, 2))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.deployment.dispatch_mvm("dense", features)

    def set_dense(self, dense: np.ndarray) -> None:
        """Reprogram only the dense layer."""
        self.deployment.reprogram_region("dense", layer_matrix(dense))

    def read_dense(self) -> np.ndarray:
        return self.deployment.read_layer("dense")
