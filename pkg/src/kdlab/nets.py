"""Teacher and student networks with named tap points.

A network exposes three things a distillation loss can attach to: the class
logits, the embedding (the last hidden representation before the
classifier), and any intermediate feature maps declared as tap points.
The variance head is a train-only side branch off the embedding; dropping
it cannot change an inference output because nothing downstream reads it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Dense:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        scale = np.sqrt(2.0 / n_in)
        self.weight = Tensor(rng.normal(0.0, scale, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def buffers(self) -> list[np.ndarray]:
        return []


class Relu:
    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return T.relu(x)

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []


class BatchNorm:
    """1-D batch normalization with running statistics.

    Training mode normalizes with batch statistics and updates the running
    buffers (momentum 0.1); evaluation mode applies the affine map built
    from the running statistics, so gradients still reach gamma/beta there.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, gamma_init: float = 1.0):
        self.gamma = Tensor(np.full(dim, float(gamma_init)), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        if train:
            out = T.batchnorm(x, self.gamma, self.beta, eps=self.eps)
            n = x.shape[0]
            bmean = x.data.mean(axis=0)
            bvar = x.data.var(axis=0)
            unbiased = bvar * n / (n - 1)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * bmean
            self.running_var = (1.0 - m) * self.running_var + m * unbiased
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        a = T.mul(self.gamma, Tensor(inv))
        b = T.sub(self.beta, T.mul(a, Tensor(self.running_mean)))
        return T.add(T.mul(x, a), b)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[np.ndarray]:
        return [self.running_mean, self.running_var]

    def set_buffers(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = np.asarray(mean, dtype=np.float64)
        self.running_var = np.asarray(var, dtype=np.float64)


class Conv2d:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3, padding: int = 1):
        scale = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = Tensor(rng.normal(0.0, scale, (c_out, c_in, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def buffers(self) -> list[np.ndarray]:
        return []


class AvgPool2d:
    """2x2 average pooling; spatial extents must be even."""

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"avgpool2d: spatial extents must be even, got {(h, w)}")
        blocked = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
        return T.mean(blocked, axis=(3, 5))

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []


class Flatten:
    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return T.reshape(x, (x.shape[0], -1))

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []


@dataclass
class ForwardResult:
    logits: Tensor
    embedding: Tensor
    taps: dict[str, Tensor] = field(default_factory=dict)


class Network:
    """Ordered trunk of layers plus a classifier, with named tap points.

    ``embedding_tap`` names the trunk output used as the embedding; it is
    always the trunk's final output, so the classifier consumes it directly.
    """

    def __init__(
        self,
        trunk: list[tuple[str, object]],
        classifier: Dense,
        embedding_tap: str,
        tap_names: list[str],
        input_shape: tuple[int, ...],
        embedding_dim: int,
        num_classes: int,
    ):
        self.trunk = trunk
        self.classifier = classifier
        self.embedding_tap = embedding_tap
        self.tap_names = list(tap_names)
        self.input_shape = tuple(input_shape)
        self.embedding_dim = embedding_dim
        self.num_classes = num_classes

    def forward(self, batch: Tensor, train: bool = True) -> ForwardResult:
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(
                f"forward: input shape {batch.shape[1:]} does not match expected {self.input_shape}"
            )
        taps: dict[str, Tensor] = {}
        h = batch
        for name, layer in self.trunk:
            h = layer(h, train)
            if name in self.tap_names:
                taps[name] = h
        embedding = taps[self.embedding_tap]
        logits = self.classifier(h, train)
        return ForwardResult(logits=logits, embedding=embedding, taps=taps)

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for _, layer in self.trunk:
            params.extend(layer.parameters())
        params.extend(self.classifier.parameters())
        return params

    def buffers(self) -> list[np.ndarray]:
        bufs: list[np.ndarray] = []
        for _, layer in self.trunk:
            bufs.extend(layer.buffers())
        return bufs

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def state_arrays(self) -> list[np.ndarray]:
        """Parameters followed by running buffers, in definition order."""
        return [p.data for p in self.parameters()] + self.buffers()

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        if len(arrays) != len(params) + len(bufs):
            raise ValueError(
                f"checkpoint holds {len(arrays)} arrays, model expects {len(params) + len(bufs)}"
            )
        for p, a in zip(params, arrays[: len(params)]):
            if p.data.shape != a.shape:
                raise ShapeError(f"checkpoint shape {a.shape} does not match parameter {p.data.shape}")
            p.data = a.copy()
        bn_layers = [layer for _, layer in self.trunk if isinstance(layer, BatchNorm)]
        buf_arrays = arrays[len(params):]
        for i, layer in enumerate(bn_layers):
            layer.set_buffers(buf_arrays[2 * i], buf_arrays[2 * i + 1])


def build_mlp(
    rng: np.random.Generator,
    in_dim: int,
    width: int,
    depth: int,
    num_classes: int,
    batchnorm: bool = False,
) -> Network:
    """MLP trunk of ``depth`` hidden layers; the last hidden activation is
    the embedding (dimension ``width``)."""
    if depth < 1:
        raise ValueError("build_mlp: depth must be >= 1")
    trunk: list[tuple[str, object]] = []
    prev = in_dim
    for i in range(1, depth + 1):
        trunk.append((f"dense{i}", Dense(rng, prev, width)))
        if batchnorm:
            trunk.append((f"bn{i}", BatchNorm(width)))
        trunk.append((f"hidden{i}", Relu()))
        prev = width
    tap_names = [f"hidden{i}" for i in range(1, depth + 1)]
    classifier = Dense(rng, width, num_classes)
    return Network(
        trunk=trunk,
        classifier=classifier,
        embedding_tap=f"hidden{depth}",
        tap_names=tap_names,
        input_shape=(in_dim,),
        embedding_dim=width,
        num_classes=num_classes,
    )


def build_convnet(
    rng: np.random.Generator,
    in_shape: tuple[int, int, int],
    channels: tuple[int, int],
    embedding_dim: int,
    num_classes: int,
) -> Network:
    """Two 3x3 conv blocks with 2x2 average pooling, then a dense embedding.

    Tap points ``conv1`` and ``conv2`` expose the post-activation feature
    maps for feature/attention-map distillation.
    """
    c, h, w = in_shape
    if h % 4 or w % 4:
        raise ShapeError(f"build_convnet: spatial extents must be divisible by 4, got {(h, w)}")
    c1, c2 = channels
    trunk: list[tuple[str, object]] = [
        ("conv1_op", Conv2d(rng, c, c1)),
        ("conv1", Relu()),
        ("pool1", AvgPool2d()),
        ("conv2_op", Conv2d(rng, c1, c2)),
        ("conv2", Relu()),
        ("pool2", AvgPool2d()),
        ("flat", Flatten()),
        ("emb_op", Dense(rng, c2 * (h // 4) * (w // 4), embedding_dim)),
        ("embedding", Relu()),
    ]
    classifier = Dense(rng, embedding_dim, num_classes)
    return Network(
        trunk=trunk,
        classifier=classifier,
        embedding_tap="embedding",
        tap_names=["conv1", "conv2", "embedding"],
        input_shape=in_shape,
        embedding_dim=embedding_dim,
        num_classes=num_classes,
    )


class HeadRetiredError(RuntimeError):
    """The variance head was retired for inference and may not be evaluated."""


class VarianceHead:
    """Train-only branch predicting per-sample log variance.

    A dense projection of the embedding followed by batch normalization.
    The BN scale starts small so predicted variances begin near 1 and the
    loss initially matches a plain squared-error gap. ``retire()`` marks the
    head as removed from an inference export; predicting afterwards is an
    error because the branch exists only during training.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        embedding_dim: int,
        variance_dim: int,
        gamma_init: float = 0.1,
    ):
        self.proj = Dense(rng, embedding_dim, variance_dim)
        self.bn = BatchNorm(variance_dim, gamma_init=gamma_init)
        self.variance_dim = variance_dim
        self.training = True

    def predict_log_variance(self, embedding: Tensor, batch_stats: bool = True) -> Tensor:
        """Log variance per sample, shape [N, variance_dim].

        ``batch_stats=False`` normalizes with the running BN statistics
        (used when extracting a stable variance table after training).
        """
        if not self.training:
            raise HeadRetiredError("variance head is train-only; it was retired for inference")
        if embedding.ndim != 2:
            raise ShapeError(f"predict_log_variance: expects [N, D] embedding, got {embedding.shape}")
        return self.bn(self.proj(embedding, True), train=batch_stats)

    def retire(self) -> None:
        self.training = False

    def parameters(self) -> list[Tensor]:
        return self.proj.parameters() + self.bn.parameters()

    def buffers(self) -> list[np.ndarray]:
        return self.bn.buffers()

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()] + self.buffers()

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params) + 2:
            raise ValueError(f"variance-head checkpoint holds {len(arrays)} arrays, expected {len(params) + 2}")
        for p, a in zip(params, arrays[: len(params)]):
            if p.data.shape != a.shape:
                raise ShapeError(f"checkpoint shape {a.shape} does not match parameter {p.data.shape}")
            p.data = a.copy()
        self.bn.set_buffers(arrays[-2], arrays[-1])


class Projector:
    """Converts student outputs to the teacher's dimensionality.

    Dense map for vectors (embeddings, logits), 1x1 convolution for feature
    maps. When shapes already agree the projector is the identity and holds
    no parameters.
    """

    def __init__(self, layer: Dense | Conv2d | None):
        self.layer = layer

    @classmethod
    def for_vectors(cls, rng: np.random.Generator, student_dim: int, teacher_dim: int) -> "Projector":
        if student_dim == teacher_dim:
            return cls(None)
        return cls(Dense(rng, student_dim, teacher_dim))

    @classmethod
    def for_feature_maps(cls, rng: np.random.Generator, student_channels: int, teacher_channels: int) -> "Projector":
        if student_channels == teacher_channels:
            return cls(None)
        return cls(Conv2d(rng, student_channels, teacher_channels, kernel=1, padding=0))

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        if self.layer is None:
            return x
        return self.layer(x, train)

    def parameters(self) -> list[Tensor]:
        return [] if self.layer is None else self.layer.parameters()

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]
