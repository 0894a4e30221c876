"""Model components over a flat, name-partitioned parameter dictionary.

Parameters for one model live in a single dict[str, Tensor]. Names carry the
partition: "fen." for the feature extractor, "att." for attention pooling,
"cln." for the classifier head. The slow weights are the feature extractor;
the fast weights updated by inner steps are attention plus head.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

FEATURE_PREFIX = "fen."
ATTENTION_PREFIX = "att."
HEAD_PREFIX = "cln."


def subdict(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def split_params(params: Mapping[str, Tensor]):
    """(feature, attention, head) views of one flat parameter dict."""
    return (
        subdict(params, FEATURE_PREFIX),
        subdict(params, ATTENTION_PREFIX),
        subdict(params, HEAD_PREFIX),
    )


def fast_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Attention plus head: the weights touched by inner updates."""
    return {k: v for k, v in params.items() if not k.startswith(FEATURE_PREFIX)}


def detach_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Constant view sharing the same arrays; drops gradient tracking."""
    return {k: Tensor(v.data) for k, v in params.items()}


def clone_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class ConvFeatures:
    """Stack of valid (no padding) square convolutions with ReLU, flattened."""

    def __init__(
        self,
        image_shape: tuple[int, int, int],
        filters: Sequence[int],
        strides: Sequence[int],
        kernel_size: int = 3,
    ):
        if len(filters) != len(strides):
            raise ValueError(
                f"filters and strides must align, got {len(filters)} and {len(strides)}"
            )
        if not filters:
            raise ValueError("need at least one conv layer")
        self.image_shape = tuple(image_shape)
        self.filters = [int(f) for f in filters]
        self.strides = [int(s) for s in strides]
        self.kernel_size = int(kernel_size)
        c, h, w = self.image_shape
        for i, s in enumerate(self.strides):
            if self.kernel_size > h or self.kernel_size > w:
                raise ShapeError(
                    f"feature map {h}x{w} too small for a {kernel_size}x{kernel_size} "
                    f"kernel at layer {i}"
                )
            h = (h - self.kernel_size) // s + 1
            w = (w - self.kernel_size) // s + 1
        self.out_hw = (h, w)
        self.out_dim = self.filters[-1] * h * w

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        cin = self.image_shape[0]
        k = self.kernel_size
        for i, f in enumerate(self.filters):
            fan = cin * k * k
            params[f"conv{i}.w"] = Tensor(_uniform(rng, (f, cin, k, k), fan), requires_grad=True)
            params[f"conv{i}.b"] = Tensor(_uniform(rng, (f, 1, 1), fan), requires_grad=True)
            cin = f
        return params

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        for i, s in enumerate(self.strides):
            x = T.relu(T.add(T.conv2d(x, params[f"conv{i}.w"], stride=s), params[f"conv{i}.b"]))
        return T.flatten(x)


class MlpFeatures:
    """Fully connected trunk; input images are flattened, ReLU after each layer."""

    def __init__(self, in_dim: int, hidden: Sequence[int]):
        if not hidden:
            raise ValueError("need at least one hidden layer")
        self.in_dim = int(in_dim)
        self.hidden = [int(h) for h in hidden]
        self.out_dim = self.hidden[-1]

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        dims = [self.in_dim] + self.hidden
        for i in range(len(self.hidden)):
            params[f"fc{i}.w"] = Tensor(
                _uniform(rng, (dims[i], dims[i + 1]), dims[i]), requires_grad=True
            )
            params[f"fc{i}.b"] = Tensor(_uniform(rng, (dims[i + 1],), dims[i]), requires_grad=True)
        return params

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        if x.ndim > 2:
            x = T.flatten(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"expected {self.in_dim} input features, got {x.shape[1]}")
        for i in range(len(self.hidden)):
            x = T.relu(T.linear(x, params[f"fc{i}.w"], params[f"fc{i}.b"]))
        return x


class MemlModel:
    """Feature extractor, attention pooling over a set, and classifier head.

    Attention scores each row of a feature set with a two-layer map
    (linear, tanh, linear), normalizes with softmax, and pools the set into a
    single vector by the weighted sum.
    """

    def __init__(self, feature, attention_hidden: int | None = None, head_hidden: int | None = None):
        self.feature = feature
        self.attention_hidden = int(attention_hidden or feature.out_dim)
        self.head_hidden = int(head_hidden) if head_hidden else None

    def init_params(self, rng: np.random.Generator, num_classes: int) -> dict[str, Tensor]:
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        d, a = self.feature.out_dim, self.attention_hidden
        params = {FEATURE_PREFIX + k: v for k, v in self.feature.init_params(rng).items()}
        params["att.score0.w"] = Tensor(_uniform(rng, (d, a), d), requires_grad=True)
        params["att.score0.b"] = Tensor(_uniform(rng, (a,), d), requires_grad=True)
        params["att.score1.w"] = Tensor(_uniform(rng, (a, 1), a), requires_grad=True)
        params["att.score1.b"] = Tensor(_uniform(rng, (1,), a), requires_grad=True)
        params.update(self._head_params(rng, num_classes))
        return params

    def _head_params(
        self, rng: np.random.Generator, num_classes: int, zero_out: bool = False
    ) -> dict[str, Tensor]:
        d = self.feature.out_dim
        params: dict[str, Tensor] = {}
        if self.head_hidden:
            params["cln.fc0.w"] = Tensor(_uniform(rng, (d, self.head_hidden), d), requires_grad=True)
            params["cln.fc0.b"] = Tensor(_uniform(rng, (self.head_hidden,), d), requires_grad=True)
            d = self.head_hidden
        if zero_out:
            # All classes start with identical logits; only gradient steps
            # separate them. A randomly drawn output layer would give classes
            # that were never trained larger logits than barely-trained ones.
            params["cln.out.w"] = Tensor(np.zeros((d, num_classes)), requires_grad=True)
            params["cln.out.b"] = Tensor(np.zeros(num_classes), requires_grad=True)
        else:
            params["cln.out.w"] = Tensor(_uniform(rng, (d, num_classes), d), requires_grad=True)
            params["cln.out.b"] = Tensor(_uniform(rng, (num_classes,), d), requires_grad=True)
        return params

    def reinit_head(
        self, params: Mapping[str, Tensor], num_classes: int, rng: np.random.Generator
    ) -> dict[str, Tensor]:
        """Fresh zero-mean uniform head sized for num_classes; rest untouched."""
        out = {k: v for k, v in params.items() if not k.startswith(HEAD_PREFIX)}
        out.update(self._head_params(rng, num_classes))
        return out

    def features(self, params: Mapping[str, Tensor], images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        fen = {k[len(FEATURE_PREFIX) :]: v for k, v in params.items() if k.startswith(FEATURE_PREFIX)}
        return self.feature.forward(fen, x)

    def attention_weights(self, params: Mapping[str, Tensor], feats: Tensor) -> Tensor:
        h = T.tanh(T.linear(feats, params["att.score0.w"], params["att.score0.b"]))
        scores = T.linear(h, params["att.score1.w"], params["att.score1.b"])
        return T.softmax(T.reshape(scores, (-1,)))

    def attention_pool(self, params: Mapping[str, Tensor], feats: Tensor) -> tuple[Tensor, Tensor]:
        """Weights over the set rows and the pooled (1, d) combination."""
        a = self.attention_weights(params, feats)
        pooled = T.matmul(T.reshape(a, (1, -1)), feats)
        return a, pooled

    def head_logits(self, params: Mapping[str, Tensor], feats: Tensor) -> Tensor:
        if self.head_hidden:
            feats = T.relu(T.linear(feats, params["cln.fc0.w"], params["cln.fc0.b"]))
        return T.linear(feats, params["cln.out.w"], params["cln.out.b"])

    def forward_logits(self, params: Mapping[str, Tensor], images) -> Tensor:
        """Per-sample path: features straight into the head, no pooling."""
        return self.head_logits(params, self.features(params, images))

    def predict(self, params: Mapping[str, Tensor], images) -> np.ndarray:
        frozen = detach_params(params)
        return np.argmax(self.forward_logits(frozen, images).data, axis=1)

    def accuracy(self, params: Mapping[str, Tensor], images, labels) -> float:
        """Percent correct under argmax over the full head."""
        pred = self.predict(params, images)
        return 100.0 * float(np.mean(pred == np.asarray(labels)))
