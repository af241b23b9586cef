#!/usr/bin/env python3
"""
Neural network building blocks for landmark models.
Convolutions, ResNeXt blocks, channel-wise Luong and Bahdanau attention,
patch encoding, multi-head attention and transformer blocks.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Any, List, Optional, Tuple

try:
    from . import tensor as T
    from .tensor import Tensor, RngStream
    from .errors import ConfigurationError, DimensionError
except ImportError:
    import tensor as T
    from tensor import Tensor, RngStream
    from errors import ConfigurationError, DimensionError

Shape = Tuple[int, ...]


class LayerKind(Enum):
    """Kinds of layers a model can be assembled from."""
    CONV = "conv"
    RESNEXT = "resnext"
    LUONG = "luong"
    BAHDANAU = "bahdanau"
    PATCH_ENCODER = "patch_encoder"
    MULTI_HEAD_ATTENTION = "multi_head_attention"
    TRANSFORMER = "transformer"
    LAYER_NORM = "layer_norm"
    DENSE = "dense"
    DROPOUT = "dropout"
    HEAD = "head"


@dataclass
class LayerParams:
    """Trainable weights and hyperparameters of one layer."""
    kind: LayerKind
    weights: Dict[str, Tensor] = field(default_factory=dict)
    hyper: Dict[str, Any] = field(default_factory=dict)

    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())


def he_normal(rng: RngStream, shape: Shape, fan_in: int) -> Tensor:
    """Fan-in scaled normal initialization."""
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), requires_grad=True)


def zeros_param(shape: Shape) -> Tensor:
    return T.zeros(shape, requires_grad=True)


class Layer:
    """Base class: owns a LayerParams plus named sub-layers."""

    kind: LayerKind = None

    def __init__(self, **hyper):
        self.params = LayerParams(kind=self.kind, hyper=dict(hyper))
        self.children: Dict[str, 'Layer'] = {}

    @property
    def hyper(self) -> Dict[str, Any]:
        return self.params.hyper

    @property
    def weights(self) -> Dict[str, Tensor]:
        return self.params.weights

    def named_weights(self, prefix: str = '') -> List[Tuple[str, Tensor]]:
        """All trainable tensors below this layer, with dotted names."""
        head = f"{prefix}." if prefix else ''
        named = [(f"{head}{name}", w) for name, w in self.params.weights.items()]
        for child_name, child in self.children.items():
            named.extend(child.named_weights(f"{head}{child_name}"))
        return named

    def param_count(self) -> int:
        return sum(w.size for _, w in self.named_weights())

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def forward(self, x: Tensor, training: bool = False, rng: Optional[RngStream] = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[RngStream] = None) -> Tensor:
        return self.forward(x, training=training, rng=rng)

    def __repr__(self):
        return f"{type(self).__name__}({self.params.hyper})"


# Functional forms

def luong_channel_attention(x: Tensor) -> Tensor:
    """Self-attention over the D channel values at every spatial site, score x_i·x_j."""
    d = x.shape[-1]
    queries = T.reshape(x, x.shape + (1,))
    keys = T.reshape(x, x.shape[:-1] + (1, d))
    weights = T.softmax(queries * keys, axis=-1)
    return T.reduce_sum(weights * keys, axis=-1)


def bahdanau_channel_attention(x: Tensor) -> Tensor:
    """Channel-wise attention with additive score x_j·tanh(x_i + x_j)."""
    d = x.shape[-1]
    queries = T.reshape(x, x.shape + (1,))
    keys = T.reshape(x, x.shape[:-1] + (1, d))
    weights = T.softmax(keys * T.tanh(queries + keys), axis=-1)
    return T.reduce_sum(weights * keys, axis=-1)


def patches(x: Tensor, patch_size: int) -> Tensor:
    """Reshape B×H×L×D into B×(HL/P²)×(P²D) row-major patches."""
    if x.ndim == 3:
        flat = patches(T.reshape(x, (1,) + x.shape), patch_size)
        return T.reshape(flat, flat.shape[1:])
    batch, height, length, depth = x.shape
    p = patch_size
    if height % p or length % p:
        raise ConfigurationError(f"patch size {p} does not divide spatial extents {height}x{length}")
    blocks = T.reshape(x, (batch, height // p, p, length // p, p, depth))
    blocks = T.transpose(blocks, (0, 1, 3, 2, 4, 5))
    return T.reshape(blocks, (batch, (height // p) * (length // p), p * p * depth))


def patch_encode(x: Tensor, patch_size: int, projection: Tensor, positions: Tensor) -> Tensor:
    """Flattened patches times W^P plus one learned position vector per patch index."""
    return T.matmul(patches(x, patch_size), projection) + positions


def multi_head_attention(x: Tensor, w_query: Tensor, w_key: Tensor, w_value: Tensor,
                         w_out: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated then projected by W^O."""
    if x.ndim == 2:
        y = multi_head_attention(T.reshape(x, (1,) + x.shape), w_query, w_key, w_value, w_out, heads)
        return T.reshape(y, x.shape)
    batch, tokens, model_dim = x.shape
    if model_dim % heads:
        raise ConfigurationError(f"model dim {model_dim} not divisible by {heads} heads")
    head_dim = model_dim // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (batch, tokens, heads, head_dim)), (0, 2, 1, 3))

    q, k, v = split(x @ w_query), split(x @ w_key), split(x @ w_value)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    attended = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.transpose(attended, (0, 2, 1, 3)), (batch, tokens, model_dim))
    return merged @ w_out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - T.reduce_mean(x, axis=-1, keepdims=True)
    variance = T.reduce_mean(centered * centered, axis=-1, keepdims=True)
    return centered / T.sqrt(variance + eps) * gamma + beta


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[RngStream] = None) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# Layer classes

class Conv2D(Layer):
    """k×k convolution with bias, optional stride, ReLU unless disabled."""

    kind = LayerKind.CONV

    def __init__(self, in_channels: int, filters: int, kernel_size: int = 3, stride: int = 1,
                 activation: bool = True, rng: Optional[RngStream] = None):
        super().__init__(in_channels=in_channels, filters=filters, kernel_size=kernel_size,
                         stride=stride, activation=activation)
        rng = rng or RngStream(0)
        shape = (kernel_size, kernel_size, in_channels, filters)
        self.weights['kernel'] = he_normal(rng, shape, kernel_size * kernel_size * in_channels)
        self.weights['bias'] = zeros_param((filters,))

    def output_shape(self, input_shape: Shape) -> Shape:
        height, width, channels = input_shape
        if channels != self.hyper['in_channels']:
            raise DimensionError(f"conv expects {self.hyper['in_channels']} channels, got {channels}")
        k, s = self.hyper['kernel_size'], self.hyper['stride']
        out_h, out_w, _ = T.conv_output_geometry(height, width, k, k, (s, s), 'same')
        return out_h, out_w, self.hyper['filters']

    def forward(self, x, training=False, rng=None):
        s = self.hyper['stride']
        y = T.conv2d(x, self.weights['kernel'], self.weights['bias'], stride=(s, s), padding='same')
        return T.relu(y) if self.hyper['activation'] else y


class ResNeXtBlock(Layer):
    """y = x + concat of C grouped conv paths, each mapping D/C channels to D/C channels."""

    kind = LayerKind.RESNEXT

    def __init__(self, channels: int, cardinality: int = 4, kernel_size: int = 3,
                 rng: Optional[RngStream] = None):
        if cardinality < 1:
            raise ConfigurationError(f"cardinality must be >= 1, got {cardinality}")
        if channels % cardinality:
            raise ConfigurationError(f"ResNeXt channels {channels} not divisible by cardinality {cardinality}")
        super().__init__(channels=channels, cardinality=cardinality, kernel_size=kernel_size)
        rng = rng or RngStream(0)
        group = channels // cardinality
        for path in range(cardinality):
            shape = (kernel_size, kernel_size, group, group)
            self.weights[f'path{path}.kernel'] = he_normal(rng, shape, kernel_size * kernel_size * group)
            self.weights[f'path{path}.bias'] = zeros_param((group,))

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape[-1] != self.hyper['channels']:
            raise DimensionError(f"ResNeXt block expects {self.hyper['channels']} channels, got {input_shape[-1]}")
        return tuple(input_shape)

    def forward(self, x, training=False, rng=None):
        group = self.hyper['channels'] // self.hyper['cardinality']
        lead = (slice(None),) * (x.ndim - 1)
        outputs = []
        for path in range(self.hyper['cardinality']):
            part = T.getitem(x, lead + (slice(path * group, (path + 1) * group),))
            y = T.conv2d(part, self.weights[f'path{path}.kernel'], self.weights[f'path{path}.bias'],
                         stride=(1, 1), padding='same')
            outputs.append(T.relu(y))
        return x + T.concat(outputs, axis=-1)


class LuongChannelAttention(Layer):
    kind = LayerKind.LUONG

    def forward(self, x, training=False, rng=None):
        return luong_channel_attention(x)


class BahdanauChannelAttention(Layer):
    kind = LayerKind.BAHDANAU

    def forward(self, x, training=False, rng=None):
        return bahdanau_channel_attention(x)


class PatchEncoder(Layer):
    """Patch embedding: H×L×D map to (HL/P²) tokens of width dm."""

    kind = LayerKind.PATCH_ENCODER

    def __init__(self, input_shape: Shape, patch_size: int, model_dim: int,
                 rng: Optional[RngStream] = None):
        height, length, depth = input_shape
        if patch_size < 1 or height % patch_size or length % patch_size:
            raise ConfigurationError(
                f"patch size {patch_size} does not divide spatial extents {height}x{length}")
        super().__init__(patch_size=patch_size, model_dim=model_dim, depth=depth)
        rng = rng or RngStream(0)
        tokens = (height // patch_size) * (length // patch_size)
        patch_dim = patch_size * patch_size * depth
        self.weights['projection'] = Tensor(rng.normal(0.0, math.sqrt(1.0 / patch_dim), (patch_dim, model_dim)),
                                            requires_grad=True)
        self.weights['positions'] = Tensor(rng.normal(0.0, 0.02, (tokens, model_dim)), requires_grad=True)

    def output_shape(self, input_shape: Shape) -> Shape:
        height, length, _ = input_shape
        p = self.hyper['patch_size']
        return (height // p) * (length // p), self.hyper['model_dim']

    def forward(self, x, training=False, rng=None):
        return patch_encode(x, self.hyper['patch_size'], self.weights['projection'], self.weights['positions'])


class MultiHeadAttention(Layer):
    kind = LayerKind.MULTI_HEAD_ATTENTION

    def __init__(self, model_dim: int, heads: int, rng: Optional[RngStream] = None):
        if heads < 1 or model_dim % heads:
            raise ConfigurationError(f"model dim {model_dim} not divisible by {heads} heads")
        super().__init__(model_dim=model_dim, heads=heads)
        rng = rng or RngStream(0)
        for name in ('query', 'key', 'value', 'out'):
            self.weights[name] = Tensor(rng.normal(0.0, math.sqrt(1.0 / model_dim), (model_dim, model_dim)),
                                        requires_grad=True)

    def forward(self, x, training=False, rng=None):
        w = self.weights
        return multi_head_attention(x, w['query'], w['key'], w['value'], w['out'], self.hyper['heads'])


class LayerNorm(Layer):
    kind = LayerKind.LAYER_NORM

    def __init__(self, dim: int):
        super().__init__(dim=dim)
        self.weights['gamma'] = T.ones((dim,), requires_grad=True)
        self.weights['beta'] = zeros_param((dim,))

    def forward(self, x, training=False, rng=None):
        return layer_norm(x, self.weights['gamma'], self.weights['beta'])


class Dense(Layer):
    """xW + b, ReLU when `activation` is set."""

    kind = LayerKind.DENSE

    def __init__(self, in_dim: int, out_dim: int, activation: bool = False,
                 rng: Optional[RngStream] = None):
        super().__init__(in_dim=in_dim, out_dim=out_dim, activation=activation)
        rng = rng or RngStream(0)
        self.weights['weight'] = he_normal(rng, (in_dim, out_dim), in_dim)
        self.weights['bias'] = zeros_param((out_dim,))

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape[-1] != self.hyper['in_dim']:
            raise DimensionError(f"dense expects width {self.hyper['in_dim']}, got {input_shape[-1]}")
        return tuple(input_shape[:-1]) + (self.hyper['out_dim'],)

    def forward(self, x, training=False, rng=None):
        y = x @ self.weights['weight'] + self.weights['bias']
        return T.relu(y) if self.hyper['activation'] else y


class Dropout(Layer):
    kind = LayerKind.DROPOUT

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        super().__init__(rate=rate)

    def forward(self, x, training=False, rng=None):
        return dropout(x, self.hyper['rate'], training, rng)


class TransformerBlock(Layer):
    """Pre-norm block: x + MHA(norm(x)), then + FFN(norm(.)) with a 4·dm hidden layer."""

    kind = LayerKind.TRANSFORMER

    def __init__(self, model_dim: int, heads: int, rng: Optional[RngStream] = None):
        super().__init__(model_dim=model_dim, heads=heads)
        rng = rng or RngStream(0)
        self.children['norm1'] = LayerNorm(model_dim)
        self.children['attention'] = MultiHeadAttention(model_dim, heads, rng=rng)
        self.children['norm2'] = LayerNorm(model_dim)
        self.children['ffn1'] = Dense(model_dim, 4 * model_dim, activation=True, rng=rng)
        self.children['ffn2'] = Dense(4 * model_dim, model_dim, activation=False, rng=rng)

    def forward(self, x, training=False, rng=None):
        c = self.children
        x = x + c['attention'](c['norm1'](x))
        return x + c['ffn2'](c['ffn1'](c['norm2'](x)))


class Head(Layer):
    """Flatten, dropout, dense 2N, reshape to 2×N (row 0 = x, row 1 = y)."""

    kind = LayerKind.HEAD

    def __init__(self, in_features: int, n_points: int, dropout_rate: float,
                 rng: Optional[RngStream] = None):
        super().__init__(in_features=in_features, n_points=n_points, dropout_rate=dropout_rate)
        self.children['dropout'] = Dropout(dropout_rate)
        self.children['dense'] = Dense(in_features, 2 * n_points, activation=False, rng=rng)

    def output_shape(self, input_shape: Shape) -> Shape:
        return 2, self.hyper['n_points']

    def forward(self, x, training=False, rng=None):
        flat = T.flatten(x, start_axis=1)
        y = self.children['dense'](self.children['dropout'](flat, training=training, rng=rng))
        return T.reshape(y, (x.shape[0], 2, self.hyper['n_points']))
