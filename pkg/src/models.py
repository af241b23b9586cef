#!/usr/bin/env python3
"""
Model assembly: turns a ModelSpec into a runnable layer graph.
Root, stem, branch and head are built in order; ensembles share one root.
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

try:
    from . import tensor as T
    from .tensor import Tensor, RngStream
    from .errors import ConfigurationError, DimensionError
    from .layers import (Layer, Conv2D, ResNeXtBlock, LuongChannelAttention, BahdanauChannelAttention,
                         PatchEncoder, TransformerBlock, Head)
    from .model_spec import ModelSpec, StemKind, BranchKind, catalog, catalog_ids
except ImportError:
    import tensor as T
    from tensor import Tensor, RngStream
    from errors import ConfigurationError, DimensionError
    from layers import (Layer, Conv2D, ResNeXtBlock, LuongChannelAttention, BahdanauChannelAttention,
                        PatchEncoder, TransformerBlock, Head)
    from model_spec import ModelSpec, StemKind, BranchKind, catalog, catalog_ids

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
NamedLayers = List[Tuple[str, Layer]]


class BuiltModel:
    """Ordered layers of one model: shared root, k stem+branch components, one head."""

    def __init__(self, spec: ModelSpec, input_shape: Shape, root: NamedLayers,
                 components: List[NamedLayers], head: Head):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.root = root
        self.components = components
        self.head = head
        self.output_shape = (2, spec.head.n_points)

    @property
    def layers(self) -> NamedLayers:
        ordered = list(self.root)
        for component in self.components:
            ordered.extend(component)
        ordered.append(('head', self.head))
        return ordered

    def layer_names(self) -> List[str]:
        return [name for name, _ in self.layers]

    def get_layer(self, name: str) -> Layer:
        for layer_name, layer in self.layers:
            if layer_name == name:
                return layer
        raise ConfigurationError(f"Model has no layer '{name}'")

    def named_weights(self) -> List[Tuple[str, Tensor]]:
        named = []
        for name, layer in self.layers:
            named.extend(layer.named_weights(name))
        return named

    def param_count(self) -> int:
        return sum(w.size for _, w in self.named_weights())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: w.data.copy() for name, w in self.named_weights()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy arrays into the model's weights in place."""
        named = dict(self.named_weights())
        missing = set(named) - set(state)
        if missing:
            raise ConfigurationError(f"state is missing weights: {sorted(missing)[:5]}")
        for name, weight in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != weight.shape:
                raise DimensionError(f"weight '{name}' has shape {weight.shape}, state has {value.shape}")
            weight.data[...] = value

    def zero_grad(self):
        for _, weight in self.named_weights():
            weight.zero_grad()

    def _run(self, x: Tensor, training: bool, rng: Optional[RngStream],
             capture: Optional[str] = None) -> Tuple[Tensor, Optional[Tensor]]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == len(self.input_shape):
            x = T.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"model expects input {self.input_shape}, got {tuple(x.shape[1:])}")

        captured = None
        for name, layer in self.root:
            x = layer(x, training=training, rng=rng)
            if name == capture:
                return x, x
        features = []
        for component in self.components:
            y = x
            for name, layer in component:
                y = layer(y, training=training, rng=rng)
                if name == capture:
                    return y, y
            features.append(T.flatten(y, start_axis=1))
        joined = features[0] if len(features) == 1 else T.concat(features, axis=-1)
        out = self.head(joined, training=training, rng=rng)
        if capture == 'head':
            captured = out
        return out, captured

    def forward(self, x, training: bool = False, rng: Optional[RngStream] = None) -> Tensor:
        """B×H×W×3 (or H×W×3) images to B×2×N (or 2×N) landmark coordinates."""
        unbatched = (x.ndim if isinstance(x, Tensor) else np.ndim(x)) == len(self.input_shape)
        out, _ = self._run(x, training, rng)
        return T.reshape(out, out.shape[1:]) if unbatched else out

    __call__ = forward

    def features(self, x) -> Tensor:
        """Concatenated flattened component outputs that feed the head."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == len(self.input_shape):
            x = T.reshape(x, (1,) + x.shape)
        for _, layer in self.root:
            x = layer(x)
        flats = []
        for component in self.components:
            y = x
            for _, layer in component:
                y = layer(y)
            flats.append(T.flatten(y, start_axis=1))
        return flats[0] if len(flats) == 1 else T.concat(flats, axis=-1)

    def activations(self, x, layer_name: str) -> Tensor:
        """Output of the named layer for a batched input, in eval mode."""
        if layer_name not in self.layer_names():
            raise ConfigurationError(f"Model has no layer '{layer_name}'")
        _, captured = self._run(x, training=False, rng=None, capture=layer_name)
        return captured

    def summary(self) -> List[Dict[str, object]]:
        """One row per layer: name, kind, parameter count."""
        return [{'layer': name, 'kind': layer.kind.value, 'params': layer.param_count()}
                for name, layer in self.layers]


class _Chain:
    """Appends layers while tracking the per-sample shape and naming offenders."""

    def __init__(self, prefix: str, shape: Shape, rng: RngStream, counter: List[int]):
        self.prefix = prefix
        self.shape = tuple(shape)
        self.rng = rng
        self.counter = counter
        self.layers: NamedLayers = []

    def next_rng(self) -> RngStream:
        self.counter[0] += 1
        return self.rng.split(self.counter[0])

    def push(self, factory, kind: str):
        name = f"{self.prefix}.{len(self.layers)}"
        try:
            layer = factory(self.shape, self.next_rng())
            self.shape = layer.output_shape(self.shape)
        except (ConfigurationError, DimensionError) as e:
            raise ConfigurationError(f"{name} ({kind}): {e}")
        self.layers.append((name, layer))


def _conv(width: int, kernel_size: int, stride: int = 1):
    return lambda shape, rng: Conv2D(shape[-1], width, kernel_size, stride, activation=True, rng=rng)


def _build_stem(spec: ModelSpec, chain: _Chain):
    stem = spec.stem
    if stem.kind == StemKind.CONV:
        for block in range(stem.depth):
            chain.push(_conv(stem.width, stem.kernel_size, stem.stride if block == 0 else 1), 'conv')
        return
    if stem.kind == StemKind.RESNEXT:
        if spec.stem_needs_entry:
            chain.push(lambda shape, rng: Conv2D(shape[-1], stem.width, 1, stem.stride, rng=rng), 'conv')
        for _ in range(stem.depth):
            chain.push(lambda shape, rng: ResNeXtBlock(shape[-1], stem.cardinality, stem.kernel_size, rng=rng),
                       'resnext')
        return
    partners = {
        StemKind.ALT_CONV_LUONG: ('luong', lambda shape, rng: LuongChannelAttention()),
        StemKind.ALT_CONV_BAHDANAU: ('bahdanau', lambda shape, rng: BahdanauChannelAttention()),
        StemKind.ALT_CONV_RESNEXT: ('resnext', lambda shape, rng: ResNeXtBlock(
            shape[-1], stem.cardinality, stem.kernel_size, rng=rng)),
    }
    partner_kind, partner = partners[stem.kind]
    for block in range(stem.depth):
        chain.push(_conv(stem.width, stem.kernel_size, stem.stride if block == 0 else 1), 'conv')
        chain.push(partner, partner_kind)


def _build_branch(spec: ModelSpec, chain: _Chain):
    branch = spec.branch
    if branch.kind == BranchKind.NONE:
        return
    if branch.kind == BranchKind.LUONG:
        for _ in range(branch.depth):
            chain.push(lambda shape, rng: LuongChannelAttention(), 'luong')
    elif branch.kind == BranchKind.BAHDANAU:
        for _ in range(branch.depth):
            chain.push(lambda shape, rng: BahdanauChannelAttention(), 'bahdanau')
    else:
        chain.push(lambda shape, rng: PatchEncoder(shape, branch.patch_size, branch.model_dim, rng=rng),
                   'patch_encoder')
        for _ in range(branch.depth):
            chain.push(lambda shape, rng: TransformerBlock(branch.model_dim, branch.heads, rng=rng), 'transformer')


def _assemble(spec: ModelSpec, input_shape: Shape, k: int, rng: RngStream) -> BuiltModel:
    errors = spec.validate(input_shape)
    if errors:
        raise ConfigurationError("; ".join(errors))
    counter = [0]
    root = _Chain('root', input_shape, rng, counter)
    for channels in spec.root.channels:
        root.push(lambda shape, layer_rng, c=channels: Conv2D(shape[-1], c, spec.root.kernel_size,
                                                              spec.root.stride, rng=layer_rng), 'conv')

    components = []
    feature_size = 0
    for index in range(k):
        prefix = 'stem' if k == 1 else f'c{index}.stem'
        stem = _Chain(prefix, root.shape, rng, counter)
        _build_stem(spec, stem)
        branch = _Chain(prefix.replace('stem', 'branch'), stem.shape, rng, counter)
        _build_branch(spec, branch)
        components.append(stem.layers + branch.layers)
        feature_size += int(np.prod(branch.shape))

    counter[0] += 1
    head = Head(feature_size, spec.head.n_points, spec.head.dropout_rate, rng=rng.split(counter[0]))
    model = BuiltModel(spec, input_shape, root.layers, components, head)
    logger.info(f"Built {spec.name or spec.description} at {tuple(input_shape)}: "
                f"{len(model.layers)} layers, {model.param_count():,} parameters")
    return model


def _as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng or 0))


def build_model(spec: ModelSpec, input_shape: Shape, rng=None) -> BuiltModel:
    """Build a singular model, or an ensemble when spec.ensemble_k > 1."""
    return _assemble(spec, tuple(input_shape), max(spec.ensemble_k, 1), _as_rng(rng))


def build_ensemble(spec: ModelSpec, input_shape: Shape, rng=None) -> BuiltModel:
    """Shared root, k independently initialized stem+branch components, one head on the concatenation."""
    if spec.ensemble_k < 1:
        raise ConfigurationError(f"ensemble_k must be >= 1, got {spec.ensemble_k}")
    return _assemble(spec, tuple(input_shape), spec.ensemble_k, _as_rng(rng))


def param_count(model: BuiltModel) -> int:
    """Exact trainable scalar count, additive over layers."""
    return model.param_count()


def catalog_table(input_shape: Shape, ids: Optional[List[str]] = None, **overrides) -> List[Dict[str, object]]:
    """Catalog id, description and parameter count for each catalog model at `input_shape`."""
    rows = []
    for model_id in ids or catalog_ids():
        spec = catalog(model_id, **overrides)
        model = build_model(spec, input_shape)
        rows.append({'model': model_id, 'description': spec.description, 'params': model.param_count()})
    return rows
