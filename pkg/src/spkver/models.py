"""Construction and evaluation of the two embedding extractor stacks.

Both networks share the same tail: statistics pooling over frames, two
max-feature-map segment layers, and a classification layer whose input
(the second-to-last layer's output) is the speaker embedding.

Max-pooling extractor (canonical widths, 23-dim input):
    frame1   K=7   affine 161 x 256     -> 2x2 pool -> 128 ch
    frame2   K=5   affine 640 x 256     -> 2x2 pool -> 128 ch
    frame3   K=3   affine 384 x 256     -> time pool -> 256 ch
    frame4   K=1   affine 256 x 2048    -> 2x2 pool -> 1024 ch
    stats pooling  1024 -> 2048
    segment6 MFM   2048 -> 1024, segment7 MFM 1024 -> 512, classifier 512 x N

The third pool decimates time only: the canonical frame4 width (256 in)
requires the channel count to survive that stage, so halving channels there
would make the stack impossible to wire.

Residual extractor: frame1 (K=3, 69 x 128), a 2x2 pool down to 64 channels,
M residual blocks of two K=3 time-delay layers at width 64 (identity skip,
trimmed in time, zero-padded in channels if ever narrower), a K=1 expansion
to 2048, a final 2x2 pool, then the shared tail.  Each block widens the
input context by 8 frames.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor


@dataclass
class LayerSpec:
    """One layer of a network stack.

    ``kind`` is one of time_delay, max_pool, max_pool_time, stats_pool,
    affine_mfm, classifier.  For affine_mfm the affine maps to twice
    ``out_dim`` and the feature map halves it back, so in/out describe the
    layer's net effect.
    """

    kind: str
    name: str
    in_dim: int
    out_dim: int
    context: int = 1
    dilation: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"layer {self.name}: dims must be positive")


@dataclass
class ResidualBlockSpec:
    """Two context-3 time-delay sub-layers with an identity skip.

    The skip is trimmed to the main branch's valid frame range and
    zero-padded in channels when the block input is narrower than its
    width; the sum passes through the block's final activation.
    """

    name: str
    in_dim: int
    width: int
    context: int = 3

    @property
    def out_dim(self) -> int:
        return self.width


@dataclass
class ExtractorModel:
    """A layer stack plus its learned parameters."""

    arch: str
    layers: list
    params: ParameterSet
    in_dim: int
    embedding_dim: int
    n_spk: int
    width_scale: float = 1.0
    depth_name: str = ""

    def frame_layers(self) -> list:
        idx = next(i for i, l in enumerate(self.layers)
                   if isinstance(l, LayerSpec) and l.kind == "stats_pool")
        return self.layers[:idx]

    def segment_layers(self) -> list[LayerSpec]:
        idx = next(i for i, l in enumerate(self.layers)
                   if isinstance(l, LayerSpec) and l.kind == "stats_pool")
        return [l for l in self.layers[idx + 1 :] if l.kind == "affine_mfm"]

    def stats_layer(self) -> LayerSpec:
        return next(l for l in self.layers
                    if isinstance(l, LayerSpec) and l.kind == "stats_pool")

    def classifier_layer(self) -> LayerSpec:
        last = self.layers[-1]
        assert isinstance(last, LayerSpec) and last.kind == "classifier"
        return last

    def arch_dict(self) -> dict:
        """JSON-serializable architecture description for checkpoints."""
        return {
            "arch": self.arch,
            "in_dim": self.in_dim,
            "embedding_dim": self.embedding_dim,
            "n_spk": self.n_spk,
            "width_scale": self.width_scale,
            "depth_name": self.depth_name,
            "layers": [
                {"block": True, **asdict(l)} if isinstance(l, ResidualBlockSpec)
                else asdict(l)
                for l in self.layers
            ],
        }


def _even(x: float) -> int:
    """Round a scaled width to the nearest positive even integer."""
    return max(2, int(round(x / 2.0)) * 2)


def _init_affine(params: ParameterSet, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, bias: bool = True):
    bound = 1.0 / np.sqrt(fan_in)
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    if bias:
        params.add(f"{name}.b", rng.uniform(-bound, bound, size=fan_out))


def _allocate(layers: list, params: ParameterSet, rng: np.random.Generator):
    for layer in layers:
        if isinstance(layer, ResidualBlockSpec):
            k = layer.context
            _init_affine(params, f"{layer.name}.td1", k * layer.in_dim, layer.width, rng)
            params.add(f"{layer.name}.td1.slope", np.full(layer.width, 0.25))
            _init_affine(params, f"{layer.name}.td2", k * layer.width, layer.width, rng)
            params.add(f"{layer.name}.td2.slope", np.full(layer.width, 0.25))
        elif layer.kind == "time_delay":
            _init_affine(params, layer.name, layer.context * layer.in_dim, layer.out_dim, rng)
            params.add(f"{layer.name}.slope", np.full(layer.out_dim, 0.25))
        elif layer.kind == "affine_mfm":
            _init_affine(params, layer.name, layer.in_dim, 2 * layer.out_dim, rng)
        elif layer.kind == "classifier":
            _init_affine(params, layer.name, layer.in_dim, layer.out_dim, rng,
                         bias=layer.has_bias)


def build_maxpool_net(n_spk: int, in_dim: int = 23, width_scale: float = 1.0,
                      classifier_bias: bool = True, seed: int = 0) -> ExtractorModel:
    """Build the max-pooling extractor; widths scale by ``width_scale``."""
    if n_spk < 2:
        raise ValueError("need at least 2 speakers")
    s = width_scale
    c1, c2, c3 = _even(256 * s), _even(256 * s), _even(256 * s)
    c4 = _even(2048 * s)
    seg6_out = _even(2048 * s) // 2
    seg7_out = _even(1024 * s) // 2
    layers = [
        LayerSpec("time_delay", "frame1", in_dim, c1, context=7),
        LayerSpec("max_pool", "maxpool1", c1, c1 // 2, context=2),
        LayerSpec("time_delay", "frame2", c1 // 2, c2, context=5),
        LayerSpec("max_pool", "maxpool2", c2, c2 // 2, context=2),
        LayerSpec("time_delay", "frame3", c2 // 2, c3, context=3),
        LayerSpec("max_pool_time", "maxpool3", c3, c3, context=2),
        LayerSpec("time_delay", "frame4", c3, c4, context=1),
        LayerSpec("max_pool", "maxpool4", c4, c4 // 2, context=2),
        LayerSpec("stats_pool", "stats", c4 // 2, c4),
        LayerSpec("affine_mfm", "segment6", c4, seg6_out),
        LayerSpec("affine_mfm", "segment7", seg6_out, seg7_out),
        LayerSpec("classifier", "classifier", seg7_out, n_spk, has_bias=classifier_bias),
    ]
    params = ParameterSet()
    _allocate(layers, params, np.random.default_rng(seed))
    return ExtractorModel("maxpool", layers, params, in_dim, seg7_out, n_spk,
                          width_scale=s, depth_name="maxpool-net-7")


def build_res_net(n_blocks: int, n_spk: int, in_dim: int = 23, width_scale: float = 1.0,
                  classifier_bias: bool = True, seed: int = 0) -> ExtractorModel:
    """Build the residual extractor with ``n_blocks`` residual blocks."""
    if n_blocks < 1:
        raise ValueError("need at least 1 residual block")
    if n_spk < 2:
        raise ValueError("need at least 2 speakers")
    s = width_scale
    c1 = _even(128 * s)
    width = c1 // 2
    c_exp = _even(2048 * s)
    seg6_out = _even(2048 * s) // 2
    seg7_out = _even(1024 * s) // 2
    layers: list = [
        LayerSpec("time_delay", "frame1", in_dim, c1, context=3),
        LayerSpec("max_pool", "maxpool1", c1, width, context=2),
    ]
    for m in range(1, n_blocks + 1):
        layers.append(ResidualBlockSpec(f"block{m}", width, width))
    layers += [
        LayerSpec("time_delay", f"frame{n_blocks + 2}", width, c_exp, context=1),
        LayerSpec("max_pool", f"maxpool{n_blocks + 2}", c_exp, c_exp // 2, context=2),
        LayerSpec("stats_pool", "stats", c_exp // 2, c_exp),
        LayerSpec("affine_mfm", "segment6", c_exp, seg6_out),
        LayerSpec("affine_mfm", "segment7", seg6_out, seg7_out),
        LayerSpec("classifier", "classifier", seg7_out, n_spk, has_bias=classifier_bias),
    ]
    params = ParameterSet()
    _allocate(layers, params, np.random.default_rng(seed))
    depth = 2 * n_blocks + 4
    return ExtractorModel("resnet", layers, params, in_dim, seg7_out, n_spk,
                          width_scale=s, depth_name=f"res-tdnn-{depth}")


def model_from_arch_dict(arch: dict, seed: int = 0) -> ExtractorModel:
    """Rebuild a model skeleton from an architecture description."""
    layers = []
    for entry in arch["layers"]:
        entry = dict(entry)
        if entry.pop("block", False):
            layers.append(ResidualBlockSpec(**entry))
        else:
            layers.append(LayerSpec(**entry))
    params = ParameterSet()
    _allocate(layers, params, np.random.default_rng(seed))
    return ExtractorModel(arch["arch"], layers, params, arch["in_dim"],
                          arch["embedding_dim"], arch["n_spk"],
                          width_scale=arch.get("width_scale", 1.0),
                          depth_name=arch.get("depth_name", ""))


def _apply_block(params: ParameterSet, block: ResidualBlockSpec, x: Tensor) -> Tensor:
    h = ad.time_delay(x, params[f"{block.name}.td1.w"], params[f"{block.name}.td1.b"],
                      block.context)
    h = ad.prelu(h, params[f"{block.name}.td1.slope"])
    h = ad.time_delay(h, params[f"{block.name}.td2.w"], params[f"{block.name}.td2.b"],
                      block.context)
    trim = 2 * (block.context - 1)
    skip = ad.slice_time(x, trim // 2, x.shape[0] - trim)
    if block.in_dim < block.width:
        skip = ad.pad_channels(skip, block.width)
    elif block.in_dim > block.width:
        raise ValueError(f"block {block.name}: input wider than block width")
    return ad.prelu(ad.add(h, skip), params[f"{block.name}.td2.slope"])


def frame_stats_graph(model: ExtractorModel, features) -> Tensor:
    """Frame-level stack plus statistics pooling; returns a 1-D tensor."""
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    if x.data.ndim != 2 or x.data.shape[1] != model.in_dim:
        raise ValueError(f"expected (T, {model.in_dim}) features, got {x.data.shape}")
    need = receptive_field(model)
    if x.data.shape[0] < need:
        raise ValueError(
            f"segment shorter than receptive field: {x.data.shape[0]} < {need} frames")
    params = model.params
    for layer in model.frame_layers():
        if isinstance(layer, ResidualBlockSpec):
            x = _apply_block(params, layer, x)
        elif layer.kind == "time_delay":
            x = ad.time_delay(x, params[f"{layer.name}.w"], params[f"{layer.name}.b"],
                              layer.context, layer.dilation)
            x = ad.prelu(x, params[f"{layer.name}.slope"])
        elif layer.kind == "max_pool":
            x = ad.max_pool_2x2(x)
        elif layer.kind == "max_pool_time":
            x = ad.max_pool_time(x)
        else:
            raise ValueError(f"unexpected frame-level layer kind {layer.kind}")
    return ad.stats_pool(x)


def segment_graph(model: ExtractorModel, pooled: Tensor) -> Tensor:
    """Segment-level MFM layers on a (B, 2C) batch; returns (B, emb)."""
    x = pooled
    for layer in model.segment_layers():
        x = ad.affine(x, model.params[f"{layer.name}.w"], model.params[f"{layer.name}.b"])
        x = ad.mfm(x)
    return x


def classifier_graph(model: ExtractorModel, emb: Tensor) -> Tensor:
    layer = model.classifier_layer()
    bias = model.params[f"{layer.name}.b"] if layer.has_bias else None
    return ad.affine(emb, model.params[f"{layer.name}.w"], bias)


def embed_graph(model: ExtractorModel, features) -> Tensor:
    """Embedding graph for one utterance; classifier layer not applied."""
    pooled = ad.stack_rows([frame_stats_graph(model, features)])
    return segment_graph(model, pooled)


def forward_embed(model: ExtractorModel, features) -> np.ndarray:
    """Deterministic fixed-length embedding of a feature matrix."""
    values = features.values if hasattr(features, "values") else np.asarray(features)
    out = embed_graph(model, values)
    return out.data[0].copy()


def receptive_field(model_or_layers) -> int:
    """Minimum number of input frames that yields one output frame.

    Exact influence-span recursion over the frame-level stack: a context-K
    layer at input step j widens the span by (K-1)*d*j, a stride-2 pool by
    j and doubles the step.
    """
    layers = (model_or_layers.frame_layers()
              if isinstance(model_or_layers, ExtractorModel) else model_or_layers)
    span, step = 1, 1
    for layer in layers:
        if isinstance(layer, ResidualBlockSpec):
            span += 2 * (layer.context - 1) * step
        elif layer.kind == "time_delay":
            span += (layer.context - 1) * layer.dilation * step
        elif layer.kind in ("max_pool", "max_pool_time"):
            span += step
            step *= 2
        elif layer.kind == "stats_pool":
            break
        else:
            raise ValueError(f"unexpected layer kind {layer.kind}")
    return span


def total_context(model_or_layers) -> list[tuple[str, int]]:
    """Per-layer total-context column in the tables' accounting.

    Matches :func:`receptive_field` except that a wide frame layer
    (context >= 5) reading pooled features is counted with its full
    spliced window (K*step) rather than the incremental extension
    ((K-1)*step); both published stacks follow that accounting, which
    overstates the exact influence span of the max-pooling stack by 2
    from its second frame layer on.
    """
    layers = (model_or_layers.frame_layers()
              if isinstance(model_or_layers, ExtractorModel) else model_or_layers)
    out: list[tuple[str, int]] = []
    span, step = 1, 1
    prev_was_pool = False
    for layer in layers:
        if isinstance(layer, ResidualBlockSpec):
            span += 2 * (layer.context - 1) * step
            prev_was_pool = False
        elif layer.kind == "time_delay":
            if prev_was_pool and layer.context >= 5:
                span += layer.context * layer.dilation * step
            else:
                span += (layer.context - 1) * layer.dilation * step
            prev_was_pool = False
        elif layer.kind in ("max_pool", "max_pool_time"):
            span += step
            step *= 2
            prev_was_pool = True
        else:
            break
        out.append((layer.name, span))
    return out


def layer_shape_pairs(model: ExtractorModel) -> dict[str, tuple[int, int]]:
    """Affine (in, out) pairs of every weight-bearing layer."""
    pairs: dict[str, tuple[int, int]] = {}
    for layer in model.layers:
        if isinstance(layer, ResidualBlockSpec):
            pairs[layer.name] = (layer.in_dim, layer.width)
        elif layer.kind == "time_delay":
            pairs[layer.name] = (layer.context * layer.in_dim, layer.out_dim)
        elif layer.kind in ("stats_pool", "affine_mfm", "classifier"):
            pairs[layer.name] = (layer.in_dim, layer.out_dim)
    return pairs
