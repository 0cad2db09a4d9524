"""PAANet: residual encoder, progressive alternating attention dense (PAAD)
blocks, and a skip-connected decoder with deep supervision.

Everything here is functional over a flat ``{path: Tensor}`` parameter map;
:class:`PAANet` is a thin holder for a config plus its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from paanet import tensor as T
from paanet.tensor import Tensor

FORWARD = "forward"
REVERSE = "reverse"
NUM_SCALES = 4
# He-uniform: keeps activation scale through ReLU stacks without normalization layers
INIT_GAIN = 6.0


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    encoder_channels: tuple = (16, 32, 64, 128)
    dense_layers: int = 4
    growth: int = 16
    num_blocks: int = 2
    input_size: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.encoder_channels) != NUM_SCALES or min(self.encoder_channels) < 1:
            raise ValueError(f"encoder_channels needs {NUM_SCALES} positive ints, got {self.encoder_channels}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.dense_layers < 1 or self.growth < 1:
            raise ValueError("dense_layers and growth must be >= 1")
        # zero blocks is the encoder-decoder ablation
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        h, w = self.input_size
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ValueError(f"input_size {self.input_size} must be positive multiples of 16")


@dataclass
class PaadOutput:
    features: list
    gams: list


@dataclass
class ModelOutputs:
    prediction: Tensor
    side_outputs: list
    gams: list = field(default_factory=list)

    def supervised_maps(self) -> list:
        """(name, map) pairs under deep supervision; the prediction is side output 1."""
        maps = [(f"gam{i}", g) for i, g in enumerate(self.gams)]
        maps += [(f"side{v + 1}", s) for v, s in enumerate(self.side_outputs)]
        return maps


def polarity_of_block(b: int) -> str:
    return FORWARD if b % 2 == 0 else REVERSE


# ----------------------------------------------------------------------------
# parameters


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Every learnable array the config implies, in construction order."""
    shapes = {}
    ch = cfg.encoder_channels
    g, C = cfg.growth, cfg.dense_layers

    prev = cfg.in_channels
    for v in range(1, NUM_SCALES + 1):
        c = ch[v - 1]
        shapes[f"encoder.level{v}.stem.weight"] = (c, prev, 3, 3)
        shapes[f"encoder.level{v}.stem.bias"] = (c,)
        shapes[f"encoder.level{v}.res.conv1.weight"] = (c, c, 3, 3)
        shapes[f"encoder.level{v}.res.conv1.bias"] = (c,)
        shapes[f"encoder.level{v}.res.conv2.weight"] = (c, c, 3, 3)
        shapes[f"encoder.level{v}.res.conv2.bias"] = (c,)
        prev = c

    for b in range(cfg.num_blocks):
        for layer in range(1, C + 1):
            for v in range(1, NUM_SCALES + 1):
                cin = ch[v - 1] + (layer - 1) * g
                shapes[f"paad{b}.layer{layer}.scale{v}.weight"] = (g, cin, 3, 3)
                shapes[f"paad{b}.layer{layer}.scale{v}.bias"] = (g,)
            shapes[f"paad{b}.mini{layer}.weight"] = (1, NUM_SCALES * g, 3, 3)
            shapes[f"paad{b}.mini{layer}.bias"] = (1,)
        for v in range(1, NUM_SCALES + 1):
            c = ch[v - 1]
            shapes[f"paad{b}.fuse.scale{v}.weight"] = (c, c + C * g, 1, 1)
            shapes[f"paad{b}.fuse.scale{v}.bias"] = (c,)

    for v in range(NUM_SCALES - 1, 0, -1):
        c = ch[v - 1]
        shapes[f"decoder.level{v}.up.weight"] = (ch[v], c, 4, 4)
        shapes[f"decoder.level{v}.up.bias"] = (c,)
        shapes[f"decoder.level{v}.fuse.weight"] = (c, 2 * c, 3, 3)
        shapes[f"decoder.level{v}.fuse.bias"] = (c,)

    for v in range(1, NUM_SCALES + 1):
        shapes[f"head.level{v}.weight"] = (1, ch[v - 1], 1, 1)
        shapes[f"head.level{v}.bias"] = (1,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, gain: float = INIT_GAIN) -> dict:
    """Fan-in scaled uniform weights (bound sqrt(gain/fan_in)), zero biases."""
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            # transposed-conv weights are (Cin, Cout, k, k); fan-in uses dim 1 for both layouts
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(gain / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def audit_params(params: dict, cfg: ModelConfig) -> None:
    """Raise ValueError unless ``params`` holds exactly the config's arrays."""
    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={missing[:5]} extra={extra[:5]}")
    seen = set()
    for name, shape in expected.items():
        t = params[name]
        if t.shape != tuple(shape):
            raise ValueError(f"{name}: shape {t.shape} != expected {tuple(shape)}")
        if id(t.data) in seen:
            raise ValueError(f"{name} aliases another parameter's storage")
        seen.add(id(t.data))


# ----------------------------------------------------------------------------
# network pieces


def _conv(x, params, prefix, stride=1, padding=None):
    w = params[prefix + ".weight"]
    if padding is None:
        padding = w.shape[-1] // 2
    return T.conv2d(x, w, params[prefix + ".bias"], stride=stride, padding=padding)


def encode(image: Tensor, params: dict, cfg: ModelConfig) -> list:
    """Four residual stages, each halving resolution: returns [E_1, ..., E_4]."""
    h, w = image.shape[2:]
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    feats = []
    x = image
    for v in range(1, NUM_SCALES + 1):
        base = f"encoder.level{v}"
        stem = T.relu(_conv(x, params, base + ".stem", stride=2))
        branch = _conv(T.relu(_conv(stem, params, base + ".res.conv1")), params, base + ".res.conv2")
        x = T.relu(T.add(stem, branch))
        feats.append(x)
    return feats


def dense_layer(prior: list, weight: Tensor, bias: Tensor, layer: int | None = None) -> Tensor:
    """F^c = ReLU(conv3x3(P^{c-1} ++ ... ++ P^0)) with ``prior = [P^0, ..., P^{c-1}]``."""
    if layer is not None and len(prior) != layer:
        raise ValueError(f"dense layer {layer} needs {layer} prior maps, got {len(prior)}")
    x = T.concat_channels(list(reversed(prior)))
    return T.relu(T.conv2d(x, weight, bias, stride=1, padding=1))


def mini_decode(feats: list, weight: Tensor, bias: Tensor, size: tuple) -> Tensor:
    """Guiding attention map from one dense layer's output at every scale."""
    h, w = size
    up = [T.resize_bilinear(f, h, w) for f in feats]
    return T.sigmoid(T.conv2d(T.concat_channels(up), weight, bias, stride=1, padding=1))


def apply_attention(features: Tensor, gam: Tensor, polarity: str) -> Tensor:
    """Gate features by the GAM (forward) or by 1 - GAM (reverse) at the features' scale."""
    h, w = features.shape[2:]
    gate = T.resize_bilinear(gam, h, w)
    if polarity == REVERSE:
        gate = T.one_minus(gate)
    elif polarity != FORWARD:
        raise ValueError(f"unknown polarity {polarity!r}")
    return T.mul_broadcast(features, gate)


def paad_block(inputs: list, polarity: str, params: dict, cfg: ModelConfig, block: int, size: tuple) -> PaadOutput:
    priors = [[x] for x in inputs]
    gams = []
    for layer in range(1, cfg.dense_layers + 1):
        feats = [
            dense_layer(
                priors[v],
                params[f"paad{block}.layer{layer}.scale{v + 1}.weight"],
                params[f"paad{block}.layer{layer}.scale{v + 1}.bias"],
                layer,
            )
            for v in range(NUM_SCALES)
        ]
        gam = mini_decode(feats, params[f"paad{block}.mini{layer}.weight"], params[f"paad{block}.mini{layer}.bias"], size)
        gams.append(gam)
        for v in range(NUM_SCALES):
            priors[v].append(apply_attention(feats[v], gam, polarity))

    out = []
    for v in range(NUM_SCALES):
        fused = _conv(T.concat_channels(priors[v]), params, f"paad{block}.fuse.scale{v + 1}", padding=0)
        out.append(T.add(inputs[v], fused))
    return PaadOutput(features=out, gams=gams)


def decode(streams: list, params: dict, size: tuple) -> list:
    """Coarse-to-fine decoding; returns per-level sigmoid maps at ``size``, finest first."""
    h, w = size
    d = streams[NUM_SCALES - 1]
    levels = {NUM_SCALES: d}
    for v in range(NUM_SCALES - 1, 0, -1):
        base = f"decoder.level{v}"
        up = T.transposed_conv2d(d, params[base + ".up.weight"], params[base + ".up.bias"], stride=2, padding=1)
        d = T.relu(_conv(T.concat_channels([up, streams[v - 1]]), params, base + ".fuse"))
        levels[v] = d
    sides = []
    for v in range(1, NUM_SCALES + 1):
        logit = _conv(levels[v], params, f"head.level{v}", padding=0)
        sides.append(T.resize_bilinear(T.sigmoid(logit), h, w))
    return sides


def forward(image: Tensor, params: dict, cfg: ModelConfig) -> ModelOutputs:
    if image.data.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ValueError(f"expected N x {cfg.in_channels} x H x W image batch, got {image.shape}")
    size = image.shape[2:]
    streams = encode(image, params, cfg)
    gams = []
    for b in range(cfg.num_blocks):
        res = paad_block(streams, polarity_of_block(b), params, cfg, b, size)
        streams = res.features
        gams.extend(res.gams)
    sides = decode(streams, params, size)
    return ModelOutputs(prediction=sides[0], side_outputs=sides, gams=gams)


class PAANet:
    """Config plus parameters; call it on an N x C x H x W batch."""

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        if params is None:
            params = init_params(self.config, np.random.default_rng(seed))
        audit_params(params, self.config)
        self.params = params

    def __call__(self, image) -> ModelOutputs:
        if not isinstance(image, Tensor):
            image = Tensor(image)
        return forward(image, self.params, self.config)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())
