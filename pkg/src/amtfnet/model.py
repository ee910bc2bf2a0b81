"""AMTFNet: multiscale depthwise convolution + GRU feature extraction,
temporal-attention fusion, and a softmax classifier, plus the six reduced
variants used for ablations.

Variant map (feature extractor / fusion):
  A1  MSDC only, classify on the temporal mean of the conv features
  A2  GRU only, classify on the last hidden state
  A3  MSDC + temporal attention over the conv features
  A4  GRU + temporal attention over the hidden trajectory
  A5  MSDC + GRU, classify on the last hidden state
  A6  MSDC + GRU + squeeze-excitation attention
  FULL  MSDC + GRU + temporal attention (the complete model)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import BinaryIO

import numpy as np

from .tensor import ShapeError, Tensor, select, softmax, stack, concat
from .layers import (
    ParamSpec,
    conv1d,
    depthwise_conv1d,
    dropout,
    gru_sequence,
    init_params,
    instance_norm,
    linear,
)

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "AMTFNetParams",
    "build_params",
    "count_parameters",
    "feature_extract",
    "temporal_attention",
    "se_block",
    "fuse",
    "classify",
    "fused_features",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("A1", "A2", "A3", "A4", "A5", "A6", "FULL")

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = "amtfnet-checkpoint"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup
    (window 64, kernel sizes 3/5/7/9, hidden size 100)."""

    v: int
    num_classes: int
    w: int = 64
    kernel_sizes: tuple[int, ...] = (3, 5, 7, 9)
    hidden: int = 100
    reduction: int = 8
    dropout_rate: float = 0.5
    variant: str = "FULL"
    instance_norm_eps: float = 1e-5

    def __post_init__(self):
        self.kernel_sizes = tuple(self.kernel_sizes)
        if self.v < 1 or self.w < 1 or self.hidden < 1:
            raise ValueError("v, w and hidden must be positive")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.reduction < 1:
            raise ValueError("reduction must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for n in self.kernel_sizes:
            if n % 2 == 0 or n > self.w:
                raise ValueError(f"kernel sizes must be odd and <= w, got {n}")

    # -- variant capabilities --

    @property
    def has_msdc(self) -> bool:
        return self.variant in ("A1", "A3", "A5", "A6", "FULL")

    @property
    def has_gru(self) -> bool:
        return self.variant in ("A2", "A4", "A5", "A6", "FULL")

    @property
    def fusion(self) -> str:
        # "tam", "se" or "none"
        if self.variant in ("A3", "A4", "FULL"):
            return "tam"
        if self.variant == "A6":
            return "se"
        return "none"

    @property
    def gru_input_width(self) -> int:
        return len(self.kernel_sizes) * self.v if self.has_msdc else self.v

    @property
    def feature_height(self) -> int:
        """Height of the extracted feature map (rows of h, or of b for
        GRU-less variants); also the classifier input width."""
        if self.has_gru:
            return self.hidden
        return len(self.kernel_sizes) * self.v

    @property
    def reduced_width(self) -> int:
        return max(1, -(-self.w // self.reduction))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_layout(config: ModelConfig) -> list[ParamSpec]:
    """Every learnable tensor of the variant, in construction order."""
    v, w, hidden = config.v, config.w, config.hidden
    m = config.reduced_width
    specs: list[ParamSpec] = []
    if config.has_msdc:
        for n in config.kernel_sizes:
            specs.append(ParamSpec(f"dc{n}.kernel", (v, n), n))
            specs.append(ParamSpec(f"dc{n}.bias", (v,), None))
    if config.has_gru:
        d = config.gru_input_width
        for gate in ("r", "h", "z"):
            wname = "W" if gate == "h" else f"W_{gate}"
            uname = "U" if gate == "h" else f"U_{gate}"
            specs.append(ParamSpec(f"gru.{wname}", (hidden, d), d))
            specs.append(ParamSpec(f"gru.{uname}", (hidden, hidden), hidden))
            specs.append(ParamSpec(f"gru.b_{gate}", (hidden,), None))
    if config.fusion == "tam":
        for fc_in, name_a, name_b in ((w, "fc1", "fc2"), (w, "fc3", "fc4")):
            specs.append(ParamSpec(f"att.{name_a}.weight", (m, fc_in), fc_in))
            specs.append(ParamSpec(f"att.{name_a}.bias", (m,), None))
            specs.append(ParamSpec(f"att.{name_b}.weight", (w, m), m))
            specs.append(ParamSpec(f"att.{name_b}.bias", (w,), None))
        specs.append(ParamSpec("att.conv.kernel", (1, 2, 3), 2 * 3))
        specs.append(ParamSpec("att.conv.bias", (1,), None))
    elif config.fusion == "se":
        specs.append(ParamSpec("se.fc_a.weight", (m, w), w))
        specs.append(ParamSpec("se.fc_a.bias", (m,), None))
        specs.append(ParamSpec("se.fc_b.weight", (w, m), m))
        specs.append(ParamSpec("se.fc_b.bias", (w,), None))
    specs.append(ParamSpec("clf.weight", (config.num_classes, config.feature_height),
                           config.feature_height))
    specs.append(ParamSpec("clf.bias", (config.num_classes,), None))
    return specs


def count_parameters(config: ModelConfig) -> int:
    """Closed-form learnable parameter total for the configured variant."""
    v, w, hidden, L = config.v, config.w, config.hidden, config.num_classes
    m = config.reduced_width
    total = 0
    if config.has_msdc:
        total += v * sum(config.kernel_sizes) + v * len(config.kernel_sizes)
    if config.has_gru:
        d = config.gru_input_width
        total += 3 * hidden * d + 3 * hidden * hidden + 3 * hidden
    if config.fusion == "tam":
        total += 2 * (m * w + m) + 2 * (w * m + w) + (1 * 2 * 3 + 1)
    elif config.fusion == "se":
        total += (m * w + m) + (w * m + w)
    total += L * config.feature_height + L
    return total


@dataclass
class AMTFNetParams:
    """A variant's full learnable-parameter collection, keyed by layer name.

    ``extras`` carries JSON-serializable sidecar data (e.g. normalization
    statistics) through the checkpoint container.
    """

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def total_size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def gru_view(self) -> dict[str, Tensor]:
        return {k.split(".", 1)[1]: t for k, t in self.tensors.items()
                if k.startswith("gru.")}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data[...] = values[k]


def build_params(config: ModelConfig, rng: np.random.Generator) -> AMTFNetParams:
    tensors = init_params(param_layout(config), rng)
    return AMTFNetParams(config=config, tensors=tensors)


# -- forward components -----------------------------------------------------------


def feature_extract(x: Tensor, params: AMTFNetParams, config: ModelConfig) -> Tensor:
    """Extractor E: multiscale depthwise conv branches (each followed by
    instance norm and ReLU) concatenated channel-wise, then the GRU.

    Returns the hidden trajectory ``(..., hidden, w)``; variants without the
    GRU return the concatenated conv features, and variants without MSDC
    feed the window straight into the GRU.
    """
    if x.shape[-2] != config.v or x.shape[-1] != config.w:
        raise ShapeError(
            f"input shape {x.shape} does not match config (v={config.v}, w={config.w})")
    feats = x
    if config.has_msdc:
        channel_axis = x.data.ndim - 2
        branches = []
        for n in config.kernel_sizes:
            y = depthwise_conv1d(x, params.tensors[f"dc{n}.kernel"],
                                 params.tensors[f"dc{n}.bias"])
            branches.append(instance_norm(y, config.instance_norm_eps).relu())
        feats = concat(branches, axis=channel_axis)
    if config.has_gru:
        feats = gru_sequence(feats, params.gru_view())
    return feats


def temporal_attention(h: Tensor, params: AMTFNetParams,
                       config: ModelConfig) -> Tensor:
    """One non-negative weight per time step, from mean and standard-deviation
    summaries of the feature map passed through paired bottleneck FCs and a
    fusing convolution."""
    t = params.tensors
    q1 = h.mean(axis=-2)
    q2 = h.std(axis=-2)
    p1 = linear(linear(q1, t["att.fc1.weight"], t["att.fc1.bias"]).relu(),
                t["att.fc2.weight"], t["att.fc2.bias"])
    p2 = linear(linear(q2, t["att.fc3.weight"], t["att.fc3.bias"]).relu(),
                t["att.fc4.weight"], t["att.fc4.bias"])
    maps = stack([p1, p2], axis=p1.data.ndim - 1)
    a = conv1d(maps, t["att.conv.kernel"], t["att.conv.bias"])
    return select(a, a.data.ndim - 2, 0).relu()


def se_block(h: Tensor, params: AMTFNetParams, config: ModelConfig) -> Tensor:
    """Squeeze-and-excitation over time steps: a sigmoid-gated attention
    vector from the mean summary alone (variant A6)."""
    t = params.tensors
    squeeze = h.mean(axis=-2)
    e = linear(squeeze, t["se.fc_a.weight"], t["se.fc_a.bias"]).relu()
    return linear(e, t["se.fc_b.weight"], t["se.fc_b.bias"]).sigmoid()


def fuse(h: Tensor, a: Tensor) -> Tensor:
    """Attention-weighted sum of time columns: ``f = sum_t a[t] * h[:, t]``.

    ``h`` is ``(H, w)`` or ``(B, H, w)``; ``a`` matches with the H axis dropped.
    """
    if h.data.ndim == a.data.ndim + 1 and h.data.ndim in (2, 3) \
            and h.shape[:-2] + h.shape[-1:] == a.shape:
        pass
    else:
        raise ShapeError(f"fuse shapes incompatible: h {h.shape}, a {a.shape}")
    if h.data.ndim == 2:
        y = h.data @ a.data

        def rule(g, h=h, a=a):
            if h.requires_grad:
                h._accumulate(np.outer(g, a.data))
            if a.requires_grad:
                a._accumulate(h.data.T @ g)
    else:
        y = np.einsum("bhw,bw->bh", h.data, a.data)

        def rule(g, h=h, a=a):
            if h.requires_grad:
                h._accumulate(np.einsum("bh,bw->bhw", g, a.data))
            if a.requires_grad:
                a._accumulate(np.einsum("bh,bhw->bw", g, h.data))

    return Tensor._make(y, (h, a), rule)


def classify(f: Tensor, params: AMTFNetParams, config: ModelConfig,
             training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Classifier C: dropout, one fully connected layer, softmax."""
    t = params.tensors
    d = dropout(f, config.dropout_rate, training, rng)
    logits = linear(d, t["clf.weight"], t["clf.bias"])
    return softmax(logits, axis=-1)


def fused_features(x: Tensor, params: AMTFNetParams, config: ModelConfig) -> Tensor:
    """The feature vector handed to the classifier: the attention-weighted
    fusion where the variant has one, otherwise the last hidden state
    (GRU variants) or the temporal mean of the conv features (A1)."""
    feats = feature_extract(x, params, config)
    fusion = config.fusion
    if fusion == "tam":
        return fuse(feats, temporal_attention(feats, params, config))
    if fusion == "se":
        return fuse(feats, se_block(feats, params, config))
    if config.has_gru:
        return select(feats, feats.data.ndim - 1, config.w - 1)  # last time step
    return feats.mean(axis=-1)  # temporal mean of the conv features


def forward(x: Tensor, params: AMTFNetParams, config: ModelConfig,
            training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Class-probability output for a window ``(v, w)`` or batch ``(B, v, w)``."""
    f = fused_features(x, params, config)
    return classify(f, params, config, training=training, rng=rng)


# -- checkpoint container ----------------------------------------------------------
#
# Single file: one JSON header line (format version, model config, parameter
# manifest in order), newline, then each parameter's little-endian float64
# payload concatenated in manifest order.


def save_checkpoint(path: str, params: AMTFNetParams,
                    extras: dict | None = None) -> None:
    manifest = [{"name": k, "shape": list(t.shape)} for k, t in params.tensors.items()]
    header = {
        "format": _CKPT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "params": manifest,
        "extras": extras if extras is not None else params.extras,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for m in manifest:
            fh.write(params.tensors[m["name"]].data.astype("<f8").tobytes())


def _read_checkpoint_header(fh: BinaryIO) -> dict:
    line = fh.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"not a checkpoint file: {exc}") from None
    if header.get("format") != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file: bad magic")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    return header


def load_checkpoint(path: str) -> AMTFNetParams:
    with open(path, "rb") as fh:
        header = _read_checkpoint_header(fh)
        config = ModelConfig.from_dict(header["config"])
        tensors: dict[str, Tensor] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"checkpoint truncated at parameter {entry['name']!r}")
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            tensors[entry["name"]] = Tensor(data, requires_grad=True)
    params = AMTFNetParams(config=config, tensors=tensors,
                           extras=header.get("extras", {}))
    expected = {s.name: s.shape for s in param_layout(config)}
    got = {k: t.shape for k, t in params.tensors.items()}
    if expected != got:
        raise ValueError("checkpoint parameters do not match its config")
    return params
