"""
Named CNN / CNN-LSTM / CNN-attention classifiers.

Multi-step models read ``N`` consecutive subsequences ``[N, C, L]`` (or a
mini-batch ``[B, N, C, L]``) and classify the last one. Every subsequence goes
through the same encoder; the feature maps then pass through the model's
context mechanism and two LSTM decoder layers before the softmax head.
Single-step models read ``N = 1``.
"""

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import (AttentionConfig, BahdanauAttention, MultiHeadAttention, SelfAttention,
                        luong_attend)
from .errors import ConfigurationError, ContractError
from .layers import (BatchNorm, Conv1d, ConvBlock, Dense, LstmParams, Module, SoftmaxHead,
                     lstm_sequence)
from .tensor import Tensor, add, as_tensor, concat, global_avg_pool, relu, transpose

SINGLE_STEP = ("FCN", "ResNet", "LSA", "MHSA", "FCN_MHSA", "ResNet_MHSA")
MULTI_STEP = (
    "FCN_LSTM", "ResNet_LSTM",
    "SelfA", "MHA",
    "FCN_SelfA", "FCN_SelfA_Global", "FCN_SelfA_Multiplicative", "ResNet_SelfA",
    "FCN_MHA", "ResNet_MHA",
    "FCN_LATTN", "ResNet_LATTN", "FCN_BATTN", "ResNet_BATTN",
)
MODEL_NAMES = SINGLE_STEP + MULTI_STEP

DEFAULT_STEPS = 4


@dataclass(frozen=True)
class EncoderConfig:
    channels: int
    length: Optional[int] = None
    fcn_filters: tuple = (128, 256, 128)
    resnet_filters: tuple = (64, 128, 128)
    kernel_sizes: tuple = (8, 5, 3)

    def __post_init__(self):
        object.__setattr__(self, "fcn_filters", tuple(self.fcn_filters))
        object.__setattr__(self, "resnet_filters", tuple(self.resnet_filters))
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        if self.channels < 1:
            raise ConfigurationError(f"channels must be positive, got {self.channels}")
        if len(self.fcn_filters) != 3 or len(self.resnet_filters) != 3 or len(self.kernel_sizes) != 3:
            raise ConfigurationError("encoders have exactly three filter counts and kernel sizes")
        if min(self.fcn_filters + self.resnet_filters + self.kernel_sizes) < 1:
            raise ConfigurationError("filter counts and kernel sizes must be positive")


def _parse_name(name):
    if name not in MODEL_NAMES:
        raise ConfigurationError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
    encoder = "fcn" if name.startswith("FCN") else "resnet" if name.startswith("ResNet") else None
    tail = name.split("_", 1)[1] if encoder and "_" in name else ("" if encoder else name)
    context = {
        "": "none", "LSTM": "lstm", "LATTN": "luong", "BATTN": "bahdanau", "MHSA": "mhsa",
        "SelfA": "selfa", "SelfA_Global": "selfa", "SelfA_Multiplicative": "selfa", "MHA": "mha",
        "LSA": "lsa",
    }[tail]
    return encoder, context


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one zoo entry."""

    name: str
    encoder: EncoderConfig
    steps: int = 1
    attention: Optional[AttentionConfig] = None
    lstm_units: int = 64
    d_model: int = 128

    def __post_init__(self):
        _parse_name(self.name)
        if self.name in SINGLE_STEP and self.steps != 1:
            raise ConfigurationError(f"{self.name} is single-step and requires N=1, got {self.steps}")
        if self.name in MULTI_STEP and self.steps < 2:
            raise ConfigurationError(f"{self.name} is multi-step and requires N>1, got {self.steps}")
        if self.name in ("SelfA", "MHA") and self.encoder.length is None:
            raise ConfigurationError(f"{self.name} projects flattened subsequences and needs encoder.length")
        if self.lstm_units < 1 or self.d_model < 1:
            raise ConfigurationError(f"lstm_units and d_model must be positive, got {self.lstm_units}, {self.d_model}")

    @property
    def kind(self):
        return _parse_name(self.name)

    @property
    def feature_width(self):
        enc, _ = self.kind
        if enc == "fcn":
            return self.encoder.fcn_filters[-1]
        if enc == "resnet":
            return self.encoder.resnet_filters[-1]
        return self.d_model

    @classmethod
    def create(cls, name, channels, length=None, steps=None, **overrides):
        """Spec with the defaults for ``name``; keyword overrides replace fields."""
        encoder_kw = {k: overrides.pop(k) for k in ("fcn_filters", "resnet_filters", "kernel_sizes")
                      if k in overrides}
        encoder = EncoderConfig(channels=channels, length=length, **encoder_kw)
        if steps is None:
            steps = 1 if name in SINGLE_STEP else DEFAULT_STEPS
        attention = overrides.pop("attention", None)
        spec = cls(name=name, encoder=encoder, steps=steps, **overrides)
        if attention is None:
            attention = default_attention(spec)
        return replace(spec, attention=attention)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        if d.get("attention") is not None:
            d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def default_attention(spec: ModelSpec) -> Optional[AttentionConfig]:
    _, context = spec.kind
    width = spec.feature_width
    if context == "selfa":
        locality = "global" if spec.name.endswith("_Global") else "local"
        scoring = "multiplicative" if spec.name.endswith("_Multiplicative") else "additive"
        return AttentionConfig(d_k=width, locality=locality, window=3, scoring=scoring)
    if context in ("mha", "mhsa"):
        heads = 8 if width == 128 else 4
        if width % heads:
            heads = 1
        return AttentionConfig(d_k=width // heads, heads=heads, masked=True)
    return None


class FCNEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        c = [cfg.channels] + list(cfg.fcn_filters)
        self.blocks = [ConvBlock(c[i], c[i + 1], cfg.kernel_sizes[i], rng, channels_last=True)
                       for i in range(3)]

    def sequence(self, x):
        """``[B, C, L] -> [B, L, F]`` feature vectors per time point."""
        x = transpose(x, (0, 2, 1))
        for block in self.blocks:
            x = block(x)
        return x

    def feature_map(self, x):
        """``[B, C, L] -> [B, F, L]``."""
        return transpose(self.sequence(x), (0, 2, 1))

    def forward(self, x):
        return global_avg_pool(self.sequence(x), time_axis=1)


class ResidualBlock(Module):
    def __init__(self, c_in, c_out, kernel_sizes, rng):
        k1, k2, k3 = kernel_sizes
        self.convs = [
            ConvBlock(c_in, c_out, k1, rng, channels_last=True),
            ConvBlock(c_out, c_out, k2, rng, channels_last=True),
            ConvBlock(c_out, c_out, k3, rng, activation=False, channels_last=True),
        ]
        self.project = Conv1d(c_in, c_out, 1, rng, channels_last=True) if c_in != c_out else None
        self.shortcut_bn = BatchNorm(c_out, channels_last=True)

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = conv(h)
        s = self.project(x) if self.project is not None else x
        return relu(h + self.shortcut_bn(s))


class ResNetEncoder(FCNEncoder):
    def __init__(self, cfg: EncoderConfig, rng):
        c = [cfg.channels] + list(cfg.resnet_filters)
        self.blocks = [ResidualBlock(c[i], c[i + 1], cfg.kernel_sizes, rng) for i in range(3)]


def fcn_encode(x, encoder: FCNEncoder):
    x = as_tensor(x)
    if x.ndim == 2:
        return encoder(x.reshape((1,) + x.shape)).reshape(-1)
    return encoder(x)


def resnet_encode(x, encoder: ResNetEncoder):
    return fcn_encode(x, encoder)


def _broadcast_rows(ctx, n):
    """``[B, F] -> [B, n, F]`` by repeating the context vector."""
    B, F = ctx.shape
    return add(ctx.reshape(B, 1, F), np.zeros((B, n, F)))


class TSCModel(Module):
    """A trainable zoo classifier built from a ``ModelSpec``."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        enc_kind, context = spec.kind
        cfg = spec.encoder
        F = spec.feature_width
        H = spec.lstm_units
        self.encoder = None
        if enc_kind == "fcn":
            self.encoder = FCNEncoder(cfg, rng)
        elif enc_kind == "resnet":
            self.encoder = ResNetEncoder(cfg, rng)

        self.context = None
        self.tokens = None
        self.decoder = None
        head_in = F
        if context in ("lstm", "luong", "bahdanau", "selfa", "mha"):
            if enc_kind is None:
                # standalone SelfA / MHA: flattened subsequence -> d_model token
                self.tokens = Dense(cfg.channels * cfg.length, spec.d_model, rng)
            if context == "bahdanau":
                self.context = BahdanauAttention(F, F // 2, rng)
            elif context == "selfa":
                self.context = SelfAttention(F, spec.attention, rng)
            elif context == "mha":
                self.context = MultiHeadAttention(F, spec.attention, rng)
            if enc_kind is not None:
                dec_in = F if context == "lstm" else 2 * F
                self.decoder = [LstmParams(dec_in, H, rng), LstmParams(H, H, rng)]
                head_in = H
        elif context in ("lsa", "mhsa"):
            if enc_kind is None:
                self.tokens = Dense(cfg.channels, spec.d_model, rng)
            if context == "mhsa":
                self.context = MultiHeadAttention(F, spec.attention, rng)
            head_in = F if (context == "mhsa" and enc_kind is None) else 2 * F
        self.head = SoftmaxHead(head_in, rng)

    def forward(self, x, return_internals=False):
        x = as_tensor(x)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        B, N, C, L = x.shape
        if N != self.spec.steps:
            raise ContractError(f"{self.spec.name} expects N={self.spec.steps} subsequences, got {N}")
        internals = {}
        probs = self._forward(x, internals)
        if single:
            probs = probs.reshape(-1)
        return (probs, internals) if return_internals else probs

    def _forward(self, x, internals):
        enc_kind, context = self.spec.kind
        B, N, C, L = x.shape
        if context in ("lsa", "mhsa"):
            return self._single_step_attention(x[:, 0], internals)
        if enc_kind is not None:
            feats = self.encoder(x.reshape(B * N, C, L))
            feats = feats.reshape(B, N, feats.shape[-1])
        else:
            feats = self.tokens(x.reshape(B, N, C * L))
        if context == "none":
            return self.head(feats[:, N - 1, :])

        if context == "luong":
            cv = luong_attend(feats)
            internals["weights"] = cv.weights
            seq = concat([feats, _broadcast_rows(cv.values, N)], axis=-1)
        elif context == "bahdanau":
            cv = self.context(feats)
            internals["weights"] = cv.weights
            seq = concat([feats, _broadcast_rows(cv.values, N)], axis=-1)
        elif context in ("selfa", "mha"):
            att, w = self.context(feats, return_weights=True)
            internals["weights"] = w
            internals["attended"] = att
            if enc_kind is None:
                return self.head(att[:, N - 1, :])
            seq = concat([feats, att], axis=-1)
        else:
            seq = feats
        h = lstm_sequence(seq, self.decoder[0], "all")
        h = lstm_sequence(h, self.decoder[1], "last")
        return self.head(h)

    def _single_step_attention(self, x, internals):
        enc_kind, context = self.spec.kind
        if enc_kind is not None:
            tokens = self.encoder.sequence(x)
        else:
            tokens = self.tokens(transpose(x, (0, 2, 1)))
        L = tokens.shape[1]
        last = tokens[:, L - 1, :]
        if context == "lsa":
            cv = luong_attend(tokens)
            internals["weights"] = cv.weights
            return self.head(concat([cv.values, last], axis=-1))
        att, w = self.context(tokens, return_weights=True)
        internals["weights"] = w
        internals["attended"] = att
        row = att[:, L - 1, :]
        if enc_kind is None:
            return self.head(row)
        return self.head(concat([global_avg_pool(tokens, time_axis=1), row], axis=-1))


def build_model(spec: ModelSpec, seed: int = 0) -> TSCModel:
    return TSCModel(spec, seed)


def forward(model: TSCModel, batch):
    """Class probabilities for the target (last) subsequence of ``batch``."""
    values = batch.subsequences if hasattr(batch, "subsequences") else batch
    n = np.shape(values)[0]
    if n != model.spec.steps:
        raise ContractError(f"{model.spec.name} expects N={model.spec.steps}, batch has {n}")
    return model(Tensor._wrap(np.asarray(values, dtype=np.float64)))


def parameter_count(spec: ModelSpec) -> int:
    return int(sum(p.size for p in TSCModel(spec, seed=0).parameters()))


def save_checkpoint(model: TSCModel, stem):
    """Write ``<stem>.params`` (parameter store) and ``<stem>.json`` (spec)."""
    stem = Path(stem)
    model.save(stem.parent / (stem.name + ".params"))
    (stem.parent / (stem.name + ".json")).write_text(model.spec.to_json())


def load_checkpoint(stem) -> TSCModel:
    stem = Path(stem)
    spec = ModelSpec.from_dict(json.loads((stem.parent / (stem.name + ".json")).read_text()))
    model = TSCModel(spec)
    model.load(stem.parent / (stem.name + ".params"))
    return model.eval()
