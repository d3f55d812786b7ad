"""Price-model assembly and persistence.

A model is: token front end (learned embedding or one-hot), one of three
feature-extraction units (bidirectional RNN, bidirectional LSTM, or a 1-D
residual convolution stack), a fully-connected price head fed the feature
vector concatenated with the market inputs, and a fully-connected head
predicting the 32 plate characteristics from the feature vector alone.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from platemark.plates import N_AUX, N_AUX_BINARY, SEQ_LEN, VOCAB_SIZE
from platemark.dataset import AUX_IN_DIM
from platemark.nn import (
    Activation,
    BatchNorm,
    Chain,
    Conv1D,
    Dense,
    Dropout,
    Embedding,
    LSTMLayer,
    OneHot,
    RecurrentLayer,
    assert_all_finite,
)

EXTRACTORS = ("rnn", "lstm", "rescnn")

_WIDTH_RANGE = {"rnn": (128, 1024), "lstm": (128, 1600), "rescnn": (64, 1024)}
_LAYER_RANGE = {"rnn": (1, 7), "lstm": (1, 5), "rescnn": (1, 7)}


class ConfigError(ValueError):
    """Model configuration outside the supported ranges."""


@dataclass(frozen=True)
class ModelConfig:
    extractor: str
    embedding: int | str = 8  # dimension in [8, 24], or "onehot"
    layers: int = 1
    width: int = 128
    dropout: float = 0.15
    price_head: tuple[int, ...] = (256,)
    aux_head: tuple[int, ...] = (256,)
    downsample: tuple[int, ...] | None = None  # rescnn: stride-2 layer indices
    aux_targets: str = "features"  # "features" or "price" (duplicated price target)
    seed: int = 0

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"unknown extractor {self.extractor!r}")
        if self.embedding != "onehot":
            if not isinstance(self.embedding, int) or not 8 <= self.embedding <= 24:
                raise ConfigError(f"embedding must be 'onehot' or 8..24, got {self.embedding!r}")
        lo, hi = _LAYER_RANGE[self.extractor]
        if not lo <= self.layers <= hi:
            raise ConfigError(f"{self.extractor} layer count must be in [{lo}, {hi}]")
        lo, hi = _WIDTH_RANGE[self.extractor]
        if not lo <= self.width <= hi:
            raise ConfigError(f"{self.extractor} width must be in [{lo}, {hi}]")
        if self.extractor == "rnn" and self.width % 2:
            raise ConfigError("rnn width must be even (split across directions)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not all(isinstance(w, int) and w > 0 for w in self.price_head + self.aux_head):
            raise ConfigError("head widths must be positive integers")
        if self.aux_targets not in ("features", "price"):
            raise ConfigError("aux_targets must be 'features' or 'price'")
        ds = self.downsample
        if ds is not None:
            if sorted(set(ds)) != list(ds) or any(not 1 <= i < self.layers for i in ds):
                raise ConfigError("downsample indices must be sorted, unique, in [1, layers-1]")

    @property
    def downsample_layers(self) -> tuple[int, ...]:
        """Stride-2 layer indices; by default the final layer downsamples."""
        if self.extractor != "rescnn":
            return ()
        if self.downsample is not None:
            return self.downsample
        return (self.layers - 1,) if self.layers >= 2 else ()

    @property
    def embed_dim(self) -> int:
        return VOCAB_SIZE if self.embedding == "onehot" else int(self.embedding)

    @property
    def feature_dim(self) -> int:
        if self.extractor == "rnn":
            return self.width
        if self.extractor == "lstm":
            return 2 * self.width
        return self.width * 2 ** len(self.downsample_layers)

    def to_doc(self) -> dict:
        return {
            "extractor": self.extractor,
            "embedding": self.embedding,
            "layers": self.layers,
            "width": self.width,
            "dropout": self.dropout,
            "price_head": list(self.price_head),
            "aux_head": list(self.aux_head),
            "downsample": None if self.downsample is None else list(self.downsample),
            "aux_targets": self.aux_targets,
            "seed": self.seed,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ModelConfig":
        kw = dict(doc)
        for key in ("price_head", "aux_head"):
            kw[key] = tuple(kw.get(key, (256,)))
        if kw.get("downsample") is not None:
            kw["downsample"] = tuple(kw["downsample"])
        return cls(**kw)


@dataclass
class ForwardOutput:
    price: np.ndarray  # (N,) predicted log price
    aux: np.ndarray  # (N, 32): 22 probabilities + 10 counts ("features" mode)
    features: np.ndarray  # (N, F) latent feature vectors


class _CnnBlock:
    """Two convolution layers with a shortcut added before the final
    activation; `tail` builds a single unpaired layer without a shortcut."""

    def __init__(self, c_in, c_mid, c_out, strides, dropout, rng, tail=False):
        self.tail = tail
        self.conv_a = Conv1D(c_in, c_mid, rng, kernel=3, stride=strides[0])
        self.bn_a = BatchNorm(c_mid)
        self.act_a = Activation("elu")
        self.drop_a = Dropout(dropout)
        self.named = [
            ("c0/conv", self.conv_a),
            ("c0/bn", self.bn_a),
        ]
        if tail:
            self.proj = None
            return
        self.conv_b = Conv1D(c_mid, c_out, rng, kernel=3, stride=strides[1])
        self.bn_b = BatchNorm(c_out)
        self.act_b = Activation("elu")
        self.drop_b = Dropout(dropout)
        self.named += [("c1/conv", self.conv_b), ("c1/bn", self.bn_b)]
        total_stride = strides[0] * strides[1]
        if c_in != c_out or total_stride != 1:
            self.proj = Conv1D(c_in, c_out, rng, kernel=1, stride=total_stride)
            self.named.append(("short", self.proj))
        else:
            self.proj = None
        self._identity_shortcut = self.proj is None

    def forward(self, x, train, rng, residual=True):
        h = self.conv_a.forward(x, train=train, rng=rng)
        h = self.bn_a.forward(h, train=train, rng=rng)
        h = self.act_a.forward(h, train=train, rng=rng)
        h = self.drop_a.forward(h, train=train, rng=rng)
        if self.tail:
            return h
        h = self.conv_b.forward(h, train=train, rng=rng)
        h = self.bn_b.forward(h, train=train, rng=rng)
        self._used_residual = residual
        if residual:
            shortcut = x if self.proj is None else self.proj.forward(x, train=train, rng=rng)
            h = h + shortcut
        h = self.act_b.forward(h, train=train, rng=rng)
        return self.drop_b.forward(h, train=train, rng=rng)

    def backward(self, grad):
        if not self.tail:
            grad = self.drop_b.backward(grad)
            grad_sum = self.act_b.backward(grad)
            g = self.bn_b.backward(grad_sum)
            g = self.conv_b.backward(g)
        else:
            grad_sum = None
            g = grad
        g = self.drop_a.backward(g)
        g = self.act_a.backward(g)
        g = self.bn_a.backward(g)
        gx = self.conv_a.backward(g)
        if not self.tail and self._used_residual:
            gx = gx + (grad_sum if self.proj is None else self.proj.backward(grad_sum))
        return gx


class _CnnExtractor:
    """Residual 1-D convolution stack; filters double at every stride-2 layer
    and the per-step outputs are globally average-pooled into the feature
    vector."""

    def __init__(self, cfg: ModelConfig, rng):
        down = set(cfg.downsample_layers)
        channels, strides = [], []
        c = cfg.width
        for i in range(cfg.layers):
            if i in down and i > 0:
                c *= 2
            channels.append(c)
            strides.append(2 if i in down else 1)
        self.blocks = []
        self.named = []
        c_in = cfg.embed_dim
        i = 0
        while i < cfg.layers:
            tail = i == cfg.layers - 1 and cfg.layers % 2 == 1
            if tail:
                block = _CnnBlock(c_in, channels[i], channels[i], (strides[i], 1), cfg.dropout, rng, tail=True)
                i += 1
            else:
                block = _CnnBlock(
                    c_in, channels[i], channels[i + 1], (strides[i], strides[i + 1]), cfg.dropout, rng
                )
                i += 2
            c_in = channels[i - 1]
            idx = len(self.blocks)
            self.blocks.append(block)
            self.named += [(f"b{idx}/{name}", layer) for name, layer in block.named]
        self.residual_enabled = True

    def forward(self, x, train, rng):
        for block in self.blocks:
            x = block.forward(x, train, rng, residual=self.residual_enabled)
        self._pooled_len = x.shape[1]
        return x.mean(axis=1)

    def backward(self, d_feature):
        g = np.repeat(d_feature[:, None, :], self._pooled_len, axis=1) / self._pooled_len
        for block in reversed(self.blocks):
            g = block.backward(g)
        return g


class _RecurrentExtractor:
    """Stacked bidirectional recurrent layers; the feature vector is the sum
    over steps of the last layer's output ("rnn") or the concatenated final
    states of the two directions ("lstm")."""

    def __init__(self, cfg: ModelConfig, rng):
        self.kind = cfg.extractor
        self.layers = []
        self.drops = []
        self.named = []
        n_in = cfg.embed_dim
        for i in range(cfg.layers):
            if self.kind == "rnn":
                layer = RecurrentLayer(n_in, cfg.width, rng, seq_len=SEQ_LEN)
                n_in = cfg.width
            else:
                layer = LSTMLayer(n_in, cfg.width, rng, seq_len=SEQ_LEN)
                n_in = 2 * cfg.width
            drop = Dropout(cfg.dropout)
            self.layers.append(layer)
            self.drops.append(drop)
            self.named.append((f"l{i}", layer))
        self.width = cfg.width

    def forward(self, x, train, rng):
        for layer, drop in zip(self.layers, self.drops):
            x = layer.forward(x, train=train, rng=rng)
            x = drop.forward(x, train=train, rng=rng)
        self._out_shape = x.shape
        if self.kind == "rnn":
            return x.sum(axis=1)
        w = self.width
        return np.concatenate([x[:, -1, :w], x[:, 0, w:]], axis=1)

    def backward(self, d_feature):
        n, t, c = self._out_shape
        if self.kind == "rnn":
            g = np.repeat(d_feature[:, None, :], t, axis=1)
        else:
            w = self.width
            g = np.zeros((n, t, c))
            g[:, -1, :w] = d_feature[:, :w]
            g[:, 0, w:] = d_feature[:, w:]
        for layer, drop in zip(reversed(self.layers), reversed(self.drops)):
            g = drop.backward(g)
            g = layer.backward(g)
        return g


def _head(n_in, widths, n_out, rng):
    parts = []
    for i, w in enumerate(widths):
        parts.append((f"h{i}", Dense(n_in, w, rng)))
        parts.append((f"a{i}", Activation("elu")))
        n_in = w
    parts.append(("out", Dense(n_in, n_out, rng)))
    return Chain(parts)


class Model:
    """The assembled network; parameter shapes derive from the config alone,
    and two builds with the same config are bit-identical."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        if config.embedding == "onehot":
            self.front = OneHot(VOCAB_SIZE)
        else:
            self.front = Embedding(VOCAB_SIZE, config.embed_dim, rng)
        if config.extractor == "rescnn":
            self.extractor = _CnnExtractor(config, rng)
        else:
            self.extractor = _RecurrentExtractor(config, rng)
        f = config.feature_dim
        self.price_head = _head(f + AUX_IN_DIM, config.price_head, 1, rng)
        self.aux_head = _head(f, config.aux_head, N_AUX, rng)
        self._components = [
            ("front", self.front),
            *[(f"{config.extractor}/{name}", layer) for name, layer in self.extractor.named],
            ("price", self.price_head),
            ("aux", self.aux_head),
        ]

    def _collect(self, getter) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in self._components:
            for key, val in getter(part).items():
                out[f"{prefix}/{key}"] = val
        return out

    def named_params(self):
        return self._collect(lambda p: p.params())

    def named_grads(self):
        return self._collect(lambda p: p.grads())

    def named_state(self):
        return self._collect(lambda p: p.state())

    def zero_grads(self):
        for g in self.named_grads().values():
            g[...] = 0.0

    def param_count(self) -> int:
        return sum(v.size for v in self.named_params().values())

    def forward(self, tokens, aux_in, train=False, rng=None) -> ForwardOutput:
        emb = self.front.forward(tokens, train=train, rng=rng)
        feat = self.extractor.forward(emb, train, rng)
        price = self.price_head.forward(np.concatenate([feat, aux_in], axis=1), train=train, rng=rng)[:, 0]
        raw = self.aux_head.forward(feat, train=train, rng=rng)
        if self.config.aux_targets == "features":
            probs = expit(raw[:, :N_AUX_BINARY])
            self._aux_probs = probs
            aux = np.concatenate([probs, raw[:, N_AUX_BINARY:]], axis=1)
        else:
            self._aux_probs = None
            aux = raw
        assert_all_finite(price, "price output")
        assert_all_finite(aux, "aux output")
        assert_all_finite(feat, "feature vector")
        return ForwardOutput(price=price, aux=aux, features=feat)

    def backward(self, d_price, d_aux):
        """Accumulate gradients from the two heads; call right after a
        train-mode forward."""
        d_raw = np.array(d_aux, dtype=np.float64, copy=True)
        if self._aux_probs is not None:
            p = self._aux_probs
            d_raw[:, :N_AUX_BINARY] *= p * (1.0 - p)
        d_feat = self.aux_head.backward(d_raw)
        d_price_in = self.price_head.backward(np.asarray(d_price)[:, None])
        d_feat = d_feat + d_price_in[:, : self.config.feature_dim]
        d_emb = self.extractor.backward(d_feat)
        self.front.backward(d_emb)


# ---------------------------------------------------------------------------
# Persistence: PMRK container
# ---------------------------------------------------------------------------

MAGIC = b"PMRK"
FORMAT_VERSION = 1


class PersistenceError(ValueError):
    """Corrupt, truncated, or incompatible model/index file."""


@dataclass
class ModelBundle:
    model: Model
    doc: dict
    mdn: "object | None" = None  # MDNModel, if fitted


def _snap_float32(arrays) -> None:
    for arr in arrays:
        snapped = arr.astype(np.float32)
        if not np.all(np.isfinite(snapped)):
            raise PersistenceError("value outside 32-bit float range")
        arr[...] = snapped.astype(np.float64)


def _encode_tensors(tensors: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray()
    for name, arr in tensors:
        name_bytes = name.encode("utf-8")
        out += struct.pack("<I", len(name_bytes)) + name_bytes
        out += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.astype("<f4").tobytes()
    return bytes(out)


def model_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    params = model.named_params()
    state = model.named_state()
    return [*params.items(), *((f"state/{k}", v) for k, v in state.items())]


def model_fingerprint(model: Model) -> bytes:
    """SHA-256 over the serialized weight tensors (32 bytes)."""
    return hashlib.sha256(_encode_tensors(model_tensors(model))).digest()


def save_model(model: Model, path, extra_doc: dict | None = None, mdn=None) -> None:
    """Write the PMRK container.

    Weights are persisted as 32-bit floats; the in-memory model is snapped to
    that precision first so the model in hand and the reloaded model produce
    bit-identical predictions.
    """
    _snap_float32(model.named_params().values())
    _snap_float32(model.named_state().values())
    doc = {"config": model.config.to_doc()}
    if extra_doc:
        doc.update(extra_doc)
    tensors = model_tensors(model)
    if mdn is not None:
        tensors += [(f"mdn/{k}", v) for k, v in mdn.named_params().items()]
        doc["mdn"] = {"n_components": mdn.n_components, "hidden": mdn.hidden}

    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<B", FORMAT_VERSION)
    doc_bytes = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload += struct.pack("<I", len(doc_bytes)) + doc_bytes
    payload += struct.pack("<I", len(tensors))
    payload += _encode_tensors(tensors)
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    with open(path, "wb") as fh:
        fh.write(payload)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise PersistenceError("truncated file")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path) -> ModelBundle:
    from platemark.mdn import MDNModel  # local import to keep modules acyclic

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9:
        raise PersistenceError("truncated file")
    if blob[:4] != MAGIC:
        raise PersistenceError("bad magic bytes")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise PersistenceError("checksum mismatch")
    reader = _Reader(blob[: len(blob) - 4])
    reader.take(4)
    version = reader.take(1)[0]
    if version != FORMAT_VERSION:
        raise PersistenceError(f"unsupported format version {version}")
    doc = json.loads(reader.take(reader.u32()).decode("utf-8"))
    model = Model(ModelConfig.from_doc(doc["config"]))

    loaded: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        loaded[name] = data.astype(np.float64)
    if reader.pos != len(reader.blob):
        raise PersistenceError("trailing bytes after tensor section")

    expected = dict(model_tensors(model))
    mdn_tensors = {}
    for name, arr in loaded.items():
        if name.startswith("mdn/"):
            mdn_tensors[name[4:]] = arr
            continue
        if name not in expected:
            raise PersistenceError(f"unknown tensor {name!r}")
        if expected[name].shape != arr.shape:
            raise PersistenceError(f"tensor {name!r} has shape {arr.shape}, expected {expected[name].shape}")
        expected[name][...] = arr
    missing = [k for k in expected if k not in loaded]
    if missing:
        raise PersistenceError(f"missing tensors: {missing[:3]}")

    mdn = None
    if mdn_tensors:
        mdn = MDNModel.from_named_params(mdn_tensors)
    return ModelBundle(model=model, doc=doc, mdn=mdn)
