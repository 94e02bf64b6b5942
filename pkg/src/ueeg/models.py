"""The three encoder architectures and their checkpoint format.

Inputs are (B, C, T) batches viewed internally as single-plane images
(B, 1, C, T). The printed kernels are (filters, (height, width)):

* four_cnn: conv (32,(1,4)) -> conv (32,(C,1)) -> conv (50,(4,25)) -> pool ->
  conv (100,(50,2)) -> pool, each conv followed by batchnorm and ReLU, then
  dense 256 (ReLU) -> dropout 0.5 -> dense K.
* gru_encoder: conv (32,(1,4)) -> conv (32,(C,1)) -> depthwise (50,(4,25)) ->
  one GRU (hidden 30) run over the time axis of each of the 50 maps ->
  concatenated final states -> dense 128 (the encoding) -> classifier head.
* autoencoder: the four_cnn conv stack -> dense 128 (the encoding) ->
  dense F (ReLU) -> dense C*T (ReLU), reconstruction of min-max scaled input.

The (C,1) kernel collapses all electrodes, so after the second conv the height
axis is 1. The following layers read the stacked feature maps as the height
axis: the 32 maps feed the depthwise (4,25) kernel as a (32, W) plane, and the
50 maps of conv 3 feed the (50,2) kernel of conv 4 as a (50, W) plane. A
kernel longer than its axis switches that axis to same padding; a pooling
window longer than its axis is shrunk to the axis length.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import layers as L
from .classical import KNNClassifier, RandomForest, Tree
from .errors import BadMagic, ContainerShapeMismatch, GeometryMismatch, InputTooSmall, ShapeMismatch, VersionUnsupported
from .rng import substream
from .tensor import Tensor, concat, flatten, relu, reshape, softmax, transpose

log = logging.getLogger(__name__)

ARCHS = ("four_cnn", "gru_encoder", "autoencoder")
REFERENCE_KERNELS = ((32, (1, 4)), (32, (14, 1)), (50, (4, 25)), (100, (50, 2)))
POOL = (1, 2)


@dataclass
class ModelConfig:
    arch: str
    channels: int
    timesteps: int
    num_classes: int
    conv_spec: list | None = None
    gru_hidden: int = 30
    gru_shared: bool = True
    embedding_dim: int = 128
    dropout: float = 0.5
    classifier_hidden: int = 256
    seed: int = 0
    head: str = "knn"
    knn_k: int = 5
    rf_estimators: int = 100

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.channels < 1 or self.timesteps < 4:
            raise InputTooSmall(
                f"need C >= 1 and T >= 4, got C={self.channels}, T={self.timesteps}"
            )
        if self.conv_spec is not None:
            self.conv_spec = [[int(f), [int(k) for k in ks]] for f, ks in self.conv_spec]

    def kernels(self) -> list[tuple[int, tuple[int, int]]]:
        """(filters, kernel) per conv layer; the channel kernel follows C unless overridden."""
        if self.conv_spec is not None:
            return [(f, tuple(k)) for f, k in self.conv_spec]
        spec = list(REFERENCE_KERNELS)
        spec[1] = (spec[1][0], (self.channels, 1))
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Model:
    def __init__(self, config: ModelConfig, layers: dict[str, L.LayerParams], plan: dict):
        self.config = config
        self.layers = layers
        self.plan = plan
        self.mode = "eval"
        self.norm: tuple[np.ndarray, np.ndarray] | None = None
        self.heads: dict[str, object] = {}

    # parameters -------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{ln}.{wn}", t) for ln, p in self.layers.items() for wn, t in p.weights.items()]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, L.LayerParams, str]]:
        return [(f"{ln}.{bn}", p, bn) for ln, p in self.layers.items() for bn in p.buffers]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def kernel_list(self) -> list[tuple[int, tuple[int, int]]]:
        return [
            (p.hyper.get("filters", p.hyper.get("multiplier")), tuple(p.hyper["kernel_size"]))
            for p in self.layers.values()
            if p.kind in ("conv2d", "depthwise_conv2d")
        ]

    # forward -----------------------------------------------------------------
    def _check(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 3 or x.shape[1:] != (c.channels, c.timesteps):
            raise ShapeMismatch(f"expected (B, {c.channels}, {c.timesteps}), got {x.shape}")

    def _conv_stack(self, x: Tensor, mode: str) -> Tensor:
        B = x.shape[0]
        h = reshape(x, (B, 1, x.shape[1], x.shape[2]))
        for i in range(1, 5):
            if i == 4:
                h = reshape(h, (B, 1, h.shape[1] * h.shape[2], h.shape[3]))
            h = L.conv2d(h, self.layers[f"conv{i}"])
            h = relu(L.batchnorm(h, self.layers[f"bn{i}"], mode))
            if i >= 3:
                h = L.maxpool2d(h, self.plan[f"pool{i}"])
        return flatten(h)

    def _gru_features(self, x: Tensor, mode: str) -> Tensor:
        B = x.shape[0]
        h = reshape(x, (B, 1, x.shape[1], x.shape[2]))
        h = relu(L.conv2d(h, self.layers["conv1"]))
        h = relu(L.conv2d(h, self.layers["conv2"]))
        h = reshape(h, (B, 1, h.shape[1] * h.shape[2], h.shape[3]))
        h = relu(L.depthwise_conv2d(h, self.layers["dw"]))
        _, maps, height, width = h.shape
        seq = transpose(h, (0, 1, 3, 2))  # (B, maps, time, features)
        if self.config.gru_shared:
            _, final = L.gru_forward(reshape(seq, (B * maps, width, height)), self.layers["gru"])
            return reshape(final, (B, maps * self.config.gru_hidden))
        finals = [L.gru_forward(seq[:, m], self.layers[f"gru{m}"])[1] for m in range(maps)]
        return concat(finals, axis=1)

    def _classifier(self, feat: Tensor, mode: str, rng) -> Tensor:
        h = relu(L.dense(feat, self.layers["fc1"]))
        h = L.dropout(h, self.config.dropout, mode, rng)
        return L.dense(h, self.layers["out"])

    def encode(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Embedding (B, embedding_dim) for gru_encoder/autoencoder, flattened conv features for four_cnn."""
        self._check(x)
        arch = self.config.arch
        if arch == "four_cnn":
            return self._conv_stack(x, mode)
        if arch == "gru_encoder":
            return L.dense(self._gru_features(x, mode), self.layers["embed"])
        return L.dense(self._conv_stack(x, mode), self.layers["embed"])

    def forward(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Logits (B, K); for the autoencoder the reconstruction (B, C, T)."""
        if mode == "train" and rng is None:
            rng = substream(self.config.seed, "dropout")
        enc = self.encode(x, mode)
        if self.config.arch == "autoencoder":
            h = relu(L.dense(enc, self.layers["dec1"]))
            h = relu(L.dense(h, self.layers["dec2"]))
            return reshape(h, x.shape)
        return self._classifier(enc, mode, rng)

    # preprocessing -----------------------------------------------------------
    def preprocess(self, records: np.ndarray) -> np.ndarray:
        from .data import apply_standardize, minmax_records

        if self.config.arch == "autoencoder":
            return minmax_records(records)
        if self.norm is not None:
            return apply_standardize(records, *self.norm)
        return np.asarray(records, dtype=np.float32)


def _dense_chain(layers, rng_for, specs):
    for name, d_in, d_out in specs:
        layers[name] = L.dense_params(d_in, d_out, rng_for(name))


def _conv_layers(cfg: ModelConfig, rng_for, layers: dict, plan: dict) -> int:
    """Add conv1..conv4 with batchnorm; return the flattened feature size."""
    (f1, k1), (f2, k2), (f3, k3), (f4, k4) = cfg.kernels()
    shape = (1, cfg.channels, cfg.timesteps)  # (channels, height, width) without batch
    for i, (f, k) in enumerate([(f1, k1), (f2, k2), (f3, k3), (f4, k4)], start=1):
        c, h, w = shape
        if i == 4:
            c, h = 1, c * h
        pads = (
            L.resolve_padding(h, k[0], "auto", f"conv{i} height"),
            L.resolve_padding(w, k[1], "auto", f"conv{i} width"),
        )
        layers[f"conv{i}"] = L.conv2d_params(c, f, k, rng_for(f"conv{i}"), pads)
        layers[f"bn{i}"] = L.batchnorm_params(f)
        h = h + sum(pads[0]) - k[0] + 1
        w = w + sum(pads[1]) - k[1] + 1
        if i >= 3:
            window = (min(POOL[0], h), min(POOL[1], w))
            if window != POOL:
                log.info("conv%d output %dx%d: pooling window reduced to %s", i, h, w, window)
            plan[f"pool{i}"] = window
            h, w = h // window[0], w // window[1]
        shape = (f, h, w)
    return shape[0] * shape[1] * shape[2]


def _builder(cfg: ModelConfig):
    layers: dict[str, L.LayerParams] = {}
    plan: dict = {}
    return layers, plan, (lambda name: substream(cfg.seed, f"init:{name}"))


def build_four_cnn(cfg: ModelConfig) -> Model:
    layers, plan, rng_for = _builder(cfg)
    feat = _conv_layers(cfg, rng_for, layers, plan)
    plan["features"] = feat
    _dense_chain(layers, rng_for, [("fc1", feat, cfg.classifier_hidden),
                                   ("out", cfg.classifier_hidden, cfg.num_classes)])
    return Model(cfg, layers, plan)


def build_gru_encoder(cfg: ModelConfig) -> Model:
    layers, plan, rng_for = _builder(cfg)
    (f1, k1), (f2, k2), (m, kd), _ = cfg.kernels()
    h, w = cfg.channels, cfg.timesteps
    for name, c_in, f, k in (("conv1", 1, f1, k1), ("conv2", f1, f2, k2)):
        pads = (L.resolve_padding(h, k[0], "auto", f"{name} height"),
                L.resolve_padding(w, k[1], "auto", f"{name} width"))
        layers[name] = L.conv2d_params(c_in, f, k, rng_for(name), pads)
        h, w = h + sum(pads[0]) - k[0] + 1, w + sum(pads[1]) - k[1] + 1
    h = f2 * h  # feature maps stacked along height
    pads = (L.resolve_padding(h, kd[0], "auto", "depthwise height"),
            L.resolve_padding(w, kd[1], "auto", "depthwise width"))
    layers["dw"] = L.depthwise_conv2d_params(1, m, kd, rng_for("dw"), pads)
    h, w = h + sum(pads[0]) - kd[0] + 1, w + sum(pads[1]) - kd[1] + 1
    plan.update(maps=m, seq_len=w, seq_features=h)
    if cfg.gru_shared:
        layers["gru"] = L.gru_params(h, cfg.gru_hidden, rng_for("gru"))
    else:
        for i in range(m):
            layers[f"gru{i}"] = L.gru_params(h, cfg.gru_hidden, rng_for(f"gru{i}"))
    _dense_chain(layers, rng_for, [
        ("embed", m * cfg.gru_hidden, cfg.embedding_dim),
        ("fc1", cfg.embedding_dim, cfg.classifier_hidden),
        ("out", cfg.classifier_hidden, cfg.num_classes),
    ])
    return Model(cfg, layers, plan)


def build_autoencoder(cfg: ModelConfig) -> Model:
    layers, plan, rng_for = _builder(cfg)
    feat = _conv_layers(cfg, rng_for, layers, plan)
    plan["features"] = feat
    _dense_chain(layers, rng_for, [
        ("embed", feat, cfg.embedding_dim),
        ("dec1", cfg.embedding_dim, feat),
        ("dec2", feat, cfg.channels * cfg.timesteps),
    ])
    return Model(cfg, layers, plan)


BUILDERS = {"four_cnn": build_four_cnn, "gru_encoder": build_gru_encoder, "autoencoder": build_autoencoder}


def build_model(cfg: ModelConfig) -> Model:
    return BUILDERS[cfg.arch](cfg)


def encode(model: Model, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    return model.encode(x, "eval")


def classify(model: Model, batch, head: str | None = None) -> np.ndarray:
    """Class probabilities (B, K) in eval mode; rows sum to one."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if model.config.arch == "autoencoder":
        name = head or model.config.head
        if name not in model.heads:
            raise GeometryMismatch(f"autoencoder has no fitted {name!r} head")
        return model.heads[name].predict_proba(encode(model, x).data)
    return softmax(model.forward(x, "eval"), axis=1).data


# ---------------------------------------------------------------------------
# checkpoints
#
#   b"UEEG" | version u8 | config length u32 | config (canonical JSON)
#   tensor count u32, then per tensor:
#   name length u32 | name (UTF-8) | rank u32 | dims u32 * rank | float32 data

CKPT_MAGIC = b"UEEG"
CKPT_VERSION = 1


def _state(model: Model) -> list[tuple[str, np.ndarray]]:
    items = [(n, t.data) for n, t in model.named_parameters()]
    items += [(n, p.buffers[b]) for n, p, b in model.named_buffers()]
    if model.norm is not None:
        items += [("norm.mean", model.norm[0]), ("norm.std", model.norm[1])]
    knn = model.heads.get("knn")
    if knn is not None:
        items += [("head.knn.x", knn.x_), ("head.knn.y", knn.y_)]
    rf = model.heads.get("rf")
    if rf is not None:
        for i, t in enumerate(rf.trees):
            for part in ("feature", "threshold", "left", "right", "value"):
                items.append((f"head.rf.{i}.{part}", getattr(t, part)))
    return items


def _meta(model: Model) -> dict:
    meta = {"config": model.config.to_dict(), "heads": {}}
    if "knn" in model.heads:
        knn = model.heads["knn"]
        meta["heads"]["knn"] = {"k": knn.k, "num_classes": knn.num_classes_}
    if "rf" in model.heads:
        rf = model.heads["rf"]
        meta["heads"]["rf"] = {"n_estimators": rf.n_estimators, "seed": rf.seed,
                               "num_classes": rf.num_classes, "n_features": rf.n_features}
    return meta


def checkpoint_bytes(model: Model) -> bytes:
    from .data import canonical_json

    buf = io.BytesIO()
    meta = canonical_json(_meta(model))
    buf.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(meta)) + meta)
    items = _state(model)
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(nb)) + nb + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _read_tensors(buf: bytes, pos: int) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4 : pos + 4 + nlen].decode("utf-8")
        pos += 4 + nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        pos += 4 + 4 * rank
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(buf):
            raise ContainerShapeMismatch(
                f"tensor {name!r} needs bytes {pos}..{pos + 4 * n}, checkpoint has {len(buf)}"
            )
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
    if pos != len(buf):
        raise ContainerShapeMismatch(f"checkpoint has {len(buf) - pos} trailing bytes at offset {pos}")
    return arrays


def load_checkpoint_bytes(buf: bytes) -> Model:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"bad checkpoint magic {buf[:4]!r} at offset 0")
    if len(buf) < 9:
        raise ContainerShapeMismatch(f"checkpoint header needs 9 bytes, got {len(buf)}")
    version, mlen = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version} at offset 4 is not supported")
    try:
        meta = json.loads(buf[9 : 9 + mlen].decode("utf-8"))
        arrays = _read_tensors(buf, 9 + mlen)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, ContainerShapeMismatch):
            raise
        raise ContainerShapeMismatch(f"truncated or corrupt checkpoint ({len(buf)} bytes): {exc}") from None

    model = build_model(ModelConfig.from_dict(meta["config"]))
    for name, t in model.named_parameters():
        if arrays[name].shape != t.shape:
            raise GeometryMismatch(f"{name}: stored {arrays[name].shape}, model {t.shape}")
        t._replace(arrays[name].astype(t.dtype))
    for name, p, b in model.named_buffers():
        p.buffers[b] = arrays[name].astype(p.buffers[b].dtype)
    if "norm.mean" in arrays:
        model.norm = (arrays["norm.mean"].astype(np.float64), arrays["norm.std"].astype(np.float64))
    heads = meta.get("heads", {})
    if "knn" in heads:
        knn = KNNClassifier(heads["knn"]["k"])
        knn.fit(arrays["head.knn.x"], arrays["head.knn.y"].astype(np.int64), heads["knn"]["num_classes"])
        model.heads["knn"] = knn
    if "rf" in heads:
        h = heads["rf"]
        rf = RandomForest(h["n_estimators"], h["seed"], num_classes=h["num_classes"], n_features=h["n_features"])
        for i in range(h["n_estimators"]):
            get = lambda part: arrays[f"head.rf.{i}.{part}"]
            rf.trees.append(Tree(
                get("feature").astype(np.int64), get("threshold").astype(np.float32),
                get("left").astype(np.int64), get("right").astype(np.int64),
                get("value").astype(np.int64),
            ))
        model.heads["rf"] = rf
    return model


def load_checkpoint(path) -> Model:
    return load_checkpoint_bytes(Path(path).read_bytes())
