"""Shared-MLP point encoders, pooled classifier heads and FADC checkpoints."""
from __future__ import annotations

import configparser
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, constant

CKPT_MAGIC = b"FADC"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple = (16, 16)  # hidden widths of the shared per-point MLP
    feature_dim: int = 64
    activation: str = "relu"
    in_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w < 1 for w in self.widths) or self.feature_dim < 1:
            raise ValueError(f"encoder widths must be >= 1, got {self.widths} / D={self.feature_dim}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list:
        dims = [self.in_dim, *self.widths, self.feature_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class HeadConfig:
    widths: tuple = (32,)  # hidden fully-connected widths, the C-way output layer is implied
    n_classes: int = 4
    pooling: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w < 1 for w in self.widths) or self.n_classes < 1:
            raise ValueError(f"head widths must be >= 1, got {self.widths} / C={self.n_classes}")
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"pooling must be 'max' or 'mean', got {self.pooling!r}")

    def layer_dims(self, feature_dim: int) -> list:
        dims = [feature_dim, *self.widths, self.n_classes]
        return list(zip(dims[:-1], dims[1:]))


TEACHER_ENCODER = EncoderConfig(widths=(64, 128, 256), feature_dim=64)
TEACHER_HEAD = HeadConfig(widths=(512, 256))
STUDENT_ENCODER = EncoderConfig(widths=(16, 16), feature_dim=64)
STUDENT_HEAD = HeadConfig(widths=(32,))


@dataclass
class Model:
    """Encoder + head parameters, stored as alternating (weight, bias) tensors.

    Encoder layers come first, then head layers, then the optional adapter
    matrix that maps student features to the teacher's feature width.
    """

    encoder: EncoderConfig
    head: HeadConfig
    params: list = field(default_factory=list)
    adapter_dim: Optional[int] = None

    @property
    def n_encoder_layers(self) -> int:
        return len(self.encoder.layer_dims)

    def encoder_layers(self):
        p = self.params
        return [(p[2 * i], p[2 * i + 1]) for i in range(self.n_encoder_layers)]

    def head_layers(self):
        p = self.params
        start = 2 * self.n_encoder_layers
        n = len(self.head.layer_dims(self.encoder.feature_dim))
        return [(p[start + 2 * i], p[start + 2 * i + 1]) for i in range(n)]

    @property
    def adapter(self) -> Optional[Tensor]:
        return self.params[-1] if self.adapter_dim is not None else None

    def n_trainable(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Model":
        return Model(self.encoder, self.head,
                     [Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in self.params],
                     self.adapter_dim)


def expected_shapes(encoder: EncoderConfig, head: HeadConfig, adapter_dim: Optional[int] = None) -> list:
    shapes = []
    for fan_in, fan_out in encoder.layer_dims + head.layer_dims(encoder.feature_dim):
        shapes += [(fan_in, fan_out), (fan_out,)]
    if adapter_dim is not None:
        shapes.append((encoder.feature_dim, adapter_dim))
    return shapes


def init_model(encoder: EncoderConfig, head: HeadConfig, seed, adapter_dim: Optional[int] = None) -> Model:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in expected_shapes(encoder, head, adapter_dim):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params.append(Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True))
        else:
            params.append(Tensor(np.zeros(shape), requires_grad=True))
    return Model(encoder, head, params, adapter_dim)


def check_params(model: Model) -> None:
    want = expected_shapes(model.encoder, model.head, model.adapter_dim)
    got = [p.shape for p in model.params]
    if want != got:
        raise ShapeError(f"parameters {got} do not match config shapes {want}")


def encode(model: Model, coords) -> Tensor:
    """Per-point features (B x N x D): the same MLP is applied to every point.

    Hidden layers use ReLU; the last layer is linear so per-point minima stay
    informative (after a ReLU nearly every point has some zero channel).
    """
    x = as_tensor(coords)
    if x.ndim != 3 or x.shape[-1] != model.encoder.in_dim:
        raise ShapeError(f"encode expects B x N x {model.encoder.in_dim} coordinates, got {x.shape}")
    layers = model.encoder_layers()
    if not x.requires_grad and not any(p.requires_grad for p in model.params[:2 * len(layers)]):
        return constant(_encode_inplace(x.data, layers))
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < len(layers) - 1:
            x = x.relu()
    return x


def _encode_inplace(x: np.ndarray, layers) -> np.ndarray:
    # same arithmetic as the taped path, without temporaries or graph nodes
    lead = x.shape[:-1]
    x = x.reshape(-1, x.shape[-1])
    for i, (w, b) in enumerate(layers):
        x = x @ w.data
        x += b.data
        if i < len(layers) - 1:
            np.maximum(x, 0.0, out=x)
    return x.reshape(lead + (x.shape[-1],))


def classify(model: Model, features) -> Tensor:
    """Pool over the point axis then run the fully-connected stack; returns B x C logits."""
    f = as_tensor(features)
    if f.ndim != 3 or f.shape[-1] != model.encoder.feature_dim:
        raise ShapeError(f"classify expects B x N x {model.encoder.feature_dim} features, got {f.shape}")
    h = f.max(axis=1) if model.head.pooling == "max" else f.mean(axis=1)
    layers = model.head_layers()
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = h.relu()
    return h


def forward(model: Model, coords) -> tuple:
    f = encode(model, coords)
    return f, classify(model, f)


def adapt(model: Model, features: Tensor) -> Tensor:
    """Map student features to the teacher width; identity when no adapter is configured."""
    return features if model.adapter is None else features @ model.adapter


def count_params_flops(encoder: EncoderConfig, head: HeadConfig, n_points: int,
                       adapter_dim: Optional[int] = None) -> tuple:
    """Trainable scalar count and multiply-add FLOPs (2 per MAC) for one sample.

    Encoder layers run once per point; head layers once per sample.  Bias adds,
    activations and pooling are not counted.
    """
    params = 0
    flops = 0
    for fan_in, fan_out in encoder.layer_dims:
        params += fan_in * fan_out + fan_out
        flops += 2 * fan_in * fan_out * n_points
    for fan_in, fan_out in head.layer_dims(encoder.feature_dim):
        params += fan_in * fan_out + fan_out
        flops += 2 * fan_in * fan_out
    if adapter_dim is not None:
        params += encoder.feature_dim * adapter_dim
    return params, flops


# -- config files ------------------------------------------------------------

BUILTIN_CONFIGS = {
    "teacher": (TEACHER_ENCODER, TEACHER_HEAD),
    "student": (STUDENT_ENCODER, STUDENT_HEAD),
}


def _ints(text: str) -> tuple:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def parse_config(text: str, n_classes: Optional[int] = None) -> tuple:
    """Read ``[encoder]`` / ``[head]`` sections; returns ``(EncoderConfig, HeadConfig)``."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        enc = cp["encoder"]
        hd = cp["head"] if cp.has_section("head") else {}
        encoder = EncoderConfig(
            widths=_ints(enc.get("widths", "")),
            feature_dim=int(enc.get("feature_dim", "64")),
            activation=enc.get("activation", "relu"),
        )
        classes = n_classes if n_classes is not None else int(hd.get("classes", "4"))
        head = HeadConfig(
            widths=_ints(hd.get("widths", "")),
            n_classes=classes,
            pooling=hd.get("pooling", "max"),
        )
    except (configparser.Error, KeyError, ValueError) as exc:
        raise ValueError(f"malformed model config: {exc}") from None
    return encoder, head


def format_config(encoder: EncoderConfig, head: HeadConfig, adapter_dim: Optional[int] = None) -> str:
    lines = [
        "[encoder]",
        f"widths = {','.join(map(str, encoder.widths))}",
        f"feature_dim = {encoder.feature_dim}",
        f"activation = {encoder.activation}",
        "",
        "[head]",
        f"pooling = {head.pooling}",
        f"widths = {','.join(map(str, head.widths))}",
        f"classes = {head.n_classes}",
    ]
    if adapter_dim is not None:
        lines += ["", "[adapter]", f"teacher_dim = {adapter_dim}"]
    return "\n".join(lines) + "\n"


def load_config(name_or_path: str, n_classes: Optional[int] = None) -> tuple:
    """Built-in name (``teacher``/``student``) or path to an INI file."""
    if name_or_path in BUILTIN_CONFIGS:
        encoder, head = BUILTIN_CONFIGS[name_or_path]
        if n_classes is not None:
            head = HeadConfig(head.widths, n_classes, head.pooling)
        return encoder, head
    path = Path(name_or_path)
    if not path.is_file():
        raise FileNotFoundError(f"no model config named or at {name_or_path!r}")
    return parse_config(path.read_text(), n_classes)


# -- checkpoints -------------------------------------------------------------

def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    cfg = format_config(model.encoder, model.head, model.adapter_dim).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for p in model.params:
        buf.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_bytes(raw: bytes) -> Model:
    try:
        if raw[:4] != CKPT_MAGIC:
            raise CheckpointError("bad magic (not a FADC checkpoint)")
        (n_cfg,) = struct.unpack_from("<I", raw, 4)
        off = 8 + n_cfg
        text = raw[8:off].decode("utf-8")
        encoder, head = parse_config(text)
        cp = configparser.ConfigParser()
        cp.read_string(text)
        adapter_dim = cp.getint("adapter", "teacher_dim") if cp.has_section("adapter") else None
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params = []
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{rank}I", raw, off + 4)
            off += 4 + 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if off + 8 * n > len(raw):
                raise CheckpointError("truncated tensor payload")
            data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            params.append(Tensor(data.astype(np.float64), requires_grad=True))
        if off != len(raw):
            raise CheckpointError(f"{len(raw) - off} trailing bytes")
    except (struct.error, UnicodeDecodeError, configparser.Error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    model = Model(encoder, head, params, adapter_dim)
    try:
        check_params(model)
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from None
    return model


def load_checkpoint(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
