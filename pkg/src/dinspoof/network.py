"""Depthwise-Inception Network: backbone, heads, and complexity accounting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from dinspoof.errors import ConfigError
from dinspoof.layers import (
    GELU,
    BatchNorm,
    Conv2d,
    DepthwiseConv2d,
    GlobalMaxPool,
    GradientTape,
    Layer,
    Linear,
    Param,
    ParameterStore,
    PointwiseConv2d,
    Sequential,
)

BRANCH_KERNELS = {"b": (3, 3), "c": (3, 1), "d": (5, 1)}  # (frequency, time)


@dataclass
class DinConfig:
    in_channels: int = 3
    input_height: int = 128
    input_width: int = 128
    stem_channels: int = 64
    stem_kernel: tuple[int, int] = (4, 4)
    stem_stride: int = 2
    block_channels: list[int] = field(default_factory=lambda: [256, 384, 640, 768])
    block_strides: list[int] = field(default_factory=lambda: [2, 2, 1, 1])
    softmax_head_hidden: int = 128
    n_classes_stage1: int = 7
    contrastive_dim: int = 128
    entropy_classes: int = 2

    def __post_init__(self):
        self.stem_kernel = tuple(self.stem_kernel)
        self.block_channels = list(self.block_channels)
        self.block_strides = list(self.block_strides)
        if len(self.block_channels) != 4 or len(self.block_strides) != 4:
            raise ConfigError("DinConfig needs exactly 4 Dew-Inc blocks")
        dims = [self.in_channels, self.stem_channels, *self.block_channels, self.softmax_head_hidden,
                self.contrastive_dim, self.n_classes_stage1, self.entropy_classes]
        if min(dims) <= 0 or min(self.block_strides) <= 0 or self.stem_stride <= 0:
            raise ConfigError("all channel counts and strides must be positive")
        bad = [c for c in self.block_channels if c % 4]
        if bad:
            raise ConfigError(f"block channels must be divisible by 4 (four branches), got {bad}")

    @property
    def embedding_dim(self) -> int:
        return self.block_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_kernel"] = list(self.stem_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DinConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def conv_bn_gelu(conv: Layer, channels: int, dtype) -> Sequential:
    return Sequential(("conv", conv), ("bn", BatchNorm(channels, dtype)), ("act", GELU()))


class DewIncBlock(Layer):
    """Four parallel branches concatenated on channels, plus a residual shortcut.

    a: 1x1 pointwise; b/c/d: depthwise 3x3 / 3x1 / 5x1 then 1x1 pointwise.
    Every conv is followed by BN + GELU; the projection shortcut by BN only.
    """

    def __init__(self, cin: int, cout: int, stride: int, rng, dtype=np.float32):
        if cout % 4:
            raise ConfigError(f"Dew-Inc output channels must be divisible by 4, got {cout}")
        q = cout // 4
        self.cin, self.cout, self.stride = cin, cout, stride
        self.branches: list[tuple[str, Sequential]] = [
            ("branch_a", Sequential(("pw", conv_bn_gelu(PointwiseConv2d(cin, q, stride, rng, dtype), q, dtype))))
        ]
        for key, kernel in BRANCH_KERNELS.items():
            self.branches.append((f"branch_{key}", Sequential(
                ("dw", conv_bn_gelu(DepthwiseConv2d(cin, kernel, stride, rng, dtype), cin, dtype)),
                ("pw", conv_bn_gelu(PointwiseConv2d(cin, q, 1, rng, dtype), q, dtype)),
            )))
        if stride == 1 and cin == cout:
            self.shortcut = None
        else:
            self.shortcut = Sequential(("pw", PointwiseConv2d(cin, cout, stride, rng, dtype)),
                                       ("bn", BatchNorm(cout, dtype)))

    def params(self):
        out = [(f"{name}.{pn}", p) for name, br in self.branches for pn, p in br.params()]
        if self.shortcut is not None:
            out += [(f"shortcut.{pn}", p) for pn, p in self.shortcut.params()]
        return out

    def forward(self, x, training=False):
        if x.shape[-1] != self.cin:
            raise ValueError(f"Dew-Inc block expects {self.cin} channels, got {x.shape}")
        outs = [br.forward(x, training) for _, br in self.branches]
        y = np.concatenate(outs, axis=-1)
        y += x if self.shortcut is None else self.shortcut.forward(x, training)
        self._cache = True
        return y

    def backward(self, dy, tape):
        self._take_cache()
        q = self.cout // 4
        dx = dy.copy() if self.shortcut is None else self.shortcut.backward(dy, tape)
        for i, (_, br) in enumerate(self.branches):
            dx += br.backward(np.ascontiguousarray(dy[..., i * q:(i + 1) * q]), tape)
        return dx


class Backbone(Layer):
    def __init__(self, cfg: DinConfig, rng, dtype=np.float32):
        self.cfg = cfg
        stem_conv = Conv2d(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, rng, dtype)
        stem_conv.propagate = False  # input spectrograms need no gradient
        self.stem = conv_bn_gelu(stem_conv, cfg.stem_channels, dtype)
        self.blocks: list[DewIncBlock] = []
        cin = cfg.stem_channels
        for cout, s in zip(cfg.block_channels, cfg.block_strides):
            self.blocks.append(DewIncBlock(cin, cout, s, rng, dtype))
            cin = cout
        self.pool = GlobalMaxPool()

    def params(self):
        out = [(f"stem.{pn}", p) for pn, p in self.stem.params()]
        for i, b in enumerate(self.blocks):
            out += [(f"blocks.{i}.{pn}", p) for pn, p in b.params()]
        return out

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(H, W, C) after the stem and after every block."""
        cfg = self.cfg
        h = -(-cfg.input_height // cfg.stem_stride)
        w = -(-cfg.input_width // cfg.stem_stride)
        shapes = [(h, w, cfg.stem_channels)]
        for cout, s in zip(cfg.block_channels, cfg.block_strides):
            h, w = -(-h // s), -(-w // s)
            shapes.append((h, w, cout))
        return shapes

    def forward(self, x, training=False):
        cfg = self.cfg
        expected = (cfg.input_height, cfg.input_width, cfg.in_channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"backbone expects (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        shapes = self.feature_shapes()
        x = self.stem.forward(x, training)
        _check_shape(x, shapes[0], "stem")
        for i, b in enumerate(self.blocks):
            x = b.forward(x, training)
            _check_shape(x, shapes[i + 1], f"block {i}")
        return self.pool.forward(x, training)

    def backward(self, dX, tape):
        d = self.pool.backward(dX, tape)
        for b in reversed(self.blocks):
            d = b.backward(d, tape)
        self.stem.backward(d, tape)


def _check_shape(x, hwc, where):
    if x.shape[1:] != hwc:
        raise RuntimeError(f"shape audit failed after {where}: got {x.shape[1:]}, expected {hwc}")


class SoftmaxHead(Sequential):
    """FC-BN-GELU; the class-weight matrix of the angular loss lives on the model."""

    def __init__(self, din, dout, rng, dtype=np.float32):
        super().__init__(("fc", Linear(din, dout, rng, dtype)), ("bn", BatchNorm(dout, dtype)), ("act", GELU()))


class ContrastiveHead(Sequential):
    def __init__(self, din, dout, rng, dtype=np.float32):
        super().__init__(
            ("fc1", Linear(din, dout, rng, dtype)), ("bn1", BatchNorm(dout, dtype)), ("act1", GELU()),
            ("fc2", Linear(dout, dout, rng, dtype)), ("bn2", BatchNorm(dout, dtype)), ("act2", GELU()),
        )


class EntropyHead(Sequential):
    """Single FC producing logits; softmax lives in the cross-entropy loss."""

    def __init__(self, din, n_classes, rng, dtype=np.float32):
        super().__init__(("fc", Linear(din, n_classes, rng, dtype)))


def to_channels_last(inputs: np.ndarray) -> np.ndarray:
    """(N, 3, F, T) spectrogram batch -> (N, F, T, 3)."""
    return np.ascontiguousarray(np.transpose(inputs, (0, 2, 3, 1)))


class DinModel:
    """Backbone plus either the stage-1 heads or the stage-2 entropy head."""

    def __init__(self, cfg: DinConfig | None = None, seed: int = 0, dtype=np.float32, heads: str = "stage1"):
        self.cfg = cfg or DinConfig()
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.cfg, self.rng, self.dtype)
        self.softmax_head = self.contrastive_head = self.entropy_head = None
        self.class_weight: Param | None = None
        if heads == "stage1":
            self._build_stage1_heads()
        elif heads == "entropy":
            self._build_entropy_head()
        else:
            raise ConfigError(f"unknown head set {heads!r}")
        self.store = self._build_store()

    @property
    def heads(self) -> str:
        return "entropy" if self.entropy_head is not None else "stage1"

    def _build_stage1_heads(self):
        cfg, rng, dt = self.cfg, self.rng, self.dtype
        self.softmax_head = SoftmaxHead(cfg.embedding_dim, cfg.softmax_head_hidden, rng, dt)
        self.contrastive_head = ContrastiveHead(cfg.embedding_dim, cfg.contrastive_dim, rng, dt)
        w = rng.standard_normal((cfg.softmax_head_hidden, cfg.n_classes_stage1))
        self.class_weight = Param((w / np.linalg.norm(w, axis=0)).astype(dt), group="head")

    def _build_entropy_head(self):
        self.entropy_head = EntropyHead(self.cfg.embedding_dim, self.cfg.entropy_classes, self.rng, self.dtype)

    def _build_store(self) -> ParameterStore:
        store = ParameterStore()
        for name, p in self.backbone.params():
            p.group = "backbone"
            store.add(f"backbone.{name}", p)
        for prefix, head in (("softmax_head", self.softmax_head),
                             ("contrastive_head", self.contrastive_head),
                             ("entropy_head", self.entropy_head)):
            if head is None:
                continue
            for name, p in head.params():
                p.group = "head"
                store.add(f"{prefix}.{name}", p)
        if self.class_weight is not None:
            store.add("softmax_head.class_weight", self.class_weight)
        return store

    def swap_to_entropy_head(self, seed: int | None = None) -> None:
        """Drop the stage-1 heads and attach a fresh entropy head."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.softmax_head = self.contrastive_head = None
        self.class_weight = None
        self._build_entropy_head()
        self.store = self._build_store()

    def renormalize_class_weight(self) -> None:
        if self.class_weight is not None:
            w = self.class_weight.value
            self.class_weight.value = (w / np.linalg.norm(w, axis=0, keepdims=True)).astype(w.dtype)

    # forward / backward -------------------------------------------------

    def embed(self, inputs: np.ndarray, training: bool = False) -> np.ndarray:
        """Backbone embeddings X for an (N, 3, F, T) batch."""
        return self.backbone.forward(to_channels_last(np.asarray(inputs, dtype=self.dtype)), training)

    def embed_many(self, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Inference-mode embeddings, chunked to bound memory."""
        if len(inputs) == 0:
            return np.zeros((0, self.cfg.embedding_dim), dtype=self.dtype)
        return np.concatenate([self.embed(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)])

    def forward_heads(self, X: np.ndarray, training: bool = False):
        """Stage 1: (Y, Z). Entropy head: logits."""
        if self.entropy_head is not None:
            return self.entropy_head.forward(X, training)
        return self.softmax_head.forward(X, training), self.contrastive_head.forward(X, training)

    def backward_heads(self, tape: GradientTape, dY=None, dZ=None, dlogits=None) -> np.ndarray:
        if self.entropy_head is not None:
            return self.entropy_head.backward(dlogits, tape)
        return self.softmax_head.backward(dY, tape) + self.contrastive_head.backward(dZ, tape)

    def backward(self, dX: np.ndarray, tape: GradientTape) -> None:
        self.backbone.backward(dX.astype(self.dtype, copy=False), tape)


# complexity accounting ---------------------------------------------------

def _walk_flops(layer: Layer, shape: tuple) -> tuple[int, tuple]:
    """FLOPs of one forward pass for one sample. MAC = 2, BN/GELU = 2 per element,
    residual add = 1 per element, max-pool = 1 per input element."""
    if isinstance(layer, Sequential):
        total = 0
        for _, sub in layer.layers:
            f, shape = _walk_flops(sub, shape)
            total += f
        return total, shape
    if isinstance(layer, DewIncBlock):
        total, out = 0, None
        for _, br in layer.branches:
            f, out = _walk_flops(br, shape)
            total += f
        out = (*out[:-1], layer.cout)
        if layer.shortcut is not None:
            total += _walk_flops(layer.shortcut, shape)[0]
        return total + int(np.prod(out)), out
    if isinstance(layer, Conv2d):
        h, w = layer.out_shape(shape[0], shape[1])
        kh, kw = layer.kernel
        return 2 * kh * kw * layer.cin * layer.cout * h * w, (h, w, layer.cout)
    if isinstance(layer, DepthwiseConv2d):
        h, w = layer.out_shape(shape[0], shape[1])
        kh, kw = layer.kernel
        return 2 * kh * kw * layer.channels * h * w, (h, w, layer.channels)
    if isinstance(layer, PointwiseConv2d):
        h, w = layer.out_shape(shape[0], shape[1])
        return 2 * layer.cin * layer.cout * h * w, (h, w, layer.cout)
    if isinstance(layer, Linear):
        return 2 * layer.din * layer.dout + (layer.dout if layer.bias is not None else 0), (layer.dout,)
    if isinstance(layer, (BatchNorm, GELU)):
        return 2 * int(np.prod(shape)), shape
    if isinstance(layer, GlobalMaxPool):
        return int(np.prod(shape)), (shape[-1],)
    if isinstance(layer, Backbone):
        total = 0
        for sub in [layer.stem, *layer.blocks, layer.pool]:
            f, shape = _walk_flops(sub, shape)
            total += f
        return total, shape
    raise TypeError(f"no FLOP rule for {type(layer).__name__}")


def count_parameters(cfg: DinConfig | None = None, heads: str = "entropy") -> int:
    """Trainable parameters of the backbone plus the given head set."""
    return DinModel(cfg or DinConfig(), dtype=np.float32, heads=heads).store.count()


def count_flops(cfg: DinConfig | None = None, input_shape: tuple[int, int, int] | None = None) -> int:
    """FLOPs for one inference pass (backbone + entropy head) on a single input.

    ``input_shape`` is (channels, F, T) and defaults to the configured input.
    """
    cfg = cfg or DinConfig()
    if input_shape is not None:
        c, h, w = input_shape
        cfg = DinConfig.from_dict({**cfg.to_dict(), "in_channels": c, "input_height": h, "input_width": w})
    model = DinModel(cfg, dtype=np.float32, heads="entropy")
    f, shape = _walk_flops(model.backbone, (cfg.input_height, cfg.input_width, cfg.in_channels))
    return f + _walk_flops(model.entropy_head, shape)[0]


def complexity_report(cfg: DinConfig | None = None) -> dict:
    cfg = cfg or DinConfig()
    return {
        "parameters": count_parameters(cfg, "entropy"),
        "parameters_stage1": count_parameters(cfg, "stage1"),
        "flops": count_flops(cfg),
        "embedding_dim": cfg.embedding_dim,
    }
