"""Acoustic model variants built from the nnops kernels.

Four variants share one topology: two conv layers (with max pooling over
frequency), three SELU dense layers, a linear bottleneck, and a softmax
output. The embedding variants add a per-bandwidth corrected bias
V @ e_c + b at one dense layer; the parallel-conv variants duplicate the
conv stage and route each example through the stack matching its bandwidth
flag, while all dense parameters stay shared.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nnops
from .errors import CheckpointError, ConfigError, ShapeError, VariantError

VARIANTS = (
    "baseline",
    "embeddings",
    "parallel_conv",
    "embeddings_and_parallel_conv",
)

# Dense layers are numbered the way the architecture diagrams count them:
# conv stages are layers 1 and 2, so the first dense layer is layer 3.
FIRST_DENSE_LAYER = 3


@dataclass
class ModelConfig:
    """Desk-scale defaults; the full-scale recipe (128-filter convs, 1024/512
    dense/bottleneck, ~8000 classes, 128-dim embeddings) is expressible by
    overriding the fields."""

    variant: str = "baseline"
    context_frames: int = 10
    n_mels: int = 40
    conv1_filters: int = 6
    conv1_kernel: tuple[int, int] = (9, 9)
    conv1_padding: int = 4
    conv2_filters: int = 6
    conv2_kernel: tuple[int, int] = (3, 4)
    pool_width: int = 3
    pool_stage: int = 1  # pool after conv1 (1) or after conv2 (2)
    dense_units: int = 24
    n_dense: int = 3
    bottleneck_units: int = 12
    n_classes: int = 8
    embedding_dim: int = 16
    embedding_attach_layer: int = FIRST_DENSE_LAYER

    def __post_init__(self):
        self.conv1_kernel = tuple(self.conv1_kernel)
        self.conv2_kernel = tuple(self.conv2_kernel)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in (
            "context_frames", "n_mels", "conv1_filters", "conv2_filters",
            "dense_units", "n_dense", "bottleneck_units", "n_classes",
            "embedding_dim", "pool_width",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.pool_stage not in (1, 2):
            raise ConfigError("pool_stage must be 1 or 2")
        if not (FIRST_DENSE_LAYER <= self.embedding_attach_layer < FIRST_DENSE_LAYER + self.n_dense):
            raise ConfigError(
                f"embedding_attach_layer {self.embedding_attach_layer} outside the "
                f"SELU dense stack [{FIRST_DENSE_LAYER}, {FIRST_DENSE_LAYER + self.n_dense - 1}]"
            )
        self.shape_chain()  # fail fast on an inconsistent geometry

    @property
    def has_embedding(self) -> bool:
        return self.variant in ("embeddings", "embeddings_and_parallel_conv")

    @property
    def has_parallel_conv(self) -> bool:
        return self.variant in ("parallel_conv", "embeddings_and_parallel_conv")

    @property
    def input_shape(self) -> tuple[int, int]:
        return (2 * self.context_frames + 1, self.n_mels)

    @property
    def attach_index(self) -> int:
        """Index into the dense stack of the layer that takes the corrected bias."""
        return self.embedding_attach_layer - FIRST_DENSE_LAYER

    def shape_chain(self) -> list[tuple[str, tuple[int, ...]]]:
        """The (stage, shape) trace from the input patch to the flattened conv output."""
        h, w = self.input_shape
        chain = [("input", (1, h, w))]
        p = self.conv1_padding
        h, w = h + 2 * p, w + 2 * p
        if p:
            chain.append(("pad", (1, h, w)))
        h, w = h - self.conv1_kernel[0] + 1, w - self.conv1_kernel[1] + 1
        chain.append(("conv1", (self.conv1_filters, h, w)))
        if self.pool_stage == 1:
            w = w // self.pool_width
            chain.append(("pool", (self.conv1_filters, h, w)))
        h, w = h - self.conv2_kernel[0] + 1, w - self.conv2_kernel[1] + 1
        chain.append(("conv2", (self.conv2_filters, h, w)))
        if self.pool_stage == 2:
            w = w // self.pool_width
            chain.append(("pool", (self.conv2_filters, h, w)))
        if h < 1 or w < 1:
            raise ConfigError(f"conv shape chain collapses: {chain}")
        chain.append(("flatten", (self.conv2_filters * h * w,)))
        return chain

    @property
    def flat_dim(self) -> int:
        return self.shape_chain()[-1][1][0]

    def dense_layer_specs(self) -> list[tuple[str, int, str]]:
        specs = [(f"dense{i + 1}", self.dense_units, "selu") for i in range(self.n_dense)]
        specs.append(("bottleneck", self.bottleneck_units, "linear"))
        specs.append(("output", self.n_classes, "linear"))
        return specs


@dataclass
class ConvStack:
    conv1_filters: np.ndarray
    conv1_bias: np.ndarray
    conv2_filters: np.ndarray
    conv2_bias: np.ndarray


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str  # "selu" | "linear"


@dataclass
class BandwidthEmbedding:
    """Two trainable vectors (e0 wideband, e1 narrowband) and their projection."""

    e0: np.ndarray
    e1: np.ndarray
    v: np.ndarray  # (attach-layer units, embedding_dim)

    def select(self, c: np.ndarray) -> np.ndarray:
        return np.stack([self.e0, self.e1])[c]


@dataclass
class _StackCache:
    idx: np.ndarray
    x_pad: np.ndarray
    cols1: np.ndarray
    h1: np.ndarray  # selu output of conv1
    conv2_in: np.ndarray
    cols2: np.ndarray
    h2: np.ndarray  # selu output of conv2, before any stage-2 pooling
    pool_arg: np.ndarray | None
    out_shape: tuple[int, ...]


@dataclass
class _ForwardCache:
    c: np.ndarray
    stacks: dict[str, _StackCache]
    flat: np.ndarray
    dense_inputs: list[np.ndarray]  # input to each dense layer; selu outputs live here
    logits: np.ndarray


class Model:
    """Parameter container plus forward/backward for one config."""

    def __init__(
        self,
        config: ModelConfig,
        stacks: dict[str, ConvStack],
        dense: list[DenseLayer],
        embedding: BandwidthEmbedding | None,
    ):
        self.config = config
        self.stacks = stacks
        self.dense = dense
        self.embedding = embedding

    # -- parameter bookkeeping ------------------------------------------------

    def stack_names(self) -> tuple[str, ...]:
        return ("wb", "nb") if self.config.has_parallel_conv else ("shared",)

    def stack_for_band(self, band: int) -> ConvStack:
        if not self.config.has_parallel_conv:
            return self.stacks["shared"]
        return self.stacks["wb" if band == 0 else "nb"]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for sname in self.stack_names():
            s = self.stacks[sname]
            prefix = "" if sname == "shared" else sname + "."
            out[f"{prefix}conv1.filters"] = s.conv1_filters
            out[f"{prefix}conv1.bias"] = s.conv1_bias
            out[f"{prefix}conv2.filters"] = s.conv2_filters
            out[f"{prefix}conv2.bias"] = s.conv2_bias
        for (name, _, _), layer in zip(self.config.dense_layer_specs(), self.dense):
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        if self.embedding is not None:
            out["embedding.e0"] = self.embedding.e0
            out["embedding.e1"] = self.embedding.e1
            out["embedding.v"] = self.embedding.v
        return out

    @property
    def dtype(self) -> np.dtype:
        return self.dense[0].weight.dtype

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def copy(self) -> "Model":
        stacks = {
            k: ConvStack(*(v.copy() for v in (s.conv1_filters, s.conv1_bias, s.conv2_filters, s.conv2_bias)))
            for k, s in self.stacks.items()
        }
        dense = [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.dense]
        emb = None
        if self.embedding is not None:
            emb = BandwidthEmbedding(
                self.embedding.e0.copy(), self.embedding.e1.copy(), self.embedding.v.copy()
            )
        return Model(self.config, stacks, dense, emb)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for s in m.stacks.values():
            s.conv1_filters = s.conv1_filters.astype(dtype)
            s.conv1_bias = s.conv1_bias.astype(dtype)
            s.conv2_filters = s.conv2_filters.astype(dtype)
            s.conv2_bias = s.conv2_bias.astype(dtype)
        for l in m.dense:
            l.weight = l.weight.astype(dtype)
            l.bias = l.bias.astype(dtype)
        if m.embedding is not None:
            m.embedding.e0 = m.embedding.e0.astype(dtype)
            m.embedding.e1 = m.embedding.e1.astype(dtype)
            m.embedding.v = m.embedding.v.astype(dtype)
        return m

    # -- forward / backward ---------------------------------------------------

    def _normalize_batch(self, x: np.ndarray, c) -> tuple[np.ndarray, np.ndarray, bool]:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
            single = True
            c = np.array([c], dtype=np.int64)
        elif x.ndim == 3:
            single = False
            c = np.asarray(c, dtype=np.int64)
            if c.shape != (x.shape[0],):
                raise ShapeError(f"bandwidth flags shape {c.shape} != ({x.shape[0]},)")
        else:
            raise ShapeError(f"expected (T, D) patch or (B, T, D) batch, got {x.shape}")
        if x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"patch shape {x.shape[1:]} != {self.config.input_shape}")
        if np.any((c != 0) & (c != 1)):
            raise VariantError(f"bandwidth flags must be 0 or 1, got {np.unique(c)}")
        return x, c, single

    def _conv_stage(self, stack: ConvStack, x: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, _StackCache]:
        cfg = self.config
        x_pad = nnops.pad2d(x, cfg.conv1_padding, cfg.conv1_padding)
        pre1, cols1 = nnops._conv2d_cached(x_pad, stack.conv1_filters, stack.conv1_bias)
        h1 = nnops.selu(pre1)
        pool_arg = None
        if cfg.pool_stage == 1:
            conv2_in, pool_arg = nnops.maxpool(h1, cfg.pool_width)
        else:
            conv2_in = h1
        pre2, cols2 = nnops._conv2d_cached(conv2_in, stack.conv2_filters, stack.conv2_bias)
        h2 = nnops.selu(pre2)
        out = h2
        if cfg.pool_stage == 2:
            out, pool_arg = nnops.maxpool(h2, cfg.pool_width)
        cache = _StackCache(idx, x_pad, cols1, h1, conv2_in, cols2, h2, pool_arg, out.shape)
        return out.reshape(out.shape[0], -1), cache

    def _forward(self, x: np.ndarray, c: np.ndarray) -> _ForwardCache:
        cfg = self.config
        x4 = x[:, None, :, :]
        stack_caches: dict[str, _StackCache] = {}
        if cfg.has_parallel_conv:
            flat = np.empty((x.shape[0], cfg.flat_dim), dtype=self.dtype)
            for band, sname in ((0, "wb"), (1, "nb")):
                idx = np.flatnonzero(c == band)
                if idx.size == 0:
                    continue
                sub_flat, cache = self._conv_stage(self.stacks[sname], x4[idx], idx)
                flat[idx] = sub_flat
                stack_caches[sname] = cache
        else:
            idx = np.arange(x.shape[0])
            flat, cache = self._conv_stage(self.stacks["shared"], x4, idx)
            stack_caches["shared"] = cache

        h = flat
        dense_inputs: list[np.ndarray] = []
        for i, layer in enumerate(self.dense):
            dense_inputs.append(h)
            if self.embedding is not None and i == cfg.attach_index:
                bhat0 = self.embedding.v @ self.embedding.e0 + layer.bias
                bhat1 = self.embedding.v @ self.embedding.e1 + layer.bias
                pre = h @ layer.weight.T + np.stack([bhat0, bhat1])[c]
            else:
                pre = h @ layer.weight.T + layer.bias
            h = nnops.selu(pre) if layer.activation == "selu" else pre
        return _ForwardCache(c, stack_caches, flat, dense_inputs, h)

    def forward(self, x: np.ndarray, c) -> np.ndarray:
        """Logits for a (T, D) patch with scalar flag, or a batch with flags."""
        xb, cb, single = self._normalize_batch(x, c)
        logits = self._forward(xb, cb).logits
        return logits[0] if single else logits

    def _zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(p) for name, p in self.named_parameters().items()}

    def _backward(self, cache: _ForwardCache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.config
        grads = self._zero_grads()
        g = d_logits
        for i in range(len(self.dense) - 1, -1, -1):
            layer = self.dense[i]
            name = cfg.dense_layer_specs()[i][0]
            if layer.activation == "selu":
                # every selu layer feeds a later layer, so its output is cached
                # as the next layer's input
                g = nnops.selu_backward(cache.dense_inputs[i + 1], g)
            lg = nnops.dense_backward(cache.dense_inputs[i], layer.weight, g)
            grads[f"{name}.weight"] = lg.param_grads["weight"]
            grads[f"{name}.bias"] = lg.param_grads["bias"]
            if self.embedding is not None and i == cfg.attach_index:
                emb = self.embedding
                e_rows = emb.select(cache.c)
                grads["embedding.v"] = g.T @ e_rows
                for band, pname in ((0, "embedding.e0"), (1, "embedding.e1")):
                    mask = cache.c == band
                    if np.any(mask):
                        grads[pname] = emb.v.T @ g[mask].sum(axis=0)
            g = lg.input_grad

        for sname, sc in cache.stacks.items():
            prefix = "" if sname == "shared" else sname + "."
            stack = self.stacks[sname]
            gs = g[sc.idx].reshape(sc.out_shape)
            if cfg.pool_stage == 2:
                gs = nnops.maxpool_backward(gs, sc.pool_arg, sc.h2.shape[-1], cfg.pool_width)
            gs = nnops.selu_backward(sc.h2, gs)
            lg2 = nnops.conv2d_backward(sc.conv2_in, stack.conv2_filters, gs, cols=sc.cols2)
            grads[f"{prefix}conv2.filters"] = lg2.param_grads["filters"]
            grads[f"{prefix}conv2.bias"] = lg2.param_grads["bias"]
            gs = lg2.input_grad
            if cfg.pool_stage == 1:
                gs = nnops.maxpool_backward(gs, sc.pool_arg, sc.h1.shape[-1], cfg.pool_width)
            gs = nnops.selu_backward(sc.h1, gs)
            lg1 = nnops.conv2d_backward(
                sc.x_pad, stack.conv1_filters, gs, need_input=False, cols=sc.cols1
            )
            grads[f"{prefix}conv1.filters"] = lg1.param_grads["filters"]
            grads[f"{prefix}conv1.bias"] = lg1.param_grads["bias"]
        return grads

    def backward(self, x: np.ndarray, c, target) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy loss and its gradients for every live parameter."""
        xb, cb, _ = self._normalize_batch(x, c)
        targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
        cache = self._forward(xb, cb)
        losses, probs = nnops.softmax_xent(cache.logits, targets)
        d_logits = nnops.softmax_xent_backward(probs, targets) / xb.shape[0]
        grads = self._backward(cache, d_logits)
        return float(np.mean(losses)), grads

    # Interface used by nnops.grad_check and the trainer.
    def loss(self, batch) -> float:
        x, c, y = batch
        xb, cb, _ = self._normalize_batch(x, c)
        losses, _ = nnops.softmax_xent(self._forward(xb, cb).logits, np.atleast_1d(y))
        return float(np.mean(losses))

    def _forward_frozen(self, x: np.ndarray, c: np.ndarray, cache: _ForwardCache) -> np.ndarray:
        """Forward pass with pool winners and SELU branches pinned by cache.

        On the smooth piece selected by the cached activation pattern this
        equals _forward; gradient checking perturbs parameters by eps and must
        not hop across pooling/activation switch points.
        """
        cfg = self.config
        x4 = x[:, None, :, :]
        flat = np.empty((x.shape[0], cfg.flat_dim), dtype=self.dtype)
        for sname, sc in cache.stacks.items():
            stack = self.stacks[sname]
            x_pad = nnops.pad2d(x4[sc.idx], cfg.conv1_padding, cfg.conv1_padding)
            h = nnops.conv2d(x_pad, stack.conv1_filters, stack.conv1_bias)
            h = nnops.selu_frozen(h, sc.h1 > 0)
            if cfg.pool_stage == 1:
                h = nnops.maxpool_frozen(h, sc.pool_arg, cfg.pool_width)
            h = nnops.conv2d(h, stack.conv2_filters, stack.conv2_bias)
            h = nnops.selu_frozen(h, sc.h2 > 0)
            if cfg.pool_stage == 2:
                h = nnops.maxpool_frozen(h, sc.pool_arg, cfg.pool_width)
            flat[sc.idx] = h.reshape(h.shape[0], -1)

        h = flat
        for i, layer in enumerate(self.dense):
            if self.embedding is not None and i == cfg.attach_index:
                bhat0 = self.embedding.v @ self.embedding.e0 + layer.bias
                bhat1 = self.embedding.v @ self.embedding.e1 + layer.bias
                pre = h @ layer.weight.T + np.stack([bhat0, bhat1])[c]
            else:
                pre = h @ layer.weight.T + layer.bias
            if layer.activation == "selu":
                h = nnops.selu_frozen(pre, cache.dense_inputs[i + 1] > 0)
            else:
                h = pre
        return h

    def frozen_loss(self, batch):
        """A loss closure with the activation pattern pinned at the current
        parameters; nnops.grad_check uses it for the perturbed evaluations."""
        x, c, y = batch
        xb, cb, _ = self._normalize_batch(x, c)
        targets = np.atleast_1d(np.asarray(y, dtype=np.int64))
        cache = self._forward(xb, cb)

        def loss() -> float:
            logits = self._forward_frozen(xb, cb, cache)
            losses, _ = nnops.softmax_xent(logits, targets)
            return float(np.mean(losses))

        return loss

    def loss_and_grads(self, batch) -> tuple[float, dict[str, np.ndarray]]:
        x, c, y = batch
        return self.backward(x, c, y)


def build_model(config: ModelConfig, seed: int, dtype=np.float64) -> Model:
    """Deterministically initialize a model: LeCun-normal weights, zero biases,
    small random embeddings (stdev 0.1)."""
    rng = np.random.default_rng(seed)

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    def conv_stack() -> ConvStack:
        kh1, kw1 = config.conv1_kernel
        kh2, kw2 = config.conv2_kernel
        return ConvStack(
            conv1_filters=normal((config.conv1_filters, 1, kh1, kw1), kh1 * kw1),
            conv1_bias=np.zeros(config.conv1_filters, dtype=dtype),
            conv2_filters=normal(
                (config.conv2_filters, config.conv1_filters, kh2, kw2),
                config.conv1_filters * kh2 * kw2,
            ),
            conv2_bias=np.zeros(config.conv2_filters, dtype=dtype),
        )

    stacks = (
        {"wb": conv_stack(), "nb": conv_stack()}
        if config.has_parallel_conv
        else {"shared": conv_stack()}
    )

    dense = []
    fan_in = config.flat_dim
    for _, units, activation in config.dense_layer_specs():
        dense.append(
            DenseLayer(
                weight=normal((units, fan_in), fan_in),
                bias=np.zeros(units, dtype=dtype),
                activation=activation,
            )
        )
        fan_in = units

    embedding = None
    if config.has_embedding:
        n = config.embedding_dim
        attach_units = config.dense_layer_specs()[config.attach_index][1]
        embedding = BandwidthEmbedding(
            e0=(0.1 * rng.standard_normal(n)).astype(dtype),
            e1=(0.1 * rng.standard_normal(n)).astype(dtype),
            v=normal((attach_units, n), n),
        )
    return Model(config, stacks, dense, embedding)


def effective_bias(m: Model, c: int) -> np.ndarray:
    """The corrected bias V @ e_c + b at the attach layer."""
    if m.embedding is None:
        raise VariantError(f"variant {m.config.variant!r} has no bandwidth embedding")
    e = m.embedding.e0 if c == 0 else m.embedding.e1
    return m.embedding.v @ e + m.dense[m.config.attach_index].bias


_FOLDED_VARIANT = {"embeddings": "baseline", "embeddings_and_parallel_conv": "parallel_conv"}


def fold_embedding(m: Model, c: int) -> Model:
    """Bake the bandwidth-c corrected bias into the attach layer.

    The result has no embedding parameters and reproduces forward(m, x, c)
    exactly, because the forward pass computes V @ e_c + b as one vector
    before adding it to the pre-activation.
    """
    if m.embedding is None:
        raise VariantError(f"variant {m.config.variant!r} has no bandwidth embedding")
    bhat = effective_bias(m, c)
    cfg = replace(m.config, variant=_FOLDED_VARIANT[m.config.variant])
    folded = m.copy()
    folded.config = cfg
    folded.embedding = None
    folded.dense[cfg.attach_index].bias = bhat
    return folded


# ---------------------------------------------------------------------------
# Checkpoint format ("BNMD")
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"BNMD"
_MODEL_VERSION = 1


def _config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["conv1_kernel"] = list(config.conv1_kernel)
    d["conv2_kernel"] = list(config.conv2_kernel)
    return d


def save_model(
    m: Model,
    path,
    extra_tensors: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Versioned binary checkpoint; written atomically (temp file + rename).

    extra_tensors/meta let the trainer persist optimizer state in the same
    container; load_model ignores them.
    """
    header = {"config": _config_to_dict(m.config), "dtype": str(np.dtype(m.dtype)), "meta": meta or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = dict(m.named_parameters())
    for name, t in (extra_tensors or {}).items():
        tensors["extra:" + name] = t
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<II", _MODEL_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(t, dtype="<f8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def _read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != _MODEL_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != _MODEL_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
        pos += header_len
        (n_tensors,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 8 * count > len(raw):
                raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
    except (struct.error, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint") from exc
    return header, tensors


def load_model(path, expect_variant: str | None = None) -> Model:
    """Load a checkpoint; fails on corruption or a variant mismatch."""
    header, tensors = _read_container(path)
    cfg_dict = dict(header["config"])
    try:
        config = ModelConfig(**cfg_dict)
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from exc
    if expect_variant is not None and config.variant != expect_variant:
        raise VariantError(
            f"{path}: checkpoint variant {config.variant!r}, expected {expect_variant!r}"
        )
    dtype = np.dtype(header.get("dtype", "float64"))
    m = build_model(config, seed=0, dtype=dtype)
    for name, p in m.named_parameters().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        t = tensors[name]
        if t.shape != p.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {t.shape} != config shape {p.shape}"
            )
        p[...] = t.astype(dtype)
    return m


def load_extras(path) -> tuple[dict, dict[str, np.ndarray]]:
    """The checkpoint's meta dict and 'extra:' tensors (optimizer state etc.)."""
    header, tensors = _read_container(path)
    extras = {k[len("extra:"):]: v for k, v in tensors.items() if k.startswith("extra:")}
    return header.get("meta", {}), extras
