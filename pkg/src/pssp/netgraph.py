"""Architecture configs, the model builder, and label-context conditioning.

Parameter naming schema (all names unique per model)::

    block{b}.ms.w{K} / block{b}.ms.b{K}      multi-scale bank of width K
    block{b}.ms.bn.{gamma,beta}
    block{b}.conv.{w,b}                      single-scale convolution
    block{b}.conv.bn.{gamma,beta}
    block{b}.res.{w,b}                       width-1 projection feeding block b+1
    block{b}.res.bn.{gamma,beta}
    fc{i}.{weight,bias}                      hidden fully-connected layers, i >= 1
    out.{weight,bias}                        softmax output layer

Batch-norm running statistics live beside their layer as
``<layer>.bn.running_mean`` / ``<layer>.bn.running_var``.
"""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ops
from .autodiff import RngStream, Tensor
from .errors import ConfigError, DimensionError

NUM_CLASSES = 8
FEATURE_DEPTH = 42
# 8 classes plus one "unknown / before start" marker
LABEL_CONTEXT_DEPTH = NUM_CLASSES + 1
UNKNOWN_LABEL = NUM_CLASSES

CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass
class ArchitectureConfig:
    multiscale_banks: list = field(default_factory=list)
    single_conv: tuple = None
    num_blocks: int = 0
    fc_window: int = 17
    fc_layers: int = 5
    fc_width: int = 455
    residual_connections: bool = False
    residual_projection_depth: int = 96
    # "block_input": the projection reads the previous block's input (the default);
    # "block_output": it reads the previous block's output instead.
    residual_source: str = "block_input"
    batch_norm: bool = True
    dropout_rate: float = 0.4
    maxnorm_cap: float = 0.1503
    conditioned: bool = False
    label_context_classes: int = LABEL_CONTEXT_DEPTH
    label_shift: int = None
    input_depth: int = FEATURE_DEPTH
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.multiscale_banks = [tuple(int(v) for v in bank) for bank in self.multiscale_banks]
        if self.single_conv is not None:
            self.single_conv = tuple(int(v) for v in self.single_conv)
        self.validate()

    def validate(self):
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if self.num_blocks > 0 and not (self.multiscale_banks or self.single_conv):
            raise ConfigError("convolutional blocks need a multi-scale layer or a single convolution")
        if self.residual_connections and self.num_blocks < 2:
            raise ConfigError("residual connections span blocks and need num_blocks >= 2")
        widths = [w for w, _ in self.multiscale_banks]
        if self.single_conv is not None:
            widths.append(self.single_conv[0])
        for w in widths + [self.fc_window]:
            if w < 1 or w % 2 == 0:
                raise ConfigError(f"window/filter widths must be odd and positive, got {w}")
        if any(d < 1 for _, d in self.multiscale_banks) or (self.single_conv and self.single_conv[1] < 1):
            raise ConfigError("filter depths must be positive")
        if self.fc_layers < 1 or self.fc_width < 1:
            raise ConfigError("need at least one fully-connected layer of positive width")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.maxnorm_cap is not None and self.maxnorm_cap <= 0:
            raise ConfigError("maxnorm_cap must be positive or null")
        if self.residual_source not in ("block_input", "block_output"):
            raise ConfigError(f"unknown residual_source {self.residual_source!r}")
        if self.conditioned and self.label_context_classes != self.num_classes + 1:
            raise ConfigError("label context needs num_classes + 1 channels")
        if self.label_shift is not None and self.label_shift < 1:
            raise ConfigError("label_shift must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["multiscale_banks"] = [list(b) for b in self.multiscale_banks]
        d["single_conv"] = list(self.single_conv) if self.single_conv else None
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"name", "comment"}
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in d.items() if k in known})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            path = CONFIG_DIR / f"{path.name if path.suffix else path.name + '.json'}"
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def preset(name):
    """Load one of the checked-in configs (``table1_row1`` ... ``table1_row8``, ``final``)."""
    path = CONFIG_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no preset named {name!r}")
    return ArchitectureConfig.load(path)


def effective_window(cfg):
    """Context width W = F + n * (C + M - 2).

    A block without a single (or multi-scale) layer counts that layer as
    width 1, so W is always the full receptive-field width.
    """
    if cfg.num_blocks == 0:
        return cfg.fc_window
    C = cfg.single_conv[0] if cfg.single_conv else 1
    M = max((w for w, _ in cfg.multiscale_banks), default=1)
    return cfg.fc_window + cfg.num_blocks * (C + M - 2)


def receptive_radius(cfg):
    """Positions on each side of a residue that can influence its logits."""
    return (effective_window(cfg) - 1) // 2


def label_shift(cfg):
    """Shift applied to the label copy so residue i sees exactly labels i-W .. i-1."""
    if cfg.label_shift is not None:
        return cfg.label_shift
    return receptive_radius(cfg) + 1


def label_context_rows(labels, mask, shift, lo=0, hi=None):
    """One-hot label context (9 channels) for grid rows ``lo:hi``.

    Row t holds one-hot(labels[t - shift]) when that index exists and is
    valid, otherwise the unknown marker.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    L = labels.shape[-1]
    hi = L if hi is None else hi
    src = np.arange(lo, hi) - shift
    ok = src >= 0
    src_c = np.clip(src, 0, L - 1)
    ok = ok & (mask[..., src_c] > 0)
    cls = np.where(ok, labels[..., src_c], UNKNOWN_LABEL).astype(np.int64)
    out = np.zeros(cls.shape + (LABEL_CONTEXT_DEPTH,), dtype=np.float32)
    np.put_along_axis(out, cls[..., None], 1.0, axis=-1)
    return out


def append_label_context(features, labels, mask, shift):
    """Append 9 label-context channels to ``features`` (B, L, D) -> (B, L, D + 9)."""
    features = np.asarray(features)
    if shift < 1:
        raise ConfigError("label shift must be >= 1")
    ctx = label_context_rows(labels, mask, shift)
    return np.concatenate([features, ctx.astype(features.dtype)], axis=-1)


def _init_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return ((rng.uniform(shape) * 2.0 - 1.0) * bound).astype(np.float32)


class Model:
    """An instantiated architecture: named parameters, BN statistics, forward pass."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.params = {}
        self.bn = {}
        self.layers = []

    @property
    def input_depth(self):
        return self.cfg.input_depth + (LABEL_CONTEXT_DEPTH if self.cfg.conditioned else 0)

    @property
    def effective_window(self):
        return effective_window(self.cfg)

    @property
    def label_shift(self):
        return label_shift(self.cfg)

    def maxnorm_names(self):
        """Weights of the fully-connected layers, the only ones max-norm constrains."""
        return [n for n in self.params if (n.startswith("fc") or n.startswith("out.")) and n.endswith(".weight")]

    def state_arrays(self):
        """Every persisted array: parameters then BN running statistics."""
        out = {name: p.data for name, p in self.params.items()}
        for name, stats in self.bn.items():
            out[f"{name}.running_mean"] = stats.mean
            out[f"{name}.running_var"] = stats.var
        return out

    def load_state_arrays(self, arrays):
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float32)
        for name, stats in self.bn.items():
            stats.mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float32)
            stats.var = np.array(arrays[f"{name}.running_var"], dtype=np.float32)

    def copy_state(self):
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def _param(self, name):
        return self.params[name]

    def _bn_relu_drop(self, h, prefix, mode, mask, rng, dropout=True):
        if self.cfg.batch_norm:
            h = ops.batchnorm(h, self._param(f"{prefix}.bn.gamma"), self._param(f"{prefix}.bn.beta"),
                              self.bn[f"{prefix}.bn"], mode=mode, mask=mask)
        h = ops.relu(h)
        if dropout and self.cfg.dropout_rate > 0:
            h = ops.dropout(h, self.cfg.dropout_rate, mode=mode,
                            rng=rng.fork(prefix) if rng is not None else None)
        return h

    def forward(self, features, mask=None, mode="infer", rng=None, labels=None):
        """Per-residue logits (B, L, num_classes).

        ``features`` is (B, L, input_depth). Conditioned models also take
        ``labels`` (B, L), turned into label-context channels here; ``mask``
        marks valid residues for BN statistics and label validity.
        """
        x = np.asarray(features.data if isinstance(features, Tensor) else features)
        if x.ndim != 3 or x.shape[-1] != self.cfg.input_depth:
            raise DimensionError(f"expected features (B, L, {self.cfg.input_depth}), got {x.shape}")
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=np.float32)
        if self.cfg.conditioned:
            if labels is None:
                raise ConfigError("a conditioned model needs context labels")
            x = append_label_context(x, labels, mask, self.label_shift)
        if mode == "train" and rng is None and self.cfg.dropout_rate > 0:
            raise ConfigError("train mode needs an RngStream for dropout")
        return self._forward_array(x, mask, mode, rng)

    def _forward_array(self, x, mask, mode, rng):
        cfg = self.cfg
        h = Tensor(x)
        for b in range(1, cfg.num_blocks + 1):
            block_in = h
            if cfg.multiscale_banks:
                banks = [(self._param(f"block{b}.ms.w{w}"), self._param(f"block{b}.ms.b{w}"))
                         for w, _ in cfg.multiscale_banks]
                h = self._bn_relu_drop(ops.multiscale(h, banks), f"block{b}.ms", mode, mask, rng)
            if cfg.single_conv:
                h = ops.conv1d(h, self._param(f"block{b}.conv.w"), self._param(f"block{b}.conv.b"))
                h = self._bn_relu_drop(h, f"block{b}.conv", mode, mask, rng)
            if cfg.residual_connections and b < cfg.num_blocks:
                src = block_in if cfg.residual_source == "block_input" else h
                proj = ops.conv1d(src, self._param(f"block{b}.res.w"), self._param(f"block{b}.res.b"))
                proj = self._bn_relu_drop(proj, f"block{b}.res", mode, mask, rng, dropout=False)
                h = ops.depth_concat([h, proj])
        h = ops.window_gather(h, cfg.fc_window)
        for i in range(1, cfg.fc_layers + 1):
            h = ops.dense(h, self._param(f"fc{i}.weight"), self._param(f"fc{i}.bias"))
            h = ops.relu(h)
            if cfg.dropout_rate > 0:
                h = ops.dropout(h, cfg.dropout_rate, mode=mode,
                                rng=rng.fork(f"fc{i}") if rng is not None else None)
        return ops.dense(h, self._param("out.weight"), self._param("out.bias"))

    def logits_at(self, features, labels, label_mask, t):
        """Infer-mode logits at residue ``t`` for a stack of label hypotheses.

        ``features`` (L, D) describes one protein; ``labels`` and
        ``label_mask`` are (H, L) (or (L,)), the mask marking which labels
        count as known context. Only the receptive-field crop around ``t`` is
        evaluated. That matches a full forward pass exactly because the crop
        is cut at the real grid edge whenever it reaches it.
        """
        features = np.asarray(features)
        labels = np.atleast_2d(labels)
        label_mask = np.broadcast_to(label_mask, labels.shape)
        L = features.shape[0]
        R = receptive_radius(self.cfg)
        lo, hi = max(0, t - R), min(L, t + R + 1)
        H = labels.shape[0]
        x = np.broadcast_to(features[lo:hi], (H, hi - lo, features.shape[1]))
        if self.cfg.conditioned:
            ctx = label_context_rows(labels, label_mask, self.label_shift, lo, hi)
            x = np.concatenate([x, ctx.astype(x.dtype)], axis=-1)
        out = self._forward_array(np.ascontiguousarray(x), None, "infer", None)
        return out.data[:, t - lo, :]


def build_model(cfg, rng=None):
    """Instantiate every parameter for ``cfg`` (fan-in uniform init, zero biases)."""
    if isinstance(cfg, dict):
        cfg = ArchitectureConfig.from_dict(cfg)
    cfg.validate()
    if rng is None:
        rng = RngStream(0)
    elif isinstance(rng, int):
        rng = RngStream(rng)
    model = Model(cfg)

    def add(name, shape, fan_in=None):
        if fan_in is None:
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = _init_uniform(rng.fork(name), shape, fan_in)
        model.params[name] = Tensor(arr, name=name)

    def add_bn(prefix, depth):
        if cfg.batch_norm:
            model.params[f"{prefix}.bn.gamma"] = Tensor(np.ones(depth, dtype=np.float32), name=f"{prefix}.bn.gamma")
            model.params[f"{prefix}.bn.beta"] = Tensor(np.zeros(depth, dtype=np.float32), name=f"{prefix}.bn.beta")
            model.bn[f"{prefix}.bn"] = ops.BatchNormStats(depth)

    depth = model.input_depth
    for b in range(1, cfg.num_blocks + 1):
        block_in_depth = depth
        if cfg.multiscale_banks:
            for w, d in cfg.multiscale_banks:
                add(f"block{b}.ms.w{w}", (w, depth, d), fan_in=w * depth)
                add(f"block{b}.ms.b{w}", (d,))
            depth = sum(d for _, d in cfg.multiscale_banks)
            add_bn(f"block{b}.ms", depth)
            model.layers.append(("multiscale", f"block{b}.ms", block_in_depth, depth))
        if cfg.single_conv:
            w, d = cfg.single_conv
            add(f"block{b}.conv.w", (w, depth, d), fan_in=w * depth)
            add(f"block{b}.conv.b", (d,))
            add_bn(f"block{b}.conv", d)
            model.layers.append(("conv", f"block{b}.conv", depth, d))
            depth = d
        if cfg.residual_connections and b < cfg.num_blocks:
            src_depth = block_in_depth if cfg.residual_source == "block_input" else depth
            p = cfg.residual_projection_depth
            add(f"block{b}.res.w", (1, src_depth, p), fan_in=src_depth)
            add(f"block{b}.res.b", (p,))
            add_bn(f"block{b}.res", p)
            model.layers.append(("residual", f"block{b}.res", src_depth, p))
            depth += p
    fan_in = cfg.fc_window * depth
    model.layers.append(("window", "window", depth, fan_in))
    for i in range(1, cfg.fc_layers + 1):
        add(f"fc{i}.weight", (fan_in, cfg.fc_width), fan_in=fan_in)
        add(f"fc{i}.bias", (cfg.fc_width,))
        model.layers.append(("dense", f"fc{i}", fan_in, cfg.fc_width))
        fan_in = cfg.fc_width
    add("out.weight", (fan_in, cfg.num_classes), fan_in=fan_in)
    add("out.bias", (cfg.num_classes,))
    model.layers.append(("dense", "out", fan_in, cfg.num_classes))
    return model


def param_count(model):
    """Number of trainable scalars, BN gamma/beta included, running stats excluded."""
    return int(sum(p.data.size for p in model.params.values()))
