"""Declarative network description and whole-network forward/backward.

A network is a flat sequence of :class:`LayerSpec` entries. Parameters live in
a plain dict ``{layer_name: {"weights": ..., "bias": ...}}`` so that they are
trivial to copy, compare and serialise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import ConfigError, InvalidShapeError
from .nested_dropout import (
    EVAL_FULL,
    TRAIN,
    NestedDropoutState,
    nd_backward,
    nd_forward,
)
from .tensor import conv_output_size

LAYER_KINDS = ("conv", "pool", "relu", "fc", "dropout", "nested_dropout")
PARAM_KINDS = ("conv", "fc")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    num_output: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    weight_std: float = 0.01
    p_drop: float = 0.5
    rho: float = 0.1
    scale: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in PARAM_KINDS and self.num_output < 1:
            raise ConfigError(f"layer {self.name!r}: num_output must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        if not self.layers or self.layers[-1].kind != "fc":
            raise ConfigError("network must end in a fully-connected classifier layer")
        self.shapes()  # validates geometry

    # -- serialisation -------------------------------------------------
    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network description: {exc}") from exc

    # -- queries -------------------------------------------------------
    @property
    def num_classes(self):
        return self.layers[-1].num_output

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise ConfigError(f"no layer named {name!r}")

    def index(self, name):
        return [l.name for l in self.layers].index(self.layer(name).name)

    def param_layers(self):
        return [l for l in self.layers if l.kind in PARAM_KINDS]

    def nd_layers(self):
        return [l for l in self.layers if l.kind == "nested_dropout"]

    def attached_layer(self, nd_name):
        """The parameter layer whose output a nested-dropout layer masks."""
        idx = self.index(nd_name)
        for l in reversed(self.layers[:idx]):
            if l.kind in PARAM_KINDS:
                return l.name
            if l.kind not in ("relu", "pool", "dropout"):
                break
        raise ConfigError(f"nested dropout {nd_name!r} does not follow a conv or fc layer")

    def shapes(self):
        """Per-layer output shapes (without batch); raises on bad geometry."""
        shape = self.input_shape
        out = []
        for l in self.layers:
            if l.kind == "conv":
                if len(shape) != 3:
                    raise InvalidShapeError(f"conv {l.name!r} needs a [C,H,W] input, got {shape}")
                _, H, W = shape
                shape = (
                    l.num_output,
                    conv_output_size(H, l.kernel, l.stride, l.pad),
                    conv_output_size(W, l.kernel, l.stride, l.pad),
                )
            elif l.kind == "pool":
                C, H, W = shape
                if l.kernel > H or l.kernel > W or l.stride < 1:
                    raise InvalidShapeError(f"pool {l.name!r} does not fit a {H}x{W} input")
                shape = (C, (H - l.kernel) // l.stride + 1, (W - l.kernel) // l.stride + 1)
            elif l.kind == "fc":
                shape = (l.num_output,)
            out.append(shape)
        return out

    def input_shape_of(self, name):
        idx = self.index(name)
        return self.input_shape if idx == 0 else self.shapes()[idx - 1]

    def param_shapes(self):
        res = {}
        for l in self.param_layers():
            in_shape = self.input_shape_of(l.name)
            if l.kind == "conv":
                res[l.name] = ((l.num_output, in_shape[0], l.kernel, l.kernel), (l.num_output,))
            else:
                res[l.name] = ((l.num_output, int(np.prod(in_shape))), (l.num_output,))
        return res

    def count_params(self):
        return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in self.param_shapes().values())

    # -- edits ---------------------------------------------------------
    def with_width(self, name, width):
        l = self.layer(name)
        layers = tuple(replace(x, num_output=width) if x is l else x for x in self.layers)
        return NetworkSpec(self.input_shape, layers)

    def with_nested_dropout(self, after, rho=0.1, scale=False):
        base = self.without_nested_dropout()
        idx = base.index(after)
        if base.layers[idx].kind not in PARAM_KINDS:
            raise ConfigError(f"nested dropout must follow a conv or fc layer, not {after!r}")
        nd = LayerSpec("nested_dropout", f"nd_{after}", rho=rho, scale=scale)
        layers = base.layers[: idx + 1] + (nd,) + base.layers[idx + 1 :]
        return NetworkSpec(self.input_shape, layers)

    def without_nested_dropout(self):
        return NetworkSpec(self.input_shape, tuple(l for l in self.layers if l.kind != "nested_dropout"))

    def next_param_layer(self, name):
        idx = self.index(name)
        for l in self.layers[idx + 1 :]:
            if l.kind in PARAM_KINDS:
                return l.name
        return None


def cifar10_quick(conv1=32, conv2=32, conv3=64, fc1=64, num_classes=10):
    """The small three-conv CIFAR-10 reference topology (floor-mode pooling)."""
    return NetworkSpec(
        (3, 32, 32),
        (
            LayerSpec("conv", "conv1", conv1, kernel=5, pad=2),
            LayerSpec("pool", "pool1", kernel=3, stride=2),
            LayerSpec("relu", "relu1"),
            LayerSpec("conv", "conv2", conv2, kernel=5, pad=2),
            LayerSpec("relu", "relu2"),
            LayerSpec("pool", "pool2", kernel=3, stride=2),
            LayerSpec("conv", "conv3", conv3, kernel=5, pad=2),
            LayerSpec("relu", "relu3"),
            LayerSpec("pool", "pool3", kernel=3, stride=2),
            LayerSpec("fc", "fc1", fc1),
            LayerSpec("fc", "fc2", num_classes),
        ),
    )


def mnist_desk(conv1=16, fc1=64, num_classes=10):
    """conv(5x5) -> pool 2/2 -> relu -> fc -> fc, sized for quick CPU runs."""
    return NetworkSpec(
        (1, 28, 28),
        (
            LayerSpec("conv", "conv1", conv1, kernel=5),
            LayerSpec("pool", "pool1", kernel=2, stride=2),
            LayerSpec("relu", "relu1"),
            LayerSpec("fc", "fc1", fc1),
            LayerSpec("fc", "fc2", num_classes),
        ),
    )


PRESETS = {"cifar10_quick": cifar10_quick, "mnist_desk": mnist_desk}


def make_nd_states(spec):
    return {l.name: NestedDropoutState(n=spec.shapes()[spec.index(l.name)][0], rho=l.rho, scale=l.scale)
            for l in spec.nd_layers()}


def _as_layer_params(l, p):
    if l.kind == "conv":
        return L.ConvParams(p["weights"], p["bias"], l.stride, l.pad)
    return L.FcParams(p["weights"], p["bias"])


def forward(spec, params, x, *, train=False, nd_states=None, nd_rng=None, dropout_rng=None,
            truncate=None, channel_keep=None):
    """Run the network on a batch and return ``(logits, tape)``.

    ``truncate`` maps a conv/fc layer name to a kept-prefix length and
    ``channel_keep`` maps it to an explicit index set; either masks that
    layer's output channels deterministically. In eval mode every
    nested-dropout layer is the identity.
    """
    truncate = truncate or {}
    channel_keep = channel_keep or {}
    if train and (truncate or channel_keep):
        raise ConfigError("channel truncation is an evaluation-only operation")
    nd_states = nd_states if nd_states is not None else {}
    tape = []
    h = x
    for l in spec.layers:
        entry = {"input": h}
        if l.kind in PARAM_KINDS:
            lp = _as_layer_params(l, params[l.name])
            if l.kind == "conv":
                h, entry["cols"] = L.conv_forward(h, lp, return_cols=True)
            else:
                entry["input"] = h = h.reshape(h.shape[0], -1)
                h = L.fc_forward(h, lp)
            if l.name in truncate:
                n = h.shape[1]
                h = nd_forward(h, NestedDropoutState(n), "eval_truncate", k=truncate[l.name])
            if l.name in channel_keep:
                mask = np.zeros(h.shape[1], dtype=h.dtype)
                mask[np.asarray(channel_keep[l.name], dtype=np.int64)] = 1
                h = h * (mask.reshape(1, -1, 1, 1) if h.ndim == 4 else mask)
        elif l.kind == "pool":
            h, entry["argmax"] = L.maxpool_forward(h, l.kernel, l.stride)
        elif l.kind == "relu":
            h = L.relu_forward(h)
        elif l.kind == "dropout":
            h, entry["mask"] = L.standard_dropout(h, l.p_drop, dropout_rng, train=train)
        elif l.kind == "nested_dropout":
            state = nd_states.get(l.name)
            if state is None:
                state = NestedDropoutState(h.shape[1], rho=l.rho, scale=l.scale)
            h = nd_forward(h, state, TRAIN if train else EVAL_FULL, rng=nd_rng)
        tape.append(entry)
    return h, tape


def backward(spec, params, tape, grad_logits, nd_states=None):
    """Gradients ``{layer_name: {"weights": ..., "bias": ...}}`` of a train-mode tape."""
    grads = {}
    g = grad_logits
    for l, entry in zip(reversed(spec.layers), reversed(tape)):
        x = entry["input"]
        if l.kind in PARAM_KINDS:
            lp = _as_layer_params(l, params[l.name])
            if l.kind == "conv":
                lg = L.conv_backward(x, lp, g, cols=entry["cols"])
            else:
                lg = L.fc_backward(x, lp, g.reshape(x.shape[0], -1))
            grads[l.name] = {"weights": lg.grad_weights, "bias": lg.grad_bias}
            g = lg.grad_input
        elif l.kind == "pool":
            g = L.maxpool_backward(entry["argmax"], g.reshape(entry["argmax"].shape), x.shape)
        elif l.kind == "relu":
            g = L.relu_backward(x, g.reshape(x.shape))
        elif l.kind == "dropout":
            g = L.standard_dropout_backward(entry["mask"], g.reshape(x.shape))
        elif l.kind == "nested_dropout":
            g = nd_backward(g.reshape(x.shape), nd_states[l.name])
    return grads


def predict(spec, params, images, batch_size=500, **mask_kw):
    preds = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(spec, params, images[start : start + batch_size], **mask_kw)
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(spec, params, images, labels, batch_size=500, **mask_kw):
    preds = predict(spec, params, images, batch_size, **mask_kw)
    return float(np.mean(preds == np.asarray(labels))) if len(preds) else 0.0
