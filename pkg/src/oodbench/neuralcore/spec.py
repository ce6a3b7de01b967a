"""Network specification: an ordered layer stack with a designated probe.

The probe layer (a ReLU) splits the parameters into the part below it
(feeding the probed activity) and the part above it (mapping that activity
to logits); the invariance objective attaches at the probe output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import InvalidArgumentError, ShapeError


@dataclass(frozen=True)
class Dense:
    out_features: int
    kind: str = field(default="dense", init=False, repr=False)


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    # A conv feeding BatchNorm drops its bias: train-mode BN subtracts the
    # batch mean, so the bias would have an exactly-zero gradient.
    use_bias: bool = True
    kind: str = field(default="conv", init=False, repr=False)


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.99
    epsilon: float = 1e-3
    kind: str = field(default="batchnorm", init=False, repr=False)


@dataclass(frozen=True)
class Relu:
    kind: str = field(default="relu", init=False, repr=False)


@dataclass(frozen=True)
class AvgPool:
    kernel: int
    kind: str = field(default="avgpool", init=False, repr=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False, repr=False)


@dataclass(frozen=True)
class Residual:
    inner: tuple
    kind: str = field(default="residual", init=False, repr=False)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    probe_index: int
    num_classes: int
    input_shape: tuple[int, int, int]  # (H, W, C)

    def validate(self):
        if not self.layers:
            raise InvalidArgumentError("network has no layers")
        if not (0 <= self.probe_index < len(self.layers)):
            raise InvalidArgumentError(f"probe_index {self.probe_index} out of range")
        if self.layers[self.probe_index].kind != "relu":
            raise InvalidArgumentError(
                f"probe layer must be a relu, got {self.layers[self.probe_index].kind!r}"
            )
        shapes = infer_shapes(self)
        final = shapes[-1]
        if final != (self.num_classes,):
            raise ShapeError(
                f"final layer produces shape {final}, expected ({self.num_classes},)"
            )


def _infer_layer(layer, shape):
    """Output shape (sans batch) of one layer given its input shape."""
    if layer.kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"dense layer needs a flat input, got {shape}")
        return (layer.out_features,)
    if layer.kind == "conv":
        if len(shape) != 3:
            raise ShapeError(f"conv layer needs an H x W x C input, got {shape}")
        h, w, _ = shape
        k, s, p = layer.kernel, layer.stride, layer.pad
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1 or (h + 2 * p - k) % s or (w + 2 * p - k) % s:
            raise ShapeError(f"conv {k}x{k} stride {s} pad {p} does not tile input {h}x{w}")
        return (oh, ow, layer.out_channels)
    if layer.kind in ("batchnorm", "relu"):
        return shape
    if layer.kind == "avgpool":
        if len(shape) != 3:
            raise ShapeError(f"avgpool needs an H x W x C input, got {shape}")
        h, w, c = shape
        k = layer.kernel
        if h % k or w % k:
            raise ShapeError(f"avgpool {k} does not tile input {h}x{w}")
        return (h // k, w // k, c)
    if layer.kind == "flatten":
        size = 1
        for d in shape:
            size *= d
        return (size,)
    if layer.kind == "residual":
        inner_shape = shape
        for sub in layer.inner:
            inner_shape = _infer_layer(sub, inner_shape)
        if inner_shape != shape:
            raise ShapeError(
                f"residual inner stack maps {shape} to {inner_shape}; shapes must match"
            )
        return shape
    raise InvalidArgumentError(f"unknown layer kind {layer.kind!r}")


def infer_shapes(spec: NetworkSpec):
    """Per-layer output shapes (sans batch), index-parallel to spec.layers."""
    shape = tuple(spec.input_shape)
    out = []
    for layer in spec.layers:
        shape = _infer_layer(layer, shape)
        out.append(shape)
    return out


def mini_resnet(
    input_shape: tuple[int, int, int],
    num_classes: int,
    channels: int = 16,
    probe_width: int = 64,
    bn_momentum: float = 0.99,
    bn_epsilon: float = 1e-3,
) -> NetworkSpec:
    """Small residual CNN: one conv stem, one residual block, dense probe head.

    The probe is the ReLU after the ``probe_width`` dense layer.
    """
    bn = BatchNorm(momentum=bn_momentum, epsilon=bn_epsilon)
    conv = Conv(channels, 3, stride=1, pad=1, use_bias=False)
    layers = (
        conv,
        bn,
        Relu(),
        Residual(inner=(conv, bn, Relu(), conv, bn)),
        Relu(),
        AvgPool(2),
        Flatten(),
        Dense(probe_width),
        Relu(),
        Dense(num_classes),
    )
    spec = NetworkSpec(
        layers=layers, probe_index=8, num_classes=num_classes, input_shape=tuple(input_shape)
    )
    spec.validate()
    return spec


def set_bn_momentum(spec: NetworkSpec, momentum: float) -> NetworkSpec:
    """Copy of the spec with every BatchNorm layer's momentum replaced."""

    def rewrite(layer):
        if layer.kind == "batchnorm":
            return BatchNorm(momentum=momentum, epsilon=layer.epsilon)
        if layer.kind == "residual":
            return Residual(inner=tuple(rewrite(sub) for sub in layer.inner))
        return layer

    return NetworkSpec(
        layers=tuple(rewrite(l) for l in spec.layers),
        probe_index=spec.probe_index,
        num_classes=spec.num_classes,
        input_shape=spec.input_shape,
    )


def bn_momenta(spec: NetworkSpec) -> list[float]:
    """Momentum of every BatchNorm layer, in layer order (residuals inlined)."""
    out = []

    def walk(layers):
        for layer in layers:
            if layer.kind == "batchnorm":
                out.append(layer.momentum)
            elif layer.kind == "residual":
                walk(layer.inner)

    walk(spec.layers)
    return out
