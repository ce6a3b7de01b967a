"""Forward and backward passes over a NetworkSpec.

All image tensors are batch x height x width x channels; dense activations
are batch x features. The forward pass returns a trace holding every
intermediate needed for the backward pass, the probe activation, and the
batch statistics of each BatchNorm layer (train mode only). Running-stat
updates are a separate explicit step so evaluation passes never mutate
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError, ShapeError, StateError
from .params import ParamStore
from .spec import NetworkSpec


@dataclass
class ForwardTrace:
    mode: str
    batch_size: int
    caches: list
    probe: np.ndarray
    logits: np.ndarray
    bn_stats: list = field(default_factory=list)  # (path, batch_mean, batch_var)


def _conv_forward(layer, path, x, params):
    w = params.tensors[path + ".weight"]
    k, s, p = layer.kernel, layer.stride, layer.pad
    if p:
        x_pad = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    else:
        x_pad = x
    bsz, hp, wp, _ = x_pad.shape
    oh = (hp - k) // s + 1
    ow = (wp - k) // s + 1
    y = np.empty((bsz, oh, ow, layer.out_channels), dtype=x.dtype)
    if layer.use_bias:
        y[...] = params.tensors[path + ".bias"]
    else:
        y[...] = 0.0
    # One tensordot per kernel offset; each slice is a strided view, so no
    # materialized im2col buffer is needed.
    for i in range(k):
        for j in range(k):
            patch = x_pad[:, i : i + s * oh : s, j : j + s * ow : s, :]
            y += np.tensordot(patch, w[i, j], axes=([3], [0]))
    return y, {"x_pad": x_pad, "in_shape": x.shape}


def _conv_backward(layer, path, dy, params, cache, grads):
    w = params.tensors[path + ".weight"]
    x_pad = cache["x_pad"]
    k, s, p = layer.kernel, layer.stride, layer.pad
    oh, ow = dy.shape[1], dy.shape[2]
    dw = np.zeros_like(w)
    dx_pad = np.zeros_like(x_pad)
    for i in range(k):
        for j in range(k):
            patch = x_pad[:, i : i + s * oh : s, j : j + s * ow : s, :]
            dw[i, j] = np.tensordot(patch, dy, axes=([0, 1, 2], [0, 1, 2]))
            dx_pad[:, i : i + s * oh : s, j : j + s * ow : s, :] += np.tensordot(
                dy, w[i, j], axes=([3], [1])
            )
    grads[path + ".weight"] = dw
    if layer.use_bias:
        grads[path + ".bias"] = dy.sum(axis=(0, 1, 2))
    if p:
        h, w_in = cache["in_shape"][1], cache["in_shape"][2]
        return dx_pad[:, p : p + h, p : p + w_in, :]
    return dx_pad


def _bn_forward(layer, path, x, params, mode):
    gamma = params.tensors[path + ".gamma"]
    beta = params.tensors[path + ".beta"]
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise InvalidArgumentError(
                "train-mode batch normalization needs a batch of at least 2"
            )
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)  # population variance, no Bessel correction
    else:
        mean = params.tensors[path + ".running_mean"]
        var = params.tensors[path + ".running_var"]
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    cache = {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var}
    return y, cache


def _bn_backward(layer, path, dy, params, cache, grads, mode):
    gamma = params.tensors[path + ".gamma"]
    xhat = cache["xhat"]
    inv_std = cache["inv_std"]
    axes = tuple(range(dy.ndim - 1))
    grads[path + ".gamma"] = (dy * xhat).sum(axis=axes)
    grads[path + ".beta"] = dy.sum(axis=axes)
    if mode == "train":
        m = 1
        for a in axes:
            m *= dy.shape[a]
        dxhat = dy * gamma
        return inv_std * (
            dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes) / m
        )
    return dy * gamma * inv_std


def _avgpool_forward(layer, x):
    k = layer.kernel
    bsz, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool {k} does not tile input {h}x{w}")
    y = x.reshape(bsz, h // k, k, w // k, k, c).mean(axis=(2, 4))
    return y, {"in_shape": x.shape}


def _avgpool_backward(layer, dy, cache):
    k = layer.kernel
    bsz, h, w, c = cache["in_shape"]
    dx = np.broadcast_to(
        dy[:, :, None, :, None, :] / (k * k), (bsz, h // k, k, w // k, k, c)
    )
    return dx.reshape(bsz, h, w, c)


def _forward_one(layer, path, x, params, mode, bn_stats):
    """Forward one layer; returns (output, cache)."""
    kind = layer.kind
    if kind == "dense":
        w = params.tensors[path + ".weight"]
        b = params.tensors[path + ".bias"]
        return x @ w + b, {"x": x}
    if kind == "conv":
        return _conv_forward(layer, path, x, params)
    if kind == "batchnorm":
        y, cache = _bn_forward(layer, path, x, params, mode)
        if mode == "train":
            bn_stats.append((path, cache["mean"], cache["var"]))
        return y, cache
    if kind == "relu":
        return np.maximum(x, 0), {"mask": x > 0}
    if kind == "avgpool":
        return _avgpool_forward(layer, x)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), {"in_shape": x.shape}
    if kind == "residual":
        inner_caches = []
        y = x
        for j, sub in enumerate(layer.inner):
            y, sub_cache = _forward_one(sub, f"{path}.inner.{j}", y, params, mode, bn_stats)
            inner_caches.append(sub_cache)
        if y.shape != x.shape:
            raise ShapeError(f"residual inner stack changed shape {x.shape} -> {y.shape}")
        return x + y, {"inner": inner_caches}
    raise InvalidArgumentError(f"unknown layer kind {kind!r}")


def _backward_one(layer, path, dy, params, cache, grads, mode):
    """Backward one layer; returns gradient w.r.t. its input."""
    kind = layer.kind
    if kind == "dense":
        x = cache["x"]
        grads[path + ".weight"] = x.T @ dy
        grads[path + ".bias"] = dy.sum(axis=0)
        return dy @ params.tensors[path + ".weight"].T
    if kind == "conv":
        return _conv_backward(layer, path, dy, params, cache, grads)
    if kind == "batchnorm":
        return _bn_backward(layer, path, dy, params, cache, grads, mode)
    if kind == "relu":
        return dy * cache["mask"]
    if kind == "avgpool":
        return _avgpool_backward(layer, dy, cache)
    if kind == "flatten":
        return dy.reshape(cache["in_shape"])
    if kind == "residual":
        g = dy
        for j in range(len(layer.inner) - 1, -1, -1):
            g = _backward_one(
                layer.inner[j], f"{path}.inner.{j}", g, params, cache["inner"][j], grads, mode
            )
        return dy + g
    raise InvalidArgumentError(f"unknown layer kind {kind!r}")


def forward(spec: NetworkSpec, params: ParamStore, batch, mode: str) -> ForwardTrace:
    """Run the network; mode is "train" (batch BN stats) or "eval" (running)."""
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch)
    expected = tuple(spec.input_shape)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"batch shape {x.shape} does not match input shape (B, {expected})")
    if x.shape[0] < 1:
        raise InvalidArgumentError("empty batch")
    x = x.astype(params.dtype, copy=False)
    caches: list = []
    bn_stats: list = []
    probe = None
    out = x
    for i, layer in enumerate(spec.layers):
        out, cache = _forward_one(layer, f"layers.{i}", out, params, mode, bn_stats)
        caches.append(cache)
        if i == spec.probe_index:
            probe = out
    return ForwardTrace(
        mode=mode,
        batch_size=x.shape[0],
        caches=caches,
        probe=probe,
        logits=out,
        bn_stats=bn_stats,
    )


def backward(
    spec: NetworkSpec,
    params: ParamStore,
    trace: ForwardTrace,
    logit_grad,
    probe_grad=None,
) -> dict:
    """Gradients of the traced loss w.r.t. every trainable parameter.

    ``logit_grad`` is dLoss/dlogits; ``probe_grad`` (optional) is an extra
    dLoss/dprobe injected at the probe layer output, which is how the probe
    objective reaches the parameters below the probe without a second pass.
    """
    if trace.mode != "train":
        raise StateError("backward requires a trace produced in train mode")
    g = np.asarray(logit_grad).astype(params.dtype, copy=False)
    if g.shape != trace.logits.shape:
        raise ShapeError(f"logit_grad shape {g.shape} != logits shape {trace.logits.shape}")
    if probe_grad is not None:
        probe_grad = np.asarray(probe_grad).astype(params.dtype, copy=False)
        if probe_grad.shape != trace.probe.shape:
            raise ShapeError(
                f"probe_grad shape {probe_grad.shape} != probe shape {trace.probe.shape}"
            )
    grads: dict = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        g = _backward_one(
            spec.layers[i], f"layers.{i}", g, params, trace.caches[i], grads, trace.mode
        )
        if i - 1 == spec.probe_index and probe_grad is not None:
            g = g + probe_grad
    return grads


def bn_update_running(running_mean, running_var, batch_mean, batch_var, momentum):
    """Exponential moving average with weight ``momentum`` on the old value."""
    if not (0.0 <= momentum <= 1.0):
        raise InvalidArgumentError(f"momentum must lie in [0, 1], got {momentum}")
    new_mean = (1.0 - momentum) * batch_mean + momentum * running_mean
    new_var = (1.0 - momentum) * batch_var + momentum * running_var
    return new_mean, new_var


def update_running_stats(spec: NetworkSpec, params: ParamStore, trace: ForwardTrace) -> None:
    """Fold a train-mode trace's batch statistics into the running buffers."""
    if trace.mode != "train":
        raise StateError("running statistics only update from train-mode traces")
    momentum_by_path: dict = {}

    def collect(layers, prefix):
        for i, layer in enumerate(layers):
            path = f"{prefix}.{i}"
            if layer.kind == "batchnorm":
                momentum_by_path[path] = layer.momentum
            elif layer.kind == "residual":
                collect(layer.inner, path + ".inner")

    collect(spec.layers, "layers")
    for path, mean, var in trace.bn_stats:
        new_mean, new_var = bn_update_running(
            params.tensors[path + ".running_mean"],
            params.tensors[path + ".running_var"],
            mean,
            var,
            momentum_by_path[path],
        )
        params.tensors[path + ".running_mean"] = new_mean.astype(params.dtype)
        params.tensors[path + ".running_var"] = new_var.astype(params.dtype)
