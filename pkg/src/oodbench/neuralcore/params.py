"""Parameter storage, initialization, and checkpoint serialization.

Parameters live in a flat name -> array mapping. Names mirror the layer
tree: ``layers.3.weight`` for a top-level layer, ``layers.3.inner.1.gamma``
inside a residual block. BatchNorm running statistics are stored alongside
the trainable tensors but are excluded from gradients and optimizer state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, InvalidArgumentError, ShapeError
from .spec import NetworkSpec, infer_shapes

_TRAINABLE_SUFFIXES = ("weight", "bias", "gamma", "beta")
_MAGIC = b"OODB"
_VERSION = 1


@dataclass
class ParamStore:
    """Flat tensor dictionary plus the floating-point mode it lives in."""

    tensors: dict
    dtype: np.dtype

    @property
    def mode(self) -> str:
        return "check" if self.dtype == np.float64 else "standard"

    def copy(self) -> "ParamStore":
        return ParamStore(
            tensors={k: v.copy() for k, v in self.tensors.items()}, dtype=self.dtype
        )

    def astype(self, dtype) -> "ParamStore":
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise InvalidArgumentError(f"unsupported parameter dtype {dtype}")
        return ParamStore(
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()}, dtype=dtype
        )


def is_trainable(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _TRAINABLE_SUFFIXES


def trainable_names(params: ParamStore) -> list[str]:
    return sorted(n for n in params.tensors if is_trainable(n))


def glorot_uniform(fan_in: int, fan_out: int, shape, rng) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _walk(layers, prefix, in_shape, visit):
    """Depth-first walk calling visit(path, layer, in_shape); returns out shape."""
    from .spec import _infer_layer

    shape = in_shape
    for i, layer in enumerate(layers):
        path = f"{prefix}.{i}"
        if layer.kind == "residual":
            _walk(layer.inner, path + ".inner", shape, visit)
        else:
            visit(path, layer, shape)
        shape = _infer_layer(layer, shape)
    return shape


def walk_layers(spec: NetworkSpec, visit):
    """Visit every parameterized leaf layer with (path, layer, input_shape)."""
    _walk(spec.layers, "layers", tuple(spec.input_shape), visit)


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParamStore:
    """Glorot-uniform weights, zero biases, identity BatchNorm state.

    Each parameterized layer draws from its own seed stream, so adding a
    layer does not shift the draws of the layers before it.
    """
    dtype = np.dtype(dtype)
    tensors: dict = {}
    counter = [0]

    def visit(path, layer, in_shape):
        if layer.kind == "dense":
            fan_in, fan_out = in_shape[0], layer.out_features
            rng = np.random.default_rng(np.random.SeedSequence([seed, counter[0]]))
            tensors[path + ".weight"] = glorot_uniform(
                fan_in, fan_out, (fan_in, fan_out), rng
            ).astype(dtype)
            tensors[path + ".bias"] = np.zeros(fan_out, dtype=dtype)
            counter[0] += 1
        elif layer.kind == "conv":
            cin = in_shape[2]
            k = layer.kernel
            fan_in = k * k * cin
            fan_out = k * k * layer.out_channels
            rng = np.random.default_rng(np.random.SeedSequence([seed, counter[0]]))
            tensors[path + ".weight"] = glorot_uniform(
                fan_in, fan_out, (k, k, cin, layer.out_channels), rng
            ).astype(dtype)
            if layer.use_bias:
                tensors[path + ".bias"] = np.zeros(layer.out_channels, dtype=dtype)
            counter[0] += 1
        elif layer.kind == "batchnorm":
            c = in_shape[-1]
            tensors[path + ".gamma"] = np.ones(c, dtype=dtype)
            tensors[path + ".beta"] = np.zeros(c, dtype=dtype)
            tensors[path + ".running_mean"] = np.zeros(c, dtype=dtype)
            tensors[path + ".running_var"] = np.ones(c, dtype=dtype)
            counter[0] += 1

    walk_layers(spec, visit)
    return ParamStore(tensors=tensors, dtype=dtype)


def save_checkpoint(params: ParamStore, path) -> None:
    """Write tensors as magic + version, then sorted name/shape/f32 records."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">I", _VERSION))
        for name in sorted(params.tensors):
            arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack(">I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack(">I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack(">I", d))
            fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path, spec: NetworkSpec | None = None) -> ParamStore:
    """Read a checkpoint; if a spec is given, verify names and shapes match."""
    tensors: dict = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack(">I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("checkpoint truncated while reading name length")
            (name_len,) = struct.unpack(">I", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack(">I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(
                ">" + "I" * rank, _read_exact(fh, 4 * rank, "dims")
            )
            count = 1
            for d in dims:
                count *= d
            raw = _read_exact(fh, 4 * count, f"payload of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    store = ParamStore(tensors=tensors, dtype=np.dtype(np.float32))
    if spec is not None:
        reference = init_params(spec, seed=0)
        if set(tensors) != set(reference.tensors):
            missing = sorted(set(reference.tensors) - set(tensors))
            extra = sorted(set(tensors) - set(reference.tensors))
            raise ShapeError(
                f"checkpoint does not match network: missing {missing}, extra {extra}"
            )
        for name, ref in reference.tensors.items():
            if tensors[name].shape != ref.shape:
                raise ShapeError(
                    f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                    f"expected {ref.shape}"
                )
    return store


def infer_probe_split(spec: NetworkSpec, params: ParamStore):
    """Names of parameters below (inclusive) and above the probe layer."""
    below: list[str] = []
    above: list[str] = []

    def side(path: str) -> list[str]:
        idx = int(path.split(".")[1])
        return below if idx <= spec.probe_index else above

    for name in sorted(params.tensors):
        side(name.rsplit(".", 1)[0]).append(name)
    return below, above
