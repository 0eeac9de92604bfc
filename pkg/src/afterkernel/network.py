"""Network assembly, initialization, differentiation, and checkpointing.

Four named architectures are provided. ``vgg_like`` and ``mega_vgg_like``
are two conv blocks (channels c, c, 2c, 2c with 3x3 filters, ReLU, and 2x2
max-pooling after each block) followed by a small ReLU dense head and a
scalar output. ``fully_connected`` has four ReLU hidden layers of one
width. ``sum_net`` collapses the image to its pixel sum, then applies a
ReLU hidden layer and a scalar output; its features are invariant to any
pixel permutation.

Widths can be rescaled through :class:`ArchitectureId` to hit parameter
budgets; closed-form parameter counts are in :func:`param_count`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .layers import Conv2D, Dense, Flatten, MaxPool2D, ReLU, SumInputs

ARCH_NAMES = ("vgg_like", "mega_vgg_like", "fully_connected", "sum_net")

_BASE_WIDTH = {
    "vgg_like": 26,  # first-block channels; second block doubles this
    "mega_vgg_like": 119,
    "fully_connected": 94,
    "sum_net": 16,
}

_DEFAULT_HEAD_WIDTH = 20


@dataclass(frozen=True)
class ArchitectureId:
    """A named architecture plus optional width rescaling.

    ``width_scale`` multiplies the architecture's base width (channel count
    for the conv nets, hidden width otherwise), preserving layer structure.
    ``head_width`` is the dense head inserted between flatten and output in
    the conv architectures; the other architectures ignore it.
    """

    name: str
    width_scale: float = 1.0
    head_width: int = _DEFAULT_HEAD_WIDTH

    def __post_init__(self):
        if self.name not in ARCH_NAMES:
            raise ConfigurationError(
                f"unknown architecture {self.name!r}; expected one of {ARCH_NAMES}"
            )
        if self.width_scale <= 0:
            raise ConfigurationError("width_scale must be positive")
        if self.head_width < 1:
            raise ConfigurationError("head_width must be >= 1")

    @property
    def width(self) -> int:
        """Scaled base width (channels / hidden units), at least 1."""
        return max(1, round(_BASE_WIDTH[self.name] * self.width_scale))

    def to_string(self) -> str:
        parts = [self.name]
        if self.width_scale != 1.0:
            parts.append(f"ws={self.width_scale!r}")
        if self.head_width != _DEFAULT_HEAD_WIDTH:
            parts.append(f"hw={self.head_width}")
        return ";".join(parts)

    @classmethod
    def from_string(cls, text: str) -> "ArchitectureId":
        parts = text.split(";")
        kwargs = {}
        for part in parts[1:]:
            key, _, value = part.partition("=")
            if key == "ws":
                kwargs["width_scale"] = float(value)
            elif key == "hw":
                kwargs["head_width"] = int(value)
            else:
                raise ConfigurationError(f"bad architecture string {text!r}")
        return cls(parts[0], **kwargs)


def _make_layers(arch: ArchitectureId) -> list:
    w = arch.width
    if arch.name in ("vgg_like", "mega_vgg_like"):
        return [
            Conv2D(w), ReLU(), Conv2D(w), ReLU(), MaxPool2D(),
            Conv2D(2 * w), ReLU(), Conv2D(2 * w), ReLU(), MaxPool2D(),
            Flatten(), Dense(arch.head_width), ReLU(), Dense(1),
        ]
    if arch.name == "fully_connected":
        layers = [Flatten()]
        for _ in range(4):
            layers += [Dense(w), ReLU()]
        return layers + [Dense(1)]
    if arch.name == "sum_net":
        return [SumInputs(), Dense(w), ReLU(), Dense(1)]
    raise ConfigurationError(f"unknown architecture {arch.name!r}")


class Network:
    """An ordered layer stack with a single scalar output.

    Parameters live inside the layers; the flat view (layer order, weights
    before biases, C order) is materialized by :meth:`get_params` and
    written back by :meth:`set_params`. Forward and gradient evaluation are
    pure with respect to that parameter vector.
    """

    def __init__(self, layers, input_shape, arch: ArchitectureId | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.arch = arch
        if not isinstance(self.layers[-1], Dense) or self.layers[-1].units != 1:
            raise ConfigurationError("final layer must be a scalar dense output")
        shape = self.input_shape
        self.layer_shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {i} ({layer.name}): {exc}") from None
            self.layer_shapes.append(shape)
        # input width of the final dense layer = size of the last hidden layer
        self.conjugate_dim = self.layer_shapes[-2][0]
        self._offsets = None

    def init_params(self, seed: int) -> None:
        """Glorot-uniform weights, zero biases; layer-order draws from one stream."""
        rng = np.random.default_rng(seed)
        for shape, layer in zip(self.layer_shapes, self.layers):
            layer.init_params(shape, rng)
        self._index_params()

    def _index_params(self):
        self._offsets = []
        pos = 0
        for layer in self.layers:
            self._offsets.append(pos)
            pos += layer.n_params
        self.n_params = pos

    @property
    def param_offsets(self):
        if self._offsets is None:
            self._index_params()
        return self._offsets

    def get_params(self) -> np.ndarray:
        self.param_offsets
        out = np.empty(self.n_params)
        pos = 0
        for layer in self.layers:
            for arr in layer.param_arrays():
                out[pos : pos + arr.size] = arr.ravel()
                pos += arr.size
        return out

    def set_params(self, flat: np.ndarray) -> None:
        self.param_offsets
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise InputError(
                f"parameter vector has length {flat.size}, network needs {self.n_params}"
            )
        pos = 0
        for layer in self.layers:
            for arr in layer.param_arrays():
                arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
                pos += arr.size

    def _check_batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == len(self.input_shape):
            X = X[None]
        if X.shape[1:] != self.input_shape:
            raise InputError(
                f"input shape {X.shape[1:]} does not match network input {self.input_shape}"
            )
        return X

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        """Scalar outputs for a batch, shape (B,)."""
        A = self._check_batch(X)
        for layer in self.layers:
            A = layer.forward(A)
        return A[:, 0]

    def forward(self, image: np.ndarray):
        """Scalar output and every layer's activation for one image."""
        A = self._check_batch(image)
        if A.shape[0] != 1:
            raise InputError("forward takes a single image; use forward_batch")
        acts = []
        for layer in self.layers:
            A = layer.forward(A)
            acts.append(A[0])
        return float(A[0, 0]), acts

    def last_hidden_batch(self, X: np.ndarray) -> np.ndarray:
        """Activations entering the final dense layer, shape (B, conjugate_dim)."""
        A = self._check_batch(X)
        for layer in self.layers[:-1]:
            A = layer.forward(A)
        return A

    def grad_batch(self, X: np.ndarray) -> np.ndarray:
        """Per-example gradient of the scalar output, shape (B, n_params)."""
        X = self._check_batch(X)
        B = X.shape[0]
        self.forward_batch(X)
        G = np.empty((B, self.n_params))
        dY = np.ones((B, 1))
        for layer, off in zip(reversed(self.layers), reversed(self.param_offsets)):
            dY, g = layer.backward_per_example(dY)
            if g is not None:
                G[:, off : off + layer.n_params] = g
        return G

    def grad_params(self, image: np.ndarray) -> np.ndarray:
        """Gradient of the scalar output w.r.t. the flat parameter vector."""
        return self.grad_batch(image)[0]

    def backward_mean(self, dY: np.ndarray) -> np.ndarray:
        """Batch-summed parameter gradient for the most recent forward_batch.

        ``dY`` carries one upstream scalar per example (already folded with
        any loss derivative and 1/B averaging).
        """
        g = np.empty(self.n_params)
        dA = dY
        for layer, off in zip(reversed(self.layers), reversed(self.param_offsets)):
            dA, grads = layer.backward(dA)
            pos = off
            for arr in grads:
                g[pos : pos + arr.size] = arr.ravel()
                pos += arr.size
        return g


def build_network(arch, input_shape, seed: int) -> Network:
    """Construct and Glorot-initialize a named architecture.

    Deterministic in ``seed``: building twice yields bit-identical
    parameter vectors.
    """
    if isinstance(arch, str):
        arch = ArchitectureId.from_string(arch)
    net = Network(_make_layers(arch), input_shape, arch=arch)
    net.init_params(seed)
    return net


def predict_class(net: Network, image: np.ndarray) -> int:
    """1 iff the scalar output is positive; ties (exactly 0) map to 0."""
    f, _ = net.forward(image)
    return 1 if f > 0 else 0


def predict_class_batch(net: Network, X: np.ndarray) -> np.ndarray:
    return (net.forward_batch(X) > 0).astype(np.int64)


def param_count(arch, input_shape, width: int | None = None) -> int:
    """Closed-form parameter count; no network is built.

    ``width`` overrides the (scaled) base width, which is what the width
    sweep varies.
    """
    if isinstance(arch, str):
        arch = ArchitectureId.from_string(arch)
    w = arch.width if width is None else int(width)
    if w < 1:
        raise ConfigurationError("width must be >= 1")
    H, W, C = input_shape
    if arch.name in ("vgg_like", "mega_vgg_like"):
        fh, fw = (H - 4) // 2 - 4, (W - 4) // 2 - 4
        if fh < 2 or fw < 2:
            raise ConfigurationError(
                f"{arch.name} needs at least 16x16 input, got {H}x{W}"
            )
        fh, fw = fh // 2, fw // 2
        conv = (9 * C * w + w) + (9 * w * w + w) + (18 * w * w + 2 * w) + (36 * w * w + 2 * w)
        head = (fh * fw * 2 * w) * arch.head_width + arch.head_width
        return conv + head + (arch.head_width + 1)
    if arch.name == "fully_connected":
        d = H * W * C
        return (d * w + w) + 3 * (w * w + w) + (w + 1)
    if arch.name == "sum_net":
        return 3 * w + 1
    raise ConfigurationError(f"unknown architecture {arch.name!r}")


@dataclass
class Checkpoint:
    """Frozen flat parameter vector after a given number of training epochs."""

    epoch: int
    params: np.ndarray
    arch: ArchitectureId
    seed: int | None = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)


def network_from_checkpoint(ckpt: Checkpoint, input_shape) -> Network:
    """Rebuild the architecture at the checkpoint's parameters."""
    net = Network(_make_layers(ckpt.arch), input_shape, arch=ckpt.arch)
    # allocate arrays without spending entropy on values we overwrite
    net.init_params(0)
    if net.n_params != ckpt.params.size:
        raise InputError(
            f"checkpoint has {ckpt.params.size} parameters but "
            f"{ckpt.arch.to_string()} on input {tuple(input_shape)} needs {net.n_params}"
        )
    net.set_params(ckpt.params)
    return net


_CKPT_MAGIC = b"AKCP"
_CKPT_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arch_bytes = ckpt.arch.to_string().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(arch_bytes)))
        fh.write(arch_bytes)
        fh.write(struct.pack("<I", ckpt.epoch))
        fh.write(struct.pack("<Q", ckpt.params.size))
        fh.write(np.ascontiguousarray(ckpt.params, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_CKPT_MAGIC!r}", offset=0)
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    (alen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arch = ArchitectureId.from_string(blob[pos : pos + alen].decode("utf-8"))
    pos += alen
    epoch, = struct.unpack_from("<I", blob, pos)
    pos += 4
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    need = count * 8
    if len(blob) - pos < need:
        raise FormatError(
            f"{path}: truncated parameter payload ({len(blob) - pos} of {need} bytes)",
            offset=pos,
        )
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return Checkpoint(epoch=epoch, params=params, arch=arch, seed=None)
