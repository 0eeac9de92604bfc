"""Feed-forward layer primitives with exact reverse-mode differentiation.

All activations are float64 and batched: images are (B, H, W, C), flat
activations are (B, D). Every layer supports two backward modes:

* ``backward(dY)`` accumulates parameter gradients summed over the batch
  (what SGD needs when the upstream signal already carries per-example
  loss derivatives).
* ``backward_per_example(dY)`` returns one flat gradient row per example
  (what tangent-kernel feature extraction needs).

Deterministic conventions, fixed so parameter vectors and embeddings are
comparable across checkpoints:

* parameter flattening: layer order, weights before biases, C order;
* ReLU derivative at 0 is 0;
* max-pool ties route the gradient to the first maximal element in
  row-major window scan order.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


class Layer:
    """Base class; subclasses override the shape/forward/backward hooks."""

    name = "layer"

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def init_params(self, in_shape: tuple, rng: np.random.Generator) -> None:
        """Allocate parameters for the given input shape. Default: none."""

    def param_arrays(self) -> list:
        """Parameter blocks in flattening order (weights, then biases)."""
        return []

    def set_param_arrays(self, arrays: list) -> None:
        """Rebind parameter blocks (used to view into a flat buffer)."""
        if arrays:
            raise NotImplementedError

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def forward(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dY: np.ndarray):
        """Return (dX, [batch-summed gradient per parameter block])."""
        raise NotImplementedError

    def backward_per_example(self, dY: np.ndarray):
        """Return (dX, G) with G of shape (B, n_params), or (dX, None)."""
        dX, grads = self.backward(dY)
        if not grads:
            return dX, None
        raise NotImplementedError


class Dense(Layer):
    """Affine map: Y = X @ W + b, with W of shape (in, out)."""

    def __init__(self, units: int):
        self.units = units
        self.W = None
        self.b = None
        self._X = None

    @property
    def name(self):
        return f"dense({self.units})"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ConfigurationError(
                f"{self.name} expects a flat input, got shape {in_shape}"
            )
        return (self.units,)

    def init_params(self, in_shape, rng):
        fan_in = in_shape[0]
        limit = np.sqrt(6.0 / (fan_in + self.units))
        self.W = rng.uniform(-limit, limit, size=(fan_in, self.units))
        self.b = np.zeros(self.units)

    def param_arrays(self):
        return [self.W, self.b]

    def forward(self, X):
        self._X = X
        return X @ self.W + self.b

    def backward(self, dY):
        dW = self._X.T @ dY
        db = dY.sum(axis=0)
        return dY @ self.W.T, [dW, db]

    def backward_per_example(self, dY):
        B = dY.shape[0]
        # per-example dW is the outer product x_b (x) dy_b
        gW = np.einsum("bi,bo->bio", self._X, dY).reshape(B, -1)
        return dY @ self.W.T, np.concatenate([gW, dY], axis=1)


class Conv2D(Layer):
    """Valid (unpadded) stride-1 convolution; W shape (kh, kw, cin, cout)."""

    def __init__(self, channels: int, kernel_size: int = 3):
        self.channels = channels
        self.k = kernel_size
        self.W = None
        self.b = None
        self._cols = None
        self._in_shape = None

    @property
    def name(self):
        return f"conv2d({self.channels}x{self.k}x{self.k})"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(
                f"{self.name} expects an image input, got shape {in_shape}"
            )
        H, W, _ = in_shape
        if H < self.k or W < self.k:
            raise ConfigurationError(
                f"{self.name}: input {H}x{W} smaller than the {self.k}x{self.k} kernel"
            )
        return (H - self.k + 1, W - self.k + 1, self.channels)

    def init_params(self, in_shape, rng):
        cin = in_shape[2]
        rf = self.k * self.k
        limit = np.sqrt(6.0 / (rf * cin + rf * self.channels))
        self.W = rng.uniform(-limit, limit, size=(self.k, self.k, cin, self.channels))
        self.b = np.zeros(self.channels)

    def param_arrays(self):
        return [self.W, self.b]

    def _im2col(self, X):
        # (B, H', W', C, kh, kw) -> (B, H'*W', kh*kw*C) matching W's C order
        win = np.lib.stride_tricks.sliding_window_view(X, (self.k, self.k), axis=(1, 2))
        win = win.transpose(0, 1, 2, 4, 5, 3)
        B, Ho, Wo = win.shape[:3]
        return np.ascontiguousarray(win).reshape(B, Ho * Wo, -1), (Ho, Wo)

    def forward(self, X):
        self._in_shape = X.shape
        cols, (Ho, Wo) = self._im2col(X)
        self._cols = cols
        Wm = self.W.reshape(-1, self.channels)
        Y = cols @ Wm + self.b
        return Y.reshape(X.shape[0], Ho, Wo, self.channels)

    def _col2im(self, dcols, Ho, Wo):
        B, H, W, C = self._in_shape
        dX = np.zeros((B, H, W, C))
        d = dcols.reshape(B, Ho, Wo, self.k, self.k, C)
        for i in range(self.k):
            for j in range(self.k):
                dX[:, i : i + Ho, j : j + Wo, :] += d[:, :, :, i, j, :]
        return dX

    def backward(self, dY):
        B, Ho, Wo, _ = dY.shape
        dYm = dY.reshape(B, Ho * Wo, self.channels)
        K = self._cols.shape[2]
        dW = (
            self._cols.reshape(-1, K).T @ dYm.reshape(-1, self.channels)
        ).reshape(self.W.shape)
        db = dYm.sum(axis=(0, 1))
        dcols = dYm @ self.W.reshape(-1, self.channels).T
        return self._col2im(dcols, Ho, Wo), [dW, db]

    def backward_per_example(self, dY):
        B, Ho, Wo, _ = dY.shape
        dYm = dY.reshape(B, Ho * Wo, self.channels)
        gW = np.einsum("bpk,bpc->bkc", self._cols, dYm).reshape(B, -1)
        gb = dYm.sum(axis=1)
        dcols = dYm @ self.W.reshape(-1, self.channels).T
        return self._col2im(dcols, Ho, Wo), np.concatenate([gW, gb], axis=1)


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    name = "maxpool(2x2)"

    def __init__(self):
        self._argmax = None
        self._in_shape = None

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(
                f"{self.name} expects an image input, got shape {in_shape}"
            )
        H, W, C = in_shape
        if H < 2 or W < 2:
            raise ConfigurationError(f"{self.name}: input {H}x{W} smaller than the pool")
        return (H // 2, W // 2, C)

    def _windows(self, X):
        B, H, W, C = X.shape
        H2, W2 = H // 2, W // 2
        Xc = X[:, : 2 * H2, : 2 * W2, :]
        # (B, H2, W2, 4, C); window axis enumerates (0,0),(0,1),(1,0),(1,1)
        win = Xc.reshape(B, H2, 2, W2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        return win.reshape(B, H2, W2, 4, C)

    def forward(self, X):
        self._in_shape = X.shape
        win = self._windows(X)
        # argmax returns the first maximum: the documented row-major tie rule
        self._argmax = win.argmax(axis=3)
        return np.take_along_axis(win, self._argmax[:, :, :, None, :], axis=3)[
            :, :, :, 0, :
        ]

    def backward(self, dY):
        B, H, W, C = self._in_shape
        H2, W2 = H // 2, W // 2
        dwin = np.zeros((B, H2, W2, 4, C))
        np.put_along_axis(dwin, self._argmax[:, :, :, None, :], dY[:, :, :, None, :], axis=3)
        dX = np.zeros((B, H, W, C))
        dX[:, : 2 * H2, : 2 * W2, :] = (
            dwin.reshape(B, H2, W2, 2, 2, C)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(B, 2 * H2, 2 * W2, C)
        )
        return dX, []

    def backward_per_example(self, dY):
        dX, _ = self.backward(dY)
        return dX, None


class ReLU(Layer):
    name = "relu"

    def __init__(self):
        self._mask = None

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, X):
        self._mask = X > 0  # derivative at exactly 0 is 0
        return np.where(self._mask, X, 0.0)

    def backward(self, dY):
        return dY * self._mask, []

    def backward_per_example(self, dY):
        return dY * self._mask, None


class Flatten(Layer):
    name = "flatten"

    def __init__(self):
        self._in_shape = None

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, X):
        self._in_shape = X.shape
        return X.reshape(X.shape[0], -1)

    def backward(self, dY):
        return dY.reshape(self._in_shape), []

    def backward_per_example(self, dY):
        return dY.reshape(self._in_shape), None


class SumInputs(Layer):
    """Collapses each example to the scalar sum of all its entries."""

    name = "sum"

    def __init__(self):
        self._in_shape = None

    def out_shape(self, in_shape):
        return (1,)

    def forward(self, X):
        self._in_shape = X.shape
        return X.reshape(X.shape[0], -1).sum(axis=1, keepdims=True)

    def backward(self, dY):
        B = dY.shape[0]
        dX = np.broadcast_to(dY.reshape((B,) + (1,) * (len(self._in_shape) - 1)), self._in_shape)
        return np.ascontiguousarray(dX), []

    def backward_per_example(self, dY):
        dX, _ = self.backward(dY)
        return dX, None
