"""Layers with hand-written forward and backward passes.

All tensors are float64 and batch-first.  Image tensors are laid out as
``(batch, channels, ny, nx)``.  Each layer is a light object holding its
static configuration; parameters live outside the layer in a dict so the
forward pass stays a pure function of ``(params, x)``.

``forward`` returns ``(y, cache)`` and ``backward`` consumes the cache,
returning ``(dx, grads)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "LayerSpec",
    "ShapeError",
    "NumericalError",
    "Layer",
    "Conv2D",
    "ConvTranspose2D",
    "Dense",
    "Flatten",
    "Reshape",
    "Dropout",
    "BilinearUpsample",
    "build_layer",
    "forward_layer",
    "activate",
    "activation_grad",
]

KINDS = ("conv2d", "transposed_conv2d", "dense", "flatten", "reshape", "dropout",
         "bilinear_upsample")
ACTIVATIONS = ("relu", "linear", "sigmoid")


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``filters``/``kernel``/``stride`` apply to the convolution kinds,
    ``units`` to dense, ``rate`` to dropout and ``shape`` to reshape and
    bilinear_upsample (target ``(channels, ny, nx)`` or ``(ny, nx)``).
    """

    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    units: int = 0
    activation: str = "linear"
    rate: float = 0.0
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.kernel) < 1:
            raise ValueError(f"kernel sizes must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise ValueError(f"strides must be >= 1, got {self.stride}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind in ("conv2d", "transposed_conv2d") and self.filters < 1:
            raise ValueError(f"{self.kind} needs filters >= 1")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs units >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "filters": self.filters, "kernel": list(self.kernel),
            "stride": list(self.stride), "units": self.units,
            "activation": self.activation, "rate": self.rate, "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"], filters=int(d.get("filters", 0)),
            kernel=tuple(d.get("kernel", (1, 1))), stride=tuple(d.get("stride", (1, 1))),
            units=int(d.get("units", 0)), activation=d.get("activation", "linear"),
            rate=float(d.get("rate", 0.0)), shape=tuple(d.get("shape", ())),
        )


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "sigmoid":
        return _sigmoid(a)
    return a


def activation_grad(dy: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Back-propagate through the activation given its output ``y``."""
    if kind == "relu":
        return dy * (y > 0.0)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    return dy


class Layer:
    """Base class; parameter-free layers only override the passes."""

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...], name: str):
        self.spec = spec
        self.name = name
        self.in_shape = tuple(in_shape)
        self.out_shape = self._infer_shape()

    def _infer_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def fans(self) -> tuple[int, int]:
        return 1, 1

    def check_input(self, x: np.ndarray):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"{self.name}: expected input (batch, {self.in_shape}), got {x.shape}")

    def forward(self, params, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, params, cache, dy):
        raise NotImplementedError


class Conv2D(Layer):
    """Valid-padding 2D convolution (cross-correlation)."""

    def _infer_shape(self):
        if len(self.in_shape) != 3:
            raise ShapeError(f"{self.name}: conv2d needs (c, ny, nx) input, got {self.in_shape}")
        c, h, w = self.in_shape
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        if h < kh or w < kw:
            raise ShapeError(f"{self.name}: kernel {self.spec.kernel} larger than input {self.in_shape}")
        return self.spec.filters, (h - kh) // sh + 1, (w - kw) // sw + 1

    def param_shapes(self):
        kh, kw = self.spec.kernel
        return {"weight": (self.spec.filters, self.in_shape[0], kh, kw),
                "bias": (self.spec.filters,)}

    def fans(self):
        kh, kw = self.spec.kernel
        return self.in_shape[0] * kh * kw, self.spec.filters * kh * kw

    def _taps(self, x):
        """Yield ``(i, j, view)`` with the input entries kernel tap (i, j) touches."""
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        _, ho, wo = self.out_shape
        for i in range(kh):
            for j in range(kw):
                yield i, j, x[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]

    def forward(self, params, x, train=False, rng=None):
        self.check_input(x)
        w, b = params[f"{self.name}.weight"], params[f"{self.name}.bias"]
        f, ho, wo = self.out_shape
        n, c = x.shape[:2]
        a = np.zeros((n, f, ho * wo))
        for i, j, xs in self._taps(x):
            a += w[:, :, i, j] @ xs.reshape(n, c, ho * wo)
        a += b[None, :, None]
        y = activate(a.reshape(n, f, ho, wo), self.spec.activation)
        return y, (x, y)

    def backward(self, params, cache, dy):
        x, y = cache
        w = params[f"{self.name}.weight"]
        f, ho, wo = self.out_shape
        n, c = x.shape[:2]
        da = activation_grad(dy, y, self.spec.activation).reshape(n, f, ho * wo)
        # batch folded into the contraction axis for the weight gradient
        da2 = da.transpose(1, 0, 2).reshape(f, n * ho * wo)
        dw = np.empty_like(w)
        dx = np.zeros(x.shape)
        for i, j, xs in self._taps(x):
            dw[:, :, i, j] = da2 @ xs.transpose(1, 0, 2, 3).reshape(c, n * ho * wo).T
        for i, j, dxs in self._taps(dx):
            dxs += (w[:, :, i, j].T @ da).reshape(n, c, ho, wo)
        grads = {f"{self.name}.weight": dw, f"{self.name}.bias": da.sum(axis=(0, 2))}
        return dx, grads


class ConvTranspose2D(Layer):
    """Transposed convolution; output extent ``(n - 1) * s + k``."""

    def _infer_shape(self):
        if len(self.in_shape) != 3:
            raise ShapeError(f"{self.name}: transposed_conv2d needs (c, ny, nx) input, got {self.in_shape}")
        _, h, w = self.in_shape
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        return self.spec.filters, (h - 1) * sh + kh, (w - 1) * sw + kw

    def param_shapes(self):
        kh, kw = self.spec.kernel
        return {"weight": (self.in_shape[0], self.spec.filters, kh, kw),
                "bias": (self.spec.filters,)}

    def fans(self):
        kh, kw = self.spec.kernel
        return self.in_shape[0] * kh * kw, self.spec.filters * kh * kw

    def forward(self, params, x, train=False, rng=None):
        self.check_input(x)
        w, b = params[f"{self.name}.weight"], params[f"{self.name}.bias"]
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        f, ho, wo = self.out_shape
        n, c, h, wi = x.shape
        xr = x.transpose(0, 2, 3, 1).reshape(-1, c)
        contrib = (xr @ w.reshape(c, -1)).reshape(n, h, wi, f, kh, kw)
        a = np.zeros((n, f, ho, wo))
        for i in range(kh):
            for j in range(kw):
                a[:, :, i:i + sh * (h - 1) + 1:sh, j:j + sw * (wi - 1) + 1:sw] += \
                    contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        a += b[None, :, None, None]
        y = activate(a, self.spec.activation)
        return y, (xr, x.shape, y)

    def backward(self, params, cache, dy):
        xr, xshape, y = cache
        w = params[f"{self.name}.weight"]
        (kh, kw), (sh, sw) = self.spec.kernel, self.spec.stride
        f = self.spec.filters
        n, c, h, wi = xshape
        da = activation_grad(dy, y, self.spec.activation)
        dcontrib = np.empty((n, h, wi, f, kh, kw))
        for i in range(kh):
            for j in range(kw):
                dcontrib[:, :, :, :, i, j] = \
                    da[:, :, i:i + sh * (h - 1) + 1:sh, j:j + sw * (wi - 1) + 1:sw].transpose(0, 2, 3, 1)
        dflat = dcontrib.reshape(n * h * wi, -1)
        grads = {f"{self.name}.weight": (xr.T @ dflat).reshape(w.shape),
                 f"{self.name}.bias": da.sum(axis=(0, 2, 3))}
        dx = (dflat @ w.reshape(c, -1).T).reshape(n, h, wi, c).transpose(0, 3, 1, 2)
        return dx, grads


class Dense(Layer):

    def _infer_shape(self):
        if len(self.in_shape) != 1:
            raise ShapeError(f"{self.name}: dense needs flat input, got {self.in_shape}")
        return (self.spec.units,)

    def param_shapes(self):
        return {"weight": (self.in_shape[0], self.spec.units), "bias": (self.spec.units,)}

    def fans(self):
        return self.in_shape[0], self.spec.units

    def forward(self, params, x, train=False, rng=None):
        self.check_input(x)
        a = x @ params[f"{self.name}.weight"] + params[f"{self.name}.bias"]
        y = activate(a, self.spec.activation)
        return y, (x, y)

    def backward(self, params, cache, dy):
        x, y = cache
        da = activation_grad(dy, y, self.spec.activation)
        grads = {f"{self.name}.weight": x.T @ da, f"{self.name}.bias": da.sum(axis=0)}
        return da @ params[f"{self.name}.weight"].T, grads


class Flatten(Layer):

    def _infer_shape(self):
        return (int(np.prod(self.in_shape)),)

    def forward(self, params, x, train=False, rng=None):
        self.check_input(x)
        return x.reshape(x.shape[0], -1), None

    def backward(self, params, cache, dy):
        return dy.reshape((dy.shape[0],) + self.in_shape), {}


class Reshape(Layer):

    def _infer_shape(self):
        if int(np.prod(self.spec.shape)) != int(np.prod(self.in_shape)):
            raise ShapeError(f"{self.name}: cannot reshape {self.in_shape} to {self.spec.shape}")
        return tuple(self.spec.shape)

    def forward(self, params, x, train=False, rng=None):
        self.check_input(x)
        return x.reshape((x.shape[0],) + self.out_shape), None

    def backward(self, params, cache, dy):
        return dy.reshape((dy.shape[0],) + self.in_shape), {}


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def forward(self, params, x, train=False, rng=None):
        self.check_input(x)
        if not train or self.spec.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs an rng")
        keep = 1.0 - self.spec.rate
        mask = (rng.random(x.shape) < keep) / keep
        return x * mask, mask

    def backward(self, params, cache, dy):
        return (dy if cache is None else dy * cache), {}


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights with half-pixel centers, edges clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


class BilinearUpsample(Layer):
    """Separable bilinear resize to ``spec.shape`` = ``(ny, nx)``."""

    def _infer_shape(self):
        if len(self.in_shape) != 3:
            raise ShapeError(f"{self.name}: bilinear_upsample needs (c, ny, nx) input")
        target = tuple(self.spec.shape[-2:])
        if len(target) != 2 or min(target) < 1:
            raise ShapeError(f"{self.name}: bad target size {self.spec.shape}")
        self._mh = _bilinear_matrix(target[0], self.in_shape[1])
        self._mw = _bilinear_matrix(target[1], self.in_shape[2])
        return (self.in_shape[0],) + target

    def forward(self, params, x, train=False, rng=None):
        self.check_input(x)
        return self._mh @ x @ self._mw.T, None

    def backward(self, params, cache, dy):
        return self._mh.T @ dy @ self._mw, {}


_CLASSES = {
    "conv2d": Conv2D,
    "transposed_conv2d": ConvTranspose2D,
    "dense": Dense,
    "flatten": Flatten,
    "reshape": Reshape,
    "dropout": Dropout,
    "bilinear_upsample": BilinearUpsample,
}


def build_layer(spec: LayerSpec, in_shape, name: str) -> Layer:
    return _CLASSES[spec.kind](spec, tuple(in_shape), name)


def forward_layer(spec: LayerSpec, x: np.ndarray, params: dict, mode: str = "eval",
                  rng: Optional[np.random.Generator] = None, name: str = "layer") -> np.ndarray:
    """Apply a single layer described by ``spec`` to the batch ``x``.

    ``params`` maps ``"weight"``/``"bias"`` (unprefixed) to arrays.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    layer = build_layer(spec, x.shape[1:], name)
    prefixed = {f"{name}.{k}": v for k, v in params.items()}
    y, _ = layer.forward(prefixed, x, train=(mode == "train"), rng=rng)
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"{name}: non-finite output")
    return y
