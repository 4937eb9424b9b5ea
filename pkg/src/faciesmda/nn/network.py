"""Convolutional variational autoencoder with manual reverse-mode gradients."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .layers import Layer, LayerSpec, NumericalError, ShapeError, build_layer
from .losses import BCE_EPS, kl_divergence

__all__ = [
    "VaeNetwork",
    "mirrored_architecture",
    "PRESETS",
    "preset_architecture",
    "encode",
    "decode",
    "backward",
    "reconstruction_accuracy",
]


def mirrored_architecture(input_shape, convs, dense_units, n_z, dropout=0.1):
    """Encoder/decoder specs in the layout of a conv-VAE with a mirrored decoder.

    ``convs`` is a list of ``(filters, kernel, stride)`` for the encoder's
    valid-padding convolutions.  The decoder reverses them as transposed
    convolutions, resizes bilinearly to the grid plus a 1-cell border and
    finishes with a 3x3 sigmoid convolution producing ``k`` channels.
    """
    k, ny, nx = input_shape
    enc = [LayerSpec("conv2d", filters=f, kernel=(kk, kk), stride=(st, st),
                     activation="relu") for f, kk, st in convs]
    # walk the encoder shapes to learn where the decoder must reshape
    shape = (k, ny, nx)
    for i, spec in enumerate(enc):
        shape = build_layer(spec, shape, f"probe{i}").out_shape
    flat = int(np.prod(shape))
    enc += [LayerSpec("flatten"), LayerSpec("dense", units=dense_units, activation="relu")]
    if dropout > 0:
        enc.append(LayerSpec("dropout", rate=dropout))

    dec = [LayerSpec("dense", units=dense_units, activation="relu")]
    if dropout > 0:
        dec.append(LayerSpec("dropout", rate=dropout))
    dec += [LayerSpec("dense", units=flat, activation="relu"), LayerSpec("reshape", shape=shape)]
    filters_back = [f for f, _, _ in convs][::-1]
    for f, (_, kk, st) in zip(filters_back, convs[::-1]):
        dec.append(LayerSpec("transposed_conv2d", filters=f, kernel=(kk, kk), stride=(st, st),
                             activation="relu"))
    dec.append(LayerSpec("bilinear_upsample", shape=(ny + 2, nx + 2)))
    dec.append(LayerSpec("conv2d", filters=k, kernel=(3, 3), stride=(1, 1), activation="sigmoid"))
    return enc, dec, n_z


PRESETS = {
    # reduced widths of the reference topology, trainable on one CPU core
    "table1-desk": dict(convs=[(16, 2, 2), (16, 3, 2), (8, 3, 1)], dense_units=256, n_z=50),
    # full-width reference topology
    "table1": dict(convs=[(32, 2, 2), (32, 3, 2), (16, 3, 1)], dense_units=1024, n_z=100),
    # for grids too small for three convolutions (e.g. 8x8 gradient checks)
    "compact": dict(convs=[(4, 2, 2), (4, 3, 1)], dense_units=12, n_z=3),
}


def preset_architecture(name: str, input_shape, dropout: float = 0.1, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = {**PRESETS[name], **overrides}
    return mirrored_architecture(input_shape, cfg["convs"], cfg["dense_units"], cfg["n_z"],
                                 dropout=dropout)


def _as_batch(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


class VaeNetwork:
    """Encoder ending in two dense heads (mean, log-variance) and a decoder.

    Parameters are a flat ``{name: array}`` dict.  Shapes are checked once
    at construction; the decoder must reproduce ``input_shape`` exactly.
    """

    def __init__(self, input_shape: Sequence[int], encoder: Sequence[LayerSpec],
                 decoder: Sequence[LayerSpec], n_z: int, seed: int = 0, params=None):
        if n_z < 1:
            raise ValueError("n_z must be >= 1")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_z = int(n_z)
        self.encoder_specs = list(encoder)
        self.decoder_specs = list(decoder)
        self.encoder: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(self.encoder_specs):
            layer = build_layer(spec, shape, f"enc{i}")
            self.encoder.append(layer)
            shape = layer.out_shape
        if len(shape) != 1:
            raise ShapeError(f"encoder must end flat, ends with {shape}")
        head = LayerSpec("dense", units=self.n_z, activation="linear")
        self.mu_head = build_layer(head, shape, "mu")
        self.logvar_head = build_layer(head, shape, "logvar")
        self.decoder: list[Layer] = []
        shape = (self.n_z,)
        for i, spec in enumerate(self.decoder_specs):
            layer = build_layer(spec, shape, f"dec{i}")
            self.decoder.append(layer)
            shape = layer.out_shape
        if shape != self.input_shape:
            raise ShapeError(f"decoder output {shape} does not match input {self.input_shape}")
        if self.decoder_specs[-1].activation != "sigmoid":
            raise ShapeError("final decoder layer must use a sigmoid activation")
        self.params = self.init_params(seed) if params is None else {
            k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._check_params()

    @classmethod
    def from_preset(cls, name, input_shape, seed=0, dropout=0.1, **overrides):
        enc, dec, n_z = preset_architecture(name, input_shape, dropout=dropout, **overrides)
        return cls(input_shape, enc, dec, n_z, seed=seed)

    @property
    def layers(self) -> list[Layer]:
        return self.encoder + [self.mu_head, self.logvar_head] + self.decoder

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for layer in self.layers:
            for k, s in layer.param_shapes().items():
                out[f"{layer.name}.{k}"] = s
        return out

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """He-uniform for ReLU layers, Glorot-uniform otherwise; zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for layer in self.layers:
            shapes = layer.param_shapes()
            if not shapes:
                continue
            fan_in, fan_out = layer.fans()
            if layer.spec.activation == "relu":
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{layer.name}.weight"] = rng.uniform(-limit, limit, shapes["weight"])
            params[f"{layer.name}.bias"] = np.zeros(shapes["bias"])
        return params

    def _check_params(self):
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            missing = set(expected) ^ set(self.params)
            raise ShapeError(f"parameter set mismatch: {sorted(missing)}")
        for k, s in expected.items():
            if self.params[k].shape != s:
                raise ShapeError(f"{k}: expected shape {s}, got {self.params[k].shape}")

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "n_z": self.n_z,
            "encoder": [s.to_dict() for s in self.encoder_specs],
            "decoder": [s.to_dict() for s in self.decoder_specs],
        }

    @classmethod
    def from_architecture(cls, arch: dict, params=None, seed=0) -> "VaeNetwork":
        return cls(arch["input_shape"],
                   [LayerSpec.from_dict(d) for d in arch["encoder"]],
                   [LayerSpec.from_dict(d) for d in arch["decoder"]],
                   arch["n_z"], seed=seed, params=params)

    def copy(self) -> "VaeNetwork":
        return VaeNetwork.from_architecture(
            self.architecture(), params={k: v.copy() for k, v in self.params.items()})

    # -- passes ---------------------------------------------------------

    def _run(self, layers, h, train, rng, caches):
        for layer in layers:
            h, cache = layer.forward(self.params, h, train=train, rng=rng)
            if caches is not None:
                caches.append(cache)
        return h

    def encode(self, x, train=False, rng=None):
        x, single = _as_batch(x, len(self.input_shape) + 1)
        h = self._run(self.encoder, x, train, rng, None)
        mu, _ = self.mu_head.forward(self.params, h)
        logvar, _ = self.logvar_head.forward(self.params, h)
        _require_finite(mu, "mu")
        _require_finite(logvar, "logvar")
        return (mu[0], logvar[0]) if single else (mu, logvar)

    def decode(self, z, train=False, rng=None):
        z, single = _as_batch(z, 2)
        if z.shape[1] != self.n_z:
            raise ShapeError(f"latent length {z.shape[1]} != n_z {self.n_z}")
        xhat = self._run(self.decoder, z, train, rng, None)
        _require_finite(xhat, "decoder output")
        return xhat[0] if single else xhat

    def loss_and_grads(self, x, eps, lam=1.0, rng=None, train=True):
        """Mean total loss over the batch and its exact gradients.

        ``eps`` holds one standard-normal draw per sample and is treated as
        a constant.  ``rng`` drives the dropout masks; re-seeding it
        reproduces the same masks.
        """
        x = np.asarray(x, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        if eps.shape != (n, self.n_z):
            raise ShapeError(f"eps must have shape {(n, self.n_z)}, got {eps.shape}")
        enc_caches, dec_caches = [], []
        h = self._run(self.encoder, x, train, rng, enc_caches)
        mu, mu_cache = self.mu_head.forward(self.params, h)
        logvar, lv_cache = self.logvar_head.forward(self.params, h)
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
        xhat = self._run(self.decoder, z, train, rng, dec_caches)
        _require_finite(xhat, "decoder output")

        n_x = int(np.prod(self.input_shape))
        c = np.clip(xhat, BCE_EPS, 1.0 - BCE_EPS)
        bce = -(x * np.log(c) + (1.0 - x) * np.log1p(-c)).reshape(n, -1).mean(axis=1)
        kl = kl_divergence(mu, logvar)
        loss = float(np.mean(bce + lam * kl))

        grads: dict[str, np.ndarray] = {}
        # gradient of the clamped cross-entropy, evaluated at the clamped value
        dy = (c - x) / (c * (1.0 - c)) / (n_x * n)
        for layer, cache in zip(reversed(self.decoder), reversed(dec_caches)):
            dy, g = layer.backward(self.params, cache, dy)
            _merge(grads, g, layer.name)
        dz = dy
        dmu = dz + lam * mu / n
        dlogvar = dz * eps * 0.5 * std + lam * 0.5 * np.expm1(logvar) / n
        dh, g = self.mu_head.backward(self.params, mu_cache, dmu)
        _merge(grads, g, "mu")
        dh2, g = self.logvar_head.backward(self.params, lv_cache, dlogvar)
        _merge(grads, g, "logvar")
        dh = dh + dh2
        for layer, cache in zip(reversed(self.encoder), reversed(enc_caches)):
            dh, g = layer.backward(self.params, cache, dh)
            _merge(grads, g, layer.name)
        return loss, grads


def _merge(grads, g, name):
    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite gradient in layer {name} ({k})")
        grads[k] = v


def _require_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")


def encode(net: VaeNetwork, x):
    """Eval-mode encoder means and log-variances."""
    return net.encode(x)


def decode(net: VaeNetwork, z):
    """Eval-mode decoded soft image(s), values in (0, 1)."""
    return net.decode(z)


def backward(net: VaeNetwork, batch, eps, lam=1.0, dropout_seed=0):
    """Gradients of the mean total loss over ``batch``; see ``loss_and_grads``."""
    _, grads = net.loss_and_grads(batch, eps, lam=lam, rng=np.random.default_rng(dropout_seed))
    return grads


def reconstruction_accuracy(net: VaeNetwork, dataset, batch_size: int = 256) -> float:
    """Fraction of cells whose argmax reconstruction (z = encoder mean) is correct."""
    from ..geomodel import FaciesGrid, from_soft, to_one_hot

    if isinstance(dataset, np.ndarray):
        codes = dataset
    else:
        codes = np.stack([g.codes if isinstance(g, FaciesGrid) else np.asarray(g) for g in dataset])
    if codes.shape[0] == 0:
        raise ValueError("empty dataset")
    k = net.input_shape[0]
    hits = 0
    for start in range(0, codes.shape[0], batch_size):
        chunk = codes[start:start + batch_size]
        mu, _ = net.encode(to_one_hot(chunk, k))
        hits += int(np.sum(from_soft(net.decode(mu)) == chunk))
    return hits / codes.size
