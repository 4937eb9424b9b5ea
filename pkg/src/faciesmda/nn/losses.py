"""VAE objective: binary cross-entropy reconstruction plus weighted KL term."""
from __future__ import annotations

import numpy as np

__all__ = ["BCE_EPS", "kl_divergence", "bce_loss", "total_loss", "reparameterize"]

BCE_EPS = 1e-7


def reparameterize(mu, logvar, eps):
    """Latent draw ``mu + exp(logvar / 2) * eps``; the caller owns the noise."""
    mu, logvar, eps = (np.asarray(a, dtype=np.float64) for a in (mu, logvar, eps))
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    return mu + np.exp(0.5 * logvar) * eps


def kl_divergence(mu, logvar):
    """KL divergence from ``N(mu, diag(exp(logvar)))`` to ``N(0, I)``.

    Sums over the last axis, so a batch of shape ``(n, n_z)`` gives ``n``
    values.
    """
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, logvar {logvar.shape}")
    # expm1(lv) - lv is exactly nonnegative and avoids cancellation near 0
    return 0.5 * np.sum(mu**2 + (np.expm1(logvar) - logvar), axis=-1)


def bce_loss(x, xhat, per_sample_axes=None):
    """Mean binary cross-entropy over all entries.

    ``xhat`` is clamped to ``[BCE_EPS, 1 - BCE_EPS]`` first.  With
    ``per_sample_axes`` the mean is taken over those axes only (e.g.
    ``(1, 2, 3)`` for a batch of images) and an array is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, xhat {xhat.shape}")
    c = np.clip(xhat, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(x * np.log(c) + (1.0 - x) * np.log1p(-c))
    return terms.mean(axis=per_sample_axes)


def total_loss(x, xhat, mu, logvar, lam=1.0):
    """Reconstruction error plus ``lam`` times the KL term."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return bce_loss(x, xhat) + lam * kl_divergence(mu, logvar)
