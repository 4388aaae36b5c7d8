"""Token-level structure: positional encodings, the input-token similarity
matrix, layer-wise distortion metrics, and the HSIC dependence measure used
to diagnose how much of that structure survives each encoder layer.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tt


@dataclass
class TopologyContext:
    """Frozen per-forward structure: the positional-encoding matrix and the
    Gram matrix of the raw input tokens."""

    pe: np.ndarray  # [n_tokens, dim] positional encodings
    gram: np.ndarray  # [n_tokens, n_tokens] raw-token similarity
    pe_kind: str  # "sinusoidal" or "convolutional"


def sinusoidal_pe(n_tokens, dim):
    """Classic sin/cos encoding; position k (0-indexed) gets
    ``sin(k / 10000^(2i/dim))`` and ``cos`` in adjacent columns."""
    if dim % 2:
        raise ValueError(f"encoding dimension must be even, got {dim}")
    if n_tokens < 1:
        raise ValueError(f"need at least one token, got {n_tokens}")
    k = np.arange(n_tokens)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    pe = np.empty((n_tokens, dim))
    pe[:, 0::2] = np.sin(k * freq)
    pe[:, 1::2] = np.cos(k * freq)
    return pe


def conv_pe(embeddings, kernel):
    """Positional encoding produced by a depthwise width-3 convolution of
    the token embeddings; differentiable w.r.t. the kernel."""
    return tt.conv3(embeddings, kernel)


def gram_matrix(H0):
    """Similarity matrix of the raw tokens (symmetrized inner products).

    The result is plain data: no gradient flows into the tokens through it.
    """
    H0 = np.asarray(H0, dtype=np.float64)
    g = H0 @ H0.T
    return 0.5 * (g + g.T)


def _cosine_matrix(H):
    norms = np.linalg.norm(H, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = H / safe[:, None]
    unit[norms == 0.0] = 0.0  # zero-norm rows pair to similarity 0
    return unit @ unit.T


def semantic_distortion(H0, Hi):
    """Mean absolute change of pairwise cosine similarities between the raw
    tokens and a layer's representations. Lies in [0, 2]."""
    H0 = np.asarray(H0, dtype=np.float64)
    Hi = np.asarray(Hi, dtype=np.float64)
    if H0.shape[0] != Hi.shape[0]:
        raise ValueError(
            f"token counts differ: {H0.shape[0]} vs {Hi.shape[0]}"
        )
    return float(np.abs(_cosine_matrix(H0) - _cosine_matrix(Hi)).mean())


def positional_distortion(pe, Hi):
    """Mean absolute change of pairwise positional-encoding distances, with
    the layer's view of each encoding recovered by a least-squares linear
    readout from the layer activations (SVD solve; rank-deficient inputs,
    such as the near-constant low-frequency sinusoidal columns, are handled
    by the machine-precision singular-value cutoff).

    This recovery step is a proxy; report results as "delta_G (proxy)".
    """
    pe = np.asarray(pe, dtype=np.float64)
    Hi = np.asarray(Hi, dtype=np.float64)
    n = pe.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 tokens, got {n}")
    if Hi.shape[0] != n:
        raise ValueError(f"token counts differ: {n} vs {Hi.shape[0]}")
    W, *_ = np.linalg.lstsq(Hi, pe, rcond=None)
    rec = Hi @ W
    base = _pairwise_norms(pe)
    recd = _pairwise_norms(rec)
    return float(np.abs(base - recd).sum() / (n * n))


def _pairwise_norms(P):
    delta = P[:, None, :] - P[None, :, :]
    return np.sqrt((delta * delta).sum(axis=2))


def _pairwise_sq_dists(X):
    delta = X[:, None, :] - X[None, :, :]
    return (delta * delta).sum(axis=2)


def median_bandwidth(X):
    """Gaussian-kernel bandwidth from the median heuristic:
    sqrt(median of non-zero pairwise squared distances / 2)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    d2 = _pairwise_sq_dists(X)
    iu = np.triu_indices(X.shape[0], k=1)
    pool = d2[iu]
    pool = pool[pool > 0.0]
    if pool.size == 0:
        raise ValueError("all points identical: no non-zero pairwise distance")
    return float(np.sqrt(np.median(pool) / 2.0))


def _gaussian_kernel(X, sigma):
    return np.exp(-_pairwise_sq_dists(X) / (2.0 * sigma * sigma))


def hsic(X, Y):
    """Biased HSIC estimate with Gaussian kernels and median-heuristic
    bandwidths: tr(K H L H) / (n - 1)^2 with H the centering matrix.

    Rows of X and Y are paired by index.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ValueError(f"sample counts differ: {n} vs {Y.shape[0]}")
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    Km = _gaussian_kernel(X, median_bandwidth(X))
    Lm = _gaussian_kernel(Y, median_bandwidth(Y))
    H = np.eye(n) - np.full((n, n), 1.0 / n)
    KH = Km @ H
    LH = Lm @ H
    return float(np.trace(KH @ LH) / (n - 1) ** 2)
