"""Token extraction from multivariate windows, plus mean-std normalization.

A window ``X`` of shape ``[T, N]`` (T timestamps, N variables) becomes one
of three token layouts:

* ``temporal``  - one token per timestamp, dimension N
* ``variable``  - one token per variable, dimension T
* ``patch``     - per-variable contiguous slices of length ``patch_len``
                  taken every ``stride`` steps, variable-major order; the
                  final partial patch is zero-padded
"""

from dataclasses import dataclass

import numpy as np

SCHEMES = ("temporal", "variable", "patch")


@dataclass
class TokenBatch:
    """Token matrix tagged with the scheme that produced it."""

    tokens: np.ndarray  # [n_tokens, token_dim]
    scheme: str
    patch_len: int | None = None
    stride: int | None = None

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def token_dim(self):
        return self.tokens.shape[1]


def patches_per_variable(T, patch_len, stride):
    return int(np.ceil((T - patch_len) / stride)) + 1


def token_count(scheme, T, N, patch_len=None, stride=None):
    """Number of tokens a [T, N] window yields under the given scheme."""
    if scheme == "temporal":
        return T
    if scheme == "variable":
        return N
    if scheme == "patch":
        return N * patches_per_variable(T, patch_len, stride)
    raise ValueError(f"unknown token scheme {scheme!r}")


def tokenize(X, scheme, patch_len=None, stride=None):
    X = np.asarray(X, dtype=np.float64)
    T, N = X.shape
    if T < 1 or N < 1:
        raise ValueError(f"window must be non-empty, got shape {X.shape}")
    if scheme == "temporal":
        return TokenBatch(X.copy(), scheme)
    if scheme == "variable":
        return TokenBatch(np.ascontiguousarray(X.T), scheme)
    if scheme == "patch":
        if patch_len is None or stride is None:
            raise ValueError("patch scheme needs patch_len and stride")
        if not 1 <= patch_len <= T:
            raise ValueError(f"patch_len {patch_len} outside [1, T={T}]")
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        per_var = patches_per_variable(T, patch_len, stride)
        out = np.zeros((N * per_var, patch_len))
        for v in range(N):
            col = X[:, v]
            for p in range(per_var):
                lo = p * stride
                hi = min(lo + patch_len, T)
                out[v * per_var + p, : hi - lo] = col[lo:hi]
        return TokenBatch(out, scheme, patch_len=patch_len, stride=stride)
    raise ValueError(f"unknown token scheme {scheme!r}")


def detokenize(batch, T, N):
    """Reassemble the [T, N] window from a token batch.

    Exact for temporal and variable tokens; for patch tokens it requires a
    non-overlapping exact tiling (stride == patch_len dividing T).
    """
    if batch.scheme == "temporal":
        return batch.tokens.copy()
    if batch.scheme == "variable":
        return np.ascontiguousarray(batch.tokens.T)
    if batch.scheme == "patch":
        if batch.stride != batch.patch_len or T % batch.patch_len:
            raise ValueError("patch detokenize needs stride == patch_len | T")
        per_var = T // batch.patch_len
        X = np.empty((T, N))
        for v in range(N):
            X[:, v] = batch.tokens[v * per_var : (v + 1) * per_var].reshape(-1)
        return X
    raise ValueError(f"unknown token scheme {batch.scheme!r}")


@dataclass
class NormStats:
    """Per-variable mean and (population) standard deviation."""

    mean: np.ndarray
    std: np.ndarray


STD_FLOOR = 1e-8


def fit_norm(train):
    """Fit per-variable statistics; call on the training split only."""
    train = np.asarray(train, dtype=np.float64)
    std = train.std(axis=0)  # population (divide by N)
    return NormStats(train.mean(axis=0), np.maximum(std, STD_FLOOR))


def _check_cols(X, stats, op):
    if X.shape[1] != stats.mean.shape[0]:
        raise ValueError(
            f"{op}: data has {X.shape[1]} columns, stats cover {stats.mean.shape[0]}"
        )


def apply_norm(X, stats):
    X = np.asarray(X, dtype=np.float64)
    _check_cols(X, stats, "apply_norm")
    return (X - stats.mean) / stats.std


def invert_norm(Y, stats):
    Y = np.asarray(Y, dtype=np.float64)
    _check_cols(Y, stats, "invert_norm")
    return Y * stats.std + stats.mean
