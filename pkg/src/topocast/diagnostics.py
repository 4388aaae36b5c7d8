"""Layer-wise structure diagnostics.

Captures every encoder layer's output on a probe window and measures, per
layer, (a) HSIC dependence between the positional encodings and the layer
output, (b) HSIC dependence between the input-token similarity matrix and
the layer output's similarity matrix (rows of the two matrices are the
paired samples), and (c) the semantic / positional distortion metrics.
"""

import os
import re
from dataclasses import dataclass

import numpy as np

from .data import synthetic_series
from .model import encode
from .tokens import apply_norm, fit_norm
from .topology import (
    TopologyContext,
    gram_matrix,
    hsic,
    positional_distortion,
    semantic_distortion,
    sinusoidal_pe,
)


@dataclass
class LayerTrace:
    """Raw input tokens plus each encoder layer's output for one probe."""

    tokens: np.ndarray  # [n_tokens, token_dim] before embedding
    layers: list  # L arrays of shape [n_tokens, dim]
    context: TopologyContext


@dataclass
class DistortionReport:
    """Per-layer distortion and HSIC values; index 0 is the input layer for
    the distortion lists, layer 1 for the HSIC lists."""

    delta_s: list
    delta_g_proxy: list
    hsic_positional: list
    hsic_semantic: list


def capture(state, Xn):
    """Non-mutating snapshot of each encoder layer's output on one window."""
    _, ctx, (tokens, layer_outputs) = encode(Xn, state, record=True)
    return LayerTrace(tokens, layer_outputs, ctx)


def hsic_curves(trace):
    """(positional, semantic) HSIC per layer, each of length L."""
    gram0 = trace.context.gram
    pos = [hsic(trace.context.pe, H) for H in trace.layers]
    sem = [hsic(gram0, gram_matrix(H)) for H in trace.layers]
    return pos, sem


def distortion_curves(trace):
    """(delta_s, delta_g_proxy) including the layer-0 entries."""
    delta_s = [semantic_distortion(trace.tokens, trace.tokens)]
    delta_g = [positional_distortion(trace.context.pe, trace.context.pe)]
    for H in trace.layers:
        delta_s.append(semantic_distortion(trace.tokens, H))
        delta_g.append(positional_distortion(trace.context.pe, H))
    return delta_s, delta_g


def probe_windows(cfg, n_probes=8, seed=0, kind="waves"):
    """Fixed synthetic probe windows sized to the model config.

    ``kind="waves"`` draws from the sum-of-sinusoids generator (normalized
    as training data would be); ``kind="noise"`` uses white noise, which
    carries no structure of its own and so isolates what the model itself
    imposes on the layer outputs.
    """
    if kind == "noise":
        rng = np.random.default_rng(seed)
        return [rng.normal(size=(cfg.lookback, cfg.n_vars))
                for _ in range(n_probes)]
    if kind != "waves":
        raise ValueError(f"unknown probe kind {kind!r}")
    length = cfg.lookback * (n_probes + 2)
    ds = synthetic_series(cfg.n_vars, length, seed=seed)
    stats = fit_norm(ds.values)
    Xn = apply_norm(ds.values, stats)
    step = max(1, (length - cfg.lookback) // n_probes)
    return [Xn[i * step : i * step + cfg.lookback] for i in range(n_probes)]


def diagnose(state, n_probes=8, seed=0, kind="waves"):
    """Average the per-layer curves over several probe windows."""
    cfg = state.config
    probes = probe_windows(cfg, n_probes, seed, kind)
    pos = sem = ds_acc = dg_acc = None
    for Xn in probes:
        trace = capture(state, Xn)
        p, s = hsic_curves(trace)
        d_s, d_g = distortion_curves(trace)
        if pos is None:
            pos, sem = np.array(p), np.array(s)
            ds_acc, dg_acc = np.array(d_s), np.array(d_g)
        else:
            pos += p
            sem += s
            ds_acc += d_s
            dg_acc += d_g
    k = float(len(probes))
    return DistortionReport(
        [float(v) for v in ds_acc / k],
        [float(v) for v in dg_acc / k],
        [float(v) for v in pos / k],
        [float(v) for v in sem / k],
    )


def report_csv(report):
    """One row per encoder layer: layer index, HSIC values, distortions."""
    lines = ["layer,hsic_positional,hsic_semantic,delta_s,delta_g_proxy"]
    for l in range(len(report.hsic_positional)):
        lines.append(
            f"{l + 1},{float(report.hsic_positional[l])!r},"
            f"{float(report.hsic_semantic[l])!r},"
            f"{float(report.delta_s[l + 1])!r},"
            f"{float(report.delta_g_proxy[l + 1])!r}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# activation dump files
#
# One file per layer. Header: "layer,<index>,rows,<n>,cols,<d>", then n
# comma-separated rows. Layer 0 holds the raw input tokens.

_DUMP_NAME = re.compile(r"layer_(\d+)\.csv$")


def write_dump(directory, trace):
    os.makedirs(directory, exist_ok=True)
    mats = [trace.tokens] + list(trace.layers)
    for index, mat in enumerate(mats):
        path = os.path.join(directory, f"layer_{index:02d}.csv")
        with open(path, "w") as fh:
            fh.write(f"layer,{index},rows,{mat.shape[0]},cols,{mat.shape[1]}\n")
            for row in mat:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_dump(directory):
    """Rebuild a LayerTrace from dumped activations.

    The similarity matrix comes from the layer-0 tokens; the positional
    encodings are reconstructed as sinusoidal for the layer-1 width.
    """
    found = {}
    for name in os.listdir(directory):
        match = _DUMP_NAME.search(name)
        if match:
            found[int(match.group(1))] = os.path.join(directory, name)
    if 0 not in found or 1 not in found:
        raise ValueError(f"{directory}: needs at least layer_0 and layer_1 files")
    mats = {}
    for index, path in found.items():
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if len(header) != 6 or header[0] != "layer":
                raise ValueError(f"{path}: bad dump header {header}")
            rows, cols = int(header[3]), int(header[5])
            mat = np.loadtxt(fh, delimiter=",", ndmin=2)
            if mat.shape != (rows, cols):
                raise ValueError(
                    f"{path}: header says {(rows, cols)}, data is {mat.shape}"
                )
            mats[index] = mat
    tokens = mats[0]
    layers = [mats[i] for i in sorted(mats) if i > 0]
    ctx = TopologyContext(
        sinusoidal_pe(tokens.shape[0], layers[0].shape[1]),
        gram_matrix(tokens),
        "sinusoidal",
    )
    return LayerTrace(tokens, layers, ctx)
