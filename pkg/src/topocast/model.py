"""Transformer encoder with learnable injection of token structure.

Every attention head can mix two extra signals into its computation:

* a positive per-head, per-path (Q/K/V) multiple of the positional-encoding
  matrix is added to the head's input before the projections;
* a positive per-head multiple of the raw input tokens' similarity matrix
  is added to the attention logits before scaling and softmax.

The multipliers are softplus transforms of unconstrained raw parameters so
they stay strictly positive. With injection disabled the extra terms are
omitted entirely, which is the baseline model.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .tokens import token_count, tokenize
from .topology import TopologyContext, gram_matrix, sinusoidal_pe

# softplus(-6) ~= 2.5e-3: training starts close to the baseline model
INIT_RAW = -6.0
# softplus(-30) < 1e-13: effectively zero injection, used by equivalence tests
FLOOR_RAW = -30.0


@dataclass
class ModelConfig:
    lookback: int
    horizon: int
    n_vars: int
    scheme: str = "temporal"
    layers: int = 2
    heads: int = 8
    dim: int = 64
    ffn_dim: int = 0  # 0 selects 4 * dim
    pe_kind: str = "auto"  # sinusoidal for temporal/patch, convolutional for variable
    inject: bool = True
    patch_len: int = 16
    stride: int = 8

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.dim
        if self.pe_kind == "auto":
            self.pe_kind = (
                "convolutional" if self.scheme == "variable" else "sinusoidal"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.scheme not in ("temporal", "variable", "patch"):
            raise ValueError(f"unknown token scheme {self.scheme!r}")
        if self.pe_kind not in ("sinusoidal", "convolutional"):
            raise ValueError(f"unknown pe kind {self.pe_kind!r}")
        if self.pe_kind == "sinusoidal" and self.dim % 2:
            raise ValueError("sinusoidal encoding needs an even dim")

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def n_tokens(self):
        return token_count(
            self.scheme, self.lookback, self.n_vars, self.patch_len, self.stride
        )

    @property
    def token_dim(self):
        if self.scheme == "temporal":
            return self.n_vars
        if self.scheme == "variable":
            return self.lookback
        return self.patch_len


@dataclass
class InjectionWeights:
    """Raw (unconstrained) injection parameters; effective weights are their
    softplus and therefore strictly positive."""

    pe_raw: Tensor  # [layers, heads, 3], last axis ordered Q, K, V
    sim_raw: Tensor  # [layers, heads]

    def effective(self):
        return tt.softplus(self.pe_raw), tt.softplus(self.sim_raw)

    def set_all(self, raw_value):
        self.pe_raw.data.fill(raw_value)
        self.sim_raw.data.fill(raw_value)


@dataclass
class EncoderState:
    """Parameter tensors for one encoder stack, keyed by dotted names."""

    config: ModelConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    @property
    def injection(self):
        if "inject.pe_raw" not in self.params:
            return None
        return InjectionWeights(
            self.params["inject.pe_raw"], self.params["inject.sim_raw"]
        )

    def with_params(self, params):
        return EncoderState(self.config, params)


def _linear(params, rng, name, fan_in, fan_out):
    w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
    params[name + ".w"] = Tensor(w, requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def init_state(cfg, seed, with_head=True):
    """Build a freshly initialized encoder (plus decoder head) state."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    _linear(params, rng, "embed", cfg.token_dim, cfg.dim)
    if cfg.pe_kind == "convolutional":
        params["pe_kernel"] = Tensor(
            rng.normal(0.0, 0.1, size=(3, cfg.dim)), requires_grad=True
        )
    for l in range(cfg.layers):
        for i in range(cfg.heads):
            for path in ("q", "k", "v"):
                _linear(
                    params, rng, f"layer{l}.head{i}.{path}",
                    cfg.head_dim, cfg.head_dim,
                )
        for norm in ("norm1", "norm2"):
            params[f"layer{l}.{norm}.gain"] = Tensor(
                np.ones(cfg.dim), requires_grad=True
            )
            params[f"layer{l}.{norm}.bias"] = Tensor(
                np.zeros(cfg.dim), requires_grad=True
            )
        _linear(params, rng, f"layer{l}.ffn1", cfg.dim, cfg.ffn_dim)
        _linear(params, rng, f"layer{l}.ffn2", cfg.ffn_dim, cfg.dim)
    if with_head:
        if cfg.scheme == "variable":
            _linear(params, rng, "head", cfg.dim, cfg.horizon)
        else:
            _linear(params, rng, "head", cfg.n_tokens * cfg.dim,
                    cfg.horizon * cfg.n_vars)
    if cfg.inject:
        params["inject.pe_raw"] = Tensor(
            np.full((cfg.layers, cfg.heads, 3), INIT_RAW), requires_grad=True
        )
        params["inject.sim_raw"] = Tensor(
            np.full((cfg.layers, cfg.heads), INIT_RAW), requires_grad=True
        )
    return EncoderState(cfg, params)


def attention_head(h, pe, gram, proj, head_dim, gains=None):
    """One attention head over a [n_tokens, head_dim] slice.

    ``proj`` maps path name -> (weight, bias); ``gains`` is None for the
    baseline or a tuple (gq, gk, gv, xi) of positive scalar tensors. The
    positional encoding slice is added to the head input scaled by the
    per-path gain, and the similarity matrix is added to the raw logits
    scaled by xi, before division by sqrt(head_dim) and softmax.
    """
    if gains is not None:
        gq, gk, gv, xi = gains
        inputs = (tt.add(h, tt.mul(pe, gq)), tt.add(h, tt.mul(pe, gk)),
                  tt.add(h, tt.mul(pe, gv)))
    else:
        inputs = (h, h, h)
    wq, bq = proj["q"]
    wk, bk = proj["k"]
    wv, bv = proj["v"]
    q = tt.add_bias(tt.matmul(inputs[0], wq), bq)
    k = tt.add_bias(tt.matmul(inputs[1], wk), bk)
    v = tt.add_bias(tt.matmul(inputs[2], wv), bv)
    logits = tt.matmul(q, tt.transpose(k))
    if gains is not None:
        logits = tt.add(logits, tt.mul(gram, xi))
    att = tt.softmax_rows(tt.scale(logits, 1.0 / math.sqrt(head_dim)))
    return tt.matmul(att, v)


def encoder_layer(h, pe, gram, state, l, eff_pe=None, eff_sim=None):
    """Split into head slices, run injected attention per head, fuse,
    then residual+norm and a ReLU feed-forward block with residual+norm."""
    cfg = state.config
    P = state.params
    dh = cfg.head_dim
    outs = []
    for i in range(cfg.heads):
        h_i = tt.slice_cols(h, i * dh, (i + 1) * dh)
        pe_i = tt.slice_cols(pe, i * dh, (i + 1) * dh)
        gains = None
        if eff_pe is not None:
            gains = (
                tt.pick(eff_pe, (l, i, 0)),
                tt.pick(eff_pe, (l, i, 1)),
                tt.pick(eff_pe, (l, i, 2)),
                tt.pick(eff_sim, (l, i)),
            )
        proj = {
            path: (P[f"layer{l}.head{i}.{path}.w"], P[f"layer{l}.head{i}.{path}.b"])
            for path in ("q", "k", "v")
        }
        outs.append(attention_head(h_i, pe_i, gram, proj, dh, gains))
    att = tt.concat_cols(outs)
    h = tt.layer_norm(tt.add(h, att), P[f"layer{l}.norm1.gain"],
                      P[f"layer{l}.norm1.bias"])
    ff = tt.add_bias(
        tt.matmul(
            tt.relu(tt.add_bias(tt.matmul(h, P[f"layer{l}.ffn1.w"]),
                                P[f"layer{l}.ffn1.b"])),
            P[f"layer{l}.ffn2.w"],
        ),
        P[f"layer{l}.ffn2.b"],
    )
    return tt.layer_norm(tt.add(h, ff), P[f"layer{l}.norm2.gain"],
                         P[f"layer{l}.norm2.bias"])


def embed(batch, state, pe):
    """Linear embedding of raw tokens plus the positional encoding."""
    P = state.params
    e = tt.add_bias(tt.matmul(Tensor(batch.tokens), P["embed.w"]), P["embed.b"])
    return tt.add(e, pe)


def encode(Xn, state, record=False):
    """Tokenize, embed, and run the encoder stack on a normalized window.

    Returns ``(h, ctx, trace)`` where ``trace`` is None unless ``record``
    is set, in which case it is ``(raw_tokens, [layer outputs...])``.
    """
    cfg = state.config
    P = state.params
    batch = tokenize(Xn, cfg.scheme, cfg.patch_len, cfg.stride)
    gram = gram_matrix(batch.tokens)  # from raw tokens, before embedding
    gram_t = Tensor(gram)
    emb = tt.add_bias(tt.matmul(Tensor(batch.tokens), P["embed.w"]), P["embed.b"])
    if cfg.pe_kind == "convolutional":
        pe = tt.conv3(emb, P["pe_kernel"])
    else:
        pe = Tensor(sinusoidal_pe(cfg.n_tokens, cfg.dim))
    h = tt.add(emb, pe)
    inj = state.injection
    eff_pe = eff_sim = None
    if inj is not None:
        eff_pe, eff_sim = inj.effective()
    layer_outputs = [] if record else None
    for l in range(cfg.layers):
        h = encoder_layer(h, pe, gram_t, state, l, eff_pe, eff_sim)
        if record:
            layer_outputs.append(h.data.copy())
    ctx = TopologyContext(pe.data.copy(), gram, cfg.pe_kind)
    trace = (batch.tokens, layer_outputs) if record else None
    return h, ctx, trace


def decode(h, state):
    cfg = state.config
    P = state.params
    if cfg.scheme == "variable":
        # one affine map from token features to the horizon, shared across
        # variable tokens
        out = tt.add_bias(tt.matmul(h, P["head.w"]), P["head.b"])  # [N, S]
        return tt.transpose(out)
    flat = tt.reshape(h, (1, cfg.n_tokens * cfg.dim))
    out = tt.add_bias(tt.matmul(flat, P["head.w"]), P["head.b"])
    return tt.reshape(out, (cfg.horizon, cfg.n_vars))


def forward(Xn, state, record=False):
    """Full forecast pass on a normalized [lookback, n_vars] window."""
    h, ctx, trace = encode(Xn, state, record=record)
    return decode(h, state), ctx, trace


# ---------------------------------------------------------------------------
# dual-branch model with gated fusion


@dataclass
class DualState:
    """Temporal-token and variable-token branches plus the fusion gate."""

    time: EncoderState
    var: EncoderState
    fuse: "OrderedDict[str, Tensor]"


def init_dual_state(cfg, seed):
    """Build the dual-branch model from a shared configuration.

    ``cfg.scheme``/``cfg.pe_kind`` are ignored: the first branch always
    uses temporal tokens with sinusoidal encodings, the second variable
    tokens with convolutional encodings.
    """
    cfg_t = replace(cfg, scheme="temporal", pe_kind="sinusoidal")
    cfg_v = replace(cfg, scheme="variable", pe_kind="convolutional")
    time = init_state(cfg_t, seed, with_head=False)
    var = init_state(cfg_v, seed + 1, with_head=False)
    rng = np.random.default_rng(seed + 2)
    fuse = OrderedDict()
    _linear(fuse, rng, "t1", cfg.dim, cfg.n_vars)
    _linear(fuse, rng, "t2", cfg.lookback, cfg.horizon)
    _linear(fuse, rng, "v", cfg.dim, cfg.horizon)
    fuse["gate.w"] = Tensor(
        rng.normal(0.0, 1.0 / math.sqrt(2 * cfg.horizon),
                   size=(2 * cfg.horizon, cfg.horizon)),
        requires_grad=True,
    )
    return DualState(time, var, fuse)


def dual_forward(Xn, dual, record=False):
    """Gated fusion of the two branch forecasts.

    The gate G weighs the temporal-branch features against the
    variable-branch features: Y^T = G * F_t + (1 - G) * F_v.
    """
    h_t, ctx_t, tr_t = encode(Xn, dual.time, record=record)
    h_v, ctx_v, tr_v = encode(Xn, dual.var, record=record)
    F = dual.fuse
    a = tt.add_bias(tt.matmul(h_t, F["t1.w"]), F["t1.b"])  # [T, N]
    f_t = tt.add_bias(tt.matmul(tt.transpose(a), F["t2.w"]), F["t2.b"])  # [N, S]
    f_v = tt.add_bias(tt.matmul(h_v, F["v.w"]), F["v.b"])  # [N, S]
    gate = tt.sigmoid(tt.matmul(tt.concat_cols([f_t, f_v]), F["gate.w"]))
    fused = tt.add(tt.mul(gate, f_t),
                   tt.mul(tt.add(tt.scale(gate, -1.0), 1.0), f_v))
    out = tt.transpose(fused)  # [S, N]
    trace = {"time": (ctx_t, tr_t), "var": (ctx_v, tr_v)} if record else None
    return out, trace


# ---------------------------------------------------------------------------
# facade used by the trainer, checkpointing, and the CLI


class Model:
    """Uniform handle over the single-branch and dual-branch variants."""

    def __init__(self, state):
        if isinstance(state, DualState):
            self.kind = "dual"
        elif isinstance(state, EncoderState):
            self.kind = "single"
        else:
            raise TypeError(f"unsupported state {type(state).__name__}")
        self.state = state

    @classmethod
    def build(cls, cfg, seed, kind="single"):
        if kind == "dual":
            return cls(init_dual_state(cfg, seed))
        return cls(init_state(cfg, seed))

    @property
    def config(self):
        return self.state.config if self.kind == "single" else self.state.time.config

    def forward(self, Xn, record=False):
        if self.kind == "single":
            yhat, _, trace = forward(Xn, self.state, record=record)
            return (yhat, trace) if record else (yhat, None)
        return dual_forward(Xn, self.state, record=record)

    def named_parameters(self):
        if self.kind == "single":
            return OrderedDict(self.state.params)
        out = OrderedDict()
        for name, t in self.state.time.params.items():
            out["time." + name] = t
        for name, t in self.state.var.params.items():
            out["var." + name] = t
        for name, t in self.state.fuse.items():
            out["fuse." + name] = t
        return out

    def injection_names(self):
        return [n for n in self.named_parameters() if "inject." in n]

    def inner_names(self):
        return [n for n in self.named_parameters() if "inject." not in n]

    def with_params(self, params):
        """Same architecture with some or all parameter tensors replaced."""
        merged = self.named_parameters()
        merged.update(params)
        if self.kind == "single":
            return Model(self.state.with_params(merged))
        time = OrderedDict()
        var = OrderedDict()
        fuse = OrderedDict()
        for name, t in merged.items():
            group, _, rest = name.partition(".")
            {"time": time, "var": var, "fuse": fuse}[group][rest] = t
        return Model(
            DualState(
                self.state.time.with_params(time),
                self.state.var.with_params(var),
                fuse,
            )
        )

    def injection(self):
        """InjectionWeights views, one per encoder stack."""
        if self.kind == "single":
            inj = self.state.injection
            return [inj] if inj is not None else []
        return [s.injection for s in (self.state.time, self.state.var)
                if s.injection is not None]

    def set_injection_raws(self, value):
        for inj in self.injection():
            inj.set_all(value)
