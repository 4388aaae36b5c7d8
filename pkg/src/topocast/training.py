"""Losses, Adam, the two-stage optimization of model and injection weights,
and epoch orchestration with early stopping.

Each batch is processed in a fixed order: first the model parameters take
one descent step with the injection weights frozen; then the injection
weights take one Adam step against the loss of the just-updated model. In
"exact" mode that second gradient is differentiated through the unrolled
inner SGD step, so it contains both the direct path and the second-order
path through the updated parameters; "first-order" mode treats the updated
parameters as constants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .backend import kernels as K
from .data import split, window_count, windows
from .model import Model
from .tensor import NumericalError, Tensor
from .tokens import apply_norm, fit_norm, invert_norm


@dataclass
class TrainConfig:
    inner_lr: float = 1e-3
    outer_lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 40
    patience: int = 3
    seed: int = 1
    outer_mode: str = "first-order"  # or "exact"
    inner_optimizer: str = "adam"  # or "sgd"
    lr_decay: float = 0.5  # per-epoch multiplier after the first epoch

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.outer_mode not in ("first-order", "exact"):
            raise ValueError(f"unknown outer mode {self.outer_mode!r}")
        if self.inner_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown inner optimizer {self.inner_optimizer!r}")
        if self.outer_mode == "exact" and self.inner_optimizer == "adam":
            raise ValueError(
                "exact outer mode requires the sgd inner optimizer; "
                "differentiating through Adam's moment updates is unsupported"
            )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float
    seconds: float = 0.0


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    test_mse: float = float("nan")
    test_mae: float = float("nan")
    hsic_curves: list = field(default_factory=list)  # optional per-epoch pairs

    def to_csv(self):
        lines = ["epoch,train_loss,val_mse,val_mae"]
        for r in self.epochs:
            lines.append(
                f"{r.epoch},{r.train_loss!r},{r.val_mse!r},{r.val_mae!r}"
            )
        lines.append(f"test,{self.test_mse!r},{self.test_mae!r}")
        return "\n".join(lines) + "\n"


def mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float((d * d).mean())


def mae(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              t=1):
    """Bias-corrected Adam update applied in place to each array in
    ``params``; ``moments`` is the pair (first, second) of matching arrays."""
    if t < 1:
        raise ValueError(f"step count t must be >= 1, got {t}")
    first, second = moments
    for p, g, m, v in zip(params, grads, first, second):
        K.adam_update(p, g, m, v, lr, beta1, beta2, eps, t)


class Adam:
    """Adam state keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, named, lr):
        """One update over ``{name: (array, grad)}`` pairs."""
        self.t += 1
        for name, (p, g) in named.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            K.adam_update(p, g, self.m[name], self.v[name], lr, self.beta1,
                          self.beta2, self.eps, self.t)


def batch_loss(model, batch):
    """Mean per-sample MSE over a batch of (x, y) normalized windows, as a
    graph tensor."""
    total = None
    for x, y in batch:
        yhat, _ = model.forward(x)
        d = tt.sub(yhat, Tensor(y))
        sample = tt.scale(tt.sum_all(tt.mul(d, d)), 1.0 / d.data.size)
        total = sample if total is None else tt.add(total, sample)
    return tt.scale(total, 1.0 / len(batch))


def inner_step(model, batch, lr, optimizer=None):
    """One descent step of all non-injection parameters; injection raws are
    left untouched. Returns the pre-update batch loss."""
    if not batch:
        raise ValueError("empty batch")
    params = model.named_parameters()
    for p in params.values():
        p.zero_grad()
    with tt.Graph() as graph:
        loss = batch_loss(model, batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"inner loss is not finite ({value})")
        graph.backward(loss)
    inner = model.inner_names()
    if optimizer is None:
        for name in inner:
            p = params[name]
            p.data -= lr * p.grad
    else:
        optimizer.step({n: (params[n].data, params[n].grad) for n in inner}, lr)
    return value


def outer_gradient(model, batch, mode, eta1=0.0, pre_inner=None,
                   expect_stepped=False):
    """Gradient of the post-inner-step batch loss w.r.t. the injection raws.

    first-order: evaluate at the model as it stands (the caller must have
    applied the inner step already) and treat its parameters as constants.

    exact: rebuild the inner SGD step from ``pre_inner`` (the parameter
    values before the inner step) inside a second-order graph and
    differentiate through it. With ``expect_stepped`` the reconstructed
    post-step parameters are checked against the live model's.
    """
    inj_names = model.injection_names()
    if not inj_names:
        return {}
    params = model.named_parameters()
    if mode == "first-order":
        for p in params.values():
            p.zero_grad()
        with tt.Graph() as graph:
            loss = batch_loss(model, batch)
            graph.backward(loss)
        return {n: params[n].grad.copy() for n in inj_names}
    if mode != "exact":
        raise ValueError(f"unknown outer mode {mode!r}")
    if pre_inner is None:
        raise ValueError("exact mode needs the pre-inner-step parameters")
    theta0 = {n: Tensor(pre_inner[n], requires_grad=True)
              for n in model.inner_names()}
    base = model.with_params(theta0)
    for p in base.named_parameters().values():
        p.zero_grad()
    with tt.Graph(second_order=True) as graph:
        loss1 = batch_loss(base, batch)
        grad_map = graph.backward(loss1, create_graph=True)
        shifted = {}
        for name, t0 in theta0.items():
            g = grad_map.get(t0.node_id)
            shifted[name] = t0 if g is None else tt.sub(t0, tt.scale(g, eta1))
        if expect_stepped:
            for name, t in shifted.items():
                assert np.allclose(t.data, params[name].data, atol=1e-12), \
                    "outer loss is not evaluated at the inner-stepped model"
        stepped = base.with_params(shifted)
        loss2 = batch_loss(stepped, batch)
        graph.backward(loss2)
    return {n: params[n].grad.copy() for n in inj_names}


def outer_step(model, batch, eta2, optimizer, mode, eta1=0.0, pre_inner=None,
               expect_stepped=False):
    """Adam step on the injection raws using the selected gradient mode."""
    grads = outer_gradient(model, batch, mode, eta1=eta1, pre_inner=pre_inner,
                           expect_stepped=expect_stepped)
    if not grads:
        return
    params = model.named_parameters()
    optimizer.step({n: (params[n].data, grads[n]) for n in grads}, eta2)


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without val improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.bad = 0

    def update(self, value, epoch):
        """Returns (improved, stop)."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


def evaluate(model, view, stats, lookback, horizon, stride=1):
    """Test-protocol metrics on a view: forecasts are de-normalized and
    compared against the raw target rows."""
    Xn = apply_norm(view.data, stats)
    n = 0
    se = ae = 0.0
    for w in windows(view, lookback, horizon, stride):
        x = Xn[w.start : w.start + lookback]
        pred, _ = model.forward(x)
        pred = invert_norm(pred.data, stats)
        d = pred - w.y
        se += float((d * d).sum())
        ae += float(np.abs(d).sum())
        n += d.size
    if n == 0:
        raise ValueError("view yields no evaluation windows")
    return se / n, ae / n


def _injection_checksum(model):
    return [p.data.sum() for n, p in model.named_parameters().items()
            if "inject." in n]


def train(dataset, model_cfg, train_cfg, kind="single",
          split_ratios=(0.7, 0.1, 0.2), split_counts=None, overhang=True,
          window_stride=1, epoch_hook=None):
    """Run the full optimization loop.

    Returns ``(model, metrics, stats)`` with the model restored to its
    best-validation parameters.
    """
    T, S = model_cfg.lookback, model_cfg.horizon
    train_view, val_view, test_view = split(
        dataset, ratios=None if split_counts else split_ratios,
        counts=split_counts, lookback=T, overhang=overhang,
    )
    stats = fit_norm(train_view.core)
    train_norm = apply_norm(train_view.data, stats)
    samples = [
        (train_norm[w.start : w.start + T],
         apply_norm(w.y, stats))
        for w in windows(train_view, T, S, window_stride)
    ]
    if not samples:
        raise ValueError("training split yields no windows")
    if window_count(len(val_view.data), T, S) == 0:
        raise ValueError("validation split yields no windows")

    model = Model.build(model_cfg, train_cfg.seed, kind=kind)
    injecting = bool(model.injection_names())
    adam_inner = Adam() if train_cfg.inner_optimizer == "adam" else None
    adam_outer = Adam()
    rng = np.random.default_rng(train_cfg.seed)
    stopper = EarlyStopping(train_cfg.patience)
    metrics = RunMetrics()
    best_params = None

    for epoch in range(1, train_cfg.max_epochs + 1):
        began = time.perf_counter()
        lr1 = train_cfg.inner_lr * train_cfg.lr_decay ** (epoch - 1)
        lr2 = train_cfg.outer_lr * train_cfg.lr_decay ** (epoch - 1)
        order = rng.permutation(len(samples))
        losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [samples[i] for i in order[lo : lo + train_cfg.batch_size]]
            pre_inner = None
            if injecting and train_cfg.outer_mode == "exact":
                pre_inner = {n: model.named_parameters()[n].data.copy()
                             for n in model.inner_names()}
            raws_before = _injection_checksum(model)
            losses.append(inner_step(model, batch, lr1, adam_inner))
            assert _injection_checksum(model) == raws_before, \
                "injection weights moved during the inner step"
            if injecting:
                outer_step(model, batch, lr2, adam_outer,
                           train_cfg.outer_mode, eta1=lr1, pre_inner=pre_inner,
                           expect_stepped=True)
        val_mse, val_mae = evaluate(model, val_view, stats, T, S)
        if not np.isfinite(val_mse):
            raise NumericalError(f"validation loss is not finite at epoch {epoch}")
        record = EpochRecord(epoch, float(np.mean(losses)), val_mse, val_mae,
                             time.perf_counter() - began)
        metrics.epochs.append(record)
        if epoch_hook is not None:
            epoch_hook(model, record, metrics)
        improved, stop = stopper.update(val_mse, epoch)
        if improved:
            best_params = {n: p.data.copy()
                           for n, p in model.named_parameters().items()}
        if stop:
            break

    if best_params is not None:
        for name, p in model.named_parameters().items():
            p.data[...] = best_params[name]
    metrics.test_mse, metrics.test_mae = evaluate(model, test_view, stats, T, S)
    return model, metrics, stats
