"""Command-line entry point.

Commands: train, evaluate, diagnose, synth-data, gradcheck. Every run
writes its resolved configuration, seed, and build tag into the output
directory so the run is reproducible from that directory alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import os
import subprocess
import sys

import numpy as np

from . import __version__
from . import tensor as tt
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    UsageError,
    default_config,
    freeze,
    parse_config_file,
    parse_periods,
    set_value,
)
from .data import DataError, load_csv, save_csv, split, synthetic_series
from .diagnostics import diagnose, read_dump, report_csv
from .model import Model, ModelConfig
from .tensor import NumericalError
from .tokens import NormStats
from .training import (
    TrainConfig,
    batch_loss,
    evaluate,
    inner_step,
    outer_gradient,
    train,
)

GRADCHECK_TOLERANCE = 1e-4


def build_tag():
    """Version tag, extended with the git description when available."""
    try:
        proc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
        if proc.returncode == 0 and proc.stdout.strip():
            return f"topocast-{__version__}+g{proc.stdout.strip()}"
    except OSError:
        pass
    return f"topocast-{__version__}"


def model_config_from(config):
    """Build the model configuration; data.variables must already reflect
    the loaded dataset's width."""
    m = config["model"]
    n_vars = config["data"]["variables"]
    return ModelConfig(
        lookback=m["lookback"],
        horizon=m["horizon"],
        n_vars=n_vars,
        scheme=m["scheme"],
        layers=m["layers"],
        heads=m["heads"],
        dim=m["dim"],
        ffn_dim=m["ffn_dim"],
        pe_kind=m["pe"],
        inject=m["inject"],
        patch_len=m["patch_len"],
        stride=m["stride"],
    )


def train_config_from(config):
    t = config["train"]
    try:
        return TrainConfig(
            inner_lr=t["inner_lr"],
            outer_lr=t["outer_lr"],
            batch_size=t["batch_size"],
            max_epochs=t["epochs"],
            patience=t["patience"],
            seed=t["seed"],
            outer_mode=t["outer_mode"],
            inner_optimizer=t["inner_optimizer"],
            lr_decay=t["lr_decay"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_dataset(config):
    d = config["data"]
    if d["source"] == "csv":
        if not d["path"]:
            raise UsageError("data.source=csv needs data.path")
        ds = load_csv(d["path"])
    elif d["source"] == "synthetic":
        ds = synthetic_series(
            d["variables"],
            d["length"],
            periods=parse_periods(d["periods"]),
            noise_std=d["noise_std"],
            seed=d["data_seed"],
        )
    else:
        raise UsageError(f"unknown data.source {d['source']!r}")
    return ds


def split_arguments(config):
    d = config["data"]
    if d["split"] == "counts":
        counts = (d["train_count"], d["val_count"], d["test_count"])
        return {"split_counts": counts, "overhang": d["overhang"]}
    if d["split"] != "ratios":
        raise UsageError(f"unknown data.split {d['split']!r}")
    ratios = (d["train_ratio"], d["val_ratio"], d["test_ratio"])
    return {"split_ratios": ratios, "overhang": d["overhang"]}


def write_run_files(out_dir, config):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(freeze(config))
    with open(os.path.join(out_dir, "build_tag.txt"), "w") as fh:
        fh.write(build_tag() + "\n")
    with open(os.path.join(out_dir, "seed.txt"), "w") as fh:
        fh.write(f"{config['train']['seed']}\n")


def _model_checkpoint_config(config, model_cfg):
    return {
        "kind": config["model"]["kind"],
        "scheme": model_cfg.scheme,
        "layers": model_cfg.layers,
        "heads": model_cfg.heads,
        "dim": model_cfg.dim,
        "ffn_dim": model_cfg.ffn_dim,
        "lookback": model_cfg.lookback,
        "horizon": model_cfg.horizon,
        "n_vars": model_cfg.n_vars,
        "pe": model_cfg.pe_kind,
        "inject": model_cfg.inject,
        "patch_len": model_cfg.patch_len,
        "stride": model_cfg.stride,
    }


def save_model(path, config, model, stats):
    tensors = {n: p.data for n, p in model.named_parameters().items()}
    tensors["norm.mean"] = stats.mean
    tensors["norm.std"] = stats.std
    save_checkpoint(path, _model_checkpoint_config(config, model.config), tensors)


def load_model(path):
    meta, tensors = load_checkpoint(path)
    cfg = ModelConfig(
        lookback=int(meta["lookback"]),
        horizon=int(meta["horizon"]),
        n_vars=int(meta["n_vars"]),
        scheme=meta["scheme"],
        layers=int(meta["layers"]),
        heads=int(meta["heads"]),
        dim=int(meta["dim"]),
        ffn_dim=int(meta["ffn_dim"]),
        pe_kind=meta["pe"],
        inject=meta["inject"] == "True",
        patch_len=int(meta["patch_len"]),
        stride=int(meta["stride"]),
    )
    model = Model.build(cfg, seed=0, kind=meta["kind"])
    params = model.named_parameters()
    for name, p in params.items():
        if name not in tensors:
            raise DataError(f"{path}: missing tensor {name}")
        p.data[...] = tensors[name]
    stats = NormStats(tensors["norm.mean"].copy(), tensors["norm.std"].copy())
    return model, stats, meta


def cmd_synth_data(config, out_dir):
    ds = load_dataset(config)
    path = os.path.join(out_dir, "data.csv")
    save_csv(path, ds)
    print(f"wrote {path} ({len(ds)} rows, {ds.n_vars} variables)")
    return 0


def cmd_train(config, out_dir):
    ds = load_dataset(config)
    config["data"]["variables"] = ds.n_vars
    model_cfg = model_config_from(config)
    train_cfg = train_config_from(config)
    model, metrics, stats = train(
        ds,
        model_cfg,
        train_cfg,
        kind=config["model"]["kind"],
        window_stride=config["train"]["window_stride"],
        **split_arguments(config),
    )
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write(metrics.to_csv())
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_model(ckpt_path, config, model, stats)
    print(f"wrote {csv_path} and {ckpt_path}")
    print(f"test,{metrics.test_mse!r},{metrics.test_mae!r}")
    return 0


def cmd_evaluate(config, out_dir):
    path = config["model"]["checkpoint"]
    if not path:
        raise UsageError("evaluate needs model.checkpoint")
    model, stats, meta = load_model(path)
    ds = load_dataset(config)
    if ds.n_vars != model.config.n_vars:
        raise DataError(
            f"checkpoint expects {model.config.n_vars} variables, "
            f"data has {ds.n_vars}"
        )
    args = split_arguments(config)
    _, _, test_view = split(
        ds,
        ratios=args.get("split_ratios"),
        counts=args.get("split_counts"),
        lookback=model.config.lookback,
        overhang=args["overhang"],
    )
    test_mse, test_mae = evaluate(
        model, test_view, stats, model.config.lookback, model.config.horizon
    )
    line = f"test,{test_mse!r},{test_mae!r}"
    with open(os.path.join(out_dir, "eval.txt"), "w") as fh:
        fh.write(line + "\n")
    print(line)
    return 0


def cmd_diagnose(config, out_dir):
    d = config["diagnose"]
    if d["dump"]:
        from .diagnostics import distortion_curves, hsic_curves
        from .diagnostics import DistortionReport

        trace = read_dump(d["dump"])
        pos, sem = hsic_curves(trace)
        delta_s, delta_g = distortion_curves(trace)
        report = DistortionReport(delta_s, delta_g, pos, sem)
        reports = [("curves.csv", report)]
    else:
        path = config["model"]["checkpoint"]
        if not path:
            raise UsageError("diagnose needs model.checkpoint or diagnose.dump")
        model, _, _ = load_model(path)
        if model.kind != "single":
            raise UsageError("diagnose works on single-branch checkpoints")
        report = diagnose(
            model.state, d["probes"], d["probe_seed"], d["probe_kind"]
        )
        reports = [("curves.csv", report)]
        if d["baseline_checkpoint"]:
            other, _, _ = load_model(d["baseline_checkpoint"])
            reports.append(
                (
                    "curves_baseline.csv",
                    diagnose(other.state, d["probes"], d["probe_seed"],
                             d["probe_kind"]),
                )
            )
    for name, rep in reports:
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(report_csv(rep))
        print(f"wrote {path}")
    return 0


def cmd_gradcheck(config, out_dir):
    """Gradient fidelity of the model ops and of the two-stage objective."""
    seed = config["train"]["seed"]
    rng = np.random.default_rng(seed)
    worst_model = 0.0
    for trial in range(3):
        cfg = ModelConfig(
            lookback=5 + trial,
            horizon=2,
            n_vars=2,
            scheme=("temporal", "variable", "patch")[trial],
            layers=1 + trial % 2,
            heads=1 + trial % 2,
            dim=4,
            ffn_dim=4,
            patch_len=3,
            stride=2,
        )
        model = Model.build(cfg, seed=seed + trial)
        X = rng.normal(size=(cfg.lookback, cfg.n_vars))
        Y = rng.normal(size=(cfg.horizon, cfg.n_vars))

        def objective():
            yhat, _ = model.forward(X)
            d = tt.sub(yhat, tt.Tensor(Y))
            return tt.scale(tt.sum_all(tt.mul(d, d)), 1.0 / d.data.size)

        err = tt.check_gradients(
            objective, list(model.named_parameters().values())
        )
        worst_model = max(worst_model, err)

    # two-stage objective: exact outer gradient vs finite differences
    cfg = ModelConfig(
        lookback=6, horizon=2, n_vars=2, scheme="temporal",
        layers=1, heads=1, dim=4, ffn_dim=4,
    )
    model = Model.build(cfg, seed=seed)
    batch = [
        (rng.normal(size=(6, 2)), rng.normal(size=(2, 2))) for _ in range(2)
    ]
    eta1 = 0.05
    params = model.named_parameters()
    pre = {n: params[n].data.copy() for n in model.inner_names()}
    exact = outer_gradient(model, batch, "exact", eta1=eta1, pre_inner=pre)

    def two_stage_value():
        probe = Model.build(cfg, seed=seed)
        for n, p in probe.named_parameters().items():
            p.data[...] = params[n].data
        inner_step(probe, batch, eta1, None)
        return batch_loss(probe, batch).item()

    h = 1e-4
    worst_bilevel = 0.0
    for name in model.injection_names():
        arr = params[name].data.reshape(-1)
        grad = exact[name].reshape(-1)
        for i in range(arr.size):
            orig = arr[i]
            arr[i] = orig + h
            up = two_stage_value()
            arr[i] = orig - h
            down = two_stage_value()
            arr[i] = orig
            fd = (up - down) / (2.0 * h)
            rel = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
            worst_bilevel = max(worst_bilevel, rel)

    worst_model = float(worst_model)
    worst_bilevel = float(worst_bilevel)
    report = (
        f"model_ops_max_rel_err={worst_model!r}\n"
        f"two_stage_max_rel_err={worst_bilevel!r}\n"
        f"tolerance={GRADCHECK_TOLERANCE!r}\n"
    )
    with open(os.path.join(out_dir, "gradcheck.txt"), "w") as fh:
        fh.write(report)
    print(report, end="")
    if max(worst_model, worst_bilevel) >= GRADCHECK_TOLERANCE:
        raise NumericalError(
            f"gradient check failed: {max(worst_model, worst_bilevel)!r}"
        )
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "synth-data": cmd_synth_data,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser():
    parser = _Parser(prog="topocast", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="config file path")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value (section.key=value); repeatable",
    )
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--seed", type=int, help="run seed (sets train.seed "
                        "and data.data_seed)")
    return parser


def resolve_config(args):
    config = default_config()
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        parse_config_file(args.config, config)
    for override in args.set:
        dotted, eq, value = override.partition("=")
        if not eq:
            raise UsageError(f"--set expects KEY=VALUE, got {override!r}")
        set_value(config, dotted.strip(), value)
    if args.seed is not None:
        config["train"]["seed"] = args.seed
        config["data"]["data_seed"] = args.seed
    return config


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
        config = resolve_config(args)
        write_run_files(args.out, config)
        return COMMANDS[args.command](config, args.out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
