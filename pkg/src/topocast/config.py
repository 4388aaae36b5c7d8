"""Run configuration: flat key=value files with [section] headers.

Unknown sections or keys are rejected rather than ignored; values are
coerced to the type of the schema default.
"""

from collections import OrderedDict


class UsageError(ValueError):
    """Bad command line, config file, or option combination."""


# schema: section -> key -> default. Types are inferred from the defaults;
# None means "optional string, empty by default".
DEFAULTS = OrderedDict(
    [
        (
            "data",
            OrderedDict(
                source="synthetic",  # or "csv"
                path="",
                variables=7,
                length=4000,
                periods="24,96,168",
                noise_std=0.1,
                data_seed=0,
                split="ratios",  # or "counts"
                train_ratio=0.7,
                val_ratio=0.1,
                test_ratio=0.2,
                train_count=0,
                val_count=0,
                test_count=0,
                overhang=True,
            ),
        ),
        (
            "model",
            OrderedDict(
                kind="single",  # or "dual"
                scheme="temporal",
                layers=2,
                heads=8,
                dim=64,
                ffn_dim=0,
                lookback=96,
                horizon=96,
                pe="auto",
                inject=True,
                patch_len=16,
                stride=8,
                checkpoint="",
            ),
        ),
        (
            "train",
            OrderedDict(
                inner_lr=1e-3,
                outer_lr=1e-3,
                batch_size=32,
                epochs=40,
                patience=3,
                seed=1,
                outer_mode="first-order",
                inner_optimizer="adam",
                lr_decay=0.5,
                window_stride=1,
            ),
        ),
        (
            "diagnose",
            OrderedDict(
                probes=8,
                probe_kind="waves",
                probe_seed=0,
                baseline_checkpoint="",
                dump="",
            ),
        ),
    ]
)


def default_config():
    return OrderedDict(
        (section, OrderedDict(keys)) for section, keys in DEFAULTS.items()
    )


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"{section}.{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise UsageError(
                f"{section}.{key}: expected an integer, got {raw!r}"
            ) from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise UsageError(
                f"{section}.{key}: expected a number, got {raw!r}"
            ) from None
    return raw


def set_value(config, dotted, raw):
    """Apply one "section.key=value" override."""
    section, _, key = dotted.partition(".")
    if section not in DEFAULTS:
        raise UsageError(f"unknown config section {section!r}")
    if key not in DEFAULTS[section]:
        raise UsageError(f"unknown config key {section}.{key}")
    config[section][key] = _coerce(section, key, raw)


def parse_config_file(path, config=None):
    config = config if config is not None else default_config()
    section = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in DEFAULTS:
                    raise UsageError(
                        f"{path}:{lineno}: unknown section [{section}]"
                    )
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            if section is None:
                raise UsageError(
                    f"{path}:{lineno}: key outside any [section]"
                )
            key = key.strip()
            if key not in DEFAULTS[section]:
                raise UsageError(
                    f"{path}:{lineno}: unknown config key {section}.{key}"
                )
            config[section][key] = _coerce(section, key, value)
    return config


def freeze(config):
    """Deterministic text form of a resolved configuration."""
    lines = []
    for section, keys in config.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        lines.append("")
    return "\n".join(lines)


def parse_periods(raw):
    try:
        periods = tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise UsageError(f"data.periods: expected comma-separated ints, got {raw!r}")
    if not periods:
        raise UsageError("data.periods is empty")
    return periods
