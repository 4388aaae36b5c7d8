"""Dataset loading, chronological splitting, and sliding-window samples."""

import csv
import warnings
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Malformed input data or an invalid split request."""


@dataclass
class SeriesDataset:
    """A full multivariate series in time order."""

    values: np.ndarray  # [timestamps, n_vars]
    names: list
    frequency: str = "unknown"

    @property
    def n_vars(self):
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


@dataclass
class SplitView:
    """One chronological slice, optionally with left context rows prepended
    so the first windows of val/test can reach back into the previous split
    (normalization statistics never come from the context)."""

    data: np.ndarray  # [context + length, n_vars]
    context: int  # rows of left context included in data
    name: str = ""

    def __len__(self):
        return self.data.shape[0] - self.context

    @property
    def core(self):
        """The split's own rows, context excluded."""
        return self.data[self.context :]


@dataclass
class WindowSample:
    x: np.ndarray  # [T, n_vars]
    y: np.ndarray  # [S, n_vars]
    start: int  # x start row, relative to the view's data (context included)


def load_csv(path):
    """Load a CSV with a header row; a leading "date" column is dropped."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        drop_first = bool(header) and header[0].strip().lower() == "date"
        names = [h.strip() for h in header[1 if drop_first else 0 :]]
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(
                    f"{path}:{lineno}: expected {width} cells, found {len(row)}"
                )
            cells = row[1 if drop_first else 0 :]
            parsed = []
            for col, cell in enumerate(cells):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: column {names[col]!r} value "
                        f"{cell!r} is not a number"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SeriesDataset(np.array(rows, dtype=np.float64), names)


def split(ds, ratios=None, counts=None, lookback=0, overhang=True):
    """Cut the series into chronological train/val/test views.

    Exactly one of ``ratios`` (three fractions) or ``counts`` (three row
    counts) must be given. With ``overhang`` the val and test views carry
    ``lookback`` rows of left context from the preceding split.
    """
    total = len(ds)
    if (ratios is None) == (counts is None):
        raise DataError("give exactly one of ratios or counts")
    if counts is not None:
        n_train, n_val, n_test = (int(c) for c in counts)
        if n_train + n_val + n_test > total:
            raise DataError(
                f"requested {n_train}+{n_val}+{n_test} rows, dataset has {total}"
            )
    else:
        r_train, r_val, r_test = ratios
        if min(ratios) < 0 or r_train + r_val + r_test > 1.0 + 1e-9:
            raise DataError(f"bad split ratios {ratios}")
        n_train = int(total * r_train)
        n_val = int(total * r_val)
        n_test = int(total * r_test)
    if n_train <= 0 or n_val <= 0 or n_test <= 0:
        raise DataError(
            f"every split needs rows, got ({n_train}, {n_val}, {n_test})"
        )
    train_end = n_train
    val_end = n_train + n_val
    ctx = lookback if overhang else 0
    views = (
        SplitView(ds.values[:train_end], 0, "train"),
        SplitView(ds.values[max(0, train_end - ctx) : val_end],
                  min(ctx, train_end), "val"),
        SplitView(ds.values[max(0, val_end - ctx) : val_end + n_test],
                  min(ctx, val_end), "test"),
    )
    return views


def windows(view, lookback, horizon, stride=1):
    """Yield WindowSamples over a view; the target rows immediately follow
    the input rows."""
    data = view.data if isinstance(view, SplitView) else np.asarray(view)
    length = data.shape[0]
    span = lookback + horizon
    if length < span:
        warnings.warn(
            f"view of length {length} is shorter than lookback+horizon={span}; "
            "no windows"
        )
        return
    for start in range(0, length - span + 1, stride):
        yield WindowSample(
            data[start : start + lookback],
            data[start + lookback : start + span],
            start,
        )


def window_count(view_len, lookback, horizon, stride=1):
    span = lookback + horizon
    if view_len < span:
        return 0
    return (view_len - span) // stride + 1


def synthetic_series(n_vars, length, periods=(24, 96, 168), noise_std=0.1,
                     seed=0):
    """Sum-of-sinusoids series with per-variable random phases/amplitudes
    over shared periods, plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)[:, None]
    values = np.zeros((length, n_vars))
    for period in periods:
        amp = rng.uniform(0.5, 1.5, size=n_vars)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n_vars)
        values += amp * np.sin(2.0 * np.pi * t / period + phase)
    values += rng.normal(0.0, noise_std, size=(length, n_vars))
    names = [f"v{i}" for i in range(n_vars)]
    return SeriesDataset(values, names, frequency="synthetic")


def save_csv(path, ds):
    """Write a dataset in the same CSV layout load_csv accepts."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.names)
        for row in ds.values:
            writer.writerow([repr(float(v)) for v in row])
