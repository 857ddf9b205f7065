"""Smart-meter CSV ingestion, the cleaning pipeline, windowing, and a
deterministic synthetic-household generator for desk-scale experiments.

The cleaning pipeline runs resample -> abnormal-value replacement -> short-gap
interpolation -> issues flagging, in that order. Abnormal samples are replaced
by the last in-range reading (leading abnormal samples become NaN and fall to
the gap logic); NaN runs strictly shorter than the gap threshold are linearly
interpolated, longer runs and boundary runs stay NaN.

Electric CSVs follow the household schema: a ``datetime`` column in
``MM/DD/YYYY HH:MM:SS AM/PM`` local time (UTC+3), ``V``, ``A``, ``P_agg``,
one column per appliance, and an ``issues`` flag.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .metrics import ApplianceMeta

log = logging.getLogger(__name__)

DATETIME_FORMAT = "%m/%d/%Y %I:%M:%S %p"
UTC_OFFSET_S = 3 * 3600
RESERVED_COLUMNS = ("datetime", "V", "A", "P_agg", "issues")

ELECTRIC_PERIOD_S = 10.0
ENVIRONMENTAL_PERIOD_S = 900.0
# interpolate gaps strictly shorter than 30 s (electric) / 1 h (environmental)
ELECTRIC_MAX_GAP = 3
ENVIRONMENTAL_MAX_GAP = 4
TEMPERATURE_RANGE = (-10.0, 50.0)
HUMIDITY_RANGE = (0.0, 100.0)


@dataclass
class HouseholdSeries:
    timestamps: np.ndarray              # epoch seconds, strictly increasing
    p_agg: np.ndarray
    appliances: dict[str, np.ndarray] = field(default_factory=dict)
    voltage: np.ndarray | None = None
    current: np.ndarray | None = None
    issues: np.ndarray | None = None
    sample_period: float = ELECTRIC_PERIOD_S

    def __len__(self):
        return len(self.timestamps)

    def channels(self) -> dict[str, np.ndarray]:
        out = {"P_agg": self.p_agg}
        if self.voltage is not None:
            out["V"] = self.voltage
        if self.current is not None:
            out["A"] = self.current
        out.update(self.appliances)
        return out


def _parse_cell(cell: str) -> float:
    try:
        return float(cell)
    except (TypeError, ValueError):
        return math.nan


def parse_datetime(text: str) -> float:
    """Epoch seconds of a local UTC+3 wall-clock string."""
    dt = datetime.strptime(text.strip(), DATETIME_FORMAT)
    return dt.replace(tzinfo=timezone(timedelta(seconds=UTC_OFFSET_S))).timestamp()


def format_datetime(epoch_s: float) -> str:
    dt = datetime.fromtimestamp(epoch_s, timezone(timedelta(seconds=UTC_OFFSET_S)))
    return dt.strftime(DATETIME_FORMAT)


def parse_plegma_csv(path) -> HouseholdSeries:
    """Read a household electric CSV; numeric junk becomes NaN, rows without
    a parseable datetime are dropped."""
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        for col in ("datetime", "P_agg"):
            if col not in header:
                raise DataError(f"{path}: mandatory column {col!r} missing")
        idx = {name: k for k, name in enumerate(header)}
        appliance_names = [h for h in header if h not in RESERVED_COLUMNS]

        times = []
        rows = []
        dropped = 0
        for row in reader:
            if not row:
                continue
            try:
                t = parse_datetime(row[idx["datetime"]])
            except ValueError:
                dropped += 1
                continue
            times.append(t)
            rows.append([_parse_cell(row[idx[c]]) if c in idx and idx[c] < len(row)
                         else math.nan
                         for c in header if c != "datetime"])
    if dropped:
        log.warning("%s: dropped %d rows with unparseable datetimes", path, dropped)

    times = np.asarray(times, dtype=float)
    order = np.argsort(times, kind="stable")
    data = np.asarray(rows, dtype=float)[order] if rows else np.zeros((0, len(header) - 1))
    times = times[order]

    cols = [c for c in header if c != "datetime"]
    at = {c: data[:, k] for k, c in enumerate(cols)}
    issues = at.get("issues")
    return HouseholdSeries(
        timestamps=times,
        p_agg=at["P_agg"],
        appliances={name: at[name] for name in appliance_names},
        voltage=at.get("V"),
        current=at.get("A"),
        issues=None if issues is None else np.nan_to_num(issues).astype(np.uint8),
    )


def write_plegma_csv(path, series: HouseholdSeries) -> None:
    """Emit the household schema; NaN cells become empty strings."""
    def fmt(v):
        return "" if (v is None or (isinstance(v, float) and math.isnan(v))) else f"{v:.6g}"

    names = list(series.appliances)
    header = ["datetime", "V", "A", "P_agg", *names, "issues"]
    n = len(series)
    v = series.voltage if series.voltage is not None else np.full(n, math.nan)
    a = series.current if series.current is not None else np.full(n, math.nan)
    issues = series.issues if series.issues is not None else np.zeros(n, dtype=np.uint8)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for k in range(n):
            row = [format_datetime(series.timestamps[k]), fmt(v[k]), fmt(a[k]),
                   fmt(series.p_agg[k])]
            row += [fmt(series.appliances[name][k]) for name in names]
            row.append(int(issues[k]))
            w.writerow(row)


def read_appliance_metadata(path) -> dict[str, ApplianceMeta]:
    """appliances_metadata.csv: name, wattage, on_threshold, min_on, min_off."""
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[row["name"]] = ApplianceMeta(
                name=row["name"], max_wattage=float(row["wattage"]),
                on_threshold=float(row["on_threshold"]),
                min_on=float(row["min_on"]), min_off=float(row["min_off"]))
    return out


def write_appliance_metadata(path, metas: dict[str, ApplianceMeta]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "wattage", "on_threshold", "min_on", "min_off"])
        for m in metas.values():
            w.writerow([m.name, f"{m.max_wattage:g}", f"{m.on_threshold:g}",
                        f"{m.min_on:g}", f"{m.min_off:g}"])


# ---------------------------------------------------------------------------
# cleaning pipeline
# ---------------------------------------------------------------------------

def resample_nearest(timestamps, values, grid_period: float):
    """Snap an irregular series onto a regular grid by the nearest sample.

    Grid points farther than one grid_period from every original sample
    become NaN; equidistant neighbors resolve to the earlier sample.
    Returns (grid_timestamps, grid_values).
    """
    t = np.asarray(timestamps, dtype=float)
    x = np.asarray(values, dtype=float)
    if t.size == 0:
        raise DataError("cannot resample an empty series")
    if grid_period <= 0:
        raise ConfigError(f"grid period must be positive, got {grid_period}")
    if np.any(np.diff(t) < 0):
        raise DataError("timestamps must be sorted ascending")

    start = math.floor(t[0] / grid_period) * grid_period
    stop = math.ceil(t[-1] / grid_period) * grid_period
    grid = start + grid_period * np.arange(round((stop - start) / grid_period) + 1)

    right = np.searchsorted(t, grid, side="left")
    left = np.clip(right - 1, 0, t.size - 1)
    right = np.clip(right, 0, t.size - 1)
    d_left = np.abs(grid - t[left])
    d_right = np.abs(t[right] - grid)
    take_left = d_left <= d_right  # ties -> earlier sample
    nearest = np.where(take_left, left, right)
    dist = np.where(take_left, d_left, d_right)
    out = x[nearest].copy()
    out[dist > grid_period] = math.nan
    return grid, out


def clean_abnormal(values, valid_range) -> np.ndarray:
    """Replace out-of-range readings with the last in-range one.

    NaN samples pass through untouched (they are gaps, not bad readings);
    out-of-range samples before any in-range reading become NaN.
    """
    lo, hi = valid_range
    if not lo < hi:
        raise ConfigError(f"invalid range [{lo}, {hi}]")
    x = np.asarray(values, dtype=float).copy()
    ok = (x >= lo) & (x <= hi)          # False for NaN as well
    abnormal = ~ok & ~np.isnan(x)
    # index of the most recent in-range sample at each position
    last_ok = np.where(ok, np.arange(x.size), -1)
    last_ok = np.maximum.accumulate(last_ok)
    has_prev = last_ok >= 0
    fix = abnormal & has_prev
    x[fix] = x[last_ok[fix]]
    x[abnormal & ~has_prev] = math.nan
    return x


def interpolate_gaps(values, max_gap: int) -> np.ndarray:
    """Linearly fill interior NaN runs strictly shorter than max_gap samples.

    Longer runs and runs touching either boundary keep their NaN values;
    non-NaN samples are never altered.
    """
    if max_gap < 0:
        raise ConfigError(f"max_gap must be >= 0, got {max_gap}")
    x = np.asarray(values, dtype=float).copy()
    isnan = np.isnan(x)
    if not isnan.any():
        return x
    n = x.size
    i = 0
    while i < n:
        if not isnan[i]:
            i += 1
            continue
        start = i
        while i < n and isnan[i]:
            i += 1
        end = i  # run is [start, end)
        if start == 0 or end == n:
            continue
        if (end - start) < max_gap:
            left, right = x[start - 1], x[end]
            span = end - start + 1
            x[start:end] = left + (right - left) * np.arange(1, span) / span
    return x


def flag_issues(p_agg, appliances: dict[str, np.ndarray]) -> np.ndarray:
    """1 where summed appliance power exceeds the aggregate; NaN anywhere in
    the comparison means no flag."""
    p = np.asarray(p_agg, dtype=float)
    if not appliances:
        return np.zeros(p.size, dtype=np.uint8)
    stack = np.vstack([np.asarray(v, dtype=float) for v in appliances.values()])
    total = stack.sum(axis=0)
    bad = np.isnan(p) | np.isnan(total)
    flags = (total > p) & ~bad
    return flags.astype(np.uint8)


def preprocess_series(series: HouseholdSeries,
                      metas: dict[str, ApplianceMeta] | None = None,
                      grid_period: float = ELECTRIC_PERIOD_S,
                      max_gap: int = ELECTRIC_MAX_GAP,
                      aggregate_range=(0.0, 30_000.0)):
    """resample -> clean_abnormal -> interpolate_gaps -> flag_issues.

    Appliance valid ranges come from metadata wattage when available.
    Returns (cleaned HouseholdSeries, stats dict).
    """
    grid, _ = resample_nearest(series.timestamps, series.p_agg, grid_period)

    def run_channel(values, rng):
        _, on_grid = resample_nearest(series.timestamps, values, grid_period)
        abnormal = int(np.sum(~np.isnan(on_grid)
                              & ((on_grid < rng[0]) | (on_grid > rng[1]))))
        cleaned = clean_abnormal(on_grid, rng)
        filled = interpolate_gaps(cleaned, max_gap)
        return filled, abnormal

    p_agg, abnormal_total = run_channel(series.p_agg, aggregate_range)
    appliances = {}
    for name, vals in series.appliances.items():
        rng = aggregate_range
        if metas and name in metas:
            rng = (0.0, metas[name].max_wattage)
        appliances[name], bad = run_channel(vals, rng)
        abnormal_total += bad
    voltage = current = None
    if series.voltage is not None:
        voltage, bad = run_channel(series.voltage, (0.0, 1000.0))
        abnormal_total += bad
    if series.current is not None:
        current, bad = run_channel(series.current, (0.0, 1000.0))
        abnormal_total += bad

    issues = flag_issues(p_agg, appliances)
    cleaned = HouseholdSeries(timestamps=grid, p_agg=p_agg, appliances=appliances,
                              voltage=voltage, current=current, issues=issues,
                              sample_period=grid_period)
    all_vals = np.concatenate([p_agg, *appliances.values()]) if appliances else p_agg
    stats = {
        "samples": int(grid.size),
        "abnormal_replaced": abnormal_total,
        "nan_pct": float(100.0 * np.isnan(all_vals).mean()),
        "issues_pct": float(100.0 * issues.mean()) if issues.size else 0.0,
    }
    return cleaned, stats


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass
class WindowDataset:
    X: np.ndarray           # [n, W] aggregate, standardized
    Y: np.ndarray           # [n, W] appliance, scaled to [0, 1]
    agg_mean: float
    agg_std: float
    y_max: float
    split: str = "train"

    def denormalize_target(self, y01) -> np.ndarray:
        return np.asarray(y01) * self.y_max

    def stats(self) -> dict:
        return {"agg_mean": self.agg_mean, "agg_std": self.agg_std,
                "y_max": self.y_max}


def windowize(p_agg, appliance, window: int, stride: int, drop_nan: bool = True):
    """Aligned sliding windows over the aggregate/appliance pair.

    Returns raw (unnormalized) arrays [n, window]. Windows containing NaN in
    either channel are dropped when drop_nan is set.
    """
    if window < 1 or stride < 1:
        raise ConfigError(f"window and stride must be >= 1, got {window}/{stride}")
    x = np.asarray(p_agg, dtype=float)
    y = np.asarray(appliance, dtype=float)
    if x.shape != y.shape:
        raise DataError(f"windowize: channel lengths differ, {x.shape} vs {y.shape}")
    t = x.size
    if t < window:
        log.warning("series of %d samples shorter than window %d: empty dataset",
                    t, window)
        return np.zeros((0, window)), np.zeros((0, window))
    starts = np.arange(0, t - window + 1, stride)
    xs = np.stack([x[s:s + window] for s in starts])
    ys = np.stack([y[s:s + window] for s in starts])
    if drop_nan:
        keep = ~(np.isnan(xs).any(axis=1) | np.isnan(ys).any(axis=1))
        xs, ys = xs[keep], ys[keep]
    return xs, ys


def build_train_dataset(train_pairs, meta: ApplianceMeta,
                        window: int, stride: int) -> WindowDataset:
    """Normalized training windows from (p_agg, appliance) series pairs.

    Normalization statistics come from the training windows only; the target
    scales by the appliance's rated wattage so it matches the model's [0, 1]
    output range.
    """
    xs, ys = [], []
    for p_agg, app in train_pairs:
        x, y = windowize(p_agg, app, window, stride)
        xs.append(x)
        ys.append(y)
    x_train = np.concatenate(xs) if xs else np.zeros((0, window))
    y_train = np.concatenate(ys) if ys else np.zeros((0, window))
    if x_train.size == 0:
        raise DataError("no training windows survived windowing")
    agg_mean = float(x_train.mean())
    agg_std = float(x_train.std()) or 1.0
    y_max = float(meta.max_wattage)
    return WindowDataset((x_train - agg_mean) / agg_std,
                         np.clip(y_train / y_max, 0.0, 1.0),
                         agg_mean, agg_std, y_max, "train")


def build_datasets(train_pairs, test_pair, meta: ApplianceMeta,
                   window: int, stride: int):
    """Train dataset plus a test dataset normalized with the train stats."""
    train = build_train_dataset(train_pairs, meta, window, stride)
    x_test, y_test = windowize(test_pair[0], test_pair[1], window, stride)
    test = WindowDataset((x_test - train.agg_mean) / train.agg_std,
                         np.clip(y_test / train.y_max, 0.0, 1.0),
                         train.agg_mean, train.agg_std, train.y_max, "test")
    return train, test


# ---------------------------------------------------------------------------
# synthetic households
# ---------------------------------------------------------------------------

TWO_STATE = "two_state"
MULTI_STATE = "multi_state"
CYCLIC = "cyclic"


def default_synth_config() -> dict:
    return {
        "duration_days": 4.0,
        "sample_period": ELECTRIC_PERIOD_S,
        "baseline_w": 80.0,
        "noise_sigma": 4.0,
        "appliances": [
            {"name": "kettle", "kind": TWO_STATE, "wattage": 2000.0,
             "events_per_day": 48, "min_burst_s": 90, "max_burst_s": 240},
            {"name": "washer", "kind": MULTI_STATE, "events_per_day": 3,
             "stages": [[400.0, 600], [1800.0, 900], [500.0, 600]]},
            {"name": "fridge", "kind": CYCLIC, "wattage": 110.0,
             "on_s": 900, "off_s": 1500},
        ],
    }


def _synth_two_state(rng, n, period, spec):
    out = np.zeros(n)
    days = n * period / 86_400.0
    events = rng.poisson(spec["events_per_day"] * days)
    for _ in range(events):
        start = rng.integers(0, n)
        length = int(round(rng.uniform(spec["min_burst_s"], spec["max_burst_s"]) / period))
        out[start:start + max(1, length)] = spec["wattage"]
    return out


def _synth_multi_state(rng, n, period, spec):
    out = np.zeros(n)
    days = n * period / 86_400.0
    events = rng.poisson(spec["events_per_day"] * days)
    stages = [(float(w), int(round(s / period))) for w, s in spec["stages"]]
    for _ in range(events):
        pos = int(rng.integers(0, n))
        for watts, samples in stages:
            seg = min(max(1, samples), n - pos)
            if seg <= 0:
                break
            out[pos:pos + seg] = np.maximum(out[pos:pos + seg], watts)
            pos += seg
    return out


def _synth_cyclic(rng, n, period, spec):
    out = np.zeros(n)
    on_n = max(1, int(round(spec["on_s"] / period)))
    off_n = max(1, int(round(spec["off_s"] / period)))
    pos = int(rng.integers(0, on_n + off_n))
    on = bool(rng.integers(0, 2))
    while pos < n:
        length = on_n if on else off_n
        length = max(1, int(round(length * rng.uniform(0.9, 1.1))))
        if on:
            out[pos:pos + length] = spec["wattage"]
        pos += length
        on = not on
    return out


_SYNTH_KINDS = {TWO_STATE: _synth_two_state, MULTI_STATE: _synth_multi_state,
                CYCLIC: _synth_cyclic}


def _meta_for(spec) -> ApplianceMeta:
    kind = spec["kind"]
    period_hint = spec.get("sample_period", ELECTRIC_PERIOD_S)
    if kind == TWO_STATE:
        return ApplianceMeta(spec["name"], spec["wattage"], spec["wattage"] / 2,
                             min_on=min(60.0, spec["min_burst_s"]), min_off=3 * period_hint)
    if kind == MULTI_STATE:
        watts = [float(w) for w, _ in spec["stages"]]
        return ApplianceMeta(spec["name"], max(watts), min(watts) / 2,
                             min_on=60.0, min_off=300.0)
    if kind == CYCLIC:
        return ApplianceMeta(spec["name"], spec["wattage"], spec["wattage"] / 2,
                             min_on=60.0, min_off=60.0)
    raise ConfigError(f"unknown appliance template kind {kind!r}")


def synth_generate(config: dict, seed: int):
    """Deterministic synthetic household.

    Returns (HouseholdSeries, {name: ApplianceMeta}). The aggregate is the
    appliance sum plus a constant baseline and Gaussian sensor noise, so the
    per-appliance ground truth is exact. An empty template list yields a
    baseline-only household.
    """
    period = float(config.get("sample_period", ELECTRIC_PERIOD_S))
    n = int(round(config.get("duration_days", 1.0) * 86_400.0 / period))
    rng = np.random.default_rng(seed)
    appliances = {}
    metas = {}
    for spec in config.get("appliances", []):
        kind = spec["kind"]
        if kind not in _SYNTH_KINDS:
            raise ConfigError(f"unknown appliance template kind {kind!r}")
        appliances[spec["name"]] = _SYNTH_KINDS[kind](rng, n, period, spec)
        metas[spec["name"]] = _meta_for(spec)

    baseline = float(config.get("baseline_w", 0.0))
    sigma = float(config.get("noise_sigma", 0.0))
    p_agg = np.full(n, baseline)
    for vals in appliances.values():
        p_agg = p_agg + vals
    if sigma > 0:
        p_agg = p_agg + rng.normal(0.0, sigma, size=n)
    voltage = 230.0 + rng.normal(0.0, 0.5, size=n)
    current = p_agg / voltage
    t0 = 1_700_000_000.0  # fixed origin keeps runs reproducible
    series = HouseholdSeries(
        timestamps=t0 + period * np.arange(n),
        p_agg=p_agg, appliances=appliances,
        voltage=voltage, current=current,
        issues=flag_issues(p_agg, appliances),
        sample_period=period)
    return series, metas
