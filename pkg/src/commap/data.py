"""Communication event logs, standardization, split protocol and a mission simulator."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .optim import seeded_stream

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "time_s", "tx_x_m", "tx_y_m", "rx_x_m", "rx_y_m",
    "tx_var_x_m2", "tx_var_y_m2", "rx_var_x_m2", "rx_var_y_m2",
    "label", "snr_db",
)

SD_FLOOR = 1e-9


@dataclass(frozen=True)
class CommEvent:
    """One scheduled transmit/receive attempt between two vehicles."""

    time: float
    tx_pos: tuple
    rx_pos: tuple
    tx_var: tuple
    rx_var: tuple
    label: int
    snr_db: float | None = None

    def __post_init__(self):
        for name in ("tx_pos", "rx_pos", "tx_var", "rx_var"):
            v = tuple(float(c) for c in getattr(self, name))
            if len(v) != 2 or not all(math.isfinite(c) for c in v):
                raise SchemaError(f"{name} must be two finite numbers, got {v}")
            object.__setattr__(self, name, v)
        if min(self.tx_var + self.rx_var) < 0:
            raise SchemaError("position variances must be non-negative")
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label!r}")
        if self.label == 1 and (self.snr_db is None or not math.isfinite(self.snr_db)):
            raise SchemaError("successful event needs a finite snr_db")
        if self.label == 0 and self.snr_db is not None:
            raise SchemaError("failed event must not carry snr_db")

    @property
    def x(self):
        """Model input (tx_x, tx_y, rx_x, rx_y)."""
        return np.array(self.tx_pos + self.rx_pos)

    @property
    def v(self):
        """Diagonal input-noise variances matching :attr:`x`."""
        return np.array(self.tx_var + self.rx_var)


@dataclass
class Dataset:
    events: list
    name: str = "dataset"
    ground_truth: object = None

    def __post_init__(self):
        if not self.events:
            raise DataError(f"dataset {self.name!r} is empty")

    def __len__(self):
        return len(self.events)

    @property
    def X(self):
        return np.stack([e.x for e in self.events])

    @property
    def V(self):
        return np.stack([e.v for e in self.events])

    @property
    def labels(self):
        return np.array([e.label for e in self.events], dtype=int)

    @property
    def snr(self):
        return np.array([np.nan if e.snr_db is None else e.snr_db for e in self.events])

    def class_counts(self):
        y = self.labels
        return {0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))}

    def subset(self, idx, name=None):
        return Dataset([self.events[i] for i in idx], name or self.name, self.ground_truth)


# ---------------------------------------------------------------------------
# CSV schema
# ---------------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def meta_lines(meta) -> str:
    return "".join(f"# {k} = {v}\n" for k, v in (meta or {}).items())


def events_to_csv(events, meta=None) -> str:
    buf = io.StringIO()
    buf.write(meta_lines(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in events:
        w.writerow([
            _fmt(e.time), *map(_fmt, e.tx_pos), *map(_fmt, e.rx_pos),
            *map(_fmt, e.tx_var), *map(_fmt, e.rx_var),
            e.label, "" if e.snr_db is None else _fmt(e.snr_db),
        ])
    return buf.getvalue()


def save_events(ds, path, meta=None):
    events = ds.events if isinstance(ds, Dataset) else ds
    Path(path).write_text(events_to_csv(events, meta), encoding="utf-8")


def _parse_row(row, line):
    if len(row) != len(CSV_COLUMNS):
        raise DataError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", line)
    try:
        nums = [float(v) for v in row[:9]]
        label = int(row[9])
        snr = float(row[10]) if row[10].strip() else None
    except ValueError as exc:
        raise DataError(f"malformed value ({exc})", line) from None
    try:
        return CommEvent(nums[0], nums[1:3], nums[3:5], nums[5:7], nums[7:9], label, snr)
    except SchemaError as exc:
        raise SchemaError(str(exc), line) from None


def load_events(path, name=None) -> Dataset:
    """Read and validate an event CSV. Errors carry the 1-based file line.

    Leading ``#`` lines (run metadata) are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.reader(lines[skip:])
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise DataError(f"bad or missing header, expected {','.join(CSV_COLUMNS)}", skip + 1)
    events = [_parse_row(row, i) for i, row in enumerate(reader, start=skip + 2) if row]
    if not events:
        raise DataError(f"{path}: no events after header")
    return Dataset(events, name or path.stem)


# ---------------------------------------------------------------------------
# Splits and views
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    n_splits: int = 20
    validation_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if self.n_splits < 1:
            raise ConfigError("n_splits must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")


def stratified_counts(counts, fraction):
    """Validation size per class: rounded share, at least 1, at most n-1."""
    return {c: min(max(int(np.floor(n * fraction + 0.5)), 1), n - 1) for c, n in counts.items()}


def make_splits(ds: Dataset, spec: SplitSpec):
    """Independent stratified train/validation draws.

    Returns a list of ``(train_idx, val_idx)`` sorted index arrays.
    """
    y = ds.labels
    counts = {c: int(np.sum(y == c)) for c in (0, 1)}
    for c, n in counts.items():
        if n < 2:
            raise DataError(f"class {c} has {n} events; need at least 2 to split")
    n_val = stratified_counts(counts, spec.validation_fraction)
    members = {c: np.flatnonzero(y == c) for c in (0, 1)}
    splits = []
    for k in range(spec.n_splits):
        rng = seeded_stream(spec.seed, ("split", k))
        val = np.concatenate([rng.permutation(members[c])[:n_val[c]] for c in (0, 1)])
        val = np.sort(val)
        train = np.setdiff1d(np.arange(len(y)), val)
        splits.append((train, val))
    return splits


def classification_view(ds: Dataset, idx=None):
    """Inputs, labels and input-noise variances for the given rows (all events)."""
    sub = ds if idx is None else ds.subset(idx)
    return sub.X, sub.labels, sub.V


def regression_view(ds: Dataset, idx=None):
    """Inputs and SNR targets of the successful events among the given rows."""
    sub = ds if idx is None else ds.subset(idx)
    keep = sub.labels == 1
    if not np.any(keep):
        raise DataError("no successful events in split; regression needs SNR targets")
    return sub.X[keep], sub.snr[keep]


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine maps fitted on training data only."""

    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float = 0.0
    y_sd: float = 1.0

    @classmethod
    def fit(cls, X, y=None):
        X = np.asarray(X, dtype=float)
        x_mean = X.mean(axis=0)
        x_sd = X.std(axis=0)
        if np.any(x_sd < SD_FLOOR):
            log.warning("zero-variance input dimension(s) %s; flooring SD at %g",
                        np.flatnonzero(x_sd < SD_FLOOR).tolist(), SD_FLOOR)
            x_sd = np.maximum(x_sd, SD_FLOOR)
        y_mean, y_sd = 0.0, 1.0
        if y is not None:
            y = np.asarray(y, dtype=float)
            y_mean = float(y.mean())
            y_sd = float(y.std())
            if y_sd < SD_FLOOR:
                log.warning("constant targets; flooring SD at %g", SD_FLOOR)
                y_sd = SD_FLOOR
        return cls(x_mean, x_sd, y_mean, y_sd)

    def transform_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_sd

    def inverse_x(self, Xs):
        return np.asarray(Xs, dtype=float) * self.x_sd + self.x_mean

    def transform_var(self, V):
        """Input-noise variances in standardized units."""
        return np.asarray(V, dtype=float) / self.x_sd**2

    def inverse_var(self, Vs):
        return np.asarray(Vs, dtype=float) * self.x_sd**2

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_sd

    def inverse_y(self, ys):
        return np.asarray(ys, dtype=float) * self.y_sd + self.y_mean

    def inverse_y_var(self, vs):
        return np.asarray(vs, dtype=float) * self.y_sd**2

    def to_dict(self):
        return {"x_mean": self.x_mean.tolist(), "x_sd": self.x_sd.tolist(),
                "y_mean": self.y_mean, "y_sd": self.y_sd}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_mean"]), np.asarray(d["x_sd"]), d["y_mean"], d["y_sd"])


def standardize(X, y=None):
    """Fit a :class:`Standardizer` and return ``(Xs, ys, transform)``."""
    t = Standardizer.fit(X, y)
    return t.transform_x(X), None if y is None else t.transform_y(y), t


# ---------------------------------------------------------------------------
# Synthetic missions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Shadow:
    """Gaussian bump of depressed success centred on a receiver location."""

    x: float
    y: float
    width: float
    depth: float
    snr_penalty_db: float = 0.0

    def bump(self, rx):
        rx = np.atleast_2d(rx)
        d2 = (rx[:, 0] - self.x) ** 2 + (rx[:, 1] - self.y) ** 2
        return np.exp(-0.5 * d2 / self.width**2)


@dataclass(frozen=True)
class MissionConfig:
    """Simulator settings. Distances in metres, SNR in dB."""

    n_events: int = 255
    arena_x: tuple = (-500.0, 500.0)
    arena_y: tuple = (-500.0, 500.0)
    success_offset: float = 4.0
    success_range_slope: float = 0.006
    shadows: tuple = ()
    snr_source_db: float = 60.0
    snr_noise_db: float = 2.0
    tx_nav_var_m2: float = 0.0
    rx_nav_var_m2: float = 0.0
    fail_var_growth: float = 0.0
    nav_drift_m2_per_s: float = 0.0
    surface_period_s: float = 0.0
    inject_noise: bool = True
    speed_mps: float = 1.5
    ping_period_s: float = 20.0
    name: str = "mission"

    def __post_init__(self):
        if self.n_events < 1:
            raise ConfigError("n_events must be >= 1")
        for key in ("arena_x", "arena_y"):
            lo, hi = getattr(self, key)
            if not hi > lo:
                raise ConfigError(f"{key} must be an increasing pair")
        if self.success_range_slope < 0:
            raise ConfigError("success_range_slope must be non-negative")
        if min(self.tx_nav_var_m2, self.rx_nav_var_m2, self.fail_var_growth, self.snr_noise_db,
               self.nav_drift_m2_per_s, self.surface_period_s) < 0:
            raise ConfigError("variances, growth and SNR noise must be non-negative")
        if self.speed_mps <= 0 or self.ping_period_s <= 0:
            raise ConfigError("speed_mps and ping_period_s must be positive")
        object.__setattr__(self, "shadows",
                           tuple(s if isinstance(s, Shadow) else Shadow(*s) for s in self.shadows))


@dataclass(frozen=True)
class SuccessField:
    """Ground-truth success probability and mean SNR of a simulated mission."""

    cfg: MissionConfig

    def logit(self, tx, rx):
        tx, rx = np.atleast_2d(tx), np.atleast_2d(rx)
        r = np.linalg.norm(tx - rx, axis=1)
        z = self.cfg.success_offset - self.cfg.success_range_slope * r
        for s in self.cfg.shadows:
            z = z - s.depth * s.bump(rx)
        return z

    def probability(self, tx, rx):
        return 1.0 / (1.0 + np.exp(-self.logit(tx, rx)))

    def mean_snr(self, tx, rx):
        tx, rx = np.atleast_2d(tx), np.atleast_2d(rx)
        r = np.maximum(np.linalg.norm(tx - rx, axis=1), 1.0)
        snr = self.cfg.snr_source_db - 20.0 * np.log10(r)
        for s in self.cfg.shadows:
            snr = snr - s.snr_penalty_db * s.bump(rx)
        return snr


def _waypoint_track(rng, n, cfg):
    """Piecewise-straight track at constant speed between uniform waypoints."""
    lo = np.array([cfg.arena_x[0], cfg.arena_y[0]])
    hi = np.array([cfg.arena_x[1], cfg.arena_y[1]])
    step = cfg.speed_mps * cfg.ping_period_s
    pos = rng.uniform(lo, hi)
    goal = rng.uniform(lo, hi)
    out = np.empty((n, 2))
    for i in range(n):
        out[i] = pos
        remaining = step
        while remaining > 0:
            d = goal - pos
            dist = np.linalg.norm(d)
            if dist <= remaining:
                pos, remaining = goal, remaining - dist
                goal = rng.uniform(lo, hi)
            else:
                pos = pos + d * (remaining / dist)
                remaining = 0.0
    return out


def simulate_mission(cfg: MissionConfig, seed=0) -> Dataset:
    """Draw a synthetic mission from the configured ground-truth field.

    Two vehicles follow random waypoint tracks and alternate transmitting on a
    fixed schedule. Logged positions are perturbed by navigation error. Each
    vehicle's variance is its base value plus a dead-reckoning drift that
    grows with time since the last GPS fix (every ``surface_period_s``, the
    two vehicles staggered by half a period); the transmitter's variance is
    further inflated by consecutive failed receptions. True positions are
    kept on ``ds.ground_truth.true_X``.
    """
    rng = seeded_stream(seed, "simulate")
    n = cfg.n_events
    truth = SuccessField(cfg)
    a = _waypoint_track(rng, n, cfg)
    b = _waypoint_track(rng, n, cfg)
    a_tx = (np.arange(n) % 2) == 0
    tx = np.where(a_tx[:, None], a, b)
    rx = np.where(a_tx[:, None], b, a)
    p = truth.probability(tx, rx)
    labels = (rng.uniform(size=n) < p).astype(int)
    snr = truth.mean_snr(tx, rx) + cfg.snr_noise_db * rng.standard_normal(n)
    noise = rng.standard_normal((n, 4))

    events, true_X = [], np.hstack([tx, rx])
    t = np.arange(n) * cfg.ping_period_s
    if cfg.surface_period_s > 0:
        drift_a = cfg.nav_drift_m2_per_s * np.mod(t, cfg.surface_period_s)
        drift_b = cfg.nav_drift_m2_per_s * np.mod(t + 0.5 * cfg.surface_period_s, cfg.surface_period_s)
    else:
        drift_a = drift_b = cfg.nav_drift_m2_per_s * t
    drift_tx = np.where(a_tx, drift_a, drift_b)
    drift_rx = np.where(a_tx, drift_b, drift_a)
    misses = 0
    for i in range(n):
        tx_var = cfg.tx_nav_var_m2 * (1.0 + cfg.fail_var_growth * misses) + drift_tx[i]
        rx_var = cfg.rx_nav_var_m2 + drift_rx[i]
        v = np.array([tx_var, tx_var, rx_var, rx_var])
        logged = true_X[i] + (np.sqrt(v) * noise[i] if cfg.inject_noise else 0.0)
        events.append(CommEvent(
            time=float(t[i]),
            tx_pos=tuple(logged[:2]), rx_pos=tuple(logged[2:]),
            tx_var=(tx_var, tx_var), rx_var=(rx_var, rx_var),
            label=int(labels[i]),
            snr_db=float(snr[i]) if labels[i] == 1 else None,
        ))
        misses = 0 if labels[i] == 1 else misses + 1
    gt = GroundTruth(truth, true_X, p)
    return Dataset(events, cfg.name, gt)


@dataclass
class GroundTruth:
    field: SuccessField
    true_X: np.ndarray
    true_p: np.ndarray


# ---------------------------------------------------------------------------
# Flat key-value config files
# ---------------------------------------------------------------------------

_TUPLE_KEYS = ("arena_x", "arena_y")


def mission_to_text(cfg: MissionConfig) -> str:
    lines = []
    for f in fields(MissionConfig):
        val = getattr(cfg, f.name)
        if f.name == "shadows":
            for i, s in enumerate(val):
                lines.append(f"shadow_{i} = {s.x!r}, {s.y!r}, {s.width!r}, {s.depth!r}, {s.snr_penalty_db!r}")
        elif f.name in _TUPLE_KEYS:
            lines.append(f"{f.name} = {val[0]!r}, {val[1]!r}")
        else:
            lines.append(f"{f.name} = {val!r}" if not isinstance(val, str) else f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def mission_from_text(text: str) -> MissionConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(MissionConfig)}
    kw, shadows = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("shadow_"):
                shadows.append((int(key[7:]), Shadow(*[float(v) for v in val.split(",")])))
            elif key in _TUPLE_KEYS:
                lo, hi = (float(v) for v in val.split(","))
                kw[key] = (lo, hi)
            elif key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            elif types[key] == "int":
                kw[key] = int(val)
            elif types[key] == "bool":
                if val not in ("True", "False", "true", "false", "1", "0"):
                    raise ValueError(val)
                kw[key] = val in ("True", "true", "1")
            elif types[key] == "str":
                kw[key] = val
            else:
                kw[key] = float(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r} ({exc})") from None
    if shadows:
        kw["shadows"] = tuple(s for _, s in sorted(shadows, key=lambda t: t[0]))
    return MissionConfig(**kw)


def load_mission_config(path) -> MissionConfig:
    return mission_from_text(Path(path).read_text(encoding="utf-8"))


#: Presets shaped like the three field datasets (poor / mixed / favourable).
# Three synthetic missions sized like the three field datasets. "mixed" has a
# success-depressing shadow near (340, -120) that leaves SNR untouched, so SNR
# is a weak proxy for success there; "favourable" is success-dominated with
# low SNR levels. All carry dead-reckoning input noise.
_NAV = dict(tx_nav_var_m2=25.0, rx_nav_var_m2=25.0, nav_drift_m2_per_s=60.0,
            surface_period_s=600.0)

PRESETS = {
    "poor": MissionConfig(n_events=216, success_offset=1.5, success_range_slope=0.004,
                          shadows=(Shadow(340.0, -120.0, 250.0, 4.0, 2.0),), snr_noise_db=3.0,
                          name="poor", **_NAV),
    "mixed": MissionConfig(n_events=255, success_offset=3.0, success_range_slope=0.004,
                           shadows=(Shadow(340.0, -120.0, 250.0, 6.0, 0.0),), snr_noise_db=3.0,
                           name="mixed", **_NAV),
    "favourable": MissionConfig(n_events=414, success_offset=4.0, success_range_slope=0.004,
                                shadows=(Shadow(340.0, -120.0, 250.0, 3.0, 0.0),),
                                snr_source_db=57.0, snr_noise_db=3.0, name="favourable", **_NAV),
}


def preset(name, **overrides) -> MissionConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)
