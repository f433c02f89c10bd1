"""Metrics, threshold sweeps, multi-split method comparison and prediction grids."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset, SplitSpec, classification_view, make_splits, meta_lines, regression_view,
)
from .errors import CommapError, ConfigError, DataError
from .laplace_gpc import GpcConfig, fit_gpc_laplace
from .noisy_input import NiConfig, fit_ni_nn
from .prediction import PredictionResult
from .regression import GprConfig, fit_gpr, fit_svgpr
from .svgpc import SparseConfig, fit_svgpc

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12
REGRESSION = ("GPR", "SVGPR")
CLASSIFICATION = ("GPC", "SVGPC", "NI-NN")
METHODS = REGRESSION + CLASSIFICATION


def _pair(predictions, labels):
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise DataError(f"length mismatch: {p.size} predictions, {y.size} labels")
    if p.size == 0:
        raise DataError("empty prediction set")
    return p, y


def ratio_metric(predictions, labels, threshold):
    """Fraction of events whose thresholded prediction matches the outcome.

    A prediction equal to the threshold counts as "communicate".
    """
    p, y = _pair(predictions, labels)
    hit = p >= threshold
    return float((np.sum(hit & (y == 1)) + np.sum(~hit & (y == 0))) / y.size)


def nll_metric(probabilities, labels):
    """Mean Bernoulli negative log-likelihood with probabilities clipped away from 0 and 1."""
    p, y = _pair(probabilities, labels)
    # clip the probability of the observed label so the two labels are treated alike
    q = np.clip(np.where(y == 1, p, 1.0 - p), PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.mean(np.log(q)))


def threshold_sweep(predictions, labels, grid):
    """Grid threshold maximizing the mean ratio across splits.

    ``predictions`` and ``labels`` are per-split sequences. Ties go to the
    lowest threshold. Returns ``(best, grid_sorted, mean_ratio_curve)``.
    """
    grid = np.unique(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ConfigError("threshold grid is empty")
    curve = np.array([np.mean([ratio_metric(p, y, th) for p, y in zip(predictions, labels)])
                      for th in grid])
    return float(grid[int(np.argmax(curve))]), grid, curve


def snr_grid(values, extra=(0.1, 9.8, 10.2), step=0.1):
    """0.1 dB grid spanning ``values`` plus the reference thresholds."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    lo = math.floor(v.min() / step) * step if v.size else 0.0
    hi = math.ceil(v.max() / step) * step if v.size else 0.0
    g = np.round(np.arange(round(lo / step), round(hi / step) + 1) * step, 10)
    return np.unique(np.concatenate([g, extra]))


def probability_grid(step=0.01):
    return np.round(np.arange(0, round(1 / step) + 1) * step, 10)


# ---------------------------------------------------------------------------
# Method comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    sparse: SparseConfig = field(default_factory=SparseConfig)
    ni: NiConfig = field(default_factory=NiConfig)
    gpr: GprConfig = field(default_factory=GprConfig)
    gpc: GpcConfig = field(default_factory=GpcConfig)
    snr_thresholds: tuple = (9.8,)
    prob_threshold: float = 0.5
    sweep: bool = True
    ni_noise: str = "known"

    def __post_init__(self):
        if self.ni_noise not in ("known", "learned"):
            raise ConfigError("ni_noise must be 'known' or 'learned'")

    def with_seed(self, seed):
        return replace(self, sparse=replace(self.sparse, seed=seed), ni=replace(self.ni, seed=seed))


def fit_method(method, ds: Dataset, idx, cfg: EvalConfig):
    """Train ``method`` on rows ``idx``; returns the model."""
    if method == "GPR":
        return fit_gpr(*regression_view(ds, idx), cfg.gpr)
    if method == "SVGPR":
        return fit_svgpr(*regression_view(ds, idx), cfg.sparse)
    X, y, V = classification_view(ds, idx)
    if method == "GPC":
        return fit_gpc_laplace(X, y, cfg.gpc)
    if method == "SVGPC":
        return fit_svgpc(X, y, cfg.sparse)
    if method == "NI-NN":
        if cfg.ni_noise == "learned":
            return fit_ni_nn(X, y, None, replace(cfg.ni, learn_V=True))
        return fit_ni_nn(X, y, V, replace(cfg.ni, learn_V=False))
    raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def predict_method(method, model, ds: Dataset, idx) -> PredictionResult:
    X, _, V = classification_view(ds, idx)
    if method == "NI-NN":
        if model.shared_V is not None:
            V = model.shared_V
        return model.predict(X, V)
    return model.predict(X)


@dataclass
class MetricReport:
    method: str
    ratios: dict
    nll: list | None
    threshold: float
    seed: int
    best_threshold: float | None = None
    errors: list = field(default_factory=list)

    def mean_ratio(self, threshold=None):
        key = self.threshold if threshold is None else threshold
        return float(np.mean(self.ratios[key]))

    @property
    def mean_nll(self):
        return None if self.nll is None else float(np.mean(self.nll))


@dataclass
class Comparison:
    dataset: str
    spec: SplitSpec
    reports: dict
    labels: list
    predictions: dict

    def table(self):
        return format_table(self)


def compare_methods(ds: Dataset, spec: SplitSpec, methods, cfg: EvalConfig | None = None,
                    progress=None) -> Comparison:
    """Train and score every method on the same stratified splits."""
    cfg = cfg or EvalConfig()
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    splits = make_splits(ds, spec)
    labels = [ds.labels[val] for _, val in splits]
    preds = {m: [] for m in methods}
    errors = {m: [] for m in methods}
    for k, (train, val) in enumerate(splits):
        for m in methods:
            try:
                model = fit_method(m, ds, train, cfg)
                preds[m].append(np.asarray(predict_method(m, model, ds, val).value, dtype=float))
            except CommapError as exc:
                log.warning("%s failed on split %d: %s", m, k, exc)
                errors[m].append(f"split {k}: {exc}")
                preds[m].append(np.full(val.size, np.nan))
            if progress:
                progress(k, m)
    reports = {m: _score(m, preds[m], labels, cfg, spec.seed, errors[m]) for m in methods}
    return Comparison(ds.name, spec, reports, labels, preds)


def _score(method, preds, labels, cfg: EvalConfig, seed, errors):
    regression = method in REGRESSION
    thresholds = list(cfg.snr_thresholds) if regression else [cfg.prob_threshold]
    failed = bool(errors)

    def per_split(th):
        if failed:
            return [float("nan")] * len(preds)
        return [ratio_metric(p, y, th) for p, y in zip(preds, labels)]

    ratios = {th: per_split(th) for th in thresholds}
    best = None
    if cfg.sweep and not failed:
        grid = snr_grid(np.concatenate(preds)) if regression else probability_grid()
        best, _, _ = threshold_sweep(preds, labels, grid)
        ratios.setdefault(best, per_split(best))
    nll = None
    if not regression:
        nll = [float("nan")] * len(preds) if failed else [nll_metric(p, y) for p, y in zip(preds, labels)]
    return MetricReport(method, ratios, nll, thresholds[0], seed, best, errors)


def _cell(x):
    return "failed" if x is None or not np.isfinite(x) else f"{x:.4f}"


def format_table(cmp: Comparison) -> str:
    """Plain-text table with one column per method."""
    names = list(cmp.reports)
    rows = [["Metric", *names]]
    reg = [cmp.reports[n] for n in names if n in REGRESSION]
    first_reg = reg[0].threshold if reg else None
    label = f"ratio_{first_reg:g}dB/0.5" if reg else "ratio_0.5"
    rows.append([label, *(_cell(cmp.reports[n].mean_ratio()) for n in names)])
    rows.append(["NLL_0.5", *(("-" if cmp.reports[n].nll is None else _cell(cmp.reports[n].mean_nll))
                             for n in names)])
    extra = sorted({th for r in reg for th in r.ratios if th != r.threshold})
    for th in extra:
        rows.append([f"ratio_{th:g}dB",
                     *((_cell(cmp.reports[n].mean_ratio(th)) if th in cmp.reports[n].ratios
                        and cmp.reports[n].method in REGRESSION else "-") for n in names)])
    for n in names:
        r = cmp.reports[n]
        if r.best_threshold is not None:
            rows.append([f"best_threshold[{n}]", *(("{:g}".format(r.best_threshold) if m == n else "")
                                                   for m in names)])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [f"# {cmp.dataset}: mean over {cmp.spec.n_splits} splits "
             f"(validation fraction {cmp.spec.validation_fraction:g}, seed {cmp.spec.seed})"]
    for i, row in enumerate(rows):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
        if i == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_keyvalue(cmp: Comparison, meta=None) -> str:
    """Machine-readable ``key = value`` lines, per method and per split."""
    lines = [f"{k} = {v}" for k, v in (meta or {}).items()]
    lines += [f"dataset = {cmp.dataset}", f"n_splits = {cmp.spec.n_splits}",
             f"validation_fraction = {cmp.spec.validation_fraction!r}", f"seed = {cmp.spec.seed}"]
    for name, r in cmp.reports.items():
        for th, vals in r.ratios.items():
            lines.append(f"{name}.ratio@{th!r}.mean = {float(np.mean(vals))!r}")
            lines.append(f"{name}.ratio@{th!r}.splits = {','.join(repr(float(v)) for v in vals)}")
        if r.nll is not None:
            lines.append(f"{name}.nll.mean = {float(np.mean(r.nll))!r}")
            lines.append(f"{name}.nll.splits = {','.join(repr(float(v)) for v in r.nll)}")
        if r.best_threshold is not None:
            lines.append(f"{name}.best_threshold = {r.best_threshold!r}")
        lines.append(f"{name}.failures = {len(r.errors)}")
    return "\n".join(lines) + "\n"


def write_table_csv(path, header, rows, meta=None):
    """Numeric CSV with optional leading ``# key = value`` metadata lines."""
    out = [meta_lines(meta), ",".join(header) + "\n"]
    out += [",".join(repr(float(v)) for v in row) + "\n" for row in rows]
    Path(path).write_text("".join(out), encoding="utf-8")


def read_table_csv(path):
    """Inverse of :func:`write_table_csv`: ``(meta, header, array)``."""
    meta, header, rows = {}, None, []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            meta[k.strip()] = v.strip()
        elif header is None:
            header = [h.strip() for h in line.split(",")]
        else:
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError as exc:
                raise DataError(f"malformed value ({exc})", i) from None
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", i)
            rows.append(row)
    if header is None:
        raise DataError(f"{path}: missing header")
    return meta, header, np.array(rows, dtype=float).reshape(-1, len(header))


def parse_keyvalue(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# Prediction grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionGrid:
    """Row-major lattice: row i has rx_y = ys[i], column j has rx_x = xs[j]."""

    fixed_tx: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    value: np.ndarray
    latent_var: np.ndarray

    def rows(self):
        for i, y in enumerate(self.ys):
            for j, x in enumerate(self.xs):
                yield x, y, self.value[i, j], self.latent_var[i, j]


def predict_grid(model, fixed_tx, region, resolution) -> PredictionGrid:
    """Evaluate ``model`` at (fixed_tx, rx) over a regular receiver lattice.

    ``region = (x_min, x_max, y_min, y_max)``; ``resolution`` is an int or
    ``(nx, ny)``.
    """
    x0, x1, y0, y1 = (float(v) for v in region)
    nx, ny = (resolution, resolution) if np.ndim(resolution) == 0 else resolution
    if nx < 2 or ny < 2:
        raise ConfigError("grid resolution must be at least 2 per axis")
    if not (x1 > x0 and y1 > y0):
        raise ConfigError(f"degenerate grid region {region}")
    xs, ys = np.linspace(x0, x1, nx), np.linspace(y0, y1, ny)
    gx, gy = np.meshgrid(xs, ys)
    tx = np.broadcast_to(np.asarray(fixed_tx, dtype=float), (gx.size, 2))
    X = np.hstack([tx, gx.reshape(-1, 1), gy.reshape(-1, 1)])
    res = model.predict(X)
    return PredictionGrid(np.asarray(fixed_tx, dtype=float), xs, ys,
                          np.asarray(res.value).reshape(ny, nx),
                          np.asarray(res.variance).reshape(ny, nx))
