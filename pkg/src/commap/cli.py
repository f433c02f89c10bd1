"""Command-line driver: simulate, train, evaluate, sweep and heatmap.

Every artifact carries the run seed and a hash of the semantically
meaningful run settings (output locations excluded, input files hashed by
content). Exit status: 0 success, 2 configuration error, 3 data error,
4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import modelio
from .data import (
    PRESETS, SplitSpec, load_events, load_mission_config, mission_to_text, preset,
    save_events, simulate_mission,
)
from .errors import CommapError, ConfigError, DataError, NumericalError
from .evaluation import (
    CLASSIFICATION, METHODS, EvalConfig, compare_methods, fit_method, format_keyvalue,
    format_table, predict_grid, probability_grid, snr_grid, threshold_sweep, write_table_csv,
)
from .noisy_input import NiConfig
from .svgpc import SparseConfig

log = logging.getLogger(__name__)

OUT_ENV = "COMMAP_OUT_DIR"
DEFAULT_OUT = "commap_out"
EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4
COMMANDS = ("simulate", "train", "evaluate", "sweep", "heatmap")

# Heat-map colour ramp: value 0 -> blue (0, 0, 255), 0.5 -> white, 1 -> red
# (255, 0, 0), piecewise linear in between, after scaling the value range
# [vmin, vmax] onto [0, 1] and clipping. Non-finite cells are black.
RAMP = np.array([[0, 0, 255], [255, 255, 255], [255, 0, 0]], dtype=float)


@dataclass(frozen=True)
class RunConfig:
    command: str
    data: str | None = None
    methods: tuple = ("SVGPC",)
    model: str | None = None
    seed: int = 0
    epochs: int = 1000
    batch_size: int = 50
    inducing_fraction: float = 0.05
    gh_nodes: int = 20
    samples: int = 1
    predict_samples: int = 50
    snr_thresholds: tuple = (9.8,)
    prob_threshold: float = 0.5
    splits: int = 20
    validation_fraction: float = 0.2
    ni_noise: str = "known"
    preset: str = "mixed"
    mission_config: str | None = None
    n_events: int | None = None
    tx: tuple = (0.0, 0.0)
    region: tuple = (-500.0, 500.0, -500.0, 500.0)
    resolution: tuple = (50, 50)
    vmin: float | None = None
    vmax: float | None = None
    out_dir: str = field(default=DEFAULT_OUT, metadata={"semantic": False})

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.command in ("train", "heatmap", "sweep") and len(self.methods) != 1:
            raise ConfigError(f"{self.command} takes exactly one method")
        if self.command in ("train", "evaluate", "sweep") and not self.data:
            raise ConfigError(f"{self.command} needs --data")
        if self.command == "heatmap" and not self.model:
            raise ConfigError("heatmap needs --model")
        if self.command == "simulate" and not self.mission_config and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        positive = {"epochs": self.epochs, "batch_size": self.batch_size, "splits": self.splits,
                    "samples": self.samples, "predict_samples": self.predict_samples}
        for name, v in positive.items():
            if v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.inducing_fraction <= 1.0:
            raise ConfigError("inducing_fraction must lie in (0, 1]")
        if not 2 <= self.gh_nodes <= 64:
            raise ConfigError("gh_nodes must lie in [2, 64]")
        if self.ni_noise not in ("known", "learned"):
            raise ConfigError("ni_noise must be 'known' or 'learned'")
        if self.n_events is not None and self.n_events < 1:
            raise ConfigError("n_events must be >= 1")
        if min(self.resolution) < 2:
            raise ConfigError("grid resolution must be at least 2 per axis")
        x0, x1, y0, y1 = self.region
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"degenerate grid region {self.region}")
        for name in ("data", "model", "mission_config"):
            path = getattr(self, name)
            if path and not Path(path).exists():
                raise DataError(f"{name} file not found: {path}")
        SplitSpec(self.splits, self.validation_fraction, self.seed)
        return self

    def eval_config(self) -> EvalConfig:
        sparse = SparseConfig(epochs=self.epochs, batch_size=self.batch_size,
                              inducing_fraction=self.inducing_fraction, gh_nodes=self.gh_nodes,
                              seed=self.seed)
        ni = NiConfig(**asdict(sparse), samples=self.samples, predict_samples=self.predict_samples)
        base = EvalConfig()
        return EvalConfig(sparse=sparse, ni=ni, gpr=base.gpr,
                          gpc=replace(base.gpc, gh_nodes=self.gh_nodes),
                          snr_thresholds=tuple(self.snr_thresholds),
                          prob_threshold=self.prob_threshold, ni_noise=self.ni_noise)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.splits, self.validation_fraction, self.seed)


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 (first 16 hex digits) over the semantic run settings.

    Input files enter by content, so renaming a file keeps the hash while
    editing it changes the hash.
    """
    d = {}
    for f in fields(cfg):
        if not f.metadata.get("semantic", True):
            continue
        v = getattr(cfg, f.name)
        if f.name in ("data", "model", "mission_config") and v:
            v = "sha256:" + _file_digest(v)
        d[f.name] = list(v) if isinstance(v, tuple) else v
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _meta(cfg: RunConfig):
    return {"seed": cfg.seed, "config_hash": config_hash(cfg), "command": cfg.command}


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _slug(method):
    return method.lower().replace("-", "_")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig):
    mission = (load_mission_config(cfg.mission_config) if cfg.mission_config
               else preset(cfg.preset))
    if cfg.n_events is not None:
        mission = replace(mission, n_events=cfg.n_events)
    ds = simulate_mission(mission, seed=cfg.seed)
    out, meta = _out(cfg), _meta(cfg)
    save_events(ds, out / "events.csv", meta)
    gt = ds.ground_truth
    truth = {"meta": meta, "mission": mission_to_text(mission),
             "true_X": gt.true_X.tolist(), "true_p": gt.true_p.tolist()}
    (out / "events_truth.json").write_text(modelio.dumps(truth), encoding="utf-8")
    return [out / "events.csv", out / "events_truth.json"]


def cmd_train(cfg: RunConfig):
    method = cfg.methods[0]
    ds = load_events(cfg.data)
    model = fit_method(method, ds, np.arange(len(ds)), cfg.eval_config())
    out, meta = _out(cfg), _meta(cfg)
    path = out / f"model_{_slug(method)}.json"
    modelio.save_model(model, path, meta)
    trace_path = out / f"trace_{_slug(method)}.csv"
    if hasattr(model, "trace"):
        rows = [(i + 1, v) for i, v in enumerate(model.trace.epoch_means)]
        write_table_csv(trace_path, ["epoch", "mean_elbo"], rows,
                        {**meta, "elbo_initial": repr(model.trace.elbo_initial),
                         "elbo_final": repr(model.trace.elbo_final)})
    else:
        trace = getattr(model, "lml_trace", ()) or (getattr(model, "log_evidence", np.nan),)
        write_table_csv(trace_path, ["step", "objective"],
                        [(i, v) for i, v in enumerate(trace)], meta)
    return [path, trace_path]


def cmd_evaluate(cfg: RunConfig):
    ds = load_events(cfg.data)
    cmp = compare_methods(ds, cfg.split_spec(), cfg.methods, cfg.eval_config(),
                          progress=lambda k, m: log.info("split %d %s done", k, m))
    out, meta = _out(cfg), _meta(cfg)
    header = "".join(f"# {k} = {v}\n" for k, v in meta.items())
    (out / "report.txt").write_text(header + format_table(cmp), encoding="utf-8")
    (out / "report.kv").write_text(format_keyvalue(cmp, meta), encoding="utf-8")
    return [out / "report.txt", out / "report.kv"]


def cmd_sweep(cfg: RunConfig):
    method = cfg.methods[0]
    ds = load_events(cfg.data)
    cmp = compare_methods(ds, cfg.split_spec(), [method], cfg.eval_config())
    preds, labels = cmp.predictions[method], cmp.labels
    if any(not np.all(np.isfinite(p)) for p in preds):
        raise NumericalError(f"{method} failed on some splits: {cmp.reports[method].errors}")
    grid = probability_grid() if method in CLASSIFICATION else snr_grid(np.concatenate(preds))
    best, grid, curve = threshold_sweep(preds, labels, grid)
    out, meta = _out(cfg), _meta(cfg)
    path = out / f"sweep_{_slug(method)}.csv"
    write_table_csv(path, ["threshold", "mean_ratio"], zip(grid, curve),
                    {**meta, "method": method, "best_threshold": repr(float(best))})
    return [path]


def ramp_colour(values, vmin, vmax):
    """Map values to RGB bytes with the fixed blue-white-red ramp."""
    v = np.asarray(values, dtype=float)
    s = np.clip((v - vmin) / (vmax - vmin), 0.0, 1.0) if vmax > vmin else np.full(v.shape, 0.5)
    pos = s * 2.0
    lo = np.minimum(pos.astype(int), 1)
    frac = (pos - lo)[..., None]
    rgb = RAMP[lo] * (1.0 - frac) + RAMP[lo + 1] * frac
    rgb = np.where(np.isfinite(v)[..., None], rgb, 0.0)
    return np.round(rgb).astype(np.uint8)


def write_ppm(path, value, vmin, vmax, meta):
    """Binary PPM (P6); image rows run from the largest rx_y down."""
    rgb = ramp_colour(value[::-1], vmin, vmax)
    h, w = value.shape
    comments = "".join(f"# {k} = {v}\n" for k, v in meta.items())
    head = f"P6\n{comments}# ramp = blue-white-red over [{vmin!r}, {vmax!r}]\n{w} {h}\n255\n"
    Path(path).write_bytes(head.encode("ascii") + rgb.tobytes())


def read_ppm(path):
    """Return ``(comments, rgb array)`` from a file written by :func:`write_ppm`."""
    raw = Path(path).read_bytes()
    tokens, comments, i = [], {}, 0
    while len(tokens) < 4:
        j = raw.index(b"\n", i)
        line = raw[i:j].decode("ascii")
        i = j + 1
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            comments[k.strip()] = v.strip()
        else:
            tokens += line.split()
    if tokens[0] != "P6":
        raise DataError(f"{path}: not a binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return comments, np.frombuffer(raw[i:], dtype=np.uint8).reshape(h, w, 3)


def cmd_heatmap(cfg: RunConfig):
    model = modelio.load_model(cfg.model)
    kind = modelio.model_to_dict(model)["kind"]
    grid = predict_grid(model, cfg.tx, cfg.region, tuple(cfg.resolution))
    out, meta = _out(cfg), _meta(cfg)
    meta = {**meta, "method": kind, "tx": f"{cfg.tx[0]!r} {cfg.tx[1]!r}"}
    csv_path, ppm_path = out / "heatmap.csv", out / "heatmap.ppm"
    write_table_csv(csv_path, ["rx_x", "rx_y", "value", "latent_var"], grid.rows(), meta)
    if kind in CLASSIFICATION:
        vmin, vmax = 0.0, 1.0
    else:
        finite = grid.value[np.isfinite(grid.value)]
        vmin = cfg.vmin if cfg.vmin is not None else float(finite.min()) if finite.size else 0.0
        vmax = cfg.vmax if cfg.vmax is not None else float(finite.max()) if finite.size else 1.0
    write_ppm(ppm_path, grid.value, vmin, vmax, meta)
    return [csv_path, ppm_path]


HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "heatmap": cmd_heatmap}


def run(cfg: RunConfig):
    """Validate ``cfg`` and execute its command; returns the artifact paths."""
    cfg.validate()
    return HANDLERS[cfg.command](cfg)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _floats(n):
    def parse(text):
        try:
            vals = tuple(float(v) for v in text.replace(",", " ").split())
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} numbers, got {text!r}")
        return vals
    return parse


def _thresholds(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def _resolution(text):
    parts = text.lower().replace("x", " ").split()
    try:
        vals = tuple(int(v) for v in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}") from None
    return vals * 2 if len(vals) == 1 else vals


def build_parser():
    d = RunConfig("simulate")
    p = argparse.ArgumentParser(prog="commap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=d.seed, help="seed for all randomness")
        sp.add_argument("--out-dir", default=None,
                        help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")

    def training(sp):
        sp.add_argument("--data", required=True, help="event CSV")
        sp.add_argument("--epochs", type=int, default=d.epochs)
        sp.add_argument("--batch-size", type=int, default=d.batch_size)
        sp.add_argument("--inducing-fraction", type=float, default=d.inducing_fraction)
        sp.add_argument("--gh-nodes", type=int, default=d.gh_nodes)
        sp.add_argument("--samples", type=int, default=d.samples,
                        help="NI-NN reparameterized samples per event during training")
        sp.add_argument("--predict-samples", type=int, default=d.predict_samples,
                        help="NI-NN Monte Carlo samples per prediction")
        sp.add_argument("--ni-noise", choices=("known", "learned"), default=d.ni_noise)

    def protocol(sp):
        sp.add_argument("--splits", type=int, default=d.splits)
        sp.add_argument("--validation-fraction", type=float, default=d.validation_fraction)
        sp.add_argument("--snr-thresholds", type=_thresholds, default=d.snr_thresholds,
                        help="comma-separated SNR thresholds in dB")
        sp.add_argument("--prob-threshold", type=float, default=d.prob_threshold)

    sp = sub.add_parser("simulate", help="draw a synthetic mission")
    common(sp)
    sp.add_argument("--preset", default=d.preset, help=f"one of {', '.join(PRESETS)}")
    sp.add_argument("--mission-config", help="key = value mission file (overrides --preset)")
    sp.add_argument("--n-events", type=int)

    sp = sub.add_parser("train", help="fit one model on all events")
    common(sp)
    training(sp)
    sp.add_argument("--method", required=True, help=f"one of {', '.join(METHODS)}")

    sp = sub.add_parser("evaluate", help="compare methods over stratified splits")
    common(sp)
    training(sp)
    protocol(sp)
    sp.add_argument("--methods", default=",".join(METHODS), help="comma-separated methods")

    sp = sub.add_parser("sweep", help="mean ratio as a function of the decision threshold")
    common(sp)
    training(sp)
    protocol(sp)
    sp.add_argument("--method", required=True)

    sp = sub.add_parser("heatmap", help="predict over a receiver grid for a fixed transmitter")
    common(sp)
    sp.add_argument("--model", required=True, help="model JSON written by train")
    sp.add_argument("--tx", type=_floats(2), default=d.tx, help="transmitter x,y")
    sp.add_argument("--region", type=_floats(4), default=d.region,
                    help="x_min,x_max,y_min,y_max of the receiver grid")
    sp.add_argument("--resolution", type=_resolution, default=d.resolution,
                    help="N or NXxNY grid points")
    sp.add_argument("--vmin", type=float, help="colour ramp lower bound (regression)")
    sp.add_argument("--vmax", type=float, help="colour ramp upper bound (regression)")
    return p


def config_from_args(ns, env=None) -> RunConfig:
    env = os.environ if env is None else env
    kw = {k: v for k, v in vars(ns).items() if k not in ("verbose", "method") and v is not None}
    if getattr(ns, "method", None) is not None:
        kw["methods"] = (ns.method.upper(),)
    elif isinstance(kw.get("methods"), str):
        kw["methods"] = tuple(m.strip().upper() for m in kw["methods"].split(",") if m.strip())
    kw["out_dir"] = ns.out_dir or env.get(OUT_ENV) or DEFAULT_OUT
    known = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in kw.items() if k in known})


def _origin(exc):
    """Dotted name of the innermost package module the exception passed through."""
    name = __name__
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith(__package__ + "."):
            name = mod
    return name


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        paths = run(config_from_args(ns))
    except CommapError as exc:
        code, kind = _classify(exc)
        print(f"{kind} [{_origin(exc)}]: {exc}", file=sys.stderr)
        return code
    for path in paths:
        print(path)
    return EXIT_OK


def _classify(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config error"
    if isinstance(exc, DataError):
        return EXIT_DATA, "data error"
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL, "numerical failure"
    return EXIT_OTHER, "error"


if __name__ == "__main__":
    sys.exit(main())
