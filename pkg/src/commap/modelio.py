"""Versioned, self-describing JSON serialization of fitted models.

A model file stores the model kind, the parameter groups (flat values plus
per-group shapes, in layout order), the input/target standardizer, the kernel
settings and the training configuration. Dense models are re-conditioned on
load from their stored training data and hyperparameters, which is
deterministic. Files from another format version are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import Standardizer
from .errors import DataError
from .kernel import KernelParams, kernel_matrix
from .laplace_gpc import GpcConfig, LaplaceGpcModel, find_mode
from .noisy_input import NiConfig, NiModel
from .optim import ParamVector, TrainingTrace
from .regression import GprModel, SvgprModel, _condition_gpr
from .svgpc import SparseConfig, SvgpcModel

FORMAT = "commap-model"
VERSION = 1

_KINDS = {GprModel: "GPR", SvgprModel: "SVGPR", LaplaceGpcModel: "GPC",
          SvgpcModel: "SVGPC", NiModel: "NI-NN"}


def _params_to_dict(pv: ParamVector):
    return {"groups": [{"name": n, "shape": list(pv.shapes[n]),
                        "values": pv.group(n).ravel().tolist()} for n in pv.names]}


def _params_from_dict(d):
    return ParamVector.from_groups(
        {g["name"]: np.asarray(g["values"], dtype=float).reshape(g["shape"]) for g in d["groups"]})


def _config_from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise DataError(f"unknown {cls.__name__} fields in model file: {sorted(unknown)}")
    return cls(**d)


def model_to_dict(model, meta=None) -> dict:
    """Plain-JSON description of ``model``; ``meta`` is stored verbatim."""
    kind = _KINDS.get(type(model))
    if kind is None:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    out = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": dict(meta or {}),
           "standardizer": model.standardizer.to_dict()}
    if kind in ("GPR", "GPC"):
        out["kernel"] = model.params.to_dict()
        out["X_train"] = model.X_train.tolist()
        out["y_train"] = model.y_train.tolist()
        if kind == "GPR":
            out["lml_trace"] = list(model.lml_trace)
        else:
            out["gh_nodes"] = model.gh_nodes
    else:
        out["kernel"] = model.kernel.to_dict()
        out["params"] = _params_to_dict(model.params)
        out["config"] = asdict(model.config)
        out["trace"] = model.trace.to_dict()
    return out


def model_from_dict(d):
    if d.get("format") != FORMAT:
        raise DataError("not a model file")
    if d.get("version") != VERSION:
        raise DataError(f"model format version {d.get('version')} is not supported "
                        f"(expected {VERSION})")
    kind = d["kind"]
    t = Standardizer.from_dict(d["standardizer"])
    if kind == "GPR":
        X, y = np.asarray(d["X_train"], dtype=float), np.asarray(d["y_train"], dtype=float)
        return _condition_gpr(X, y, t.transform_x(X), t.transform_y(y),
                              KernelParams.from_dict(d["kernel"]), t, d["lml_trace"])
    if kind == "GPC":
        X, y = np.asarray(d["X_train"], dtype=float), np.asarray(d["y_train"], dtype=float)
        p = KernelParams.from_dict(d["kernel"])
        cfg = GpcConfig()
        f, W, L, ev = find_mode(kernel_matrix(t.transform_x(X), None, p), y, None,
                                cfg.newton_tol, cfg.newton_maxiter)
        return LaplaceGpcModel(X, y, p, f, W, L, t, d["gh_nodes"], ev)
    params = _params_from_dict(d["params"])
    trace = TrainingTrace.from_dict(d["trace"])
    if kind == "SVGPC":
        return SvgpcModel(params, t, _config_from_dict(SparseConfig, d["config"]), trace)
    if kind == "SVGPR":
        return SvgprModel(params, t, _config_from_dict(SparseConfig, d["config"]), trace)
    if kind == "NI-NN":
        return NiModel(params, t, _config_from_dict(NiConfig, d["config"]), trace)
    raise DataError(f"unknown model kind {kind!r}")


def dumps(obj) -> str:
    """Canonical JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def save_model(model, path, meta=None):
    Path(path).write_text(dumps(model_to_dict(model, meta)), encoding="utf-8")


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such model file: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid model file ({exc})") from None
    return model_from_dict(d)


def read_meta(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8")).get("meta", {})
