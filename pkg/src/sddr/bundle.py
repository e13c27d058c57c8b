"""Model persistence: one self-contained JSON bundle per model.

Every float array is stored exactly as base64-encoded little-endian
float64 bytes; scalar floats ride as JSON numbers (repr round-trip, also
exact).  A loaded model predicts and reports but carries no training
data: fitting, fitted(), and the no-argument log_score refuse with a
clear error.  Custom response functions and custom penalties are
callables and cannot be saved.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile

import numpy as np

from .basis import DesignBlock, KnotVector, MarginSpec
from .errors import ConfigError
from .families import make_family
from .formula import FormulaSet, parse_formula, canonical_format
from .graph import Dense, Dropout, NetworkSpec, ParamStore
from .model import (
    BoundTerm,
    ConstraintSource,
    FormulaBinding,
    MaterializedOz,
    Model,
    ModelSpec,
    OrthogOptions,
    PenaltyOptions,
)
from .training import FitHistory

SCHEMA_VERSION = 1


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON-serializable: {obj!r}")


# ---------------------------------------------------------------------------
# array + small-structure codecs


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, np.float64)
    raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(raw).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).copy()


def _encode_layers(layers) -> list[dict]:
    out = []
    for layer in layers:
        if isinstance(layer, Dense):
            out.append({"kind": "dense", "units": layer.units,
                        "activation": layer.activation, "use_bias": layer.use_bias})
        elif isinstance(layer, Dropout):
            out.append({"kind": "dropout", "rate": layer.rate})
        elif isinstance(layer, dict):
            out.append(dict(layer))
        else:
            raise ConfigError(f"cannot serialize layer {layer!r}")
    return out


def _decode_layers(docs) -> tuple:
    layers = []
    for doc in docs:
        if doc.get("kind", "dense") == "dense":
            layers.append(Dense(int(doc["units"]), doc.get("activation", "linear"),
                                bool(doc.get("use_bias", True))))
        else:
            layers.append(Dropout(float(doc["rate"])))
    return tuple(layers)


def _encode_block(block: DesignBlock) -> dict:
    return {
        "penalty": encode_array(block.penalty),
        "Z": encode_array(block.Z),
        "lam": block.lam,
        "df_target": block.df_target,
        "term_id": block.term_id,
        "coef_names": list(block.coef_names),
        "var_names": list(block.var_names),
        "ranges": [[lo, hi] for lo, hi in block.ranges],
        "margins": [
            {"var": m.var, "knots": encode_array(m.knots.knots), "degree": m.knots.degree}
            for m in block.margins
        ],
        "p": block.n_coef,
    }


def _decode_block(doc: dict) -> DesignBlock:
    margins = tuple(
        MarginSpec(m["var"], KnotVector(decode_array(m["knots"]), int(m["degree"])))
        for m in doc["margins"]
    )
    return DesignBlock(
        X=np.empty((0, int(doc["p"]))),
        penalty=decode_array(doc["penalty"]),
        Z=decode_array(doc["Z"]),
        lam=float(doc["lam"]),
        df_target=None if doc["df_target"] is None else float(doc["df_target"]),
        term_id=doc["term_id"],
        coef_names=tuple(doc["coef_names"]),
        var_names=tuple(doc["var_names"]),
        ranges=tuple((float(lo), float(hi)) for lo, hi in doc["ranges"]),
        margins=margins,
    )


def _encode_rebuild(rebuild: dict) -> dict:
    kind = rebuild["kind"]
    if kind in ("intercept", "network"):
        return {"kind": kind}
    if kind == "columns":
        return {"kind": "columns", "vars": list(rebuild["vars"]),
                "levels": rebuild["levels"], "drop_first": rebuild["drop_first"]}
    if kind == "smooth":
        return {"kind": "smooth", "block": _encode_block(rebuild["block"])}
    if kind == "offset":
        return {"kind": "offset", "var": rebuild["var"]}
    raise ConfigError(f"cannot serialize rebuild kind {kind!r}")


def _decode_rebuild(doc: dict) -> dict:
    kind = doc["kind"]
    if kind == "smooth":
        return {"kind": "smooth", "block": _decode_block(doc["block"])}
    if kind == "columns":
        return {"kind": "columns", "vars": list(doc["vars"]),
                "levels": {k: (None if v is None else list(v)) for k, v in doc["levels"].items()},
                "drop_first": bool(doc["drop_first"])}
    if kind == "offset":
        return {"kind": "offset", "var": doc["var"]}
    return {"kind": kind}


# ---------------------------------------------------------------------------
# whole-model codec


def _check_serializable(model: Model) -> None:
    if model.custom_penalty is not None:
        raise ConfigError("models with a custom penalty callback cannot be saved")
    default = make_family(model.family.name)
    if model.family.response_fns != default.response_fns:
        raise ConfigError(
            "models with custom response functions cannot be saved; "
            "refit with the stock family to persist"
        )


def _encode_term(bt: BoundTerm) -> dict:
    doc = {
        "kind": bt.kind,
        "term_id": bt.term_id,
        "param_idx": list(bt.param_idx),
        "coef_names": list(bt.coef_names),
        "coef_key": bt.coef_key,
        "u_key": bt.u_key,
        "v_key": bt.v_key,
        "la": bt.la,
        "rebuild": _encode_rebuild(bt.rebuild),
        "block": None if bt.block is None else _encode_block(bt.block),
        "net": None,
        "net_prefix": bt.net_prefix,
        "oz": None,
    }
    if bt.net is not None:
        doc["net"] = {"name": bt.net.name, "inputs": list(bt.net.inputs),
                      "layers": _encode_layers(bt.net.layers)}
    if bt.oz is not None:
        doc["oz"] = [{"origin": src.origin, "rebuild": _encode_rebuild(src.rebuild)}
                     for src in bt.oz.sources]
    return doc


def _decode_term(doc: dict) -> BoundTerm:
    rebuild = _decode_rebuild(doc["rebuild"])
    block = None
    if doc["block"] is not None:
        # the rebuild's block and bt.block are the same object in a live model
        block = rebuild["block"] if rebuild.get("kind") == "smooth" else _decode_block(doc["block"])
    net = None
    if doc["net"] is not None:
        net = NetworkSpec(doc["net"]["name"], tuple(doc["net"]["inputs"]),
                          _decode_layers(doc["net"]["layers"]))
        net.validate()
    oz = None
    if doc["oz"] is not None:
        sources = [
            ConstraintSource(s["origin"], None, None, _decode_rebuild(s["rebuild"]))
            for s in doc["oz"]
        ]
        oz = MaterializedOz(sources)
    return BoundTerm(
        term=None,
        term_id=doc["term_id"],
        kind=doc["kind"],
        param_idx=tuple(int(i) for i in doc["param_idx"]),
        X=None,
        block=block,
        coef_names=tuple(doc["coef_names"]),
        coef_key=doc["coef_key"],
        u_key=doc["u_key"],
        v_key=doc["v_key"],
        la=float(doc["la"]),
        net=net,
        net_prefix=doc["net_prefix"],
        oz=oz,
        rebuild=rebuild,
    )


def model_to_bundle(model: Model) -> dict:
    _check_serializable(model)
    fs = model.spec.formulas
    sources = [pf.source if pf.source else canonical_format(pf) for pf in fs.formulas]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "family": model.family.name,
        "n_obs": model.n,
        "seed": model.seed,
        "formulas": {
            "names": list(fs.names),
            "sources": sources,
            "mapping": None if fs.mapping is None else [list(e) for e in fs.mapping],
        },
        "networks": {name: _encode_layers(layers)
                     for name, layers in model.spec.networks.items()},
        "penalty": {
            "df_default": model.spec.penalty.df_default,
            "hat1": model.spec.penalty.hat1,
            "sp_scale": model.spec.penalty.sp_scale,
        },
        "orthog": {
            "orthogonalize": model.spec.orthog.orthogonalize,
            "identify_intercept": model.spec.orthog.identify_intercept,
        },
        "params": {name: encode_array(val) for name, val in model.params.values.items()},
        "bindings": [
            {"name": b.name, "param_idx": list(b.param_idx),
             "terms": [_encode_term(bt) for bt in b.terms]}
            for b in model.bindings
        ],
        "history": None,
    }
    if model.history is not None:
        h = model.history
        doc["history"] = {"loss": list(h.loss), "val_loss": h.val_loss,
                          "best_epoch": h.best_epoch, "stop_epoch": h.stop_epoch}
    return doc


def bundle_to_model(doc: dict) -> Model:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported bundle schema version {version!r}")
    fdoc = doc["formulas"]
    formulas = tuple(parse_formula(src) for src in fdoc["sources"])
    mapping = None if fdoc["mapping"] is None else tuple(tuple(e) for e in fdoc["mapping"])
    fs = FormulaSet(tuple(fdoc["names"]), formulas, mapping)
    networks = {name: list(_decode_layers(layers))
                for name, layers in doc["networks"].items()}
    spec = ModelSpec(
        formulas=fs,
        family=doc["family"],
        networks=networks,
        penalty=PenaltyOptions(
            df_default=float(doc["penalty"]["df_default"]),
            hat1=bool(doc["penalty"]["hat1"]),
            sp_scale=(None if doc["penalty"]["sp_scale"] is None
                      else float(doc["penalty"]["sp_scale"])),
        ),
        orthog=OrthogOptions(
            orthogonalize=bool(doc["orthog"]["orthogonalize"]),
            identify_intercept=bool(doc["orthog"]["identify_intercept"]),
        ),
    )
    params = ParamStore()
    for name, arr in doc["params"].items():
        params.add(name, decode_array(arr))
    bindings = [
        FormulaBinding(b["name"], None, tuple(int(i) for i in b["param_idx"]),
                       [_decode_term(t) for t in b["terms"]])
        for b in doc["bindings"]
    ]
    model = Model(spec, make_family(doc["family"]), bindings, params,
                  int(doc["n_obs"]), None, None, int(doc["seed"]))
    if doc.get("history"):
        h = doc["history"]
        model.history = FitHistory(list(h["loss"]), h["val_loss"],
                                   h["best_epoch"], h["stop_epoch"])
    return model


def save_model(model: Model, path) -> None:
    doc = model_to_bundle(model)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, default=_json_default)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> Model:
    with open(os.fspath(path)) as fh:
        doc = json.load(fh)
    return bundle_to_model(doc)
