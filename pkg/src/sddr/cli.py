"""Batch command-line front-end.

    sddr fit|predict|cv|ensemble|inspect --config <path> [--out <dir>] [--seed <u64>]

One JSON config file drives every command.  Outputs are written
atomically (temp file + rename) into the output directory; every
successful run writes summary.json last, so its presence signals
completion.  Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure; failures print one machine-readable JSON line on stderr.

Float cells in CSV outputs are formatted with repr(), which round-trips
binary64 exactly: rereading and re-emitting a CSV is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
import tempfile

import numpy as np
import pandas as pd

from . import __version__
from .bundle import load_model, save_model
from .basis import evaluate_partial_effect
from .errors import ConfigError, DataError, NumericError, SddrError
from .formula import term_variables
from .model import Model, ModelSpec, OrthogOptions, PenaltyOptions, build, ensemble, formula_set
from .training import TrainConfig, cross_validate, fit

_TOP_KEYS = {"data", "family", "formulas", "networks", "mapping", "train",
             "penalty", "orthog", "output_dir", "seed", "cv", "ensemble",
             "predict", "inspect"}
_DATA_KEYS = {"csv_path", "response", "response_transform"}
_PENALTY_KEYS = {"df_default", "hat1", "sp_scale"}
_ORTHOG_KEYS = {"orthogonalize", "identify_intercept"}
_TRAIN_KEYS = {"epochs", "batch_size", "optimizer", "lr", "decay", "momentum",
               "beta1", "beta2", "rho", "eps", "validation_split",
               "early_stopping", "patience", "shuffle", "seed", "sp_scale"}
_PREDICT_KEYS = {"model", "newdata", "statistic", "probs"}
_ENSEMBLE_KEYS = {"n_ensemble", "seeds", "predictions"}
_CV_KEYS = {"folds"}
_INSPECT_KEYS = {"model"}


# ---------------------------------------------------------------------------
# atomic output helpers


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_text(doc) -> str:
    def fallback(obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        raise TypeError(f"not JSON-serializable: {obj!r}")

    return json.dumps(doc, indent=2, default=fallback) + "\n"


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([c if isinstance(c, str) else _fmt_cell(c) for c in row])
    return buf.getvalue()


def _sanitize(name: str) -> str:
    return re.sub(r"[^0-9A-Za-z]+", "_", name).strip("_")


# ---------------------------------------------------------------------------
# config handling


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {unknown}")


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    for key, allowed in (("data", _DATA_KEYS), ("penalty", _PENALTY_KEYS),
                         ("orthog", _ORTHOG_KEYS), ("train", _TRAIN_KEYS),
                         ("predict", _PREDICT_KEYS), ("ensemble", _ENSEMBLE_KEYS),
                         ("cv", _CV_KEYS), ("inspect", _INSPECT_KEYS)):
        if key in cfg:
            if not isinstance(cfg[key], dict):
                raise ConfigError(f"config section {key!r} must be an object")
            _check_keys(cfg[key], allowed, key)
    return cfg


def _model_spec(cfg: dict) -> ModelSpec:
    if "formulas" not in cfg or not cfg["formulas"]:
        raise ConfigError("config needs a non-empty 'formulas' object")
    if not isinstance(cfg["formulas"], dict):
        raise ConfigError("'formulas' must map predictor names to formula strings")
    pen = cfg.get("penalty", {})
    orth = cfg.get("orthog", {})
    return ModelSpec(
        formulas=formula_set(cfg["formulas"], cfg.get("mapping")),
        family=cfg.get("family", "normal"),
        networks=cfg.get("networks", {}),
        penalty=PenaltyOptions(
            df_default=float(pen.get("df_default", 10.0)),
            hat1=bool(pen.get("hat1", False)),
            sp_scale=None if pen.get("sp_scale") is None else float(pen["sp_scale"]),
        ),
        orthog=OrthogOptions(
            orthogonalize=bool(orth.get("orthogonalize", True)),
            identify_intercept=bool(orth.get("identify_intercept", False)),
        ),
    )


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    doc = dict(cfg.get("train", {}))
    doc.setdefault("seed", seed)
    config = TrainConfig(**doc)
    config.validate()
    return config


def _used_variables(spec: ModelSpec) -> list[str]:
    seen: list[str] = []
    for pf in spec.formulas.formulas:
        for term in pf.terms:
            for v in term_variables(term):
                if v not in seen:
                    seen.append(v)
    return seen


def _read_table(csv_path: str, columns: list[str], response: str | None):
    """CSV -> (table dict, response vector or None); NA rows dropped."""
    try:
        frame = pd.read_csv(csv_path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {csv_path}") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"cannot parse {csv_path}: {exc}") from None
    needed = list(columns)
    if response is not None and response not in needed:
        needed.append(response)
    missing = sorted(set(needed) - set(frame.columns))
    if missing:
        raise DataError(f"column(s) {missing} not in {csv_path}")
    frame = frame[needed]
    before = len(frame)
    frame = frame.dropna()
    dropped = before - len(frame)
    if dropped:
        print(f"note: dropped {dropped} row(s) with missing values", file=sys.stderr)
    if len(frame) == 0:
        raise DataError(f"no complete rows left in {csv_path}")
    table = {}
    for name in needed:
        col = frame[name].to_numpy()
        if col.dtype.kind in "ifub":
            table[name] = col.astype(np.float64)
        else:
            table[name] = np.array([str(v) for v in col])
    y = None
    if response is not None:
        if table[response].dtype.kind != "f":
            raise DataError(f"response column {response!r} must be numeric")
        y = table[response]
    return table, y


def _response(cfg: dict):
    data_cfg = cfg.get("data")
    if not data_cfg:
        raise ConfigError("config needs a 'data' section with csv_path and response")
    if "csv_path" not in data_cfg or "response" not in data_cfg:
        raise ConfigError("'data' needs csv_path and response")
    transform = data_cfg.get("response_transform", "none")
    if transform not in ("none", "log"):
        raise ConfigError(f"unknown response_transform {transform!r}")
    return data_cfg["csv_path"], data_cfg["response"], transform


def _apply_transform(y: np.ndarray, transform: str) -> np.ndarray:
    if transform == "log":
        if np.any(y <= 0):
            bad = int(np.flatnonzero(y <= 0)[0])
            raise DataError(f"log response transform needs positive values (row {bad})")
        return np.log(y)
    return y


def _fit_inputs(cfg: dict, seed: int):
    spec = _model_spec(cfg)
    csv_path, response, transform = _response(cfg)
    table, y = _read_table(csv_path, _used_variables(spec), response)
    y = _apply_transform(y, transform)
    config = _train_config(cfg, seed)
    return spec, table, y, config


def _n_workers(n_tasks: int) -> int:
    raw = os.environ.get("SDDR_THREADS", "")
    if not raw:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"SDDR_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_tasks))


# ---------------------------------------------------------------------------
# artifact writers


def _write_history(path: str, history) -> None:
    rows = []
    for e, loss in enumerate(history.loss):
        val = history.val_loss[e] if history.val_loss is not None else None
        rows.append([e + 1, loss, val])
    _atomic_write(path, _csv_text(["epoch", "loss", "val_loss"], rows))


def _coefficients_doc(model: Model) -> dict:
    linear = model.coef("linear")
    smooth = model.coef("smooth")
    return {
        "linear": linear,
        "smooth": {p: {t: [float(v) for v in vec] for t, vec in entry.items()}
                   for p, entry in smooth.items()},
        "smoothing_parameters": model.smoothing_parameters(),
    }


def _write_partial_effects(out_dir: str, model: Model) -> list[str]:
    written: list[str] = []
    taken: set[str] = set()
    sub = os.path.join(out_dir, "partial_effects")
    for binding in model.bindings:
        for bt in binding.terms:
            if bt.kind not in ("smooth", "tensor"):
                continue
            eff = evaluate_partial_effect(bt.block, bt.coef(model.params))
            param = model.family.param_names[binding.param_idx[0]]
            stem = f"{param}_{_sanitize(bt.term_id)}"
            name = stem
            k = 1
            while name in taken:
                k += 1
                name = f"{stem}_{k}"
            taken.add(name)
            header = list(bt.block.var_names) + ["effect"]
            cols = [eff.grid[v] for v in bt.block.var_names] + [eff.values]
            rows = list(zip(*cols))
            path = os.path.join(sub, f"{name}.csv")
            _atomic_write(path, _csv_text(header, rows))
            written.append(os.path.relpath(path, out_dir))
    return written


def _final_nll(model: Model) -> float:
    per_obs, total = model.log_score()
    return -total / per_obs.shape[0]


# ---------------------------------------------------------------------------
# commands


def _cmd_fit(cfg: dict, out_dir: str, seed: int) -> None:
    spec, table, y, config = _fit_inputs(cfg, seed)
    model = build(y, table, spec, seed=seed)
    fit(model, config)
    model.save(os.path.join(out_dir, "model.json"))
    _write_history(os.path.join(out_dir, "history.csv"), model.history)
    _atomic_write(os.path.join(out_dir, "coefficients.json"),
                  _json_text(_coefficients_doc(model)))
    effects = _write_partial_effects(out_dir, model)
    summary = {
        "command": "fit",
        "n": model.n,
        "K": model.n_params,
        "seed": seed,
        "family": model.family.name,
        "final_loss": model.history.loss[-1],
        "final_val_loss": (model.history.val_loss[-1]
                           if model.history.val_loss is not None else None),
        "final_nll": _final_nll(model),
        "best_epoch": model.history.best_epoch,
        "stop_epoch": model.history.stop_epoch,
        "partial_effects": effects,
        "version": __version__,
    }
    _atomic_write(os.path.join(out_dir, "summary.json"), _json_text(summary))


def _cmd_predict(cfg: dict, out_dir: str, seed: int) -> None:
    pcfg = cfg.get("predict")
    if not pcfg or "model" not in pcfg:
        raise ConfigError("predict needs config section 'predict' with a 'model' path")
    try:
        model = load_model(pcfg["model"])
    except FileNotFoundError:
        raise DataError(f"model bundle not found: {pcfg['model']}") from None
    newdata_path = pcfg.get("newdata")
    if newdata_path is None:
        newdata_path = (cfg.get("data") or {}).get("csv_path")
    if newdata_path is None:
        raise ConfigError("predict needs 'predict.newdata' or 'data.csv_path'")
    table, _ = _read_table(newdata_path, _used_variables(model.spec), None)
    statistic = pcfg.get("statistic", "mean")
    probs = pcfg.get("probs")

    header: list[str]
    columns: list[np.ndarray]
    if statistic == "quantile":
        if not probs:
            raise ConfigError("statistic 'quantile' needs 'probs'")
        qs = model.predict(table, "quantile", probs=probs)
        header = [f"q{float(p):g}" for p in probs]
        columns = [qs[:, j] for j in range(qs.shape[1])]
    elif statistic in ("mean", "stddev"):
        header = [statistic]
        columns = [model.predict(table, statistic)]
    elif statistic == "density_grid":
        header = ["mean"]
        columns = [model.predict(table, "mean")]
        values, dens = model.predict(table, "density_grid")
        rows = []
        for i in range(values.shape[0]):
            for v, d in zip(values[i], dens[i]):
                rows.append([i + 1, v, d])
        _atomic_write(os.path.join(out_dir, "density_grid.csv"),
                      _csv_text(["row", "value", "pdf"], rows))
    else:
        raise ConfigError(f"unknown statistic {statistic!r}")
    n = columns[0].shape[0]
    rows = list(zip(*columns))
    _atomic_write(os.path.join(out_dir, "predictions.csv"), _csv_text(header, rows))
    summary = {"command": "predict", "n": n, "statistic": statistic,
               "model": pcfg["model"], "seed": seed, "version": __version__}
    _atomic_write(os.path.join(out_dir, "summary.json"), _json_text(summary))


def _cmd_cv(cfg: dict, out_dir: str, seed: int) -> None:
    cv_cfg = cfg.get("cv")
    if not cv_cfg or "folds" not in cv_cfg:
        raise ConfigError("cv needs config section 'cv' with 'folds'")
    folds = cv_cfg["folds"]
    if not isinstance(folds, int):
        raise ConfigError("cv.folds must be an integer fold count")
    spec, table, y, config = _fit_inputs(cfg, seed)
    result = cross_validate(y, table, spec, folds, config,
                            n_workers=_n_workers(folds))
    rows = []
    for i, h in enumerate(result.histories):
        for e, loss in enumerate(h.loss):
            rows.append([i + 1, e + 1, loss, h.val_loss[e]])
    _atomic_write(os.path.join(out_dir, "cv_history.csv"),
                  _csv_text(["fold", "epoch", "loss", "val_loss"], rows))
    cv_summary = {
        "folds": len(result.histories),
        "best_epoch": result.best_epoch,
        "mean_loss": [float(v) for v in result.mean_loss],
        "mean_val_loss": [float(v) for v in result.mean_val_loss],
        "final_val_losses": [float(v) for v in result.final_val_losses],
    }
    _atomic_write(os.path.join(out_dir, "cv_summary.json"), _json_text(cv_summary))
    summary = {"command": "cv", "n": y.shape[0], "folds": len(result.histories),
               "best_epoch": result.best_epoch, "seed": seed, "version": __version__}
    _atomic_write(os.path.join(out_dir, "summary.json"), _json_text(summary))


def _cmd_ensemble(cfg: dict, out_dir: str, seed: int) -> None:
    ens_cfg = cfg.get("ensemble")
    if not ens_cfg or "n_ensemble" not in ens_cfg:
        raise ConfigError("ensemble needs config section 'ensemble' with 'n_ensemble'")
    n_members = ens_cfg["n_ensemble"]
    if not isinstance(n_members, int):
        raise ConfigError("ensemble.n_ensemble must be an integer")
    spec, table, y, config = _fit_inputs(cfg, seed)
    ens = ensemble(y, table, spec, n_members, config,
                   seeds=ens_cfg.get("seeds"), n_workers=_n_workers(n_members))
    member_files = []
    for i, member in enumerate(ens.members):
        name = f"member_{i + 1}.json"
        save_model(member, os.path.join(out_dir, name))
        member_files.append(name)
    _atomic_write(os.path.join(out_dir, "ensemble.json"), _json_text({
        "n_ensemble": n_members,
        "seeds": [int(s) for s in ens.seeds],
        "weights": [float(w) for w in ens.weights],
        "members": member_files,
    }))
    if ens_cfg.get("predictions"):
        mix = ens.get_distribution(table)
        rows = list(zip(mix.mean(), mix.stddev()))
        _atomic_write(os.path.join(out_dir, "ensemble_predictions.csv"),
                      _csv_text(["mean", "stddev"], rows))
    summary = {"command": "ensemble", "n": y.shape[0], "n_ensemble": n_members,
               "seed": seed, "version": __version__}
    _atomic_write(os.path.join(out_dir, "summary.json"), _json_text(summary))


def _cmd_inspect(cfg: dict, out_dir: str, seed: int) -> None:
    icfg = cfg.get("inspect") or cfg.get("predict") or {}
    if "model" not in icfg:
        raise ConfigError("inspect needs config section 'inspect' with a 'model' path")
    try:
        model = load_model(icfg["model"])
    except FileNotFoundError:
        raise DataError(f"model bundle not found: {icfg['model']}") from None
    terms = []
    for binding in model.bindings:
        for bt in binding.terms:
            entry = {
                "formula": binding.name,
                "parameters": [k + 1 for k in bt.param_idx],
                "term": bt.term_id,
                "kind": bt.kind,
                "n_coef": len(bt.coef_names) if bt.coef_names else None,
            }
            if bt.block is not None:
                entry["lambda"] = bt.block.lam
                entry["df_target"] = bt.block.df_target
            if bt.oz is not None:
                entry["orthogonalized_against"] = [s.origin for s in bt.oz.sources]
            terms.append(entry)
    doc = {
        "family": model.family.name,
        "parameters": list(model.family.param_names),
        "n_obs": model.n,
        "seed": model.seed,
        "formulas": {name: (pf.source or None)
                     for name, pf in zip(model.spec.formulas.names,
                                         model.spec.formulas.formulas)},
        "terms": terms,
        "history": None if model.history is None else {
            "epochs_run": model.history.stop_epoch,
            "best_epoch": model.history.best_epoch,
            "final_loss": model.history.loss[-1] if model.history.loss else None,
        },
    }
    _atomic_write(os.path.join(out_dir, "inspect.json"), _json_text(doc))
    print(f"family: {doc['family']}  parameters: {', '.join(doc['parameters'])}")
    for entry in terms:
        bits = f"  [{entry['formula']}] {entry['term']} ({entry['kind']})"
        if entry.get("lambda") is not None:
            bits += f" lambda={entry['lambda']:.6g}"
        print(bits)
    summary = {"command": "inspect", "model": icfg["model"], "seed": seed,
               "version": __version__}
    _atomic_write(os.path.join(out_dir, "summary.json"), _json_text(summary))


_COMMANDS = {
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "cv": _cmd_cv,
    "ensemble": _cmd_ensemble,
    "inspect": _cmd_inspect,
}


# ---------------------------------------------------------------------------
# entry point


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="sddr",
        description="Semi-structured distributional regression over CSV data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        cfg = _load_config(args.config)
        out_dir = args.out or cfg.get("output_dir")
        if not out_dir:
            raise ConfigError("no output directory (config output_dir or --out)")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        if seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        os.makedirs(out_dir, exist_ok=True)
        _COMMANDS[args.command](cfg, out_dir, seed)
        return 0
    except ConfigError as exc:  # FormulaError included
        _report("config", exc)
        return 2
    except DataError as exc:
        _report("data", exc)
        return 3
    except NumericError as exc:
        _report("numeric", exc)
        return 4
    except SddrError as exc:
        _report("config", exc)
        return 2
    except TypeError as exc:
        # bad field types in the train section surface here via TrainConfig(**doc)
        _report("config", ConfigError(str(exc)))
        return 2


def _report(kind: str, exc: Exception) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
