"""Model assembly: formulas + data + family -> trainable/predictable model.

Each formula is bound to the data once: structured terms become design
matrices with named coefficients (smooths get their smoothing parameter
from the df calibration here), network terms get freshly initialized
weights, and orthogonalization plans are materialized into concrete
constraint column sets.  The bound model exposes the batch forward/backward
interface the trainer drives and the prediction/statistics interface.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import data as data_mod
from .basis import (
    DesignBlock,
    PartialEffect,
    SmoothConfig,
    build_smooth,
    calibrate_block,
    design_for_values,
    evaluate_partial_effect,
    tensor_product,
)
from .errors import ConfigError, DataError, NumericError
from .families import FamilySpec, FittedDistribution, MixtureDistribution, make_family
from .formula import (
    FormulaSet,
    Intercept,
    Lasso,
    Linear,
    NetworkTerm,
    Offset,
    Orthogonalized,
    ParameterFormula,
    Ridge,
    Smooth,
    TensorSmooth,
    TermSpec,
    format_term,
    parse_formula,
)
from .graph import Dense, Dropout, NetworkSpec, ParamStore, forward, init_network_params, penultimate_features
from .orthogonal import build_oz_plans, orthonormal_range

# minimal cubic margin honoring the degree+2 distinct-knot floor
DEFAULT_TENSOR_K = 7


@dataclass(frozen=True)
class PenaltyOptions:
    df_default: float = 10.0
    hat1: bool = False
    sp_scale: float | None = None  # None -> 1/n at fit time


@dataclass(frozen=True)
class OrthogOptions:
    orthogonalize: bool = True
    identify_intercept: bool = False


@dataclass(frozen=True)
class ModelSpec:
    formulas: FormulaSet
    family: str | FamilySpec = "normal"
    networks: dict[str, tuple] = field(default_factory=dict)
    penalty: PenaltyOptions = field(default_factory=PenaltyOptions)
    orthog: OrthogOptions = field(default_factory=OrthogOptions)
    custom_penalty: tuple[Callable, Callable] | None = None  # (value, grad) on params


def formula_set(named, mapping=None) -> FormulaSet:
    """Build a FormulaSet from {name: formula-string} (order = parameter order).

    ``mapping`` optionally lists, per formula, the 1-based parameter
    indices it contributes to.
    """
    if isinstance(named, dict):
        items = list(named.items())
    else:
        items = [(name, src) for name, src in named]
    names = tuple(str(n) for n, _ in items)
    formulas = tuple(f if isinstance(f, ParameterFormula) else parse_formula(f) for _, f in items)
    map_t = None
    if mapping is not None:
        map_t = tuple(tuple(int(i) for i in entry) for entry in mapping)
    return FormulaSet(names, formulas, map_t)


# ---------------------------------------------------------------------------
# bound terms


@dataclass
class ConstraintSource:
    origin: str  # "manual" | "automatic" | "intercept"
    spec: TermSpec
    X_train: np.ndarray | None
    rebuild: dict

    def design_for(self, table, n):
        X, _ = _design_from_rebuild(self.rebuild, table, n)
        return X


@dataclass
class MaterializedOz:
    sources: list[ConstraintSource]

    @property
    def n_columns(self) -> int:
        return sum(src.X_train.shape[1] for src in self.sources)

    def rows(self, idx: np.ndarray) -> np.ndarray:
        return np.hstack([src.X_train[idx] for src in self.sources])

    def for_table(self, table, n) -> np.ndarray:
        return np.hstack([src.design_for(table, n) for src in self.sources])


@dataclass
class BoundTerm:
    term: TermSpec
    term_id: str
    kind: str  # intercept | linear | ridge | lasso | smooth | tensor | offset | network
    param_idx: tuple[int, ...]  # 0-based distributional parameters fed
    X: np.ndarray | None = None
    block: DesignBlock | None = None
    coef_names: tuple[str, ...] = ()
    coef_key: str | None = None
    u_key: str | None = None
    v_key: str | None = None
    la: float = 0.0
    offset_values: np.ndarray | None = None
    net: NetworkSpec | None = None
    net_prefix: str | None = None
    net_input: np.ndarray | None = None
    oz: MaterializedOz | None = None
    rebuild: dict = field(default_factory=dict)

    # -- coefficients -------------------------------------------------------

    def coef(self, params: ParamStore) -> np.ndarray:
        if self.kind == "lasso":
            return params.values[self.u_key] * params.values[self.v_key]
        return params.values[self.coef_key]

    # -- penalties ----------------------------------------------------------

    def penalty_value(self, params: ParamStore) -> float:
        if self.kind in ("smooth", "tensor"):
            if self.block.lam == 0.0:
                return 0.0
            g = params.values[self.coef_key]
            return float(self.block.lam * g @ self.block.penalty @ g)
        if self.kind == "ridge":
            w = params.values[self.coef_key]
            return float(self.la * w @ w)
        if self.kind == "lasso":
            u, v = params.values[self.u_key], params.values[self.v_key]
            return float(self.la * (u @ u + v @ v) / 2.0)
        return 0.0

    def penalty_grad(self, params: ParamStore, sp_scale: float) -> None:
        if self.kind in ("smooth", "tensor") and self.block.lam != 0.0:
            g = params.values[self.coef_key]
            params.add_grad(self.coef_key, sp_scale * 2.0 * self.block.lam * (self.block.penalty @ g))
        elif self.kind == "ridge" and self.la != 0.0:
            params.add_grad(self.coef_key, sp_scale * 2.0 * self.la * params.values[self.coef_key])
        elif self.kind == "lasso" and self.la != 0.0:
            params.add_grad(self.u_key, sp_scale * self.la * params.values[self.u_key])
            params.add_grad(self.v_key, sp_scale * self.la * params.values[self.v_key])

    # -- gradient of the data fit ------------------------------------------

    def accumulate_grad(self, params: ParamStore, rows: np.ndarray, g: np.ndarray) -> None:
        """g is d(loss)/d(contribution), length n_b."""
        xtg = self.X[rows].T @ g
        if self.kind == "lasso":
            params.add_grad(self.u_key, xtg * params.values[self.v_key])
            params.add_grad(self.v_key, xtg * params.values[self.u_key])
        else:
            params.add_grad(self.coef_key, xtg)


@dataclass
class FormulaBinding:
    name: str
    formula: ParameterFormula
    param_idx: tuple[int, ...]  # 0-based
    terms: list[BoundTerm]


# ---------------------------------------------------------------------------
# design construction helpers


def _columns_design(term, table, n, drop_first):
    """Design columns for linear/ridge/lasso terms with factor expansion."""
    cols = []
    names = []
    levels: dict[str, list[str] | None] = {}
    for var in term.vars:
        col = data_mod.require_column(table, var)
        if data_mod.is_numeric(col):
            cols.append(col[:, None])
            names.append(var)
            levels[var] = None
        else:
            lv = data_mod.factor_levels(col)
            mat, used = data_mod.dummy_code(col, lv, drop_first)
            if mat.shape[1] == 0:
                raise DataError(f"factor column {var!r} has a single level")
            cols.append(mat)
            names.extend(f"{var}.{u}" for u in used)
            levels[var] = lv
    X = np.hstack(cols)
    rebuild = {"kind": "columns", "vars": list(term.vars), "levels": levels,
               "drop_first": drop_first}
    return X, tuple(names), rebuild


def _smooth_block(term, table, term_id, penalty: PenaltyOptions):
    if isinstance(term, Smooth):
        x = data_mod.numeric_column(table, term.var)
        cfg = SmoothConfig(basis=term.basis, k=term.k if term.k else 10, df=term.df)
        block = build_smooth(x, cfg, term_id, term.var)
    else:
        ks = term.k if term.k else (DEFAULT_TENSOR_K,) * len(term.vars)
        margins = []
        for var, k in zip(term.vars, ks):
            x = data_mod.numeric_column(table, var)
            cfg = SmoothConfig(basis="ps", k=k, df=None, sum_to_zero=False)
            margins.append(build_smooth(x, cfg, f"{term_id}[{var}]", var))
        block = tensor_product(margins, term_id, term.df)
    return calibrate_block(block, penalty.df_default, penalty.hat1)


def _design_from_rebuild(rebuild, table, n) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix on new data plus a per-row extrapolation mask."""
    kind = rebuild["kind"]
    flags = np.zeros(n, bool)
    if kind == "intercept":
        return np.ones((n, 1)), flags
    if kind == "columns":
        cols = []
        for var in rebuild["vars"]:
            col = data_mod.require_column(table, var)
            lv = rebuild["levels"][var]
            if lv is None:
                if not data_mod.is_numeric(col):
                    raise DataError(f"column {var!r} must be numeric")
                cols.append(col[:, None])
            else:
                mat, _ = data_mod.dummy_code(col, lv, rebuild["drop_first"])
                cols.append(mat)
        return np.hstack(cols), flags
    if kind == "smooth":
        block: DesignBlock = rebuild["block"]
        values = {}
        for margin, (lo, hi) in zip(block.margins, block.ranges):
            v = data_mod.numeric_column(table, margin.var)
            flags |= (v < lo) | (v > hi)
            values[margin.var] = v
        return design_for_values(block, values), flags
    if kind == "offset":
        return data_mod.numeric_column(table, rebuild["var"])[:, None], flags
    raise ConfigError(f"unknown rebuild kind {kind!r}")


_LAYER_KINDS = (Dense, Dropout)


def _network_spec(name: str, vars: tuple[str, ...], layers) -> NetworkSpec:
    norm: list = []
    for layer in layers:
        if isinstance(layer, _LAYER_KINDS):
            norm.append(layer)
        elif isinstance(layer, dict):
            kind = layer.get("kind", "dense")
            if kind == "dense":
                norm.append(Dense(int(layer["units"]), layer.get("activation", "linear"),
                                  bool(layer.get("use_bias", True))))
            elif kind == "dropout":
                norm.append(Dropout(float(layer["rate"])))
            else:
                raise ConfigError(f"network {name!r}: unknown layer kind {kind!r}")
        else:
            raise ConfigError(f"network {name!r}: bad layer entry {layer!r}")
    spec = NetworkSpec(name, vars, tuple(norm))
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# build


def _check_mapping(formulas: FormulaSet, n_params: int) -> list[tuple[int, ...]]:
    count = len(formulas.formulas)
    if formulas.mapping is None:
        if count != n_params:
            raise ConfigError(
                f"{count} formula(s) for {n_params} distributional parameter(s); "
                "supply a mapping to share formulas"
            )
        return [(i,) for i in range(count)]
    if len(formulas.mapping) != count:
        raise ConfigError("mapping must have one entry per formula")
    out = []
    covered = set()
    for entry in formulas.mapping:
        if not entry:
            raise ConfigError("mapping entries must not be empty")
        if len(set(entry)) != len(entry):
            raise ConfigError(f"mapping entry {entry} repeats a parameter")
        for k in entry:
            if not 1 <= k <= n_params:
                raise ConfigError(f"mapping index {k} outside 1..{n_params}")
        covered.update(entry)
        out.append(tuple(k - 1 for k in entry))
    missing = sorted(set(range(1, n_params + 1)) - covered)
    if missing:
        raise ConfigError(f"mapping covers no formula for parameter(s) {missing}")
    return out


def build(y, data, spec: ModelSpec, seed: int = 0) -> "Model":
    """Bind formulas to data; initialize all parameters (seeded)."""
    table = data_mod.as_table(data)
    n = data_mod.n_rows(table)
    y = np.asarray(y, np.float64)
    if y.ndim != 1 or y.shape[0] != n:
        raise DataError(f"response must be 1-d with {n} rows, got shape {y.shape}")
    family = spec.family if isinstance(spec.family, FamilySpec) else make_family(spec.family)
    family.impl.check_support(y)
    param_maps = _check_mapping(spec.formulas, family.n_params)

    params = ParamStore()
    rng = np.random.default_rng(seed)
    bindings: list[FormulaBinding] = []
    for fi, (name, pf) in enumerate(zip(spec.formulas.names, spec.formulas.formulas)):
        pmap = param_maps[fi]
        terms: list[BoundTerm] = []
        seen_ids: set[str] = set()
        plans = {p.term_index: p for p in build_oz_plans(
            pf, spec.orthog.orthogonalize, spec.orthog.identify_intercept)}
        for ti, term in enumerate(pf.terms):
            tid = "(Intercept)" if isinstance(term, Intercept) else format_term(term)
            if tid in seen_ids:
                raise ConfigError(f"formula {name!r}: duplicate term {tid!r}")
            seen_ids.add(tid)
            bt = _bind_term(term, f"f{fi}", table, n, pf.has_intercept, spec, params,
                            rng, pmap, name)
            if ti in plans:
                bt.oz = _materialize_oz(plans[ti], pf, terms, table, n, spec)
            terms.append(bt)
        bindings.append(FormulaBinding(name, pf, pmap, terms))

    counts = [0] * family.n_params
    for binding in bindings:
        for k in binding.param_idx:
            counts[k] += len(binding.terms)
    for k, c in enumerate(counts):
        if c == 0:
            raise ConfigError(
                f"predictor for parameter {family.param_names[k]!r} has no terms"
            )
    return Model(spec, family, bindings, params, n, table, y, seed)


def _bind_term(term, prefix, table, n, has_intercept, spec: ModelSpec,
               params: ParamStore, rng, pmap, formula_name) -> BoundTerm:
    term_id = format_term(term)
    key = f"{prefix}:{term_id}"
    if isinstance(term, Intercept):
        bt = BoundTerm(term, "(Intercept)", "intercept", pmap,
                       X=np.ones((n, 1)), coef_names=("(Intercept)",),
                       coef_key=f"{prefix}:(Intercept):coef",
                       rebuild={"kind": "intercept"})
        params.add(bt.coef_key, np.zeros(1))
        return bt
    if isinstance(term, (Linear, Ridge, Lasso)):
        X, names, rebuild = _columns_design(term, table, n, drop_first=has_intercept)
        kind = {Linear: "linear", Ridge: "ridge", Lasso: "lasso"}[type(term)]
        la = getattr(term, "la", 0.0)
        bt = BoundTerm(term, term_id, kind, pmap, X=X, coef_names=names, la=la,
                       rebuild=rebuild)
        if kind == "lasso":
            bt.u_key, bt.v_key = f"{key}:u", f"{key}:v"
            params.add(bt.u_key, np.ones(X.shape[1]))
            params.add(bt.v_key, np.zeros(X.shape[1]))
        else:
            bt.coef_key = f"{key}:coef"
            params.add(bt.coef_key, np.zeros(X.shape[1]))
        return bt
    if isinstance(term, (Smooth, TensorSmooth)):
        block = _smooth_block(term, table, term_id, spec.penalty)
        kind = "smooth" if isinstance(term, Smooth) else "tensor"
        bt = BoundTerm(term, term_id, kind, pmap, X=block.X, block=block,
                       coef_names=block.coef_names, coef_key=f"{key}:coef",
                       rebuild={"kind": "smooth", "block": block})
        params.add(bt.coef_key, np.zeros(block.n_coef))
        return bt
    if isinstance(term, Offset):
        col = data_mod.numeric_column(table, term.var)
        return BoundTerm(term, term_id, "offset", pmap, offset_values=col,
                         rebuild={"kind": "offset", "var": term.var})
    if isinstance(term, (NetworkTerm, Orthogonalized)):
        net_term = term.net if isinstance(term, Orthogonalized) else term
        if net_term.name not in spec.networks:
            raise ConfigError(
                f"formula {formula_name!r} uses network {net_term.name!r} "
                "but no such network is registered"
            )
        net = _network_spec(net_term.name, net_term.vars, spec.networks[net_term.name])
        if net.out_width != len(pmap):
            raise ConfigError(
                f"network {net_term.name!r} outputs {net.out_width} column(s) but the "
                f"formula feeds {len(pmap)} parameter(s)"
            )
        cols = [data_mod.numeric_column(table, v) for v in net_term.vars]
        net_input = np.column_stack(cols)
        bt = BoundTerm(term, term_id, "network", pmap, net=net,
                       net_prefix=key, net_input=net_input,
                       rebuild={"kind": "network"})
        init_network_params(net, net_input.shape[1], params, key, rng)
        return bt
    raise ConfigError(f"unsupported term {term!r}")


def _materialize_oz(plan, pf, bound_so_far, table, n, spec: ModelSpec) -> MaterializedOz:
    sources = []
    for src_spec, origin in zip(plan.sources, plan.origins):
        if isinstance(src_spec, Intercept):
            sources.append(ConstraintSource(origin, src_spec, np.ones((n, 1)),
                                            {"kind": "intercept"}))
            continue
        reused = next((bt for bt in bound_so_far
                       if bt.term == src_spec and bt.X is not None), None)
        if reused is not None:
            sources.append(ConstraintSource(origin, src_spec, reused.X, reused.rebuild))
            continue
        if isinstance(src_spec, (Linear, Ridge, Lasso)):
            X, _, rebuild = _columns_design(src_spec, table, n, drop_first=False)
        elif isinstance(src_spec, (Smooth, TensorSmooth)):
            block = _smooth_block(src_spec, table, format_term(src_spec), spec.penalty)
            X, rebuild = block.X, {"kind": "smooth", "block": block}
        else:
            raise ConfigError(f"cannot orthogonalize against term {src_spec!r}")
        sources.append(ConstraintSource(origin, src_spec, X, rebuild))
    return MaterializedOz(sources)


# ---------------------------------------------------------------------------
# the model


class Model:
    def __init__(self, spec, family, bindings, params, n, table, y, seed):
        self.spec = spec
        self.family = family
        self.bindings = bindings
        self.params = params
        self.n = n
        self.table = table
        self.y = y
        self.seed = seed
        self.history = None
        self.custom_penalty = spec.custom_penalty

    # -- bookkeeping ---------------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.family.n_params

    def resolve_sp_scale(self, override: float | None = None) -> float:
        if override is not None:
            return override
        if self.spec.penalty.sp_scale is not None:
            return self.spec.penalty.sp_scale
        return 1.0 / self.n

    def warn_small_batches(self, batch_size: int) -> None:
        for binding in self.bindings:
            for bt in binding.terms:
                if bt.oz is not None and batch_size < bt.oz.n_columns:
                    warnings.warn(
                        f"batch size {batch_size} is smaller than the "
                        f"{bt.oz.n_columns} orthogonalization constraint column(s) "
                        f"of {bt.term_id!r}; the batchwise projection will remove "
                        "most of the network signal",
                        stacklevel=3,
                    )

    def _require_training_data(self):
        if self.table is None or self.y is None:
            raise DataError("model was loaded without training data; pass data explicitly")

    # -- training-path forward/backward --------------------------------------

    def forward_batch(self, idx: np.ndarray, training: bool = False, rng=None):
        self._require_training_data()
        idx = np.asarray(idx, int)
        eta = np.zeros((idx.shape[0], self.n_params))
        tapes = []
        for binding in self.bindings:
            for bt in binding.terms:
                if bt.kind == "network":
                    basis = None
                    if bt.oz is not None:
                        basis = orthonormal_range(bt.oz.rows(idx))
                    out, tape = forward(bt.net, self.params, bt.net_prefix,
                                        bt.net_input[idx], training=training,
                                        rng=rng, oz_basis=basis)
                    for j, k in enumerate(bt.param_idx):
                        eta[:, k] += out[:, j]
                    tapes.append((bt, tape))
                elif bt.kind == "offset":
                    for k in bt.param_idx:
                        eta[:, k] += bt.offset_values[idx]
                else:
                    contrib = bt.X[idx] @ bt.coef(self.params)
                    for k in bt.param_idx:
                        eta[:, k] += contrib
        return eta, tapes

    def backprop_eta(self, idx: np.ndarray, eta_grad: np.ndarray, tapes) -> None:
        from .graph import backward

        idx = np.asarray(idx, int)
        for binding in self.bindings:
            for bt in binding.terms:
                if bt.kind in ("network", "offset"):
                    continue
                g = eta_grad[:, list(bt.param_idx)].sum(axis=1)
                bt.accumulate_grad(self.params, idx, g)
        for bt, tape in tapes:
            backward(tape, eta_grad[:, list(bt.param_idx)], self.params)

    # -- prediction -----------------------------------------------------------

    def _eta_for_table(self, table) -> tuple[np.ndarray, np.ndarray]:
        n = data_mod.n_rows(table)
        eta = np.zeros((n, self.n_params))
        flagged = np.zeros(n, bool)
        for binding in self.bindings:
            for bt in binding.terms:
                if bt.kind == "network":
                    cols = [data_mod.numeric_column(table, v) for v in bt.net.inputs]
                    x = np.column_stack(cols)
                    basis = None
                    if bt.oz is not None:
                        basis = orthonormal_range(bt.oz.for_table(table, n))
                    out, _ = forward(bt.net, self.params, bt.net_prefix, x,
                                     training=False, oz_basis=basis)
                    for j, k in enumerate(bt.param_idx):
                        eta[:, k] += out[:, j]
                elif bt.kind == "offset":
                    col = data_mod.numeric_column(table, bt.rebuild["var"])
                    for k in bt.param_idx:
                        eta[:, k] += col
                else:
                    X, flags = _design_from_rebuild(bt.rebuild, table, n)
                    flagged |= flags
                    contrib = X @ bt.coef(self.params)
                    for k in bt.param_idx:
                        eta[:, k] += contrib
        return eta, flagged

    def _table_for(self, newdata):
        if newdata is None:
            self._require_training_data()
            return self.table
        return data_mod.as_table(newdata)

    def get_distribution(self, newdata=None) -> FittedDistribution:
        table = self._table_for(newdata)
        eta, flagged = self._eta_for_table(table)
        if np.any(flagged):
            warnings.warn(
                f"{int(flagged.sum())} row(s) outside the training range of a smooth "
                "term; spline values were linearly extrapolated",
                stacklevel=2,
            )
        return self.family.distribution(eta)

    def predict(self, newdata=None, statistic: str = "mean", probs=None):
        """Pointwise statistics of the fitted conditional distribution.

        ``statistic``: mean, stddev, quantile (needs ``probs``),
        distribution (the FittedDistribution itself), or density_grid,
        which returns a (values, density) pair of (n, grid) arrays.
        """
        dist = self.get_distribution(newdata)
        if statistic == "distribution":
            return dist
        if statistic == "mean":
            return dist.mean()
        if statistic == "stddev":
            return dist.stddev()
        if statistic == "quantile":
            if probs is None:
                raise ConfigError("statistic='quantile' needs probs")
            probs = [float(p) for p in np.atleast_1d(probs)]
            return np.column_stack([dist.quantile(p) for p in probs])
        if statistic == "density_grid":
            return density_grid(dist)
        raise ConfigError(f"unknown statistic {statistic!r}")

    def fitted(self) -> np.ndarray:
        return self.predict(None, "mean")

    def log_score(self, data=None, y=None):
        """Per-observation log-likelihood and its sum on data/y.

        Defaults to the training data when both arguments are omitted.
        """
        if (data is None) != (y is None):
            raise DataError("log_score needs both data and y (or neither)")
        if data is None:
            self._require_training_data()
            y = self.y
        dist = self.get_distribution(data)
        per_obs = dist.log_prob(np.asarray(y, float))
        return per_obs, float(per_obs.sum())

    # -- reporting ------------------------------------------------------------

    def _param_range(self, param: int | None):
        if param is None:
            return range(self.n_params)
        if not 1 <= param <= self.n_params:
            raise ConfigError(f"parameter index {param} outside 1..{self.n_params}")
        return [param - 1]

    def coef(self, kind: str = "linear", param: int | None = None) -> dict:
        """Named coefficients per distributional parameter.

        ``kind='linear'`` covers intercepts, linear, ridge, and lasso terms
        (lasso reported as the effective product coefficients);
        ``kind='smooth'`` returns basis coefficient vectors per smooth.
        """
        if kind not in ("linear", "smooth"):
            raise ConfigError(f"unknown coefficient kind {kind!r}")
        out: dict[str, dict] = {}
        for k in self._param_range(param):
            entry: dict[str, object] = {}
            for binding in self.bindings:
                if k not in binding.param_idx:
                    continue
                for bt in binding.terms:
                    if kind == "linear" and bt.kind in ("intercept", "linear", "ridge", "lasso"):
                        for name, val in zip(bt.coef_names, bt.coef(self.params)):
                            entry[name] = float(val)
                    elif kind == "smooth" and bt.kind in ("smooth", "tensor"):
                        entry[bt.term_id] = bt.coef(self.params).copy()
            out[self.family.param_names[k]] = entry
        return out

    def smoothing_parameters(self) -> dict[str, float]:
        out = {}
        for binding in self.bindings:
            for bt in binding.terms:
                if bt.kind in ("smooth", "tensor"):
                    out[bt.term_id] = bt.block.lam
        return out

    def partial_effects(self, param: int | None = None, which=None,
                        grid_size: int | None = None) -> list[PartialEffect]:
        """Centered effect curves/surfaces of the smooth terms."""
        effects = []
        for k in self._param_range(param):
            pos = 0
            for binding in self.bindings:
                if k not in binding.param_idx:
                    continue
                for bt in binding.terms:
                    if bt.kind not in ("smooth", "tensor"):
                        continue
                    pos += 1
                    if which is not None:
                        if isinstance(which, str) and bt.term_id != which:
                            continue
                        if isinstance(which, int) and pos != which:
                            continue
                    effects.append(
                        evaluate_partial_effect(bt.block, bt.coef(self.params),
                                                grid_size=grid_size)
                    )
        return effects

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        from .bundle import save_model

        save_model(self, path)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleModel:
    members: list[Model]
    seeds: list[int]
    weights: np.ndarray

    def get_distribution(self, newdata=None) -> MixtureDistribution:
        comps = tuple(m.get_distribution(newdata) for m in self.members)
        return MixtureDistribution(comps, self.weights)


def ensemble(y, data, spec: ModelSpec, n_ensemble: int,
             config=None, seeds=None, n_workers: int = 1) -> EnsembleModel:
    """Independently initialized and trained members; uniform mixture.

    Member i uses seed ``config.seed + i`` (or ``seeds[i]`` when given)
    for both initialization and training.
    """
    from .training import TrainConfig, fit

    config = config or TrainConfig()
    if n_ensemble < 2:
        raise ConfigError(f"an ensemble needs at least 2 members, got {n_ensemble}")
    if seeds is None:
        seeds = [config.seed + i for i in range(n_ensemble)]
    elif len(seeds) != n_ensemble:
        raise ConfigError("seeds must have one entry per ensemble member")

    def run_member(seed: int) -> Model:
        import dataclasses

        member = build(y, data, spec, seed=seed)
        fit(member, dataclasses.replace(config, seed=seed))
        return member

    if n_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(n_workers, n_ensemble)) as pool:
            members = list(pool.map(run_member, seeds))
    else:
        members = [run_member(s) for s in seeds]
    weights = np.full(n_ensemble, 1.0 / n_ensemble)
    return EnsembleModel(members, list(seeds), weights)


def get_ensemble_distribution(ens: EnsembleModel, newdata=None) -> MixtureDistribution:
    return ens.get_distribution(newdata)


# ---------------------------------------------------------------------------
# last-layer refit


@dataclass
class RefitBand:
    term_id: str
    grid: dict[str, np.ndarray]
    fit: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class RefitResult:
    coef_names: tuple[str, ...]
    coef: np.ndarray
    cov: np.ndarray
    sigma: float
    edf: float
    bands: dict[str, RefitBand]

    def coef_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.coef_names, self.coef)}


def last_layer_refit(model: Model, data=None, y=None, grid_size: int = 200) -> RefitResult:
    """Gaussian penalized least-squares refit of the location predictor.

    The design stacks all structured columns of the location parameter and
    the inference-mode latent features feeding each of its networks' output
    layers.  Smoothing penalties are frozen at their trained values; the
    refit gives exact coefficients, a Bayesian covariance
    sigma^2 (X'X + S)^-1, and +-2 sd bands for the smooth terms.
    """
    if model.family.name != "normal":
        raise ConfigError("last-layer refit is defined for the normal family only")
    if (data is None) != (y is None):
        raise DataError("last_layer_refit needs both data and y (or neither)")
    if data is None:
        model._require_training_data()
        table, y = model.table, model.y
    else:
        table = data_mod.as_table(data)
        y = np.asarray(y, float)
    n = data_mod.n_rows(table)
    if y.shape[0] != n:
        raise DataError(f"response length {y.shape[0]} != {n} rows")

    columns = []
    names: list[str] = []
    pen_blocks: list[tuple[int, np.ndarray]] = []  # (offset, penalty matrix)
    smooth_slices: list[tuple[BoundTerm, slice]] = []
    for binding in model.bindings:
        if 0 not in binding.param_idx:
            continue
        for bt in binding.terms:
            if bt.kind == "offset":
                continue
            if bt.kind == "network":
                cols = [data_mod.numeric_column(table, v) for v in bt.net.inputs]
                feats = penultimate_features(bt.net, model.params, bt.net_prefix,
                                             np.column_stack(cols))
                start = sum(c.shape[1] for c in columns)
                columns.append(feats)
                names.extend(f"{bt.term_id}.z{j + 1}" for j in range(feats.shape[1]))
                continue
            X, _ = _design_from_rebuild(bt.rebuild, table, n)
            start = sum(c.shape[1] for c in columns)
            columns.append(X)
            names.extend(bt.coef_names)
            if bt.kind in ("smooth", "tensor") and bt.block.lam > 0.0:
                pen_blocks.append((start, bt.block.lam * bt.block.penalty))
            elif bt.kind == "ridge" and bt.la > 0.0:
                pen_blocks.append((start, bt.la * np.eye(X.shape[1])))
            if bt.kind in ("smooth", "tensor"):
                smooth_slices.append((bt, slice(start, start + X.shape[1])))
    if not columns:
        raise ConfigError("the location predictor has no refittable terms")
    A = np.hstack(columns)
    p = A.shape[1]
    S = np.zeros((p, p))
    for start, P in pen_blocks:
        S[start : start + P.shape[0], start : start + P.shape[0]] += P
    ata = A.T @ A
    M = ata + S
    # latent relu features can be rank-deficient (dead units); regularize
    # only as much as needed so well-posed systems stay exact
    scale = max(float(np.trace(M)) / p, 1.0)
    for jitter in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
        try:
            np.linalg.cholesky(M + jitter * scale * np.eye(p))
            if jitter:
                M = M + jitter * scale * np.eye(p)
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise NumericError("refit system is singular even after ridge regularization")
    inv = np.linalg.inv(M)
    coef = inv @ (A.T @ y)
    resid = y - A @ coef
    edf = float(np.trace(inv @ ata))
    dof = max(n - edf, 1.0)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * inv

    bands = {}
    for bt, sl in smooth_slices:
        eff = evaluate_partial_effect(bt.block, coef[sl], grid_size=grid_size)
        Xg = design_for_values(bt.block, eff.grid)
        sd = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Xg, cov[sl, sl], Xg), 0.0))
        bands[bt.term_id] = RefitBand(bt.term_id, eff.grid, eff.values,
                                      eff.values - 2.0 * sd, eff.values + 2.0 * sd)
    return RefitResult(tuple(names), coef, cov, math.sqrt(sigma2), edf, bands)


# ---------------------------------------------------------------------------
# density grids


def density_grid(dist: FittedDistribution, size: int = 400):
    """Per-row (values, density) grids covering essentially all mass."""
    impl = dist.family.impl
    if getattr(impl, "discrete", False):
        hi = dist.quantile(1.0 - 1e-6)
        top = int(np.max(hi))
        values = np.tile(np.arange(top + 1, dtype=float), (dist.n_obs, 1))
    else:
        lo = dist.quantile(1e-4)
        hi = dist.quantile(1.0 - 1e-4)
        values = np.linspace(lo, hi, size).T
    dens = np.empty_like(values)
    for i in range(values.shape[0]):
        theta_row = np.repeat(dist.params[i : i + 1], values.shape[1], axis=0)
        dens[i] = np.exp(impl.log_prob(theta_row, values[i]))
    return values, dens
