"""Declarative model description, hyperparameter registry and JSON schema."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .hyperparams import HyperParam, HyperVector, Prior
from .latent import CopyLink, DisconnectedGraph, Graph, LatentComponent
from .likelihoods import (
    ColumnFamilyMismatch,
    DomainError,
    Likelihood,
    MultipleResponsesInRow,
    bind_responses,
)

__all__ = [
    "Effect",
    "FixedEffect",
    "LinComb",
    "ModelSpec",
    "SpecError",
    "validate",
    "hyper_vector",
    "to_dict",
    "from_dict",
    "serialize",
    "parse",
]

DEFAULT_FIXED_PREC = 0.001
DEFAULT_INTERCEPT_PREC = 0.0


class SpecError(ValueError):
    """Raised when a model description cannot be turned into a ModelSpec."""


def _int_array(a):
    return None if a is None else np.asarray(a, dtype=np.int64).copy()


def _float_array(a):
    return None if a is None else np.asarray(a, dtype=float).copy()


@dataclass(frozen=True, eq=False)
class Effect:
    """A latent component (or copy) and how it enters the linear predictor.

    ``index[r]`` is the 0-based element feeding predictor row ``r`` (-1 for none);
    ``weights`` multiplies that element; ``replicate`` and ``group`` select the
    replicate and group of the element. The element's position in the expanded
    vector is ``(replicate * group_count + group) * size + index``.
    """

    latent: LatentComponent | CopyLink
    index: np.ndarray
    weights: np.ndarray | None = None
    replicate: np.ndarray | None = None
    group: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "index", _int_array(self.index))
        object.__setattr__(self, "weights", _float_array(self.weights))
        object.__setattr__(self, "replicate", _int_array(self.replicate))
        object.__setattr__(self, "group", _int_array(self.group))

    @property
    def name(self) -> str:
        return self.latent.name

    @property
    def is_copy(self) -> bool:
        return isinstance(self.latent, CopyLink)

    def positions(self, structure: LatentComponent) -> np.ndarray:
        """Positions in the expanded vector of ``structure`` (-1 where unused)."""
        pos = self.index.copy()
        used = pos >= 0
        g = np.zeros_like(pos) if self.group is None else self.group
        r = np.zeros_like(pos) if self.replicate is None else self.replicate
        pos[used] = (r[used] * structure.group_count + g[used]) * structure.size + pos[used]
        return pos


@dataclass(frozen=True, eq=False)
class FixedEffect:
    """Linear covariate effect; ``covariate=None`` is the intercept."""

    name: str
    covariate: np.ndarray | None = None
    prec: float | None = None
    mean: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "covariate", _float_array(self.covariate))
        if self.prec is None:
            default = DEFAULT_INTERCEPT_PREC if self.covariate is None else DEFAULT_FIXED_PREC
            object.__setattr__(self, "prec", default)

    def as_effect(self, n_eta: int) -> Effect:
        kind = "intercept" if self.covariate is None else "linear"
        comp = LatentComponent(self.name, kind, 1, prec=float(self.prec), mean=float(self.mean))
        if self.covariate is None:
            return Effect(comp, np.zeros(n_eta, dtype=np.int64))
        cov = self.covariate
        missing = np.isnan(cov)
        return Effect(comp, np.where(missing, -1, 0), np.where(missing, 0.0, cov))


@dataclass(frozen=True, eq=False)
class LinComb:
    """Named linear combination ``sum weight * x[target][position]`` (positions 0-based)."""

    name: str
    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((str(t), int(i), float(w)) for t, i, w in self.terms))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Immutable description of a latent Gaussian model and its data.

    ``responses`` is the ``(n_obs, K)`` response matrix with NaN for missing
    values; column ``k`` belongs to ``likelihoods[k]``. Without ``A`` the
    observations are the predictor rows (``n_obs == n_eta``); with ``A`` they are
    ``eta* = A eta``.
    """

    likelihoods: tuple
    responses: np.ndarray
    effects: tuple = ()
    fixed_effects: tuple = ()
    A: sp.csr_matrix | None = None
    lincombs: tuple = ()
    ntrials: np.ndarray | None = None
    priors: Mapping[str, Mapping] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "likelihoods", tuple(self.likelihoods))
        object.__setattr__(self, "effects", tuple(self.effects))
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        object.__setattr__(self, "lincombs", tuple(self.lincombs))
        Y = np.asarray(self.responses, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        object.__setattr__(self, "responses", Y.copy())
        object.__setattr__(self, "ntrials", _float_array(self.ntrials))
        if self.A is not None:
            object.__setattr__(self, "A", sp.csr_matrix(self.A, dtype=float))
        object.__setattr__(self, "priors", {k: dict(v) for k, v in dict(self.priors).items()})

    @property
    def n_obs(self) -> int:
        return self.responses.shape[0]

    @property
    def n_eta(self) -> int:
        if self.A is not None:
            return self.A.shape[1]
        return self.n_obs

    def all_effects(self) -> tuple[Effect, ...]:
        """Random effects and copies followed by fixed effects."""
        return self.effects + tuple(f.as_effect(self.n_eta) for f in self.fixed_effects)

    def structure_of(self, name: str) -> LatentComponent:
        """The latent component behind ``name`` (following copy links)."""
        by_name = {e.name: e for e in self.all_effects()}
        eff = by_name[name]
        while isinstance(eff.latent, CopyLink):
            eff = by_name[eff.latent.source]
        return eff.latent

    def hyper_params(self) -> list[HyperParam]:
        params = []
        for lik in self.likelihoods:
            params.extend(lik.hyper_params())
        for eff in self.effects:
            params.extend(eff.latent.hyper_params())
        return [_override(p, self.priors.get(p.name)) for p in params]

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and to_dict(self) == to_dict(other)

    __hash__ = None


def _override(p: HyperParam, over: Mapping | None) -> HyperParam:
    if not over:
        return p
    prior = p.prior
    if "prior" in over:
        prior = Prior(over["prior"], tuple(float(v) for v in over.get("param", ())))
    return HyperParam(p.name, p.transform, prior, float(over.get("initial", p.initial)),
                      bool(over.get("fixed", p.fixed)))


def hyper_vector(spec: ModelSpec) -> HyperVector:
    """Hyperparameters of ``spec`` at their initial values."""
    return HyperVector(tuple(spec.hyper_params()))


# --------------------------------------------------------------------------
# validation


def validate(spec: ModelSpec) -> list[str]:
    """Every violated model invariant; empty iff the model can be assembled."""
    diags: list[str] = []
    n_eta = spec.n_eta
    effects = spec.all_effects()
    names = [e.name for e in effects]
    seen = set()
    for nm in names:
        if nm in seen:
            diags.append(f"duplicate component name {nm!r}")
        seen.add(nm)
    if not spec.likelihoods:
        diags.append("no likelihood block")

    if spec.A is not None and spec.A.shape[0] != spec.n_obs:
        diags.append(f"A has {spec.A.shape[0]} rows but the response has {spec.n_obs}")
    if spec.A is not None and not np.all(np.isfinite(spec.A.data)):
        diags.append("A contains non-finite entries")

    earlier: dict[str, LatentComponent] = {}
    for eff in effects:
        label = f"component {eff.name!r}"
        structure = None
        if eff.is_copy:
            src = eff.latent.source
            if src not in earlier:
                where = "unknown" if src not in names else "later"
                diags.append(f"{label}: copy of {where} component {src!r}")
            else:
                structure = earlier[src]
            if not eff.latent.tau_copy > 0:
                diags.append(f"{label}: copy precision must be positive")
        else:
            structure = eff.latent
            earlier[eff.name] = structure
        if eff.index.shape != (n_eta,):
            diags.append(f"{label}: index has length {eff.index.size}, predictor has {n_eta} rows")
            continue
        for arr_name in ("weights", "replicate", "group"):
            arr = getattr(eff, arr_name)
            if arr is not None and arr.shape != (n_eta,):
                diags.append(f"{label}: {arr_name} has length {arr.size}, predictor has {n_eta} rows")
        if eff.weights is not None and not np.all(np.isfinite(eff.weights[eff.index >= 0])):
            diags.append(f"{label}: non-finite weights")
        if structure is None:
            continue
        used = eff.index >= 0
        if np.any(eff.index < -1) or np.any(eff.index[used] >= structure.size):
            diags.append(f"{label}: index outside 1..{structure.size}")
        if eff.replicate is not None and (
            np.any(eff.replicate[used] < 0) or np.any(eff.replicate[used] >= structure.replicate_count)
        ):
            diags.append(f"{label}: replicate outside 1..{structure.replicate_count}")
        if eff.group is not None and (
            np.any(eff.group[used] < 0) or np.any(eff.group[used] >= structure.group_count)
        ):
            diags.append(f"{label}: group outside 1..{structure.group_count}")
        if structure.model == "besag" and not structure.allow_disconnected:
            ncomp = int(structure.graph.connected_components().max()) + 1
            if ncomp > 1:
                diags.append(f"{label}: graph has {ncomp} connected components")

    try:
        binding = bind_responses(spec.responses, spec.likelihoods, spec.ntrials)
        if spec.A is None and binding.observed.size == 0:
            diags.append("no observed responses")
    except MultipleResponsesInRow:
        counts = (~np.isnan(spec.responses)).sum(axis=1)
        for r in np.flatnonzero(counts > 1):
            diags.append(f"response row {r + 1} has {counts[r]} non-missing entries")
    except (ColumnFamilyMismatch, DomainError) as exc:
        diags.append(str(exc))

    sizes = {}
    for eff in effects:
        s = earlier.get(eff.latent.source) if eff.is_copy else eff.latent
        if s is not None:
            sizes[eff.name] = s.expanded_size
    sizes["predictor"] = n_eta
    lc_names = set()
    for lc in spec.lincombs:
        if lc.name in lc_names:
            diags.append(f"duplicate lincomb name {lc.name!r}")
        lc_names.add(lc.name)
        if not lc.terms or all(w == 0 for _, _, w in lc.terms):
            diags.append(f"lincomb {lc.name!r} has no non-zero weights")
        for target, pos, _ in lc.terms:
            if target not in sizes:
                diags.append(f"lincomb {lc.name!r}: unknown target {target!r}")
            elif not 0 <= pos < sizes[target]:
                diags.append(f"lincomb {lc.name!r}: position {pos + 1} outside 1..{sizes[target]}")
    return diags


# --------------------------------------------------------------------------
# JSON schema


def _idx_out(a):
    return None if a is None else [int(v) + 1 if v >= 0 else None for v in a]


def _num_out(a):
    return None if a is None else [None if np.isnan(v) else float(v) for v in a]


def _graph_dict(g: Graph):
    return {"n": g.n, "neighbors": [[int(v) + 1 for v in nb] for nb in g.neighbors]}


def _plain(mapping) -> dict:
    """JSON-normalized copy (tuples become lists) so equality survives a round trip."""
    return json.loads(json.dumps({k: dict(v) for k, v in dict(mapping).items()}))


def to_dict(spec: ModelSpec) -> dict:
    """Self-contained JSON-compatible description (indices 1-based, ``None`` for missing)."""
    comps = []
    for eff in spec.effects:
        lat = eff.latent
        d: dict = {"name": lat.name}
        if isinstance(lat, CopyLink):
            d.update(copy=lat.source, scale_unknown=lat.scale_unknown, log_tau_copy=lat.log_tau_copy)
        else:
            d.update(model=lat.model, size=lat.size, replicate_count=lat.replicate_count,
                     group_count=lat.group_count, group_model=lat.group_model, constr=lat.constr,
                     rw2_trend=lat.rw2_trend, allow_disconnected=lat.allow_disconnected)
            if lat.graph is not None:
                d["graph"] = _graph_dict(lat.graph)
        d["hyper"] = _plain(lat.hyper)
        d["index"] = _idx_out(eff.index)
        d["weights"] = _num_out(eff.weights)
        d["replicate"] = _idx_out(eff.replicate)
        d["group"] = _idx_out(eff.group)
        comps.append(d)
    out = {
        "components": comps,
        "likelihoods": [{"family": lk.family, "name": lk.name, "hyper": _plain(lk.hyper)}
                        for lk in spec.likelihoods],
        "fixed_effects": [{"name": f.name, "covariate": _num_out(f.covariate), "prec": float(f.prec),
                           "mean": float(f.mean)} for f in spec.fixed_effects],
        "A": None,
        "lincombs": [{"name": lc.name, "terms": [{"target": t, "index": i + 1, "weight": w} for t, i, w in lc.terms]}
                     for lc in spec.lincombs],
        "priors": _plain(spec.priors),
        "responses": [_num_out(col) for col in spec.responses.T],
        "ntrials": _num_out(spec.ntrials),
    }
    if spec.A is not None:
        coo = spec.A.tocoo()
        order = np.lexsort((coo.col, coo.row))
        out["A"] = {"shape": list(coo.shape), "rows": (coo.row[order] + 1).tolist(),
                    "cols": (coo.col[order] + 1).tolist(), "values": coo.data[order].tolist()}
    return out


def _column(value, data: Mapping | None, what: str):
    """Resolve a column reference: a list inline or a name looked up in ``data``."""
    if value is None:
        return None
    if isinstance(value, str):
        if data is None or value not in data:
            raise SpecError(f"{what}: data column {value!r} not found")
        return np.asarray(data[value], dtype=float)
    return np.array([np.nan if v is None else float(v) for v in value])


def _index_col(value, data, what, length=None):
    col = _column(value, data, what)
    if col is None:
        return None
    if length is not None:
        extra = col[length:]
        if np.any(~np.isnan(extra)):
            raise SpecError(f"{what}: values beyond row {length}")
        col = col[:length]
    if np.any(~np.isnan(col) & (col != np.round(col))):
        raise SpecError(f"{what}: indices must be integers")
    return np.where(np.isnan(col), -1, col - 1).astype(np.int64)


def _num_col(value, data, what, length=None):
    col = _column(value, data, what)
    if col is not None and length is not None:
        col = col[:length]
    return col


def _read_graph(value, base_dir) -> Graph:
    if isinstance(value, dict):
        n = int(value["n"])
        edges = [(i, int(v) - 1) for i, nb in enumerate(value["neighbors"]) for v in nb]
        return Graph.from_edges(n, edges)
    from pathlib import Path

    path = Path(value)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return Graph.read(path)


def _read_A(value, base_dir):
    if value is None:
        return None
    if isinstance(value, dict):
        shape = tuple(int(v) for v in value["shape"])
        rows = np.asarray(value["rows"], dtype=np.int64) - 1
        cols = np.asarray(value["cols"], dtype=np.int64) - 1
        return sp.csr_matrix((np.asarray(value["values"], float), (rows, cols)), shape=shape)
    from pathlib import Path

    path = Path(value)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return read_A_file(path)


def read_A_file(path) -> sp.csr_matrix:
    """Triplet file: first line ``nrow ncol``, then ``row col value`` lines (1-based)."""
    from pathlib import Path

    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise SpecError(f"{path}: empty A file")
    nrow, ncol = int(lines[0][0]), int(lines[0][1])
    trip = np.array([[float(t) for t in ln[:3]] for ln in lines[1:]]).reshape(-1, 3)
    return sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int) - 1, trip[:, 1].astype(int) - 1)), shape=(nrow, ncol))


def from_dict(d: Mapping, data: Mapping | None = None, base_dir=None) -> ModelSpec:
    """Build a ModelSpec from the JSON schema; string column references resolve in ``data``."""
    if not isinstance(d, Mapping):
        raise SpecError("model description must be a JSON object")
    unknown = set(d) - {"components", "likelihoods", "fixed_effects", "A", "lincombs", "priors", "responses",
                        "ntrials"}
    if unknown:
        raise SpecError(f"unknown top-level keys: {sorted(unknown)}")
    liks = []
    for k, ld in enumerate(d.get("likelihoods", [])):
        try:
            liks.append(Likelihood(ld["family"], ld.get("name", "") or "", ld.get("hyper", {})))
        except (KeyError, ValueError) as exc:
            raise SpecError(f"likelihood {k + 1}: {exc}") from None
    if len({lk.name for lk in liks}) != len(liks):
        liks = [Likelihood(lk.family, f"{lk.name}{k + 1}" if lk.name == lk.family else lk.name, lk.hyper)
                for k, lk in enumerate(liks)]

    A = _read_A(d.get("A"), base_dir)
    if "responses" in d and d["responses"] is not None:
        Y = np.column_stack([_column(c, data, "responses") for c in d["responses"]])
    else:
        if data is None:
            raise SpecError("no responses: supply data columns y1..yK or an inline 'responses' list")
        cols = [f"y{k + 1}" for k in range(len(liks))]
        if len(liks) == 1 and "y1" not in data and "y" in data:
            cols = ["y"]
        missing = [c for c in cols if c not in data]
        if missing:
            raise SpecError(f"response columns {missing} not found in data")
        Y = np.column_stack([np.asarray(data[c], float) for c in cols])
    n_obs = A.shape[0] if A is not None else None
    if n_obs is not None:
        if Y.shape[0] < n_obs:
            raise SpecError(f"response has {Y.shape[0]} rows, A has {n_obs}")
        if np.any(~np.isnan(Y[n_obs:])):
            raise SpecError(f"responses present beyond row {n_obs} (A has {n_obs} rows)")
        Y = Y[:n_obs]
    n_eta = A.shape[1] if A is not None else Y.shape[0]
    ntrials = _num_col(d.get("ntrials"), data, "ntrials", n_obs or n_eta)

    effects = []
    for k, cd in enumerate(d.get("components", [])):
        name = cd.get("name") or f"f{k + 1}"
        what = f"component {name!r}"
        try:
            index = _index_col(cd.get("index", name), data, what, n_eta)
            if index is None:
                raise SpecError(f"{what}: no index")
            weights = _num_col(cd.get("weights"), data, what, n_eta)
            if weights is not None:
                index = np.where(np.isnan(weights), -1, index)
                weights = np.where(np.isnan(weights), 0.0, weights)
            replicate = _index_col(cd.get("replicate"), data, what, n_eta)
            group = _index_col(cd.get("group"), data, what, n_eta)
            if "copy" in cd:
                lat = CopyLink(name, cd["copy"], bool(cd.get("scale_unknown", False)),
                               None if cd.get("log_tau_copy") is None else float(cd["log_tau_copy"]), cd.get("hyper", {}))
            else:
                graph = _read_graph(cd["graph"], base_dir) if cd.get("graph") is not None else None
                size = cd.get("size")
                if size is None:
                    size = graph.n if graph is not None else int(index.max()) + 1
                rc = cd.get("replicate_count")
                if rc is None:
                    rc = int(replicate.max()) + 1 if replicate is not None else 1
                gc = cd.get("group_count")
                if gc is None:
                    gc = int(group.max()) + 1 if group is not None else 1
                lat = LatentComponent(
                    name, cd["model"], int(size), int(rc), int(gc), cd.get("group_model"), graph,
                    cd.get("constr"), bool(cd.get("rw2_trend", False)), bool(cd.get("allow_disconnected", False)),
                    hyper=cd.get("hyper", {}),
                )
        except SpecError:
            raise
        except (KeyError, ValueError, TypeError, OSError) as exc:
            raise SpecError(f"{what}: {exc}") from None
        effects.append(Effect(lat, index, weights, replicate, group))

    fixed = []
    for fd in d.get("fixed_effects", []):
        name = fd["name"]
        cov = fd.get("covariate", None if name == "intercept" else name)
        fixed.append(FixedEffect(name, _num_col(cov, data, f"fixed effect {name!r}", n_eta),
                                 fd.get("prec"), float(fd.get("mean", 0.0))))
    lincombs = [
        LinComb(lc["name"], tuple((t["target"], int(t["index"]) - 1, float(t["weight"])) for t in lc["terms"]))
        for lc in d.get("lincombs", [])
    ]
    return ModelSpec(tuple(liks), Y, tuple(effects), tuple(fixed), A, tuple(lincombs), ntrials,
                     d.get("priors", {}) or {})


def serialize(spec: ModelSpec) -> str:
    return json.dumps(to_dict(spec), sort_keys=True)


def parse(text: str, data: Mapping | None = None, base_dir=None) -> ModelSpec:
    """Parse JSON text; malformed JSON raises ``SpecError`` with line and column."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(d, data, base_dir)


def effect_names(spec: ModelSpec) -> Sequence[str]:
    return [e.name for e in spec.all_effects()]
