"""JSON model files.

Two model types are understood::

    {"type": "oligopoly", "name": ..., "parameters": {"a": 15, "b": -1, "gamma": [2, 1]}}

    {"type": "gas", "name": ..., "units": {...},
     "sets": {"nodes": [...], "years": [...],
              "suppliers": {"S0": "N0"}, "consumers": {"C0": "N0"},
              "arcs": {"A02": ["N0", "N2"]}},
     "parameters": {"discount": [...], "times": [...],
                    "suppliers": {"S0": {"cap0": .., "avail": .., "loss": .., "lin": ..,
                                         "glb": .., "quad": .., "exp_price": ..}},
                    "consumers": {"C0": {"dem_int": .., "dem_slope": ..}
                                  | {"ref_price": .., "ref_qty": .., "elasticity": ..}},
                    "arcs": {"A02": {"cap0": .., "loss": .., "cost": .., "exp_price": ..}}},
     "theta_spec": {"variance_scale": [{"entity": "S0", "factor": 5, "families": ["lin", "quad"]}]}}

Per-year parameters accept a scalar or one value per year. Syntax errors
report line and column; structural errors report the JSON path of the
offending element.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Union

import jsonschema
import numpy as np

from .gas import AssemblyError, GasMarketModel, VarianceScale, calibrate_demand
from .oligopoly import ConfigError, OligopolyConfig


class ModelParseError(ValueError):
    """The file is not well-formed JSON (or cannot be read)."""


class ModelValidationError(ValueError):
    """Well-formed JSON that does not describe a valid model."""


_num = {"type": "number"}
_per_year = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 1}]}
_names = {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True}

OLIGOPOLY_SCHEMA = {
    "type": "object",
    "required": ["type", "parameters"],
    "additionalProperties": False,
    "properties": {
        "type": {"const": "oligopoly"},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "units": {"type": "object", "additionalProperties": {"type": "string"}},
        "parameters": {
            "type": "object",
            "required": ["a", "b", "gamma"],
            "additionalProperties": False,
            "properties": {"a": _num, "b": _num, "gamma": {"type": "array", "items": _num, "minItems": 1}},
        },
        "theta_spec": {"type": "object"},
    },
}

GAS_SCHEMA = {
    "type": "object",
    "required": ["type", "sets", "parameters", "units"],
    "additionalProperties": False,
    "properties": {
        "type": {"const": "gas"},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "units": {"type": "object", "required": ["volume", "price"], "additionalProperties": {"type": "string"}},
        "sets": {
            "type": "object",
            "required": ["nodes", "years", "suppliers", "consumers", "arcs"],
            "additionalProperties": False,
            "properties": {
                "nodes": _names,
                "years": _names,
                "suppliers": {"type": "object", "minProperties": 1, "additionalProperties": {"type": "string"}},
                "consumers": {"type": "object", "minProperties": 1, "additionalProperties": {"type": "string"}},
                "arcs": {"type": "object", "additionalProperties": {
                    "type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2}},
            },
        },
        "parameters": {
            "type": "object",
            "required": ["discount", "suppliers", "consumers", "arcs"],
            "additionalProperties": False,
            "properties": {
                "discount": {"type": "array", "items": _num, "minItems": 1},
                "times": {"type": "array", "items": _num, "minItems": 1},
                "suppliers": {"type": "object", "additionalProperties": {
                    "type": "object",
                    "required": ["cap0", "lin", "glb", "quad", "exp_price"],
                    "additionalProperties": False,
                    "properties": {"cap0": _num, "avail": _num, "loss": _per_year, "lin": _per_year,
                                   "glb": _per_year, "quad": _per_year, "exp_price": _per_year},
                }},
                "consumers": {"type": "object", "additionalProperties": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"dem_int": _per_year, "dem_slope": _per_year, "ref_price": _per_year,
                                   "ref_qty": _per_year, "elasticity": _num},
                    "oneOf": [{"required": ["dem_int", "dem_slope"]},
                              {"required": ["ref_price", "ref_qty", "elasticity"]}],
                }},
                "arcs": {"type": "object", "additionalProperties": {
                    "type": "object",
                    "required": ["cap0", "cost", "exp_price"],
                    "additionalProperties": False,
                    "properties": {"cap0": _num, "loss": _per_year, "cost": _per_year, "exp_price": _per_year},
                }},
            },
        },
        "theta_spec": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"variance_scale": {"type": "array", "items": {
                "type": "object", "required": ["entity", "factor"], "additionalProperties": False,
                "properties": {"entity": {"type": "string"}, "factor": {"type": "number", "exclusiveMinimum": 0},
                               "families": {"type": "array", "items": {"type": "string"}}},
            }}},
        },
    },
}


def _path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _validate(doc, schema):
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = [f"{_path(e.absolute_path)}: {e.message}" for e in errors[:10]]
        raise ModelValidationError("; ".join(msgs))


def parse_model_text(text: str, source: str = "<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "type" not in doc:
        raise ModelValidationError(f"{source}: top level must be an object with a 'type' field")
    kind = doc["type"]
    if kind == "oligopoly":
        return _oligopoly(doc, source)
    if kind == "gas":
        return _gas(doc, source)
    raise ModelValidationError(f"{source}: $.type: unknown model type {kind!r} (expected 'oligopoly' or 'gas')")


def load_model(path: Union[str, Path]):
    """Read a model file; returns an OligopolyConfig or a GasMarketModel."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelParseError(f"{path}: {exc.strerror or exc}") from None
    return parse_model_text(text, str(path))


def _oligopoly(doc, source):
    try:
        _validate(doc, OLIGOPOLY_SCHEMA)
    except ModelValidationError as exc:
        raise ModelValidationError(f"{source}: {exc}") from None
    p = doc["parameters"]
    try:
        return OligopolyConfig(a=p["a"], b=p["b"], gamma=tuple(p["gamma"]))
    except ConfigError as exc:
        raise ModelValidationError(f"{source}: $.parameters: {exc}") from None


def _gas(doc, source):
    try:
        _validate(doc, GAS_SCHEMA)
    except ModelValidationError as exc:
        raise ModelValidationError(f"{source}: {exc}") from None
    sets, par = doc["sets"], doc["parameters"]
    nodes, years = sets["nodes"], sets["years"]
    Y = len(years)
    errs = []

    def node_of(where, name):
        if name not in nodes:
            errs.append(f"{where}: unknown node {name!r}")
            return 0
        return nodes.index(name)

    def per_year(where, v):
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 1 and arr.size != Y:
            errs.append(f"{where}: expected {Y} yearly values, got {arr.size}")
            return np.full(Y, float(arr[0]))
        return np.broadcast_to(arr, (Y,)).astype(float)

    def entries(kind):
        names = list(sets[kind])
        given = par[kind]
        for nm in names:
            if nm not in given:
                errs.append(f"$.parameters.{kind}: missing parameters for {kind[:-1]} {nm!r}")
        for nm in given:
            if nm not in sets[kind]:
                errs.append(f"$.parameters.{kind}.{nm}: not declared in $.sets.{kind}")
        return names, [given.get(nm, {}) for nm in names]

    sup, sp = entries("suppliers")
    con, cp = entries("consumers")
    arcs, ap = entries("arcs")
    if errs:
        raise ModelValidationError(f"{source}: " + "; ".join(errs))

    s_node = tuple(node_of(f"$.sets.suppliers.{s}", sets["suppliers"][s]) for s in sup)
    c_node = tuple(node_of(f"$.sets.consumers.{c}", sets["consumers"][c]) for c in con)
    a_from = tuple(node_of(f"$.sets.arcs.{a}[0]", sets["arcs"][a][0]) for a in arcs)
    a_to = tuple(node_of(f"$.sets.arcs.{a}[1]", sets["arcs"][a][1]) for a in arcs)

    def stack(kind, names, params, key, default=None):
        rows = []
        for nm, p in zip(names, params):
            v = p.get(key, default)
            rows.append(per_year(f"$.parameters.{kind}.{nm}.{key}", v))
        return np.array(rows).reshape(len(names), Y)

    di, ds = [], []
    for nm, p in zip(con, cp):
        where = f"$.parameters.consumers.{nm}"
        if "dem_int" in p:
            di.append(per_year(f"{where}.dem_int", p["dem_int"]))
            ds.append(per_year(f"{where}.dem_slope", p["dem_slope"]))
            continue
        price = per_year(f"{where}.ref_price", p["ref_price"])
        qty = per_year(f"{where}.ref_qty", p["ref_qty"])
        pairs = []
        for y in range(Y):
            try:
                pairs.append(calibrate_demand(price[y], qty[y], p["elasticity"]))
            except ValueError as exc:
                errs.append(f"{where}: {exc}")
                pairs.append((1.0, -1.0))
        di.append([a for a, _ in pairs])
        ds.append([b for _, b in pairs])
    discount = par["discount"]
    if len(discount) != Y:
        errs.append(f"$.parameters.discount: expected {Y} values, got {len(discount)}")
    if "times" in par and len(par["times"]) != Y:
        errs.append(f"$.parameters.times: expected {Y} values, got {len(par['times'])}")
    if errs:
        raise ModelValidationError(f"{source}: " + "; ".join(errs))
    try:
        return GasMarketModel(
            name=doc.get("name", Path(source).stem),
            nodes=tuple(nodes), years=tuple(years),
            suppliers=tuple(sup), supplier_node=s_node,
            consumers=tuple(con), consumer_node=c_node,
            arcs=tuple(arcs), arc_from=a_from, arc_to=a_to,
            discount=np.array(discount, dtype=float),
            avail=np.array([p.get("avail", 0.96) for p in sp], dtype=float),
            cap0_p=np.array([p["cap0"] for p in sp], dtype=float),
            loss_p=stack("suppliers", sup, sp, "loss", 0.0),
            lin=stack("suppliers", sup, sp, "lin"),
            glb=stack("suppliers", sup, sp, "glb"),
            quad=stack("suppliers", sup, sp, "quad"),
            exp_price_p=stack("suppliers", sup, sp, "exp_price"),
            cap0_a=np.array([p["cap0"] for p in ap], dtype=float),
            loss_a=stack("arcs", arcs, ap, "loss", 0.0),
            arc_cost=stack("arcs", arcs, ap, "cost"),
            exp_price_a=stack("arcs", arcs, ap, "exp_price"),
            dem_int=np.array(di, dtype=float).reshape(len(con), Y),
            dem_slope=np.array(ds, dtype=float).reshape(len(con), Y),
            times=None if "times" not in par else np.array(par["times"], dtype=float),
            units=dict(doc["units"]),
            variance_scale=[VarianceScale(v["entity"], float(v["factor"]), tuple(v.get("families", ("lin", "quad"))))
                            for v in doc.get("theta_spec", {}).get("variance_scale", [])],
        )
    except AssemblyError as exc:
        raise ModelValidationError(f"{source}: {exc}") from None


def gas_model_to_dict(model: GasMarketModel) -> dict:
    """Inverse of the gas loader (explicit demand coefficients)."""
    def yearly(row):
        vals = [float(v) for v in row]
        return vals[0] if len(set(vals)) == 1 else vals

    return {
        "type": "gas",
        "name": model.name,
        "units": dict(model.units),
        "sets": {
            "nodes": list(model.nodes),
            "years": list(model.years),
            "suppliers": {s: model.nodes[n] for s, n in zip(model.suppliers, model.supplier_node)},
            "consumers": {c: model.nodes[n] for c, n in zip(model.consumers, model.consumer_node)},
            "arcs": {a: [model.nodes[f], model.nodes[t]] for a, f, t in zip(model.arcs, model.arc_from, model.arc_to)},
        },
        "parameters": {
            "discount": [float(v) for v in model.discount],
            "times": [float(v) for v in model.times],
            "suppliers": {s: {"cap0": float(model.cap0_p[p]), "avail": float(model.avail[p]),
                              "loss": yearly(model.loss_p[p]), "lin": yearly(model.lin[p]),
                              "glb": yearly(model.glb[p]), "quad": yearly(model.quad[p]),
                              "exp_price": yearly(model.exp_price_p[p])}
                          for p, s in enumerate(model.suppliers)},
            "consumers": {c: {"dem_int": yearly(model.dem_int[i]), "dem_slope": yearly(model.dem_slope[i])}
                          for i, c in enumerate(model.consumers)},
            "arcs": {a: {"cap0": float(model.cap0_a[i]), "loss": yearly(model.loss_a[i]),
                         "cost": yearly(model.arc_cost[i]), "exp_price": yearly(model.exp_price_a[i])}
                     for i, a in enumerate(model.arcs)},
        },
        "theta_spec": {"variance_scale": [{"entity": v.entity, "factor": v.factor, "families": list(v.families)}
                                          for v in model.variance_scale]},
    }


def oligopoly_to_dict(cfg: OligopolyConfig, name: str = "oligopoly") -> dict:
    return {"type": "oligopoly", "name": name, "units": {"quantity": "units", "price": "currency/unit"},
            "parameters": {"a": cfg.a, "b": cfg.b, "gamma": list(cfg.gamma)}}


def bundled_model_path(name: str) -> Path:
    """Path of a model file shipped with the package (e.g. ``"duopoly.json"``)."""
    return Path(str(resources.files("scpuq") / "data" / name))


def bundled_models() -> list:
    return sorted(p.name for p in Path(str(resources.files("scpuq") / "data")).glob("*.json"))
