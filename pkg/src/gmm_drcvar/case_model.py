"""Network case data, MATPOWER/JSON ingestion and shift-factor matrices.

All powers are MW; reactances are per-unit on ``base_mva``. Shift factors
are dimensionless, so the per-unit base cancels in the flow computation.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional, Sequence

import jsonschema
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class CaseError(ValueError):
    """Invalid or unsupported case data."""


@dataclass(frozen=True)
class Bus:
    id: int
    is_slack: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    x: float
    flow_limit: Optional[float] = None  # MW; None means unlimited

    def __post_init__(self):
        if not self.x > 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: reactance must be > 0")
        if self.from_bus == self.to_bus:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: from == to")
        if self.flow_limit is not None and self.flow_limit < 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: negative flow limit")


@dataclass(frozen=True)
class Generator:
    bus: int
    cost_c2: float
    cost_c1: float
    cost_c0: float
    p_min: float
    p_max: float
    r_up_max: float
    r_dn_max: float
    c_up: float
    c_dn: float

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise CaseError(f"generator at bus {self.bus}: p_min > p_max")
        if self.cost_c2 < 0:
            raise CaseError(f"generator at bus {self.bus}: cost_c2 < 0")
        for name in ("r_up_max", "r_dn_max", "c_up", "c_dn", "p_max"):
            if getattr(self, name) < 0:
                raise CaseError(f"generator at bus {self.bus}: {name} < 0")


@dataclass(frozen=True)
class Load:
    bus: int
    demand: float


@dataclass(frozen=True)
class WindFarm:
    bus: int
    forecast: float
    id: str = ""


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple
    branches: tuple
    generators: tuple
    loads: tuple
    wind_farms: tuple = ()
    base_mva: float = 100.0
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        validate_case(self)

    @property
    def bus_ids(self) -> list:
        return [b.id for b in self.buses]

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.is_slack)

    @property
    def total_demand(self) -> float:
        return float(sum(ld.demand for ld in self.loads))

    @property
    def total_forecast(self) -> float:
        return float(sum(w.forecast for w in self.wind_farms))

    @property
    def limited_lines(self) -> list:
        return [i for i, br in enumerate(self.branches) if br.flow_limit is not None]


def validate_case(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    n_slack = sum(b.is_slack for b in case.buses)
    if n_slack == 0:
        raise CaseError("no slack bus")
    if n_slack > 1:
        raise CaseError(f"{n_slack} slack buses; exactly one required")
    known = set(ids)
    for kind, items in (("branch", case.branches), ("generator", case.generators),
                        ("load", case.loads), ("wind farm", case.wind_farms)):
        for k, item in enumerate(items):
            buses = (item.from_bus, item.to_bus) if kind == "branch" else (item.bus,)
            for b in buses:
                if b not in known:
                    raise CaseError(f"{kind} {k}: unknown bus {b}")
    for ld in case.loads:
        if ld.demand < 0:
            raise CaseError(f"load at bus {ld.bus}: negative demand")
    for w in case.wind_farms:
        if w.forecast < 0:
            raise CaseError(f"wind farm at bus {w.bus}: negative forecast")
    if case.base_mva <= 0:
        raise CaseError("base_mva must be positive")
    _check_connected(ids, case.branches)


def _check_connected(ids, branches) -> None:
    index = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    if n == 1:
        return
    rows = [index[br.from_bus] for br in branches]
    cols = [index[br.to_bus] for br in branches]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        island = [ids[i] for i in range(n) if labels[i] != labels[0]]
        raise CaseError(f"disconnected network: buses {island[:10]} not reachable from bus {ids[0]}")


# --------------------------------------------------------------------------
# MATPOWER

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)")


def _strip_comments(text: str) -> str:
    # keep line structure so error messages can report line numbers
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrices(text: str) -> dict:
    clean = _strip_comments(text)
    out = {}
    for match in _MATRIX_RE.finditer(clean):
        name = match.group(1)
        first_line = clean.count("\n", 0, match.start(2)) + 1
        rows = []
        for offset, line in enumerate(match.group(2).split("\n")):
            for chunk in line.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    rows.append((first_line + offset, [float(t) for t in tokens]))
                except ValueError:
                    raise CaseError(f"mpc.{name}: malformed row at line {first_line + offset}: "
                                    f"{chunk.strip()!r}") from None
        out[name] = rows
    return out


def _as_array(name: str, rows: list, min_cols: int) -> np.ndarray:
    if not rows:
        raise CaseError(f"mpc.{name} is empty")
    width = len(rows[0][1])
    for line, vals in rows:
        if len(vals) != width:
            raise CaseError(f"mpc.{name}: row at line {line} has {len(vals)} columns, expected {width}")
        if len(vals) < min_cols:
            raise CaseError(f"mpc.{name}: row at line {line} has {len(vals)} columns, need >= {min_cols}")
    return np.array([vals for _, vals in rows])


def parse_matpower(text: str, *, r_max_fraction: float = 1.0, c_up: float = 0.0,
                   c_dn: float = 0.0, name: str = "") -> NetworkCase:
    """Parse a MATPOWER version-2 case file.

    MATPOWER carries no reserve data; each generator gets
    ``r_up_max = r_dn_max = r_max_fraction * (p_max - p_min)`` and the
    given reserve prices. Out-of-service generators and branches are dropped.
    """
    mats = _parse_matrices(text)
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in mats:
            raise CaseError(f"missing {required}")
    m = _SCALAR_RE.search(_strip_comments(text))
    base_mva = float(m.group(1)) if m else 100.0

    bus = _as_array("bus", mats["bus"], 3)
    gen = _as_array("gen", mats["gen"], 10)
    branch = _as_array("branch", mats["branch"], 11)
    gencost = _as_array("gencost", mats["gencost"], 5)
    if len(gencost) < len(gen):
        raise CaseError(f"gencost has {len(gencost)} rows for {len(gen)} generators")

    buses = tuple(Bus(int(r[0]), int(r[1]) == 3) for r in bus)
    if not any(b.is_slack for b in buses):
        raise CaseError("no slack bus (no bus of type 3)")
    loads = tuple(Load(int(r[0]), float(r[2])) for r in bus if r[2] != 0)

    generators = []
    gen_lines = [ln for ln, _ in mats["gen"]]
    cost_lines = [ln for ln, _ in mats["gencost"]]
    for k, row in enumerate(gen):
        cost = gencost[k]
        if int(cost[0]) != 2:
            raise CaseError(f"gencost row at line {cost_lines[k]}: unsupported cost model "
                            f"{int(cost[0])} (only polynomial model 2)")
        n = int(cost[3])
        if n > 3 or n < 1:
            raise CaseError(f"gencost row at line {cost_lines[k]}: polynomial degree {n - 1} > 2")
        coeffs = list(cost[4:4 + n])
        if len(coeffs) != n:
            raise CaseError(f"gencost row at line {cost_lines[k]}: expected {n} coefficients")
        coeffs = [0.0] * (3 - n) + coeffs
        if len(row) > 7 and row[7] <= 0:
            continue
        p_max, p_min = float(row[8]), float(row[9])
        span = max(p_max - p_min, 0.0)
        try:
            generators.append(Generator(int(row[0]), *map(float, coeffs), p_min, p_max,
                                        r_max_fraction * span, r_max_fraction * span, c_up, c_dn))
        except CaseError as exc:
            raise CaseError(f"gen row at line {gen_lines[k]}: {exc}") from None

    branches = []
    br_lines = [ln for ln, _ in mats["branch"]]
    for k, row in enumerate(branch):
        if row[10] == 0:
            continue
        limit = float(row[5])
        try:
            branches.append(Branch(int(row[0]), int(row[1]), float(row[3]), limit if limit > 0 else None))
        except CaseError as exc:
            raise CaseError(f"branch row at line {br_lines[k]}: {exc}") from None

    return NetworkCase(buses, tuple(branches), tuple(generators), loads, (), base_mva, name)


# --------------------------------------------------------------------------
# JSON

def case_schema() -> dict:
    return json.loads(resources.files("gmm_drcvar.data").joinpath("case_schema.json").read_text())


_GEN_DEFAULTS = {"c2": 0.0, "c1": 0.0, "c0": 0.0, "p_min": 0.0, "r_up_max": None,
                 "r_dn_max": None, "c_up": 0.0, "c_dn": 0.0}


def normalize_case_dict(data: dict) -> dict:
    """Canonical form of a JSON case: defaults filled in, 0 limits -> null."""
    out = {"name": data.get("name", ""), "base_mva": float(data.get("base_mva", 100.0))}
    out["buses"] = [{"id": int(b["id"]), "slack": bool(b.get("slack", False))} for b in data["buses"]]
    out["branches"] = []
    for br in data["branches"]:
        limit = br.get("flow_limit")
        out["branches"].append({"from": int(br["from"]), "to": int(br["to"]), "x": float(br["x"]),
                                "flow_limit": float(limit) if limit else None})
    out["generators"] = []
    for g in data["generators"]:
        rec = {**_GEN_DEFAULTS, **g}
        span = float(rec["p_max"]) - float(rec["p_min"])
        gen = {"bus": int(rec["bus"])}
        for key in ("c2", "c1", "c0", "p_min", "p_max"):
            gen[key] = float(rec[key])
        gen["r_up_max"] = float(span if rec["r_up_max"] is None else rec["r_up_max"])
        gen["r_dn_max"] = float(span if rec["r_dn_max"] is None else rec["r_dn_max"])
        gen["c_up"] = float(rec["c_up"])
        gen["c_dn"] = float(rec["c_dn"])
        out["generators"].append(gen)
    out["loads"] = [{"bus": int(ld["bus"]), "demand": float(ld["demand"])} for ld in data.get("loads", [])]
    out["wind_farms"] = [{"id": str(w.get("id") or f"wf{k + 1}"), "bus": int(w["bus"]),
                          "forecast": float(w["forecast"])}
                         for k, w in enumerate(data.get("wind_farms", []))]
    out["meta"] = dict(data.get("meta", {}))
    return out


def case_from_dict(data: dict) -> NetworkCase:
    try:
        jsonschema.validate(data, case_schema())
    except jsonschema.ValidationError as exc:
        pointer = "/" + "/".join(str(p) for p in exc.absolute_path)
        raise CaseError(f"schema violation at {pointer}: {exc.message}") from None
    d = normalize_case_dict(data)
    buses = tuple(Bus(b["id"], b["slack"]) for b in d["buses"])
    branches = tuple(Branch(b["from"], b["to"], b["x"], b["flow_limit"]) for b in d["branches"])
    gens = tuple(Generator(g["bus"], g["c2"], g["c1"], g["c0"], g["p_min"], g["p_max"],
                           g["r_up_max"], g["r_dn_max"], g["c_up"], g["c_dn"]) for g in d["generators"])
    loads = tuple(Load(ld["bus"], ld["demand"]) for ld in d["loads"])
    winds = tuple(WindFarm(w["bus"], w["forecast"], w["id"]) for w in d["wind_farms"])
    return NetworkCase(buses, branches, gens, loads, winds, d["base_mva"], d["name"], d["meta"])


def parse_json_case(text: str) -> NetworkCase:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return case_from_dict(data)


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "name": case.name,
        "base_mva": float(case.base_mva),
        "buses": [{"id": b.id, "slack": b.is_slack} for b in case.buses],
        "branches": [{"from": b.from_bus, "to": b.to_bus, "x": b.x, "flow_limit": b.flow_limit}
                     for b in case.branches],
        "generators": [{"bus": g.bus, "c2": g.cost_c2, "c1": g.cost_c1, "c0": g.cost_c0,
                        "p_min": g.p_min, "p_max": g.p_max, "r_up_max": g.r_up_max,
                        "r_dn_max": g.r_dn_max, "c_up": g.c_up, "c_dn": g.c_dn}
                       for g in case.generators],
        "loads": [{"bus": ld.bus, "demand": ld.demand} for ld in case.loads],
        "wind_farms": [{"id": w.id, "bus": w.bus, "forecast": w.forecast} for w in case.wind_farms],
        "meta": dict(case.meta),
    }


def serialize_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=2)


def load_case(path) -> NetworkCase:
    """Read a ``.m`` (MATPOWER) or ``.json`` case file."""
    path = str(path)
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".m"):
        return parse_matpower(text, name=re.sub(r".*/|\.m$", "", path))
    return parse_json_case(text)


def with_wind(case: NetworkCase, wind_farms: Sequence[WindFarm], **meta: Any) -> NetworkCase:
    return NetworkCase(case.buses, case.branches, case.generators, case.loads, tuple(wind_farms),
                       case.base_mva, case.name, {**case.meta, **meta})


def scale_flow_limits(case: NetworkCase, factor: float) -> NetworkCase:
    branches = tuple(Branch(b.from_bus, b.to_bus, b.x,
                            None if b.flow_limit is None else b.flow_limit * factor)
                     for b in case.branches)
    return NetworkCase(case.buses, branches, case.generators, case.loads, case.wind_farms,
                       case.base_mva, case.name, {**case.meta, "flow_limit_scale": factor})


# --------------------------------------------------------------------------
# shift factors

@dataclass(frozen=True)
class PtdfSet:
    """Line sensitivities to injections at generator, wind and load buses.

    ``bus`` is the full L x B bus-PTDF matrix (slack column zero); the
    other three are its columns selected by each entity's bus.
    """
    bus: np.ndarray
    h_gen: np.ndarray
    h_wind: np.ndarray
    h_load: np.ndarray

    def flows(self, injections: np.ndarray) -> np.ndarray:
        return self.bus @ injections


def _susceptance(case: NetworkCase):
    index = {b: i for i, b in enumerate(case.bus_ids)}
    nb, nl = len(case.buses), len(case.branches)
    b = np.array([1.0 / br.x for br in case.branches])
    cft = np.zeros((nl, nb))
    for k, br in enumerate(case.branches):
        cft[k, index[br.from_bus]] = 1.0
        cft[k, index[br.to_bus]] = -1.0
    bf = b[:, None] * cft
    return cft.T @ bf, bf, index


def build_ptdf(case: NetworkCase) -> PtdfSet:
    bbus, bf, index = _susceptance(case)
    slack = index[case.slack_bus]
    keep = [i for i in range(len(case.buses)) if i != slack]
    ptdf = np.zeros((len(case.branches), len(case.buses)))
    if keep:
        reduced = bbus[np.ix_(keep, keep)]
        try:
            # rcond check: a disconnected or degenerate network gives a singular matrix
            if np.linalg.cond(reduced) > 1e14:
                raise np.linalg.LinAlgError
            ptdf[:, keep] = np.linalg.solve(reduced, bf[:, keep].T).T
        except np.linalg.LinAlgError:
            raise CaseError("singular reduced susceptance matrix") from None
    pick = lambda items: ptdf[:, [index[x.bus] for x in items]].reshape(len(case.branches), len(items))
    return PtdfSet(ptdf, pick(case.generators), pick(case.wind_farms), pick(case.loads))


def dc_power_flow(case: NetworkCase, injections: np.ndarray) -> np.ndarray:
    """Branch flows (MW) from a direct angle solve; injections per bus, must balance."""
    bbus, bf, index = _susceptance(case)
    slack = index[case.slack_bus]
    keep = [i for i in range(len(case.buses)) if i != slack]
    theta = np.zeros(len(case.buses))
    theta[keep] = np.linalg.solve(bbus[np.ix_(keep, keep)], np.asarray(injections, float)[keep])
    return bf @ theta
