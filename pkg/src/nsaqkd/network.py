"""Network layer: protocol assignment per service, rate composition and
survivability under node compromise.

Hops come in two kinds:

* a BB84 hop is one fibre link; the receiving end holds the key, so any
  intermediate node on a multi-hop chain must be a trusted relay;
* an MDI hop joins two nodes through a measurement relay; the relay learns
  nothing about the key and need not be trusted.

Control services only use paths without trusted intermediaries: a single MDI
hop, or a direct link when the endpoints are adjacent.  Data services take the
widest path (largest bottleneck rate) over both hop kinds with trusted relays
in between.  Ties go to fewer hops, then to the lexicographically smaller node
sequence.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .schema import SchemaError, validate

log = logging.getLogger(__name__)

DEMANDS = ("control", "data")
ROLES = ("user", "relay")
MAX_SCENARIOS = 1_000_000


class TopologyError(ValueError):
    """The topology violates a structural invariant."""


@dataclass(frozen=True)
class Node:
    id: str
    role: str = "user"
    trusted: bool = True
    measurement: bool = True  # meaningful for relays only

    @property
    def is_measurement_relay(self) -> bool:
        return self.role == "relay" and self.measurement


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    length_km: float
    loss_db_per_km: float = 0.196
    capabilities: frozenset = frozenset({"BB84"})

    @property
    def loss_db(self) -> float:
        return self.length_km * self.loss_db_per_km

    def other(self, n: str) -> str:
        return self.b if n == self.a else self.a


@dataclass(frozen=True)
class Service:
    id: str
    source: str
    destination: str
    demand: str


@dataclass(frozen=True)
class Hop:
    """One key-generating hop.  ``via`` is the measurement relay of an MDI hop."""

    protocol: str
    a: str
    b: str
    via: str | None = None

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.a, self.via, self.b) if self.via else (self.a, self.b)

    def label(self) -> str:
        return f"{self.protocol}:" + "-".join(self.nodes)

    def reversed(self) -> "Hop":
        return Hop(self.protocol, self.b, self.a, self.via)

    def canonical(self) -> "Hop":
        return self if self.a <= self.b else self.reversed()


@dataclass
class NetworkTopology:
    nodes: dict[str, Node]
    links: list[Link]
    services: list[Service]
    hop_rates: dict[tuple, float] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for link in self.links:
            for end in (link.a, link.b):
                if end not in self.nodes:
                    raise TopologyError(f"link {link.a}-{link.b} references unknown node {end!r}")
            if link.a == link.b:
                raise TopologyError(f"link {link.a}-{link.b} is a self loop")
            if not link.length_km > 0:
                raise TopologyError(f"link {link.a}-{link.b} has non-positive length {link.length_km}")
            if link.loss_db_per_km < 0:
                raise TopologyError(f"link {link.a}-{link.b} has negative loss")
            if not link.capabilities or not link.capabilities <= {"BB84", "MDI"}:
                raise TopologyError(f"link {link.a}-{link.b} has invalid capabilities {sorted(link.capabilities)}")
            if "MDI" in link.capabilities and not (self.nodes[link.a].is_measurement_relay
                                                   or self.nodes[link.b].is_measurement_relay):
                raise TopologyError(f"MDI link {link.a}-{link.b} does not end at a measurement relay")
        seen = set()
        for s in self.services:
            if s.id in seen:
                raise TopologyError(f"duplicate service id {s.id!r}")
            seen.add(s.id)
            for end in (s.source, s.destination):
                if end not in self.nodes:
                    raise TopologyError(f"service {s.id} references unknown node {end!r}")
            if s.source == s.destination:
                raise TopologyError(f"service {s.id} has identical endpoints")
            if s.demand not in DEMANDS:
                raise TopologyError(f"service {s.id} has unknown demand {s.demand!r}")

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, data: Mapping) -> "NetworkTopology":
        validate(data, "topology", "topology")
        nodes = {}
        for n in data["nodes"]:
            if n["id"] in nodes:
                raise TopologyError(f"duplicate node id {n['id']!r}")
            nodes[n["id"]] = Node(n["id"], n.get("role", "user"), n.get("trusted", True),
                                  n.get("measurement", True))
        links = [Link(l["a"], l["b"], float(l["length_km"]), float(l.get("loss_db_per_km", 0.196)),
                      frozenset(l.get("capabilities", ["BB84"]))) for l in data["links"]]
        services = [Service(s.get("id", f"{s['source']}->{s['destination']}:{s['demand']}"),
                            s["source"], s["destination"], s["demand"]) for s in data.get("services", [])]
        rates = {}
        for r in data.get("hop_rates", []):
            hop = _hop_from_nodes(r["protocol"], r["nodes"])
            rates[hop.canonical()] = float(r["rate"])
        return cls(nodes, links, services, rates)

    @classmethod
    def load(cls, path: str | Path) -> "NetworkTopology":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"topology {path}",
                              [f"line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {
            "nodes": [{"id": n.id, "role": n.role, "trusted": n.trusted, "measurement": n.measurement}
                      for n in self.nodes.values()],
            "links": [{"a": l.a, "b": l.b, "length_km": l.length_km, "loss_db_per_km": l.loss_db_per_km,
                       "capabilities": sorted(l.capabilities)} for l in self.links],
            "services": [{"id": s.id, "source": s.source, "destination": s.destination, "demand": s.demand}
                         for s in self.services],
        }
        if self.hop_rates:
            out["hop_rates"] = [{"protocol": h.protocol, "nodes": list(h.nodes), "rate": r}
                                for h, r in sorted(self.hop_rates.items(), key=lambda kv: kv[0].label())]
        return out

    # -- hops ---------------------------------------------------------------
    def link_between(self, a: str, b: str) -> Link | None:
        for link in self.links:
            if {link.a, link.b} == {a, b}:
                return link
        return None

    def candidate_hops(self) -> list[Hop]:
        """Every BB84 link and every MDI pairing through a measurement relay."""
        hops = []
        for link in self.links:
            if "BB84" in link.capabilities:
                hops.append(Hop("BB84", *sorted((link.a, link.b))))
        for r in sorted(self.nodes):
            if not self.nodes[r].is_measurement_relay:
                continue
            ends = sorted({l.other(r) for l in self.links if r in (l.a, l.b) and "MDI" in l.capabilities})
            for u, v in itertools.combinations(ends, 2):
                hops.append(Hop("MDI", u, v, r))
        return hops


def _hop_from_nodes(protocol: str, nodes) -> Hop:
    nodes = list(nodes)
    if protocol == "BB84" and len(nodes) == 2:
        return Hop("BB84", nodes[0], nodes[1])
    if protocol == "MDI" and len(nodes) == 3:
        return Hop("MDI", nodes[0], nodes[2], nodes[1])
    raise TopologyError(f"bad hop specification {protocol} {nodes}")


# ---------------------------------------------------------------------------
# Hop rates

RateFn = Callable[[Hop], float]


def table_rate_fn(rates: Mapping[Hop, float]) -> RateFn:
    """Rate function backed by an explicit table; unknown hops raise KeyError."""
    table = {h.canonical(): r for h, r in rates.items()}

    def rate(hop: Hop) -> float:
        try:
            return table[hop.canonical()]
        except KeyError:
            raise KeyError(f"no rate for hop {hop.label()}") from None
    return rate


def analytic_rate_fn(topology: NetworkTopology, *, bb84_params=None, mdi_params=None,
                     internal_loss_db: float = 4.2, detector=None, e_d_bb84: float = 0.0015,
                     e_d_mdi: float = 0.02, mode=None, gain_convention: str = "setting_sum") -> RateFn:
    """Hop rates predicted by the analytic channel and key-rate pipeline.

    Explicit ``topology.hop_rates`` entries take precedence.  Defaults follow
    the bundled paper scenario: 0.25 efficient detectors with 7.5e-6 dark
    counts, 4.2 dB internal loss, asymptotic key rates.
    """
    from .optics import DetectorModel, OpticalLinkModel
    from .optimizer import ASYMPTOTIC, ParameterVector, evaluate_objective

    detector = detector or DetectorModel(y0=7.5e-6, eta_d=0.25)
    mode = mode or ASYMPTOTIC
    bb84_params = bb84_params or ParameterVector("BB84", 0.538, 0.063, 0.003,
                                                 (0.531, 0.209, 0.089, 0.110, 0.043, 0.018))
    mdi_params = mdi_params or ParameterVector("MDI", 0.284, 0.057, 0.0,
                                               (0.466, 0.035, 0.076, 0.293, 0.130))

    @lru_cache(maxsize=None)
    def compute(hop: Hop) -> float:
        if hop in topology.hop_rates:
            return topology.hop_rates[hop]
        if hop.protocol == "BB84":
            link = topology.link_between(hop.a, hop.b)
            ol = OpticalLinkModel.from_db(link.loss_db, internal_loss_db=internal_loss_db,
                                          detector=detector, e_d=e_d_bb84)
            return evaluate_objective(bb84_params, "BB84", ol, mode)
        la = topology.link_between(hop.a, hop.via)
        lb = topology.link_between(hop.via, hop.b)
        ol = OpticalLinkModel.from_db(la.loss_db, lb.loss_db, internal_loss_db=internal_loss_db,
                                      detector=detector, e_d=e_d_mdi)
        return evaluate_objective(mdi_params, "MDI", ol, mode, gain_convention=gain_convention)

    return lambda hop: compute(hop.canonical())


# ---------------------------------------------------------------------------
# Planning

@dataclass(frozen=True)
class ServicePlan:
    service: Service
    hops: tuple[Hop, ...] = ()
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return bool(self.hops)

    @property
    def path(self) -> tuple[str, ...]:
        if not self.hops:
            return ()
        return (self.hops[0].a,) + tuple(h.b for h in self.hops)

    @property
    def trusted_intermediates(self) -> tuple[str, ...]:
        return self.path[1:-1]

    @property
    def measurement_relays(self) -> tuple[str, ...]:
        return tuple(h.via for h in self.hops if h.via)

    def to_dict(self) -> dict:
        return {"service": self.service.id, "source": self.service.source,
                "destination": self.service.destination, "demand": self.service.demand,
                "feasible": self.feasible, "reason": self.reason,
                "hops": [{"protocol": h.protocol, "nodes": list(h.nodes)} for h in self.hops]}


@dataclass(frozen=True)
class Plan:
    services: tuple[ServicePlan, ...]

    def __getitem__(self, service_id: str) -> ServicePlan:
        for sp in self.services:
            if sp.service.id == service_id:
                return sp
        raise KeyError(f"no service {service_id!r} in plan")

    def to_dict(self) -> dict:
        return {"services": [sp.to_dict() for sp in self.services]}


def _oriented(hop: Hop, start: str) -> Hop:
    return hop if hop.a == start else hop.reversed()


def _best_parallel(hops: Iterable[Hop], rate_fn: RateFn) -> dict[tuple[str, str], tuple[float, Hop]]:
    """Best hop per unordered endpoint pair: highest rate, then label order."""
    best: dict[tuple[str, str], tuple[float, Hop]] = {}
    for h in hops:
        key = tuple(sorted((h.a, h.b)))
        r = rate_fn(h)
        cur = best.get(key)
        if cur is None or (r, _neg_label(h)) > (cur[0], _neg_label(cur[1])):
            best[key] = (r, h)
    return best


def _neg_label(h: Hop):
    # Larger tuple wins in comparisons; invert the label so smaller labels win.
    return tuple(-ord(c) for c in h.label())


def _plan_control(topo: NetworkTopology, s: Service, rate_fn: RateFn, hops: list[Hop]) -> ServicePlan:
    ends = {s.source, s.destination}
    mdi = [h for h in hops if h.protocol == "MDI" and {h.a, h.b} == ends]
    if mdi:
        rate, hop = max(((rate_fn(h), h) for h in mdi), key=lambda t: (t[0], _neg_label(t[1])))
        return ServicePlan(s, (_oriented(hop, s.source),), "MDI via untrusted measurement relay")
    direct = [h for h in hops if h.protocol == "BB84" and {h.a, h.b} == ends]
    if direct:
        return ServicePlan(s, (_oriented(direct[0], s.source),), "direct link, no intermediary")
    return ServicePlan(s, (), "no path free of trusted intermediaries")


def _plan_data(topo: NetworkTopology, s: Service, rate_fn: RateFn, hops: list[Hop]) -> ServicePlan:
    best = _best_parallel(hops, rate_fn)
    adj: dict[str, list[tuple[str, float, Hop]]] = {}
    for (u, v), (r, h) in best.items():
        adj.setdefault(u, []).append((v, r, h))
        adj.setdefault(v, []).append((u, r, h))

    def passable(n: str) -> bool:
        node = topo.nodes[n]
        return n == s.source or (node.role == "relay" and node.trusted)

    # Widest path value (max-min) with a label-setting search.
    width = {s.source: math.inf}
    done = set()
    while True:
        cand = [(w, n) for n, w in width.items() if n not in done]
        if not cand:
            break
        w, n = max(cand, key=lambda t: (t[0], [-ord(c) for c in t[1]]))
        done.add(n)
        if n != s.source and (n == s.destination or not passable(n)):
            continue
        for m, r, _ in adj.get(n, []):
            nw = min(w, r)
            if m not in done and nw > width.get(m, -math.inf):
                width[m] = nw
    if s.destination not in width:
        return ServicePlan(s, (), "destination unreachable through trusted relays")
    target = width[s.destination]

    # Among paths whose bottleneck reaches the optimum: fewest hops, then the
    # lexicographically smallest node sequence.
    def usable(r):
        return r >= target

    dist = {s.destination: 0}
    q = deque([s.destination])
    while q:
        n = q.popleft()
        if n != s.destination and not passable(n):
            continue
        for m, r, _ in adj.get(n, []):
            if usable(r) and m not in dist:
                dist[m] = dist[n] + 1
                if m != s.source:
                    q.append(m)
    path_hops = []
    cur = s.source
    while cur != s.destination:
        nxt = sorted((m, h) for m, r, h in adj[cur]
                     if usable(r) and dist.get(m) == dist[cur] - 1
                     and (m == s.destination or passable(m)))
        m, h = nxt[0][0], nxt[0][1]
        path_hops.append(_oriented(h, cur))
        cur = m
    kinds = "+".join(sorted({h.protocol for h in path_hops}))
    return ServicePlan(s, tuple(path_hops), f"widest path ({kinds})")


def assign_protocols(topology: NetworkTopology, rate_fn: RateFn | None = None) -> Plan:
    """Route every service; infeasible services get an empty hop list and a reason."""
    rate_fn = rate_fn or analytic_rate_fn(topology)
    hops = topology.candidate_hops()
    plans = []
    for s in topology.services:
        if s.demand == "control":
            plans.append(_plan_control(topology, s, rate_fn, hops))
        else:
            plans.append(_plan_data(topology, s, rate_fn, hops))
    return Plan(tuple(plans))


def end_to_end_rate(plan: Plan, rate_fn: RateFn) -> dict[str, float | None]:
    """Per-service key rate: the minimum hop rate; None for infeasible services."""
    out: dict[str, float | None] = {}
    for sp in plan.services:
        if not sp.feasible:
            out[sp.service.id] = None
            continue
        rates = []
        for hop in sp.hops:
            try:
                rates.append(float(rate_fn(hop)))
            except KeyError:
                raise ValueError(f"missing rate for hop {hop.label()} of service {sp.service.id}") from None
        out[sp.service.id] = min(rates)
    return out


# ---------------------------------------------------------------------------
# Survivability

@dataclass(frozen=True)
class SurvivabilityReport:
    compromised: tuple[str, ...]
    verdicts: dict
    surviving_fraction: float

    def to_dict(self) -> dict:
        return {"compromised": list(self.compromised), "verdicts": dict(self.verdicts),
                "surviving_fraction": self.surviving_fraction}


def service_verdict(sp: ServicePlan, compromised: frozenset) -> str:
    if sp.service.source in compromised or sp.service.destination in compromised:
        return "insecure"
    if not sp.feasible:
        return "disconnected"
    if any(n in compromised for n in sp.trusted_intermediates):
        return "insecure"
    # Measurement relays of MDI hops see no key material.
    return "secure"


def survivability(topology: NetworkTopology, plan: Plan, compromised: Iterable[str]) -> SurvivabilityReport:
    comp = frozenset(compromised)
    unknown = comp - set(topology.nodes)
    if unknown:
        raise TopologyError(f"compromised set names unknown nodes {sorted(unknown)}")
    verdicts = {sp.service.id: service_verdict(sp, comp) for sp in plan.services}
    n = len(verdicts)
    frac = sum(v == "secure" for v in verdicts.values()) / n if n else 1.0
    return SurvivabilityReport(tuple(sorted(comp)), verdicts, frac)


@dataclass
class ScenarioEnumeration:
    reports: list[SurvivabilityReport]
    worst_fraction: float
    worst_by_size: dict[int, float]

    def to_dict(self) -> dict:
        return {"worst_fraction": self.worst_fraction,
                "worst_by_size": {str(k): v for k, v in self.worst_by_size.items()},
                "scenarios": [r.to_dict() for r in self.reports]}


def scenario_count(n_nodes: int, k: int) -> int:
    return sum(math.comb(n_nodes, i) for i in range(k + 1))


def enumerate_compromise_scenarios(topology: NetworkTopology, k: int, plan: Plan | None = None,
                                   *, force: bool = False, max_scenarios: int = MAX_SCENARIOS,
                                   rate_fn: RateFn | None = None) -> ScenarioEnumeration:
    """Every compromise set of size 0..k, worst surviving fraction first."""
    n = len(topology.nodes)
    if not 0 <= k <= n:
        raise ValueError(f"k must be in [0, {n}], got {k}")
    total = scenario_count(n, k)
    if total > max_scenarios and not force:
        raise ValueError(f"{total} scenarios exceed the limit of {max_scenarios}; pass force=True to run anyway")
    plan = plan or assign_protocols(topology, rate_fn)
    ids = sorted(topology.nodes)
    reports = [survivability(topology, plan, combo)
               for size in range(k + 1) for combo in itertools.combinations(ids, size)]
    worst_by_size: dict[int, float] = {}
    for r in reports:
        sz = len(r.compromised)
        worst_by_size[sz] = min(worst_by_size.get(sz, 1.0), r.surviving_fraction)
    reports.sort(key=lambda r: (r.surviving_fraction, len(r.compromised), r.compromised))
    return ScenarioEnumeration(reports, min(worst_by_size.values()), worst_by_size)


# ---------------------------------------------------------------------------
# DOT output

def to_dot(topology: NetworkTopology, plan: Plan | None = None,
           rates: Mapping[str, float | None] | None = None) -> str:
    """Graphviz description; relays are boxes, untrusted nodes dashed, MDI links bold."""
    lines = ["graph network {", "  node [fontname=Helvetica];"]
    for n in sorted(topology.nodes.values(), key=lambda n: n.id):
        shape = "box" if n.role == "relay" else "ellipse"
        style = "" if n.trusted else ", style=dashed"
        lines.append(f'  "{n.id}" [shape={shape}{style}];')
    for l in topology.links:
        caps = "/".join(sorted(l.capabilities))
        style = ", style=bold" if "MDI" in l.capabilities else ""
        lines.append(f'  "{l.a}" -- "{l.b}" [label="{l.length_km:g} km {caps}"{style}];')
    if plan is not None:
        for sp in plan.services:
            rate = (rates or {}).get(sp.service.id)
            tag = f" {rate:.3e}" if rate is not None else ""
            lines.append(f"  // {sp.service.id}: {' -> '.join(h.label() for h in sp.hops) or 'infeasible'}{tag}")
    lines.append("}")
    return "\n".join(lines) + "\n"
