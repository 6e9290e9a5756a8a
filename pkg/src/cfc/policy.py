"""Data access policies: DAGs of permitted transforms.

Node 0 is the client upload.  Each edge names the application digest a
transform must attest to, an upper bound on its privacy parameters, how many
times one blob may be accessed along it, and whether its output may leave
the trusted boundary (terminal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Any, Mapping

from . import canonical
from .canonical import b64d
from .errors import (
    AmbiguousEdge,
    BadConstraint,
    ConstraintViolation,
    CyclicPolicy,
    DanglingEdge,
    InvalidPolicy,
    NoMatchingEdge,
)

# closed set: anything else fails validation
CONSTRAINT_KEYS = ("epsilon_max", "delta_max")
# constraint name -> transform config field it bounds
_BOUNDED_FIELD = {"epsilon_max": "epsilon", "delta_max": "delta"}


@dataclass(frozen=True)
class PolicyEdge:
    edge_id: str
    src_node: int
    dst_node: int
    required_application_digest: bytes
    constraints: Mapping[str, float] = field(default_factory=dict)
    usage_limit: int = 1
    terminal: bool = False

    @property
    def epsilon_max(self) -> float | None:
        return self.constraints.get("epsilon_max")

    @property
    def delta_max(self) -> float | None:
        return self.constraints.get("delta_max")

    def to_dict(self) -> dict:
        return {
            "edge_id": self.edge_id,
            "src_node": self.src_node,
            "dst_node": self.dst_node,
            "required_application_digest": self.required_application_digest,
            "constraints": dict(self.constraints),
            "usage_limit": self.usage_limit,
            "terminal": self.terminal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyEdge":
        return cls(
            edge_id=str(d["edge_id"]),
            src_node=int(d["src_node"]),
            dst_node=int(d["dst_node"]),
            required_application_digest=b64d(d["required_application_digest"]),
            constraints=dict(d.get("constraints", {})),
            usage_limit=d.get("usage_limit", 1),
            terminal=bool(d.get("terminal", False)),
        )


@dataclass(frozen=True)
class AccessPolicy:
    nodes: tuple[int, ...]
    edges: tuple[PolicyEdge, ...]
    name: str = ""

    def edge(self, edge_id: str) -> PolicyEdge:
        for e in self.edges:
            if e.edge_id == edge_id:
                return e
        raise KeyError(edge_id)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": sorted(self.nodes),
            "edges": [e.to_dict() for e in sorted(self.edges, key=lambda e: e.edge_id)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccessPolicy":
        try:
            return cls(
                nodes=tuple(int(n) for n in d["nodes"]),
                edges=tuple(PolicyEdge.from_dict(e) for e in d["edges"]),
                name=str(d.get("name", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidPolicy(f"malformed policy document: {exc}") from exc

    def to_text(self) -> str:
        return canonical.dumps(self)

    @classmethod
    def from_text(cls, text: str) -> "AccessPolicy":
        try:
            return cls.from_dict(canonical.loads(text))
        except ValueError as exc:
            raise InvalidPolicy(f"policy is not valid JSON: {exc}") from exc


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate(p: AccessPolicy) -> None:
    nodes = set(p.nodes)
    if len(nodes) != len(p.nodes):
        raise InvalidPolicy("duplicate node ids")
    if 0 not in nodes:
        raise InvalidPolicy("node 0 (client upload) missing")
    ids = [e.edge_id for e in p.edges]
    if len(set(ids)) != len(ids):
        raise InvalidPolicy("duplicate edge ids")
    for e in p.edges:
        if e.src_node not in nodes or e.dst_node not in nodes:
            raise DanglingEdge(f"edge {e.edge_id} references unknown node")
        if len(e.required_application_digest) != 32:
            raise BadConstraint(f"edge {e.edge_id}: application digest must be 32 bytes")
        unknown = set(e.constraints) - set(CONSTRAINT_KEYS)
        if unknown:
            raise BadConstraint(f"edge {e.edge_id}: unknown constraint(s) {sorted(unknown)}")
        eps, delta = e.constraints.get("epsilon_max"), e.constraints.get("delta_max")
        if eps is not None and not (_is_number(eps) and eps >= 0):
            raise BadConstraint(f"edge {e.edge_id}: epsilon_max must be a finite number >= 0")
        if delta is not None and not (_is_number(delta) and 0 <= delta <= 1):
            raise BadConstraint(f"edge {e.edge_id}: delta_max must lie in [0, 1]")
        if not isinstance(e.usage_limit, int) or isinstance(e.usage_limit, bool) or e.usage_limit < 1:
            raise BadConstraint(f"edge {e.edge_id}: usage_limit must be an integer >= 1")
        if e.terminal and (eps is None or delta is None):
            raise BadConstraint(f"terminal edge {e.edge_id} must bound epsilon and delta")
    graph: dict[int, set[int]] = {n: set() for n in nodes}
    for e in p.edges:
        graph[e.dst_node].add(e.src_node)
    try:
        tuple(TopologicalSorter(graph).static_order())
    except CycleError as exc:
        raise CyclicPolicy(f"policy graph has a cycle through {exc.args[1]}") from exc
    reachable, frontier = {0}, [0]
    while frontier:
        n = frontier.pop()
        for e in p.edges:
            if e.src_node == n and e.dst_node not in reachable:
                reachable.add(e.dst_node)
                frontier.append(e.dst_node)
    if reachable != nodes:
        raise DanglingEdge(f"nodes {sorted(nodes - reachable)} unreachable from node 0")
    if not any(e.terminal for e in p.edges):
        raise InvalidPolicy("policy has no terminal edge; nothing could ever be released")


def canonical_digest(p: AccessPolicy) -> bytes:
    validate(p)
    return canonical.digest(p)


def topological_nodes(p: AccessPolicy) -> list[int]:
    graph: dict[int, set[int]] = {n: set() for n in p.nodes}
    for e in p.edges:
        graph[e.dst_node].add(e.src_node)
    return list(TopologicalSorter(graph).static_order())


def _violation(edge: PolicyEdge, config: Mapping[str, Any]) -> ConstraintViolation | None:
    for name in CONSTRAINT_KEYS:
        bound = edge.constraints.get(name)
        if bound is None:
            continue
        fld = _BOUNDED_FIELD[name]
        value = config.get(fld)
        if value is None:
            return ConstraintViolation(name, f"edge {edge.edge_id} bounds {fld} but the transform declares none")
        if not value <= bound:
            return ConstraintViolation(name, f"{fld}={value!r} exceeds {name}={bound!r} on edge {edge.edge_id}")
    return None


def match_edge(p: AccessPolicy, src_node: int, transform_identity: Any,
               transform_config: Mapping[str, Any]) -> PolicyEdge:
    """The unique edge out of ``src_node`` that admits this transform.

    ``transform_identity`` is a verified attestation identity (or, for
    convenience, a bare application digest).
    """
    if isinstance(transform_identity, (bytes, bytearray)):
        application_digest = bytes(transform_identity)
    else:
        application_digest = transform_identity.chain.application_digest
    candidates = [e for e in p.edges
                  if e.src_node == src_node and e.required_application_digest == application_digest]
    if not candidates:
        raise NoMatchingEdge(f"no edge from node {src_node} for application {application_digest.hex()[:16]}")
    matched, violations = [], []
    for e in candidates:
        v = _violation(e, transform_config)
        (violations if v else matched).append(v or e)
    if not matched:
        raise violations[0]
    if len(matched) > 1:
        raise AmbiguousEdge(f"edges {[e.edge_id for e in matched]} all admit the transform")
    return matched[0]
