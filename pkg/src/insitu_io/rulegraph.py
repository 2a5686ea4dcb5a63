"""Dependency analysis of diagnostics rules.

Every rule becomes a node keyed ``"<diagnostic qname>/<result>"``.  A rule
input names either a result of its own diagnostic, a raw field, or another
diagnostic's final value; edges run from producer to consumer.  The graph is
checked for cycles, each node is assigned a layer (longest path from the raw
inputs), and a scope:

``source``
    the value exists once per producer (raw fields and operators applied to
    them before any communication).
``server``
    the value has been combined across producers and servers.

Operators may not mix scopes; a ``reduction`` moves a value from ``source``
to ``server`` scope, first combining the local producers' contributions.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .config import Config, DiagnosticDef, RuleDef
from .errors import ConfigError

SOURCE = "source"
SERVER = "server"


@dataclass(frozen=True)
class RuleNode:
    key: str
    diagnostic: str
    rule: RuleDef
    inputs: tuple[tuple[str, str], ...]   # (identifier used by the rule, symbol)
    deps: tuple[str, ...]
    scope: str
    layer: int

    @property
    def kind(self) -> str:
        return self.rule.kind

    @property
    def name(self) -> str:
        return self.rule.name

    @property
    def args(self) -> dict:
        return self.rule.args


@dataclass
class RuleGraph:
    nodes: dict            # key -> RuleNode, topologically ordered
    edges: frozenset       # (producer key, consumer key)
    diagnostics: dict      # diagnostic qname -> node keys in topological order
    finals: dict           # diagnostic qname -> final node key
    raw_inputs: dict       # diagnostic qname -> raw field qnames (transitive)
    groups: dict           # diagnostic qname -> data-definition qname
    input_scope: dict      # node key -> scope of its inputs

    def __post_init__(self):
        self._reach = {}
        for key in reversed(list(self.nodes)):
            below = set()
            for a, b in self.edges:
                if a == key:
                    below.add(b)
                    below |= self._reach[b]
            self._reach[key] = frozenset(below)

    def layers(self, diagnostic: str | None = None) -> dict[str, int]:
        keys = self.diagnostics[diagnostic] if diagnostic else self.nodes
        return {k: self.nodes[k].layer for k in keys}

    def reachable(self, a: str, b: str) -> bool:
        return b in self._reach[a]

    def concurrent(self, a: str, b: str) -> bool:
        """True when neither node depends, even indirectly, on the other."""
        return a != b and not self.reachable(a, b) and not self.reachable(b, a)

    def consumers_of_diagnostic(self, qname: str) -> list[str]:
        final = self.finals[qname]
        return sorted({self.nodes[b].diagnostic for a, b in self.edges
                       if a == final and self.nodes[b].diagnostic != qname})

    def diagnostics_of_group(self, group_qname: str) -> list[str]:
        return sorted(d for d, g in self.groups.items() if g == group_qname)


def _resolve_input(ident, diag: DiagnosticDef, config: Config, raw, finals_by_diag):
    local = {r.result for r in diag.rules}
    if ident in local:
        return f"{diag.qname}/{ident}"
    try:
        q = config.resolve(ident, diag.namespace, set(raw) | set(finals_by_diag), "symbol")
    except ConfigError:
        raise ConfigError(f"diagnostic {diag.qname}: rule consumes undefined symbol {ident!r}") from None
    return q if q in raw else finals_by_diag[q]


def build_rule_graph(config: Config) -> RuleGraph:
    raw = config.raw_fields()
    finals_by_diag = {d.qname: f"{d.qname}/{d.field}" for d in config.diagnostics}
    rules: dict[str, tuple[str, RuleDef, tuple]] = {}
    for diag in config.diagnostics:
        for r in diag.rules:
            inputs = tuple((i, _resolve_input(i, diag, config, raw, finals_by_diag))
                           for i in r.inputs)
            rules[f"{diag.qname}/{r.result}"] = (diag.qname, r, inputs)

    deps = {k: tuple(dict.fromkeys(s for _, s in v[2] if s not in raw)) for k, v in rules.items()}
    edges = frozenset((d, k) for k, ds in deps.items() for d in ds)

    # Kahn, visiting ready nodes in declaration order for a stable result
    indeg = {k: len(ds) for k, ds in deps.items()}
    consumers: dict[str, list[str]] = {k: [] for k in rules}
    for a, b in sorted(edges):
        consumers[a].append(b)
    order = list(rules)
    pos = {k: i for i, k in enumerate(order)}
    ready = deque(k for k in order if indeg[k] == 0)
    topo = []
    while ready:
        k = ready.popleft()
        topo.append(k)
        for c in sorted(consumers[k], key=pos.get):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(topo) != len(rules):
        stuck = sorted(k for k in rules if indeg[k] > 0)
        raise ConfigError(f"cyclic dependency among rules: {', '.join(stuck)}")

    layer, scope, in_scope, raw_in = {}, {}, {}, {}
    nodes = {}
    for k in topo:
        diag_q, rule, inputs = rules[k]
        if not inputs:
            raise ConfigError(f"rule {k} depends on no data")
        scopes = {SOURCE if s in raw else scope[s] for _, s in inputs}
        if len(scopes) > 1:
            raise ConfigError(f"rule {k} mixes per-producer and combined inputs")
        (sc,) = scopes
        if rule.kind == "communication":
            if rule.name == "broadcast" and sc == SOURCE:
                raise ConfigError(f"rule {k}: broadcast needs a combined (reduced) input")
            out = SERVER
        else:
            out = sc
        in_scope[k], scope[k] = sc, out
        layer[k] = 1 + max((layer[d] for d in deps[k]), default=-1)
        raw_in[k] = frozenset(s for _, s in inputs if s in raw).union(
            *(raw_in[d] for d in deps[k]))
        nodes[k] = RuleNode(k, diag_q, rule, inputs, deps[k], out, layer[k])

    diagnostics, finals, raw_inputs, groups = {}, {}, {}, {}
    for diag in config.diagnostics:
        keys = [k for k in topo if nodes[k].diagnostic == diag.qname]
        diagnostics[diag.qname] = tuple(keys)
        finals[diag.qname] = finals_by_diag[diag.qname]
        fields = sorted(frozenset().union(*(raw_in[k] for k in keys)))
        raw_inputs[diag.qname] = tuple(fields)
        defs = sorted({config.definition_of(f).qname for f in fields})
        if len(defs) != 1:
            raise ConfigError(
                f"diagnostic {diag.qname} must draw its raw inputs from exactly one "
                f"data-definition, found {defs or 'none'}")
        groups[diag.qname] = defs[0]

    return RuleGraph(nodes, edges, diagnostics, finals, raw_inputs, groups, in_scope)
