"""XML configuration: data definitions, data handling and data writing.

The accepted format follows the three-part layout used by the IO server::

    <data-definition name="raw_fields" frequency="2"> <field .../> </data-definition>
    <data-handling> <diagnostic ...> <operator .../> <communication .../> </diagnostic> </data-handling>
    <group name="3d_fields"> <member name="w"/> </group>
    <data-writing> <file ...> <include .../> </file> </data-writing>

plus two extensions:

* ``<include file="path"/>`` at top level inlines another configuration
  text obtained from a caller-supplied ``loader(path) -> str``.
* ``namespace="ns"`` on definitions; references may be qualified as
  ``ns::name``.  Unqualified references resolve in the referring element's
  namespace, then ``global``, then in the single namespace defining the
  name.  A name defined in several namespaces must be qualified.

``{key}`` placeholders in attribute values are replaced by model options.
Unquoted attribute values (``collective=true``) are accepted.

See ``docs/config_schema.md`` for the full element reference.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Callable

from .errors import ConfigError
from .operators import lookup

GLOBAL_NS = "global"
FIELD_KINDS = ("scalar", "array")
DATA_TYPES = ("double", "integer", "string")
TIME_MANIPULATIONS = ("averaged", "instantaneous", "none")
ROOT_TAG = "io-configuration"

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_ATTR = re.compile(r"""(\s+)([\w:.-]+)(\s*=\s*)("[^"]*"|'[^']*'|[^\s"'<>/=]+)""")
_TAG = re.compile(r"<[A-Za-z][^<>]*>")
_DECL = re.compile(r"^\s*<\?xml[^>]*\?>", re.S)


def qualify(name: str, namespace: str = GLOBAL_NS) -> str:
    return name if "::" in name else f"{namespace}::{name}"


def split_qualified(qname: str) -> tuple[str, str]:
    ns, _, name = qname.rpartition("::")
    return (ns or GLOBAL_NS), name


def substitute_placeholders(text: str, model_options) -> str:
    """Replace every ``{key}`` with ``str(model_options[key])``."""

    def repl(m):
        key = m.group(1)
        if key not in model_options:
            raise ConfigError(f"placeholder {{{key}}} has no model option {key!r}")
        return str(model_options[key])

    return _PLACEHOLDER.sub(repl, text)


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str = "scalar"
    data_type: str = "double"
    dims: tuple[str, ...] | None = None
    collective: bool = False
    optional: bool = False
    namespace: str = GLOBAL_NS

    @property
    def qname(self) -> str:
        return qualify(self.name, self.namespace)


@dataclass(frozen=True)
class DataDefinition:
    name: str
    frequency: int
    fields: tuple[FieldSpec, ...]
    namespace: str = GLOBAL_NS

    @property
    def qname(self) -> str:
        return qualify(self.name, self.namespace)


@dataclass(frozen=True)
class RuleDef:
    kind: str
    name: str
    result: str
    args: dict = field(default_factory=dict)
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class DiagnosticDef:
    field: str
    rules: tuple[RuleDef, ...]
    kind: str = "scalar"
    data_type: str = "double"
    units: str | None = None
    namespace: str = GLOBAL_NS
    attributes: dict = field(default_factory=dict)

    @property
    def qname(self) -> str:
        return qualify(self.field, self.namespace)


@dataclass(frozen=True)
class IncludeDef:
    target: str
    group: bool
    time_manipulation: str
    output_frequency: float


@dataclass(frozen=True)
class FileDef:
    name: str
    write_time_frequency: float
    includes: tuple[IncludeDef, ...]
    title: str = ""
    namespace: str = GLOBAL_NS


@dataclass(frozen=True)
class WritingConfig:
    groups: dict = field(default_factory=dict)
    files: tuple[FileDef, ...] = ()


@dataclass(frozen=True)
class Config:
    data_definitions: tuple[DataDefinition, ...] = ()
    diagnostics: tuple[DiagnosticDef, ...] = ()
    writing: WritingConfig = field(default_factory=WritingConfig)

    # lookups ---------------------------------------------------------------

    def raw_fields(self) -> dict[str, FieldSpec]:
        return {f.qname: f for d in self.data_definitions for f in d.fields}

    def definition_of(self, field_qname: str) -> DataDefinition:
        for d in self.data_definitions:
            if any(f.qname == field_qname for f in d.fields):
                return d
        raise KeyError(field_qname)

    def definition(self, qname: str) -> DataDefinition:
        for d in self.data_definitions:
            if d.qname == qname:
                return d
        raise KeyError(qname)

    def diagnostic(self, qname: str) -> DiagnosticDef:
        for d in self.diagnostics:
            if d.qname == qname:
                return d
        raise KeyError(qname)

    def symbols(self) -> set[str]:
        return set(self.raw_fields()) | {d.qname for d in self.diagnostics}

    def resolve(self, name: str, namespace: str = GLOBAL_NS, table=None, what="field") -> str:
        return _resolve(name, namespace, self.symbols() if table is None else table, what)

    def file_targets(self, fdef: FileDef) -> list[tuple[str, IncludeDef]]:
        """Expand groups: (field qname, include) pairs in include order."""
        out = []
        for inc in fdef.includes:
            members = self.writing.groups[inc.target] if inc.group else (inc.target,)
            out.extend((m, inc) for m in members)
        return out


def _resolve(name, namespace, table, what):
    if "::" in name:
        if name in table:
            return name
        raise ConfigError(f"undefined {what} {name!r}")
    for ns in (namespace, GLOBAL_NS):
        q = f"{ns}::{name}"
        if q in table:
            return q
    matches = sorted(q for q in table if split_qualified(q)[1] == name)
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise ConfigError(f"undefined {what} {name!r}")
    spaces = ", ".join(split_qualified(m)[0] for m in matches)
    raise ConfigError(
        f"{what} {name!r} is defined in namespaces {spaces}; qualify it as <namespace>::{name}")


# XML front end -------------------------------------------------------------


def _quote_attributes(text: str) -> str:
    def fix_attr(m):
        if m.group(4)[0] in "\"'":
            return m.group(0)
        return f'{m.group(1)}{m.group(2)}{m.group(3)}"{m.group(4)}"'

    return _TAG.sub(lambda t: _ATTR.sub(fix_attr, t.group(0)), text)


def _parse_xml(text: str) -> ET.Element:
    body = _DECL.sub("", text, count=1)
    body = _quote_attributes(body)
    try:
        root = ET.fromstring(f"<{ROOT_TAG}>{body}</{ROOT_TAG}>")
    except ET.ParseError as exc:
        raise ConfigError(f"malformed XML: {exc}") from None
    children = list(root)
    if len(children) == 1 and children[0].tag == ROOT_TAG:
        return children[0]
    return root


def _load_elements(text, loader, stack):
    out = []
    for el in _parse_xml(text):
        if el.tag == "include":
            path = el.get("file")
            if path is None:
                raise ConfigError("top-level <include> needs a file attribute")
            if path in stack:
                raise ConfigError(f"include cycle: {' -> '.join(stack + (path,))}")
            if loader is None:
                raise ConfigError(f"unresolvable include {path!r}: no loader supplied")
            try:
                sub = loader(path)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"unresolvable include {path!r}: {exc}") from None
            out.extend(_load_elements(sub, loader, stack + (path,)))
        else:
            out.append(el)
    return out


def _bool(value, what):
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"{what}: expected true/false, got {value!r}")


def _positive_float(value, what):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what}: not a number: {value!r}") from None
    if not v > 0:
        raise ConfigError(f"{what}: must be positive, got {value!r}")
    return v


def _required(el, key):
    v = el.get(key)
    if v is None:
        raise ConfigError(f"<{el.tag}> is missing required attribute {key!r}")
    return v


class _Builder:
    def __init__(self, options):
        self.options = options
        self.defs: list[DataDefinition] = []
        self.diags: list[DiagnosticDef] = []
        self.groups: list[tuple[str, str, list[str]]] = []
        self.files: list[tuple[str, float, str, str, list]] = []

    def attrs(self, el) -> dict:
        return {k: substitute_placeholders(v, self.options) for k, v in el.attrib.items()}

    def add(self, el):
        handler = {
            "data-definition": self.data_definition,
            "data-handling": self.data_handling,
            "group": self.group,
            "data-writing": self.data_writing,
        }.get(el.tag)
        if handler is None:
            raise ConfigError(f"unknown element <{el.tag}>")
        handler(el)

    def data_definition(self, el):
        a = self.attrs(el)
        ns = a.get("namespace", GLOBAL_NS)
        name = _required(el, "name")
        try:
            freq = int(a.get("frequency", "1"))
        except ValueError:
            raise ConfigError(f"data-definition {name}: frequency must be an integer") from None
        if freq < 1:
            raise ConfigError(f"data-definition {name}: frequency must be >= 1")
        fields = []
        for child in el:
            if child.tag != "field":
                raise ConfigError(f"unknown element <{child.tag}> in data-definition")
            fields.append(self.field(child, ns))
        if not fields:
            raise ConfigError(f"data-definition {name} has no fields")
        self.defs.append(DataDefinition(a["name"], freq, tuple(fields), ns))

    def field(self, el, default_ns):
        a = self.attrs(el)
        name = _required(el, "name")
        dims = tuple(d.strip() for d in a["size"].split(",") if d.strip()) if "size" in a else None
        kind = a.get("type", "array" if dims else "scalar")
        if kind not in FIELD_KINDS:
            raise ConfigError(f"field {name}: type must be one of {FIELD_KINDS}")
        if dims and kind != "array":
            raise ConfigError(f"field {name}: a sized field must have type=array")
        data_type = a.get("data_type", "double")
        if data_type not in DATA_TYPES:
            raise ConfigError(f"field {name}: data_type must be one of {DATA_TYPES}")
        return FieldSpec(
            name, kind, data_type, dims or None,
            _bool(a.get("collective", "false"), f"field {name} collective"),
            _bool(a.get("optional", "false"), f"field {name} optional"),
            a.get("namespace", default_ns),
        )

    def data_handling(self, el):
        for child in el:
            if child.tag != "diagnostic":
                raise ConfigError(f"unknown element <{child.tag}> in data-handling")
            self.diagnostic(child)

    def diagnostic(self, el):
        a = self.attrs(el)
        name = _required(el, "field")
        rules = []
        for child in el:
            if child.tag not in ("operator", "communication"):
                raise ConfigError(f"unknown element <{child.tag}> in diagnostic {name}")
            r = self.attrs(child)
            rname = _required(child, "name")
            result = _required(child, "result")
            args = {k: v for k, v in r.items() if k not in ("name", "result")}
            impl = lookup(child.tag, rname)
            inputs = tuple(impl.required_fields(args))
            rules.append(RuleDef(child.tag, rname, result, args, inputs))
        kind = a.get("type", "scalar")
        if kind not in FIELD_KINDS:
            raise ConfigError(f"diagnostic {name}: type must be one of {FIELD_KINDS}")
        data_type = a.get("data_type", "double")
        if data_type not in DATA_TYPES:
            raise ConfigError(f"diagnostic {name}: data_type must be one of {DATA_TYPES}")
        extra = {k: v for k, v in a.items()
                 if k not in ("field", "type", "data_type", "units", "namespace")}
        self.diags.append(DiagnosticDef(
            name, tuple(rules), kind, data_type, a.get("units"),
            a.get("namespace", GLOBAL_NS), extra))

    def group(self, el):
        a = self.attrs(el)
        members = []
        for child in el:
            if child.tag != "member":
                raise ConfigError(f"unknown element <{child.tag}> in group")
            members.append(self.attrs(child).get("name") or _required(child, "name"))
        self.groups.append((_required(el, "name"), a.get("namespace", GLOBAL_NS), members))

    def data_writing(self, el):
        for child in el:
            if child.tag == "group":
                self.group(child)
            elif child.tag == "file":
                self.file(child)
            else:
                raise ConfigError(f"unknown element <{child.tag}> in data-writing")

    def file(self, el):
        a = self.attrs(el)
        name = _required(el, "name")
        wtf = _positive_float(a.get("write_time_frequency"), f"file {name} write_time_frequency")
        includes = []
        for child in el:
            if child.tag != "include":
                raise ConfigError(f"unknown element <{child.tag}> in file {name}")
            c = self.attrs(child)
            if ("field" in c) == ("group" in c):
                raise ConfigError(f"file {name}: <include> needs exactly one of field= or group=")
            manip = c.get("time_manipulation", "none")
            if manip not in TIME_MANIPULATIONS:
                raise ConfigError(f"file {name}: time_manipulation must be one of {TIME_MANIPULATIONS}")
            freq = _positive_float(c.get("output_frequency", str(wtf)),
                                   f"file {name} output_frequency")
            if freq > wtf:
                raise ConfigError(f"file {name}: output_frequency {freq} exceeds write_time_frequency {wtf}")
            includes.append((c.get("field") or c.get("group"), "group" in c, manip, freq))
        self.files.append((name, wtf, a.get("title", ""), a.get("namespace", GLOBAL_NS), includes))

    def finish(self) -> Config:
        seen = set()
        for d in self.defs:
            if d.qname in seen:
                raise ConfigError(f"data-definition {d.qname} defined twice")
            seen.add(d.qname)
        raw = {}
        for d in self.defs:
            for f in d.fields:
                if f.qname in raw:
                    raise ConfigError(f"field {f.qname} defined twice")
                raw[f.qname] = f
        diag_names = set()
        for g in self.diags:
            if g.qname in raw or g.qname in diag_names:
                raise ConfigError(f"diagnostic {g.qname} collides with an existing definition")
            diag_names.add(g.qname)
            results = [r.result for r in g.rules]
            if len(set(results)) != len(results):
                raise ConfigError(f"diagnostic {g.qname}: rule results must be unique")
            if results.count(g.field) != 1:
                raise ConfigError(f"diagnostic {g.qname}: exactly one rule must produce {g.field!r}")
        symbols = set(raw) | diag_names

        groups = {}
        for name, ns, members in self.groups:
            q = qualify(name, ns)
            if q in groups:
                raise ConfigError(f"group {q} defined twice")
            groups[q] = tuple(_resolve(m, ns, symbols, "group member") for m in members)

        files = []
        fseen = set()
        for name, wtf, title, ns, incs in self.files:
            if (ns, name) in fseen:
                raise ConfigError(f"file {name} defined twice")
            fseen.add((ns, name))
            resolved = []
            for target, is_group, manip, freq in incs:
                q = _resolve(target, ns, groups if is_group else symbols,
                             "group" if is_group else "field")
                resolved.append(IncludeDef(q, is_group, manip, freq))
            files.append(FileDef(name, wtf, tuple(resolved), title, ns))

        return Config(
            tuple(sorted(self.defs, key=lambda d: (d.namespace, d.name))),
            tuple(sorted(self.diags, key=lambda d: (d.namespace, d.field))),
            WritingConfig(dict(sorted(groups.items())),
                          tuple(sorted(files, key=lambda f: (f.namespace, f.name)))),
        )


def parse_config(xml_text: str, model_options=None,
                 loader: Callable[[str], str] | None = None) -> Config:
    """Parse, inline includes, substitute placeholders and validate."""
    builder = _Builder(dict(model_options or {}))
    for el in _load_elements(xml_text, loader, ()):
        builder.add(el)
    return builder.finish()


def load_config(path, model_options=None) -> Config:
    """Parse a configuration file; includes resolve relative to its directory."""
    from pathlib import Path

    path = Path(path)
    base = path.parent

    def loader(p):
        return (base / p).read_text()

    return parse_config(path.read_text(), model_options, loader)


# canonical serialisation -----------------------------------------------------


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _set(el, key, value):
    el.set(key, value)


def to_xml(config: Config) -> str:
    """Canonical text: includes inlined, placeholders substituted, sorted sections."""
    root = ET.Element(ROOT_TAG)
    for d in config.data_definitions:
        el = ET.SubElement(root, "data-definition")
        _set(el, "frequency", str(d.frequency))
        _set(el, "name", d.name)
        if d.namespace != GLOBAL_NS:
            _set(el, "namespace", d.namespace)
        for f in d.fields:
            fe = ET.SubElement(el, "field")
            _set(fe, "collective", "true" if f.collective else "false")
            _set(fe, "data_type", f.data_type)
            _set(fe, "name", f.name)
            if f.namespace != d.namespace:
                _set(fe, "namespace", f.namespace)
            _set(fe, "optional", "true" if f.optional else "false")
            if f.dims:
                _set(fe, "size", ",".join(f.dims))
            _set(fe, "type", f.kind)
    if config.diagnostics:
        dh = ET.SubElement(root, "data-handling")
        for g in config.diagnostics:
            ge = ET.SubElement(dh, "diagnostic")
            attrs = dict(g.attributes)
            attrs.update({"field": g.field, "type": g.kind, "data_type": g.data_type})
            if g.units is not None:
                attrs["units"] = g.units
            if g.namespace != GLOBAL_NS:
                attrs["namespace"] = g.namespace
            for k in sorted(attrs):
                _set(ge, k, attrs[k])
            for r in g.rules:
                re_ = ET.SubElement(ge, r.kind)
                attrs = dict(r.args)
                attrs.update({"name": r.name, "result": r.result})
                for k in sorted(attrs):
                    _set(re_, k, attrs[k])
    if config.writing.groups or config.writing.files:
        dw = ET.SubElement(root, "data-writing")
        for q, members in config.writing.groups.items():
            ns, name = split_qualified(q)
            ge = ET.SubElement(dw, "group")
            _set(ge, "name", name)
            if ns != GLOBAL_NS:
                _set(ge, "namespace", ns)
            for m in members:
                _set(ET.SubElement(ge, "member"), "name", m)
        for f in config.writing.files:
            fe = ET.SubElement(dw, "file")
            _set(fe, "name", f.name)
            if f.namespace != GLOBAL_NS:
                _set(fe, "namespace", f.namespace)
            _set(fe, "title", f.title)
            _set(fe, "write_time_frequency", _fmt_float(f.write_time_frequency))
            for inc in f.includes:
                ie = ET.SubElement(fe, "include")
                _set(ie, "group" if inc.group else "field", inc.target)
                _set(ie, "output_frequency", _fmt_float(inc.output_frequency))
                _set(ie, "time_manipulation", inc.time_manipulation)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"
