"""SPICE-like netlist parser.

Line-oriented grammar, ``*`` starts a comment line, element letters are
case-insensitive, nodes are declared by use and ``0`` is ground::

    R|C|L<name> n+ n- <value>
    V|I<name> n+ n- DC <v> | SIN(<offset> <amplitude> <freq_hz> [<phase_deg>])
    D<name> n+ n- IS=<v> [N=<v>] [CJ=<v>] [TEMP=<v>]
    M<name> nd ng ns KP=<v> VT0=<v> [LAMBDA=<v>] [CGS=<v>] [CGD=<v>] [PMOS]
    Q<name> nc nb ne ALPHA=<v> IS=<v> [TEMP=<v>]
    N<name> n+ n- MU=<v>
    .param <name> = gauss(<mean>,<std>) | uniform(<lo>,<hi>) | const(<v>)

Every ``<v>`` slot accepts either a numeric literal with an optional
magnitude suffix (f p n u m k meg, trailing unit letters ignored) or a
``{name}`` reference to a declared parameter. The ``N`` element is a cubic
conductor, i(v) = MU*(v^3/3 - v), provided for oscillator benchmarks; a
``TEMP`` override sets the junction temperature of a diode or BJT.

Source frequencies must be literals so the excitation period is
parameter-independent.
"""

import re

from .circuit import Circuit, CircuitError, DistributionSpec, Element, SourceSpec, Value

_SUFFIX = {
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "meg": 1e6,
}

_NUMBER_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)([a-zA-Z]*)$")
_PARAM_RE = re.compile(
    r"^\.param\s+(\w+)\s*=\s*(gauss|uniform|const)\s*\(([^)]*)\)\s*$", re.IGNORECASE
)


class NetlistError(ValueError):
    """Parse failure with source position."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", col {column}" if column else "") + ")"
        super().__init__(message + where)


def parse_number(text):
    """Parse a numeric literal with an optional magnitude suffix.

    Trailing letters after a recognized suffix are ignored (``10pF``), as
    is a bare unit letter that is not a suffix itself.
    """
    m = _NUMBER_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a number: {text!r}")
    mant = float(m.group(1))
    tail = m.group(2).lower()
    if not tail:
        return mant
    if tail.startswith("meg"):
        return mant * 1e6
    if tail[0] in _SUFFIX:
        return mant * _SUFFIX[tail[0]]
    # unit annotation only, e.g. "3V" or "50Hz"
    return mant


def _parse_value(tok, line, col=None):
    """A <v> slot: literal or {param} reference."""
    tok = tok.strip()
    if tok.startswith("{") and tok.endswith("}"):
        name = tok[1:-1].strip()
        if not name:
            raise NetlistError("empty parameter reference", line, col)
        return Value.ref(name)
    try:
        return Value.lit(parse_number(tok))
    except ValueError:
        raise NetlistError(f"bad value {tok!r}", line, col) from None


def _split_keywords(tokens, line):
    """KEY=value tokens plus bare flags, case-insensitive keys."""
    params = {}
    flags = set()
    for tok in tokens:
        if "=" in tok:
            key, _, val = tok.partition("=")
            key = key.upper()
            if not val:
                raise NetlistError(f"missing value for {key}", line)
            params[key] = val
        else:
            flags.add(tok.upper())
    return params, flags


def _join_assignments(tokens):
    """Re-glue tokens split around '=' so 'IS = 1e-14' parses like 'IS=1e-14'."""
    out = []
    for tok in tokens:
        if tok == "=" and out:
            out[-1] += "="
        elif out and out[-1].endswith("="):
            out[-1] += tok
        else:
            out.append(tok)
    return out


def parse_netlist(text):
    """Parse netlist source into a :class:`Circuit`.

    Reparsing identical text yields an identical structure: nodes are
    ordered by first use, elements and parameter declarations in file
    order.
    """
    nodes = []
    node_seen = set()
    elements = []
    params = {}
    names_seen = set()

    def touch_node(name):
        if name != "0" and name not in node_seen:
            node_seen.add(name)
            nodes.append(name)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("*"):
            continue
        low = stripped.lower()
        if low == ".end":
            break
        if low.startswith(".param"):
            m = _PARAM_RE.match(stripped)
            if not m:
                raise NetlistError("malformed .param directive", lineno)
            pname, kind, args = m.group(1), m.group(2).lower(), m.group(3)
            if pname in params:
                raise NetlistError(f"duplicate parameter {pname}", lineno)
            try:
                vals = [parse_number(s) for s in args.split(",")]
            except ValueError as exc:
                raise NetlistError(str(exc), lineno) from None
            try:
                if kind == "gauss":
                    params[pname] = DistributionSpec.gaussian(*vals)
                elif kind == "uniform":
                    params[pname] = DistributionSpec.uniform(*vals)
                else:
                    params[pname] = DistributionSpec.constant(*vals)
            except TypeError:
                raise NetlistError(f"wrong argument count for {kind}()", lineno) from None
            except ValueError as exc:
                raise NetlistError(str(exc), lineno) from None
            continue
        if stripped.startswith("."):
            raise NetlistError(f"unknown directive {stripped.split()[0]}", lineno)

        tokens = _join_assignments(
            stripped.replace("(", " ( ").replace(")", " ) ").split()
        )
        name_tok = tokens[0]
        if len(name_tok) < 2:
            raise NetlistError(f"element needs a name: {name_tok!r}", lineno, 1)
        kind = name_tok[0].upper()
        name = name_tok.upper()
        if name in names_seen:
            raise NetlistError(f"duplicate element name {name_tok}", lineno, 1)
        names_seen.add(name)
        rest = tokens[1:]

        if kind in "RCL":
            if len(rest) != 3:
                raise NetlistError(f"{name}: expected 'n+ n- value'", lineno)
            val = _parse_value(rest[2], lineno)
            if val.param is None and not val.literal > 0.0:
                raise NetlistError(f"{name}: non-positive value", lineno)
            for nd in rest[:2]:
                touch_node(nd)
            elements.append(Element(kind, name, tuple(rest[:2]), {"value": val}))
        elif kind in "VI":
            if len(rest) < 3:
                raise NetlistError(f"{name}: expected 'n+ n- DC|SIN(...)'", lineno)
            for nd in rest[:2]:
                touch_node(nd)
            spec = rest[2].upper()
            if spec == "DC":
                if len(rest) != 4:
                    raise NetlistError(f"{name}: expected 'DC <v>'", lineno)
                src = SourceSpec("dc", dc=_parse_value(rest[3], lineno))
            elif spec == "SIN":
                if len(rest) < 4 or rest[3] != "(" or rest[-1] != ")":
                    raise NetlistError(f"{name}: expected 'SIN(<args>)'", lineno)
                args = rest[4:-1]
                if len(args) not in (3, 4):
                    raise NetlistError(
                        f"{name}: SIN takes offset, amplitude, freq [, phase]", lineno
                    )
                freq_val = _parse_value(args[2], lineno)
                if freq_val.param is not None:
                    raise NetlistError(f"{name}: SIN frequency must be a literal", lineno)
                if not freq_val.literal > 0.0:
                    raise NetlistError(f"{name}: SIN frequency must be positive", lineno)
                src = SourceSpec(
                    "sin",
                    offset=_parse_value(args[0], lineno),
                    amplitude=_parse_value(args[1], lineno),
                    freq=freq_val.literal,
                    phase_deg=_parse_value(args[3], lineno) if len(args) == 4 else Value.lit(0.0),
                )
            else:
                raise NetlistError(f"{name}: unknown source kind {rest[2]!r}", lineno)
            elements.append(Element(kind, name, tuple(rest[:2]), source=src))
        elif kind in ("D", "N", "M", "Q"):
            n_terms = 3 if kind in "MQ" else 2
            if len(rest) < n_terms:
                raise NetlistError(f"{name}: missing terminals", lineno)
            terms = tuple(rest[:n_terms])
            for nd in terms:
                touch_node(nd)
            kw, flags = _split_keywords(rest[n_terms:], lineno)
            required = {"D": ("IS",), "N": ("MU",), "M": ("KP", "VT0"), "Q": ("ALPHA", "IS")}
            allowed = {
                "D": {"IS", "N", "CJ", "TEMP"},
                "N": {"MU"},
                "M": {"KP", "VT0", "LAMBDA", "CGS", "CGD"},
                "Q": {"ALPHA", "IS", "TEMP"},
            }
            for req in required[kind]:
                if req not in kw:
                    raise NetlistError(f"{name}: missing {req}=", lineno)
            for key in kw:
                if key not in allowed[kind]:
                    raise NetlistError(f"{name}: unknown parameter {key}", lineno)
            bad_flags = flags - ({"PMOS"} if kind == "M" else set())
            if bad_flags:
                raise NetlistError(f"{name}: unknown token {sorted(bad_flags)[0]}", lineno)
            pv = {k: _parse_value(v, lineno) for k, v in kw.items()}
            elements.append(Element(kind, name, terms, pv, frozenset(flags)))
        else:
            raise NetlistError(f"unknown element kind {name_tok[0]!r}", lineno, 1)

    try:
        return Circuit(nodes, elements, params)
    except CircuitError as exc:
        raise NetlistError(str(exc)) from None


def load_netlist(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_netlist(fh.read())
