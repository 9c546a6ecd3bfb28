"""Netlist grammar: structure, units, errors, determinism."""

import pytest

from pssuq import NetlistError, parse_netlist
from pssuq.netlist import parse_number


def test_minimal_resistive_circuit():
    c = parse_netlist("R1 1 0 1k\nV1 1 0 DC 1\n")
    assert c.n == 2  # one node voltage plus one source current
    assert c.state_names == ["v(1)", "i(V1)"]


def test_number_suffixes():
    assert parse_number("1k") == 1e3
    assert parse_number("1meg") == 1e6
    assert parse_number("1MEG") == 1e6
    assert parse_number("100p") == 100e-12
    assert parse_number("2.2u") == pytest.approx(2.2e-6)
    assert parse_number("1f") == 1e-15
    assert parse_number("10pF") == 10e-12  # trailing unit letters ignored
    assert parse_number("1e-9") == 1e-9
    assert parse_number("3V") == 3.0
    with pytest.raises(ValueError):
        parse_number("abc")


def test_random_param_binding():
    c = parse_netlist(".param r3 = uniform(900, 1100)\nR3 2 0 {r3}\nI1 0 2 DC 1\n")
    assert c.dim == 1
    name, spec = c.random_params[0]
    assert name == "r3"
    assert spec.to_physical(0.0) == pytest.approx(1000.0)
    assert spec.to_physical(1.0) == pytest.approx(1100.0)
    assert spec.to_physical(-1.0) == pytest.approx(900.0)


def test_nodes_declared_by_use():
    c = parse_netlist("Rx 1 9 1k\nR2 9 0 1k\nI1 0 1 DC 1\n")
    assert "9" in c.node_names
    assert c.n == 2


def test_case_insensitive_element_letters():
    c = parse_netlist("r1 a 0 1k\nv1 a 0 dc 2\n")
    assert [e.kind for e in c.elements] == ["R", "V"]


def test_comments_and_end():
    c = parse_netlist("* a comment\nR1 1 0 1k\nI1 0 1 DC 1\n.end\nR2 1 0 1k\n")
    assert len(c.elements) == 2  # everything after .end ignored


def test_sin_source_and_phase():
    c = parse_netlist("V1 in 0 SIN(0.5 1 1k 90)\nR1 in 0 1k\n")
    src = c.elements[0].source
    assert src.kind == "sin"
    assert src.freq == 1e3
    assert src.phase_deg.literal == 90.0
    assert c.fundamental_period() == pytest.approx(1e-3)


def test_const_params_are_not_random():
    c = parse_netlist(".param rval = const(50)\nR1 1 0 {rval}\nI1 0 1 DC 1\n")
    assert c.dim == 0
    ev = c.realize_nominal().eval_dae([1.0], 0.0)
    assert ev.f[0] == pytest.approx(1.0 / 50.0)


def test_reparse_is_identical():
    text = RECT = """
.param rload = uniform(900, 1100)
V1 in 0 SIN(0 1 1k)
D1 in out IS=1e-12
R1 out 0 {rload}
"""
    a, b = parse_netlist(text), parse_netlist(text)
    assert a.node_names == b.node_names
    assert a.state_names == b.state_names
    assert [e.name for e in a.elements] == [e.name for e in b.elements]


@pytest.mark.parametrize(
    "bad, match",
    [
        ("R1 1 0 0\n", "non-positive"),
        ("R1 1 0 -5\n", "non-positive"),
        ("R1 1 0 {r}\n", "undeclared parameter"),
        ("R1 1 0 1k\nR1 2 0 1k\n", "duplicate element"),
        ("X1 1 0 1k\n", "unknown element"),
        ("R1 1 0\n", "expected"),
        ("V1 1 0 TRI 1\n", "unknown source"),
        ("V1 1 0 SIN(0 1 {f})\n.param f = const(10)\n", "frequency must be a literal"),
        (".param a = gauss(1, 0)\n", "std must be > 0"),
        (".param a = uniform(2, 1)\n", "lo < hi"),
        (".param a = gauss(1)\n", "argument count"),
        (".option foo\n", "unknown directive"),
        ("D1 1 0 N=2\n", "missing IS"),
        ("M1 d g s KP=1\n", "missing VT0"),
        ("D1 1 0 IS=1e-14 FOO=2\n", "unknown parameter"),
    ],
)
def test_parse_errors(bad, match):
    with pytest.raises(NetlistError, match=match):
        parse_netlist(bad)


def test_error_carries_line_number():
    with pytest.raises(NetlistError) as exc:
        parse_netlist("R1 1 0 1k\nR2 2 0 bogus\n")
    assert exc.value.line == 2


def test_duplicate_param_rejected():
    with pytest.raises(NetlistError, match="duplicate parameter"):
        parse_netlist(".param a = const(1)\n.param a = const(2)\n")
