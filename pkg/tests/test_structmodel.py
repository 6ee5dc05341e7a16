import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greyfdi.structmodel import (
    ModelError, StructuralModel, incidence_matrix, parse_model, serialize_model, submodel,
)

from models import EQ6, EQ6_WITH_FAULT
from oracles import random_model


def test_parse_eq6():
    m = parse_model(EQ6)
    assert m.equations == ("e1", "e2", "e3", "e4", "e5")
    assert m.names("state") == ["x1", "x2"]
    assert len(m.links) == 2
    assert m.sensors == {"e3": "y"}
    assert m.unknowns == ["x1", "dx1", "x2", "dx2"]
    assert m.known == ["u", "y"]


def test_empty_model_is_valid():
    m = parse_model("@variables\n@equations\n")
    assert m.equations == ()
    assert incidence_matrix(m).matrix.shape == (0, 0)


def test_unlinked_derivative_rejected():
    text = "@variables\nx1 unknown\ndx1 derivative\n@equations\ne1 : dx1 x1\n"
    with pytest.raises(ModelError, match="unlinked derivative"):
        parse_model(text)


def test_dangling_reference_reports_line():
    text = "@variables\nx unknown\n@equations\ne1 : x z\n"
    with pytest.raises(ModelError, match="line 4: dangling reference to variable z"):
        parse_model(text)


def test_fault_variable_on_equation_line_rejected():
    text = "@variables\nx unknown\nf fault\n@equations\ne1 : x f\n@faults\nf in e1\n"
    with pytest.raises(ModelError, match="attach it under @faults"):
        parse_model(text)


def test_link_equation_must_hold_exactly_state_and_derivative():
    bad = EQ6.replace("e4 : dx1 x1", "e4 : dx1 x1 u")
    with pytest.raises(ModelError, match="must contain exactly"):
        parse_model(bad)


def test_serialize_eq6_is_canonical():
    m = parse_model(EQ6)
    text = serialize_model(m)
    assert parse_model(text) == m
    assert serialize_model(parse_model(text)) == text
    assert text.splitlines()[0] == "@variables"


def test_serialize_empty_model_is_headers_only():
    text = serialize_model(parse_model(""))
    assert text == "@variables\n@equations\n@links\n@faults\n@sensors\n"


def test_incidence_eq6():
    inc = incidence_matrix(parse_model(EQ6))
    assert inc.matrix.shape == (5, 6)
    assert inc.columns == ("x1", "dx1", "x2", "dx2", "u", "y")
    assert int(inc.matrix.sum()) == 10
    expected = {
        "e1": {"dx1", "u"}, "e2": {"dx2", "x1"}, "e3": {"y", "x2"},
        "e4": {"dx1", "x1"}, "e5": {"dx2", "x2"},
    }
    for i, e in enumerate(inc.rows):
        assert {c for c, on in zip(inc.columns, inc.matrix[i]) if on} == expected[e]


def test_incidence_fault_columns_optional():
    m = parse_model(EQ6_WITH_FAULT)
    with_f = incidence_matrix(m)
    without = incidence_matrix(m, include_faults=False)
    assert "f2" in with_f.columns and "f2" not in without.columns
    assert with_f.matrix[1, with_f.columns.index("f2")]
    assert int(with_f.matrix.sum()) == int(without.matrix.sum()) + 1


def test_submodel_eq6_without_sensor():
    m = parse_model(EQ6)
    sm = m.without("e3")
    assert sm.equations == ("e1", "e2", "e4", "e5")
    assert set(sm.unknowns) == {"x1", "dx1", "x2", "dx2"}
    assert submodel(m, m.equations).incidence == m.incidence


def test_submodel_rejects_unknown_equation():
    with pytest.raises(ModelError):
        submodel(parse_model(EQ6), ["e9"])


def test_links_are_in_incidence():
    m = parse_model(EQ6)
    for link in m.links:
        assert (link.equation, link.state) in m.incidence
        assert (link.equation, link.derivative) in m.incidence


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_random_models(seed):
    m = random_model(np.random.default_rng(seed), n_faults=2)
    assert parse_model(serialize_model(m)) == m


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_incidence_density_matches_count(seed):
    m = random_model(np.random.default_rng(seed))
    inc = incidence_matrix(m, include_faults=False)
    if inc.matrix.size:
        assert inc.matrix.mean() == pytest.approx(len(m.incidence) / inc.matrix.size)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_submodel_unknowns_are_union_of_rows(seed, pick):
    m = random_model(np.random.default_rng(seed))
    rng = np.random.default_rng(pick)
    eqs = [e for e in m.equations if rng.random() < 0.5]
    expected = set()
    for e in eqs:
        expected |= set(m.unknowns_of(e))
    assert set(submodel(m, eqs).unknowns) == expected


def test_structural_model_equality_ignores_link_order():
    m = parse_model(EQ6)
    swapped = StructuralModel(m.equations, m.variables, m.equation_vars, tuple(reversed(m.links)),
                              m.faults, m.sensors)
    assert swapped == m
