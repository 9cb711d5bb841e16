import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdyn.model import (
    BinaryOp,
    ModelGenotype,
    ModelParseError,
    ParamRef,
    ParameterRangeError,
    StateRef,
    StateSchema,
    UnknownStateError,
    distinct_params,
    genotype_from_dict,
    genotype_to_dict,
    iter_nodes,
    load_genotype,
    parse,
    random_genotype,
    random_tree,
    render,
    replace_at,
    save_genotype,
    subtree_at,
    tree_depth,
    tree_size,
)
from gpdyn.presets import EMA_SCHEMA, REPORTED_MODEL_TEXT, persistence_model, reported_model

S2 = StateSchema.unit(("s0", "s1"))


def add(a, b):
    return BinaryOp("+", a, b)


def mul(a, b):
    return BinaryOp("*", a, b)


# -- random_tree -------------------------------------------------------------------


def test_depth_one_is_always_a_leaf():
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert isinstance(random_tree(1, 3, 1.0, rng), (StateRef, ParamRef))


def test_no_operators_when_p_op_zero():
    rng = np.random.default_rng(1)
    for _ in range(200):
        assert tree_depth(random_tree(6, 3, 0.0, rng)) == 1


def test_root_operator_fraction_tracks_p_op():
    rng = np.random.default_rng(2)
    roots = [isinstance(random_tree(6, 3, 0.5, rng), BinaryOp) for _ in range(10_000)]
    assert abs(np.mean(roots) - 0.5) <= 0.02


def test_leaves_split_evenly_between_states_and_params():
    rng = np.random.default_rng(3)
    leaves = [random_tree(1, 4, 0.5, rng) for _ in range(10_000)]
    share = np.mean([isinstance(t, StateRef) for t in leaves])
    assert abs(share - 0.5) < 0.02
    states = np.bincount([t.index for t in leaves if isinstance(t, StateRef)], minlength=4)
    params = np.bincount([t.index for t in leaves if isinstance(t, ParamRef)], minlength=7)
    assert states.min() > 0.2 * len(leaves) / 4 * 0.8
    assert len(params) == 7 and params.min() > 0


def test_random_tree_depth_bound_all_budgets():
    rng = np.random.default_rng(4)
    for d in range(1, 9):
        for _ in range(1250):
            tree = random_tree(d, 3, 0.7, rng)
            assert tree_depth(tree) <= d


# -- measurement -------------------------------------------------------------------


def test_tree_depth_hand_cases():
    assert tree_depth(StateRef(0)) == 1
    assert tree_depth(add(StateRef(0), mul(ParamRef(0), StateRef(1)))) == 3
    chain = StateRef(0)
    for _ in range(5):
        chain = add(chain, StateRef(1))
    assert tree_depth(chain) == 6
    assert tree_size(chain) == 11


def test_distinct_params():
    assert distinct_params(reported_model()) == 1
    assert distinct_params(persistence_model(S2)) == 0
    g = ModelGenotype((ParamRef(2), add(StateRef(0), ParamRef(5))), ("s0", "s1"))
    assert distinct_params(g) == 2
    assert g.param_indices == (2, 5)


def test_shared_pool_counts_once():
    g = ModelGenotype((add(ParamRef(0), StateRef(0)), mul(ParamRef(0), ParamRef(0))), ("s0", "s1"))
    assert g.k == 1


def test_genotype_validation():
    with pytest.raises(ValueError):
        ModelGenotype((StateRef(0),), ("s0", "s1"))
    with pytest.raises(ValueError):
        ModelGenotype((StateRef(2), StateRef(0)), ("s0", "s1"))
    with pytest.raises(ValueError):
        ModelGenotype((ParamRef(7), StateRef(0)), ("s0", "s1"), lambda_max=7)


def test_schema_validation():
    with pytest.raises(ValueError):
        StateSchema(("a",), (), ((0.0, 1.0),))
    with pytest.raises(ValueError):
        StateSchema(("a",), (1,), ((0.0, 1.0),))
    with pytest.raises(ValueError):
        StateSchema(("a",), (0,), ((1.0, 1.0),))


def test_node_paths_and_replacement():
    tree = add(StateRef(0), mul(ParamRef(0), StateRef(1)))
    paths = [p for p, _ in iter_nodes(tree)]
    assert paths == [(), (0,), (1,), (1, 0), (1, 1)]
    assert subtree_at(tree, (1, 0)) == ParamRef(0)
    assert replace_at(tree, (1,), StateRef(1)) == add(StateRef(0), StateRef(1))
    assert replace_at(tree, (), StateRef(1)) == StateRef(1)


# -- render / parse ------------------------------------------------------------------


def test_render_examples():
    g = ModelGenotype((add(StateRef(0), mul(ParamRef(0), StateRef(1))), StateRef(1)), ("s0", "s1"))
    assert render(g).splitlines()[0] == "s0(t+1) = (s0(t) + (g1 * s1(t)))"
    assert render(reported_model(), EMA_SCHEMA).splitlines()[3] == "sleep(t+1) = sleep(t)"


def test_reported_model_matches_listing():
    g = reported_model()
    assert g.m == 7 and g.k == 1
    assert g.max_depth() <= 6
    assert parse(render(g), EMA_SCHEMA) == g
    # the listing is written with minimal parentheses; both forms denote the same trees
    assert parse(REPORTED_MODEL_TEXT, EMA_SCHEMA) == g


def test_parse_accepts_aliases_and_comments():
    text = "# comment\n\ns0(t+1) = s0(t) + g1 · s1(t)\ns1(t+1) = s1(t) − g2 × s0(t)\n"
    g = parse(text, S2)
    assert g.trees[0] == add(StateRef(0), mul(ParamRef(0), StateRef(1)))
    assert g.trees[1] == BinaryOp("-", StateRef(1), mul(ParamRef(1), StateRef(0)))


def test_parse_left_associative():
    g = parse("s0(t+1) = s0(t) - s1(t) - s0(t)\ns1(t+1) = s1(t)", S2)
    assert g.trees[0] == BinaryOp("-", BinaryOp("-", StateRef(0), StateRef(1)), StateRef(0))


def test_parse_errors():
    with pytest.raises(ModelParseError) as info:
        parse("s0(t+1) = (s0(t) +\ns1(t+1) = s1(t)", S2)
    assert info.value.line == 1
    with pytest.raises(UnknownStateError):
        parse("mood(t+1) = happiness(t)", ("mood",))
    with pytest.raises(ParameterRangeError):
        parse("s0(t+1) = g8\ns1(t+1) = s1(t)", S2, lambda_max=7)
    with pytest.raises(ModelParseError):
        parse("s0(t+1) = s0(t)", S2)  # missing equation
    with pytest.raises(ModelParseError):
        parse("s0(t+1) = s0(t)\ns0(t+1) = s1(t)\ns1(t+1) = s1(t)", S2)  # duplicate


def test_parse_error_column():
    with pytest.raises(ModelParseError) as info:
        parse("s0(t+1) = s0(t) $ s1(t)\ns1(t+1) = s1(t)", S2)
    assert info.value.line == 1
    assert info.value.column == 17


def test_param_alone_is_a_valid_equation():
    g = parse("s0(t+1) = g3\ns1(t+1) = s1(t)", S2)
    assert g.trees[0] == ParamRef(2)


@st.composite
def genotypes(draw):
    m = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    depth = draw(st.integers(1, 6))
    p_op = draw(st.floats(0.0, 1.0))
    schema = StateSchema.unit([f"x{i}" for i in range(m)])
    return random_genotype(schema, depth, p_op, np.random.default_rng(seed), 7), schema


@settings(max_examples=1000, deadline=None)
@given(genotypes())
def test_render_parse_round_trip(pair):
    g, schema = pair
    text = render(g)
    assert parse(text, schema) == g
    assert render(parse(text, schema)) == text
    assert parse(text.replace(" ", ""), schema) == g


@settings(max_examples=200, deadline=None)
@given(pair=genotypes())
def test_json_round_trip(pair, tmp_path_factory):
    g, _ = pair
    assert genotype_from_dict(json.loads(json.dumps(genotype_to_dict(g)))) == g
    path = tmp_path_factory.mktemp("m") / "model.json"
    save_genotype(g, path, meta={"seed": 1})
    assert load_genotype(path) == g


def test_json_format():
    g = ModelGenotype((add(StateRef(0), ParamRef(0)), StateRef(1)), ("s0", "s1"))
    data = genotype_to_dict(g)
    assert data["schema"] == ["s0", "s1"]
    assert data["lambda_max"] == 7
    assert data["trees"][0] == {"op": "+", "left": {"state": "s0"}, "right": {"param": 0}}


def test_schema_round_trip(tmp_path):
    assert StateSchema.from_dict(EMA_SCHEMA.to_dict()) == EMA_SCHEMA
    path = tmp_path / "schema.toml"
    path.write_text(
        'targets = ["b"]\n'
        '[[states]]\nname = "a"\nmin = 1\nmax = 5\n'
        '[[states]]\nname = "b"\nmin = 0\nmax = 10\n'
    )
    schema = StateSchema.from_toml(path)
    assert schema.names == ("a", "b")
    assert schema.target_indices == (1,)
    assert schema.raw_scale == ((1.0, 5.0), (0.0, 10.0))
