"""Expression trees and model genotypes.

A genotype is a vector of ``m`` expression trees, one per state. Tree ``i``
computes the value of state ``i`` one day ahead from the current state values
and a parameter pool of size ``lambda_max`` shared by all trees.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

OPERATORS = ("+", "-", "*")


@dataclass(frozen=True)
class StateRef:
    index: int


@dataclass(frozen=True)
class ParamRef:
    index: int


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: "Tree"
    right: "Tree"

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise ValueError(f"unknown operator {self.op!r}")


Tree = Union[BinaryOp, StateRef, ParamRef]


@dataclass(frozen=True)
class StateSchema:
    """Ordered state names, the scored (target) states and raw measurement scales."""

    names: tuple[str, ...]
    target_indices: tuple[int, ...]
    raw_scale: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "target_indices", tuple(int(i) for i in self.target_indices))
        object.__setattr__(
            self, "raw_scale", tuple((float(lo), float(hi)) for lo, hi in self.raw_scale)
        )
        m = len(self.names)
        if m == 0:
            raise ValueError("schema needs at least one state")
        if len(set(self.names)) != m:
            raise ValueError("state names must be unique")
        if len(self.raw_scale) != m:
            raise ValueError("one raw scale per state required")
        if not self.target_indices:
            raise ValueError("at least one target state required")
        if any(not 0 <= i < m for i in self.target_indices):
            raise ValueError("target index out of range")
        for name, (lo, hi) in zip(self.names, self.raw_scale):
            if not hi > lo:
                raise ValueError(f"raw scale of {name!r} must have max > min")

    @property
    def m(self) -> int:
        return len(self.names)

    @property
    def target_names(self) -> tuple[str, ...]:
        return tuple(self.names[i] for i in self.target_indices)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownStateError(f"unknown state {name!r}") from None

    @classmethod
    def unit(cls, names: Sequence[str], targets: Sequence[str] | None = None) -> "StateSchema":
        """Schema whose raw scales are already [0, 1]."""
        names = tuple(names)
        targets = names if targets is None else targets
        return cls(names, tuple(names.index(t) for t in targets), ((0.0, 1.0),) * len(names))

    def to_dict(self) -> dict:
        return {
            "states": [
                {"name": n, "min": lo, "max": hi} for n, (lo, hi) in zip(self.names, self.raw_scale)
            ],
            "targets": list(self.target_names),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StateSchema":
        states = data["states"]
        names = tuple(s["name"] for s in states)
        scales = tuple((s["min"], s["max"]) for s in states)
        targets = data.get("targets") or list(names)
        missing = [t for t in targets if t not in names]
        if missing:
            raise ValueError(f"target states not in schema: {missing}")
        return cls(names, tuple(names.index(t) for t in targets), scales)

    @classmethod
    def from_toml(cls, path: str | Path) -> "StateSchema":
        """Read a schema file::

            targets = ["mood", "sleep"]
            [[states]]
            name = "mood"
            min = 1
            max = 10
        """
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


@dataclass(frozen=True)
class ModelGenotype:
    trees: tuple[Tree, ...]
    state_names: tuple[str, ...]
    lambda_max: int = 7
    _params: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "state_names", tuple(self.state_names))
        if len(self.trees) != len(self.state_names):
            raise ValueError("need exactly one tree per state")
        m = len(self.state_names)
        params = set()
        for tree in self.trees:
            for node in iter_leaves(tree):
                if isinstance(node, StateRef) and not 0 <= node.index < m:
                    raise ValueError(f"state index {node.index} out of range")
                if isinstance(node, ParamRef):
                    if not 0 <= node.index < self.lambda_max:
                        raise ValueError(f"parameter index {node.index} >= lambda_max")
                    params.add(node.index)
        object.__setattr__(self, "_params", tuple(sorted(params)))

    @property
    def m(self) -> int:
        return len(self.trees)

    @property
    def param_indices(self) -> tuple[int, ...]:
        """Distinct pool indices in canonical (ascending) order."""
        return self._params

    @property
    def k(self) -> int:
        return len(self._params)

    def key(self) -> str:
        """Stable structural identity, usable as a cache key."""
        return render(self)

    def max_depth(self) -> int:
        return max(tree_depth(t) for t in self.trees)


class ModelParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class UnknownStateError(ModelParseError):
    pass


class ParameterRangeError(ModelParseError):
    pass


# -- construction and measurement -------------------------------------------


def random_tree(
    max_depth: int,
    n_states: int,
    p_op: float,
    rng: np.random.Generator,
    lambda_max: int = 7,
    p_state: float = 0.5,
) -> Tree:
    """Grow a random tree no deeper than ``max_depth`` (a lone leaf has depth 1).

    At each node an operator is chosen with probability ``p_op`` while depth
    budget remains; otherwise a terminal, which is a state with probability
    ``p_state`` and a parameter otherwise, with a uniform index.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if not 0.0 <= p_op <= 1.0:
        raise ValueError("p_op must be in [0, 1]")
    if max_depth > 1 and rng.random() < p_op:
        op = OPERATORS[rng.integers(len(OPERATORS))]
        left = random_tree(max_depth - 1, n_states, p_op, rng, lambda_max, p_state)
        right = random_tree(max_depth - 1, n_states, p_op, rng, lambda_max, p_state)
        return BinaryOp(op, left, right)
    if rng.random() < p_state:
        return StateRef(int(rng.integers(n_states)))
    return ParamRef(int(rng.integers(lambda_max)))


def random_genotype(
    schema: StateSchema | Sequence[str],
    max_depth: int,
    p_op: float,
    rng: np.random.Generator,
    lambda_max: int = 7,
) -> ModelGenotype:
    names = schema.names if isinstance(schema, StateSchema) else tuple(schema)
    trees = tuple(random_tree(max_depth, len(names), p_op, rng, lambda_max) for _ in names)
    return ModelGenotype(trees, names, lambda_max)


def tree_depth(tree: Tree) -> int:
    if isinstance(tree, BinaryOp):
        return 1 + max(tree_depth(tree.left), tree_depth(tree.right))
    return 1


def tree_size(tree: Tree) -> int:
    if isinstance(tree, BinaryOp):
        return 1 + tree_size(tree.left) + tree_size(tree.right)
    return 1


def iter_leaves(tree: Tree) -> Iterator[Tree]:
    stack = [tree]
    while stack:
        node = stack.pop()
        if isinstance(node, BinaryOp):
            stack.append(node.right)
            stack.append(node.left)
        else:
            yield node


def iter_nodes(tree: Tree, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Tree]]:
    """Pre-order traversal yielding ``(path, subtree)``; path entries are 0=left, 1=right."""
    yield path, tree
    if isinstance(tree, BinaryOp):
        yield from iter_nodes(tree.left, path + (0,))
        yield from iter_nodes(tree.right, path + (1,))


def subtree_at(tree: Tree, path: Sequence[int]) -> Tree:
    for step in path:
        tree = tree.right if step else tree.left
    return tree


def replace_at(tree: Tree, path: Sequence[int], new: Tree) -> Tree:
    if not path:
        return new
    if not isinstance(tree, BinaryOp):
        raise ValueError("path descends into a leaf")
    if path[0]:
        return BinaryOp(tree.op, tree.left, replace_at(tree.right, path[1:], new))
    return BinaryOp(tree.op, replace_at(tree.left, path[1:], new), tree.right)


def state_refs(tree: Tree) -> set[int]:
    return {n.index for n in iter_leaves(tree) if isinstance(n, StateRef)}


def distinct_params(genotype: ModelGenotype) -> int:
    return genotype.k


# -- human-readable form -----------------------------------------------------


def render_tree(tree: Tree, names: Sequence[str]) -> str:
    if isinstance(tree, StateRef):
        return f"{names[tree.index]}(t)"
    if isinstance(tree, ParamRef):
        return f"g{tree.index + 1}"
    return f"({render_tree(tree.left, names)} {tree.op} {render_tree(tree.right, names)})"


def render(genotype: ModelGenotype, schema: StateSchema | None = None) -> str:
    names = schema.names if schema is not None else genotype.state_names
    return "\n".join(
        f"{name}(t+1) = {render_tree(tree, names)}" for name, tree in zip(names, genotype.trees)
    )


_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<state>[A-Za-z_][A-Za-z0-9_]*)\s*\(\s*t\s*\)"
    r"|(?P<param>g(?P<pnum>\d+))\b"
    r"|(?P<op>[-+*·×−])"
    r"|(?P<lpar>\()"
    r"|(?P<rpar>\))"
    r")"
)
_OP_ALIASES = {"·": "*", "×": "*", "−": "-"}
_LHS = re.compile(r"\s*(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*\(\s*t\s*\+\s*1\s*\)\s*=")


class _ExprParser:
    def __init__(self, text: str, offset: int, lineno: int, names, lambda_max: int):
        self.text = text
        self.pos = offset
        self.lineno = lineno
        self.names = names
        self.lambda_max = lambda_max
        self.tokens = self._tokenize()
        self.i = 0

    def _tokenize(self):
        tokens = []
        pos = self.pos
        text = self.text
        while True:
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos >= len(text):
                break
            match = _TOKEN.match(text, pos)
            if match is None or match.end() == pos:
                raise ModelParseError(f"unexpected character {text[pos]!r}", self.lineno, pos + 1)
            col = pos + 1
            kind = next(
                k for k in ("state", "param", "op", "lpar", "rpar") if match.group(k) is not None
            )
            tokens.append((kind, match, col))
            pos = match.end()
        tokens.append(("end", None, len(text) + 1))
        return tokens

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok):
        return ModelParseError(message, self.lineno, tok[2])

    def parse(self) -> Tree:
        tree = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise self.error("unexpected trailing input", tok)
        return tree

    def _op(self, tok):
        sym = tok[1].group("op")
        return _OP_ALIASES.get(sym, sym)

    def expr(self) -> Tree:
        tree = self.term()
        while self.peek()[0] == "op" and self._op(self.peek()) in "+-":
            op = self._op(self.take())
            tree = BinaryOp(op, tree, self.term())
        return tree

    def term(self) -> Tree:
        tree = self.factor()
        while self.peek()[0] == "op" and self._op(self.peek()) == "*":
            self.take()
            tree = BinaryOp("*", tree, self.factor())
        return tree

    def factor(self) -> Tree:
        tok = self.take()
        kind, match, col = tok
        if kind == "state":
            name = match.group("state")
            if name not in self.names:
                raise UnknownStateError(f"unknown state {name!r}", self.lineno, col)
            return StateRef(self.names.index(name))
        if kind == "param":
            number = int(match.group("pnum"))
            if not 1 <= number <= self.lambda_max:
                raise ParameterRangeError(
                    f"parameter g{number} outside g1..g{self.lambda_max}", self.lineno, col
                )
            return ParamRef(number - 1)
        if kind == "lpar":
            tree = self.expr()
            close = self.take()
            if close[0] != "rpar":
                raise self.error("expected ')'", close)
            return tree
        if kind == "end":
            raise self.error("unexpected end of expression", tok)
        raise self.error("expected a state, parameter or '('", tok)


def parse(text: str, schema: StateSchema | Sequence[str], lambda_max: int = 7) -> ModelGenotype:
    """Parse the rendered form (one ``name(t+1) = expr`` line per state).

    Operator precedence is the usual one, so fully parenthesized render output
    and hand-written infix both parse. Blank lines and ``#`` comments are skipped.
    """
    names = tuple(schema.names if isinstance(schema, StateSchema) else schema)
    trees: dict[int, Tree] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        lhs = _LHS.match(line)
        if lhs is None:
            raise ModelParseError("expected 'name(t+1) = expression'", lineno, 1)
        name = lhs.group("name")
        if name not in names:
            raise UnknownStateError(f"unknown state {name!r}", lineno, lhs.start("name") + 1)
        index = names.index(name)
        if index in trees:
            raise ModelParseError(f"duplicate equation for {name!r}", lineno, 1)
        trees[index] = _ExprParser(line, lhs.end(), lineno, names, lambda_max).parse()
    missing = [names[i] for i in range(len(names)) if i not in trees]
    if missing:
        raise ModelParseError(f"no equation for state(s) {', '.join(missing)}")
    return ModelGenotype(tuple(trees[i] for i in range(len(names))), names, lambda_max)


# -- machine form ------------------------------------------------------------


def tree_to_dict(tree: Tree, names: Sequence[str]) -> dict:
    if isinstance(tree, StateRef):
        return {"state": names[tree.index]}
    if isinstance(tree, ParamRef):
        return {"param": tree.index}
    return {
        "op": tree.op,
        "left": tree_to_dict(tree.left, names),
        "right": tree_to_dict(tree.right, names),
    }


def tree_from_dict(data: dict, names: Sequence[str]) -> Tree:
    if "op" in data:
        return BinaryOp(
            data["op"], tree_from_dict(data["left"], names), tree_from_dict(data["right"], names)
        )
    if "state" in data:
        state = data["state"]
        if isinstance(state, int):
            return StateRef(state)
        if state not in names:
            raise UnknownStateError(f"unknown state {state!r}")
        return StateRef(list(names).index(state))
    if "param" in data:
        return ParamRef(int(data["param"]))
    raise ValueError(f"node needs an 'op', 'state' or 'param' key: {data!r}")


def genotype_to_dict(genotype: ModelGenotype) -> dict:
    names = genotype.state_names
    return {
        "schema": list(names),
        "lambda_max": genotype.lambda_max,
        "trees": [tree_to_dict(t, names) for t in genotype.trees],
    }


def genotype_from_dict(data: dict) -> ModelGenotype:
    names = tuple(data["schema"])
    lambda_max = int(data.get("lambda_max", 7))
    trees = tuple(tree_from_dict(t, names) for t in data["trees"])
    return ModelGenotype(trees, names, lambda_max)


def save_genotype(genotype: ModelGenotype, path: str | Path, meta: dict | None = None) -> None:
    data = genotype_to_dict(genotype)
    if meta is not None:
        data["meta"] = meta
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_genotype(path: str | Path) -> ModelGenotype:
    data = json.loads(Path(path).read_text())
    if "model" in data and "trees" not in data:
        data = data["model"]
    return genotype_from_dict(data)
