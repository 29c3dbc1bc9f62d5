"""Tree and forest topology, parameter layout and the SFF1 file format."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from segforest.sdf import NAMES, SdfKind

QUAD_PARAMS = 2


class ForestFormatError(ValueError):
    """Malformed SFF1 content; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Node:
    """One preorder node. ``kind`` is ``"bsp"``, ``"quad"`` or ``"leaf"``."""

    kind: str
    sdf: SdfKind | None = None

    @property
    def arity(self) -> int:
        return {"bsp": 2, "quad": 4, "leaf": 0}[self.kind]

    @property
    def parameter_count(self) -> int:
        if self.kind == "bsp":
            return self.sdf.parameter_count
        return QUAD_PARAMS if self.kind == "quad" else 0

    @property
    def code(self) -> str:
        if self.kind == "bsp":
            return "B" + self.sdf.code
        return "Q" if self.kind == "quad" else "L"

    @classmethod
    def from_code(cls, code: str) -> Node:
        if code == "L":
            return cls("leaf")
        if code == "Q":
            return cls("quad")
        if len(code) == 2 and code[0] == "B":
            return cls("bsp", SdfKind.from_code(code[1]))
        raise ValueError(f"unknown node code {code!r}")


@dataclass(frozen=True)
class InnerNode:
    """Routing information for one inner node, in preorder."""

    node_index: int
    node: Node
    offset: int
    slots: tuple[tuple[int, ...], ...]


class TreeShape:
    """A well-formed tree given by its preorder node list.

    Leaves are numbered ``0..k-1`` in preorder; inner-node parameters are
    packed in preorder as well.
    """

    def __init__(self, nodes):
        self.nodes = tuple(nodes)
        if not self.nodes:
            raise ValueError("empty tree")
        self._children: dict[int, list[int]] = {}
        end = self._walk(0)
        if end != len(self.nodes):
            raise ValueError(f"{len(self.nodes) - end} trailing node(s) after a complete tree")

    def _walk(self, i: int) -> int:
        if i >= len(self.nodes):
            raise ValueError("tree is incomplete: missing child nodes")
        node = self.nodes[i]
        nxt = i + 1
        kids = []
        for _ in range(node.arity):
            kids.append(nxt)
            nxt = self._walk(nxt)
        self._children[i] = kids
        return nxt

    @classmethod
    def from_codes(cls, codes) -> TreeShape:
        if isinstance(codes, str):
            codes = codes.replace(",", " ").split()
        return cls(Node.from_code(c) for c in codes)

    @property
    def codes(self) -> list[str]:
        return [n.code for n in self.nodes]

    def __eq__(self, other):
        return isinstance(other, TreeShape) and self.nodes == other.nodes

    def __hash__(self):
        return hash(self.nodes)

    def __repr__(self):
        return f"TreeShape({' '.join(self.codes)!r})"

    @cached_property
    def leaf_nodes(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.nodes) if n.kind == "leaf")

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_nodes)

    def _leaves_below(self, i: int) -> tuple[int, ...]:
        order = {n: k for k, n in enumerate(self.leaf_nodes)}
        out, stack = [], [i]
        while stack:
            j = stack.pop()
            if self.nodes[j].kind == "leaf":
                out.append(order[j])
            stack.extend(reversed(self._children[j]))
        return tuple(sorted(out))

    @cached_property
    def inner(self) -> tuple[InnerNode, ...]:
        out, offset = [], 0
        for i, node in enumerate(self.nodes):
            if node.kind == "leaf":
                continue
            slots = tuple(self._leaves_below(c) for c in self._children[i])
            out.append(InnerNode(i, node, offset, slots))
            offset += node.parameter_count
        return tuple(out)

    @property
    def inner_parameter_count(self) -> int:
        return sum(n.parameter_count for n in self.nodes)

    @cached_property
    def depth(self) -> int:
        def d(i):
            kids = self._children[i]
            return 0 if not kids else 1 + max(d(c) for c in kids)
        return d(0)

    @cached_property
    def leaf_paths(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """For every leaf, the ``(inner ordinal, child slot)`` pairs on its root path."""
        paths = [[] for _ in range(self.leaf_count)]
        for ordinal, inn in enumerate(self.inner):
            for slot, leaves in enumerate(inn.slots):
                for leaf in leaves:
                    paths[leaf].append((ordinal, slot))
        return tuple(tuple(p) for p in paths)

    def leaves_under(self, inner_index: int, child_slot: int) -> set[int]:
        """Leaf indices in the subtree of one child of an inner node.

        ``inner_index`` is the node's preorder position in :attr:`nodes`.
        """
        if not 0 <= inner_index < len(self.nodes) or self.nodes[inner_index].kind == "leaf":
            raise ValueError(f"node {inner_index} is not an inner node")
        node = self.nodes[inner_index]
        if not 0 <= child_slot < node.arity:
            raise ValueError(f"child slot {child_slot} out of range for arity {node.arity}")
        return set(self._leaves_below(self._children[inner_index][child_slot]))


def bsp_tree(kind: SdfKind, depth: int) -> TreeShape:
    """Complete BSP tree with the same SDF at every inner node."""
    return _complete(depth, lambda level: Node("bsp", kind))


def kd_tree(depth: int, dynamic: bool = False) -> TreeShape:
    """Complete k-d tree; static trees split axis 1 at even levels, axis 2 at odd ones."""
    if dynamic:
        return _complete(depth, lambda level: Node("bsp", SdfKind.DYN_KD))
    return _complete(depth, lambda level: Node("bsp", SdfKind.KD_X if level % 2 == 0
                                                else SdfKind.KD_Y))


def quad_tree(depth: int) -> TreeShape:
    return _complete(depth, lambda level: Node("quad"))


def _complete(depth: int, make) -> TreeShape:
    if depth < 0:
        raise ValueError("depth must be >= 0")
    nodes = []

    def rec(level):
        if level == depth:
            nodes.append(Node("leaf"))
            return
        node = make(level)
        nodes.append(node)
        for _ in range(node.arity):
            rec(level + 1)
    rec(0)
    return TreeShape(nodes)


def parse_tree(text: str) -> TreeShape:
    """Parse a tree DSL string.

    ``bsp:<sdf>:<depth>``, ``kd:<depth>``, ``dynkd:<depth>``, ``quad:<depth>`` or
    ``mixed:<preorder codes>`` with codes such as ``Q,BL,L,L,L,L,L``.
    """
    head, _, rest = text.strip().partition(":")
    try:
        if head == "bsp":
            name, _, depth = rest.partition(":")
            if name not in NAMES:
                raise ValueError(f"unknown SDF name {name!r}")
            return bsp_tree(NAMES[name], int(depth))
        if head == "kd":
            return kd_tree(int(rest))
        if head == "dynkd":
            return kd_tree(int(rest), dynamic=True)
        if head == "quad":
            return quad_tree(int(rest))
        if head == "mixed":
            return TreeShape.from_codes(rest)
    except ValueError as exc:
        raise ValueError(f"invalid tree spec {text!r}: {exc}") from None
    raise ValueError(f"invalid tree spec {text!r}")


@dataclass(frozen=True)
class ForestSpec:
    """Static forest description: block size, class partition, one tree per subset."""

    block_size: int
    class_count: int
    subsets: tuple[tuple[int, ...], ...]
    shapes: tuple[TreeShape, ...]

    def __post_init__(self):
        object.__setattr__(self, "subsets", tuple(tuple(int(c) for c in s) for s in self.subsets))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if len(self.subsets) != len(self.shapes):
            raise ValueError("need exactly one tree shape per subset")
        seen = [c for s in self.subsets for c in s]
        if any(len(s) == 0 for s in self.subsets):
            raise ValueError("class subsets must be nonempty")
        if sorted(seen) != list(range(self.class_count)):
            raise ValueError("class subsets must partition 0..class_count-1")

    @classmethod
    def single(cls, class_count: int, shape: TreeShape | None = None,
               block_size: int = 8) -> ForestSpec:
        shape = shape or bsp_tree(SdfKind.LINE, 2)
        return cls(block_size, class_count, (tuple(range(class_count)),), (shape,))

    @classmethod
    def per_class(cls, class_count: int, shape: TreeShape | None = None,
                  block_size: int = 8) -> ForestSpec:
        shape = shape or bsp_tree(SdfKind.LINE, 2)
        return cls(block_size, class_count, tuple((c,) for c in range(class_count)),
                   (shape,) * class_count)

    @property
    def subset_weights(self) -> tuple[float, ...]:
        return tuple(len(s) / self.class_count for s in self.subsets)

    @cached_property
    def layout(self) -> Layout:
        return param_layout(self)


def parse_subsets(text: str, class_count: int) -> tuple[tuple[int, ...], ...]:
    """``single``, ``per-class`` or an explicit partition like ``0,1|2,3``."""
    text = text.strip()
    if text == "single":
        return (tuple(range(class_count)),)
    if text == "per-class":
        return tuple((c,) for c in range(class_count))
    try:
        return tuple(tuple(int(c) for c in part.split(",")) for part in text.split("|"))
    except ValueError:
        raise ValueError(f"invalid subset spec {text!r}") from None


@dataclass(frozen=True)
class SubsetLayout:
    inner_offset: int
    inner_count: int
    logit_offset: int
    leaf_count: int
    class_count: int
    node_offsets: tuple[int, ...]

    @property
    def logit_count(self) -> int:
        return self.leaf_count * self.class_count


@dataclass(frozen=True)
class Layout:
    """Offsets into the flat per-block parameter vector.

    Per subset the inner-node parameters (preorder) come first, then the
    ``k_j x |C_j|`` leaf logits in row-major order.
    """

    subsets: tuple[SubsetLayout, ...]
    shape_params: int
    content_params: int

    @property
    def total(self) -> int:
        return self.shape_params + self.content_params


def param_layout(spec: ForestSpec) -> Layout:
    subs, offset, shape_total, content_total = [], 0, 0, 0
    for classes, shape in zip(spec.subsets, spec.shapes):
        n_inner = shape.inner_parameter_count
        k = shape.leaf_count
        subs.append(SubsetLayout(offset, n_inner, offset + n_inner, k, len(classes),
                                 tuple(n.offset for n in shape.inner)))
        offset += n_inner + k * len(classes)
        shape_total += n_inner
        content_total += k * len(classes)
    return Layout(tuple(subs), shape_total, content_total)


@dataclass
class BlockParams:
    """Learnable parameters of one block: per subset, inner params and leaf logits."""

    inner: list[np.ndarray]
    logits: list[np.ndarray]

    def flat(self) -> np.ndarray:
        parts = []
        for a, v in zip(self.inner, self.logits):
            parts.append(np.asarray(a, dtype=np.float64).ravel())
            parts.append(np.asarray(v, dtype=np.float64).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_flat(cls, spec: ForestSpec, vec: np.ndarray) -> BlockParams:
        vec = np.asarray(vec, dtype=np.float64)
        layout = spec.layout
        if vec.shape != (layout.total,):
            raise ValueError(f"expected {layout.total} parameters, got {vec.shape}")
        inner, logits = [], []
        for s in layout.subsets:
            inner.append(vec[s.inner_offset:s.inner_offset + s.inner_count].copy())
            logits.append(vec[s.logit_offset:s.logit_offset + s.logit_count]
                          .reshape(s.leaf_count, s.class_count).copy())
        return cls(inner, logits)

    def check(self, spec: ForestSpec):
        for s, a, v in zip(spec.layout.subsets, self.inner, self.logits):
            if np.shape(a) != (s.inner_count,) or np.shape(v) != (s.leaf_count, s.class_count):
                raise ValueError("block parameters do not match the forest layout")


@dataclass
class ForestModel:
    """A grid of per-block parameters.

    ``params`` has shape ``(H_b, W_b, total)`` holding each block's flat vector.
    """

    spec: ForestSpec
    params: np.ndarray
    class_names: list[str] | None = field(default=None)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 3 or self.params.shape[2] != self.spec.layout.total:
            raise ValueError(f"params must have shape (H_b, W_b, {self.spec.layout.total})")

    @property
    def grid_size(self) -> tuple[int, int]:
        """``(W_b, H_b)``."""
        return self.params.shape[1], self.params.shape[0]

    def block(self, bx: int, by: int) -> BlockParams:
        return BlockParams.from_flat(self.spec, self.params[by, bx])

    @classmethod
    def empty(cls, spec: ForestSpec, width_blocks: int, height_blocks: int) -> ForestModel:
        return cls(spec, np.zeros((height_blocks, width_blocks, spec.layout.total)))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def serialize(model: ForestModel) -> bytes:
    spec = model.spec
    out = io.StringIO()
    w, h = model.grid_size
    out.write("SFF1\n")
    out.write(f"block_size {spec.block_size} classes {spec.class_count}\n")
    out.write(f"grid {w} {h}\n")
    for j, (classes, shape) in enumerate(zip(spec.subsets, spec.shapes)):
        out.write(f"subset {j}: {' '.join(map(str, classes))} ; tree: {' '.join(shape.codes)}\n")
    layout = spec.layout
    for by in range(h):
        for bx in range(w):
            vec = model.params[by, bx]
            for j, s in enumerate(layout.subsets):
                inner = vec[s.inner_offset:s.inner_offset + s.inner_count]
                logits = vec[s.logit_offset:s.logit_offset + s.logit_count]
                out.write(f"blk {bx} {by} {j} : {' '.join(map(_fmt, inner))} | "
                          f"{' '.join(map(_fmt, logits))}\n")
    return out.getvalue().encode("utf-8")


def _ints(tokens, lineno, what):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ForestFormatError(f"expected integers in {what}", lineno) from None


def _floats(tokens, lineno, count, what):
    if len(tokens) != count:
        raise ForestFormatError(f"{what}: expected {count} values, got {len(tokens)}", lineno)
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ForestFormatError(f"{what}: invalid number", lineno) from None


def deserialize(data: bytes) -> ForestModel:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ForestFormatError(f"not UTF-8: {exc}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def line(i, what):
        if i >= len(lines):
            raise ForestFormatError(f"missing {what}", i + 1)
        return lines[i]

    if line(0, "header") != "SFF1":
        raise ForestFormatError("bad magic, expected SFF1", 1)
    tok = line(1, "block_size/classes line").split()
    if len(tok) != 4 or tok[0] != "block_size" or tok[2] != "classes":
        raise ForestFormatError("expected 'block_size S classes C'", 2)
    block_size, class_count = _ints([tok[1], tok[3]], 2, "header")
    tok = line(2, "grid line").split()
    if len(tok) != 3 or tok[0] != "grid":
        raise ForestFormatError("expected 'grid W H'", 3)
    w, h = _ints(tok[1:], 3, "grid")
    if w < 0 or h < 0:
        raise ForestFormatError("negative grid size", 3)

    subsets, shapes = [], []
    i = 3
    while i < len(lines) and lines[i].startswith("subset"):
        head, sep, tree = lines[i].partition("; tree:")
        if not sep:
            raise ForestFormatError("subset line lacks '; tree:'", i + 1)
        label, sep, classes = head.partition(":")
        if not sep or _ints(label.split()[1:], i + 1, "subset index") != [len(subsets)]:
            raise ForestFormatError("bad subset label", i + 1)
        subsets.append(tuple(_ints(classes.split(), i + 1, "subset classes")))
        try:
            shapes.append(TreeShape.from_codes(tree.split()))
        except ValueError as exc:
            raise ForestFormatError(str(exc), i + 1) from None
        i += 1
    try:
        spec = ForestSpec(block_size, class_count, tuple(subsets), tuple(shapes))
    except ValueError as exc:
        raise ForestFormatError(str(exc), i + 1) from None

    layout = spec.layout
    params = np.zeros((h, w, layout.total))
    for by in range(h):
        for bx in range(w):
            for j, s in enumerate(layout.subsets):
                want = f"blk {bx} {by} {j}"
                if i >= len(lines):
                    raise ForestFormatError(f"missing record '{want}'", i + 1)
                head, sep, body = lines[i].partition(":")
                if not sep or head.split() != want.split():
                    raise ForestFormatError(f"expected record '{want}'", i + 1)
                inner, sep, logits = body.partition("|")
                if not sep:
                    raise ForestFormatError("record lacks '|'", i + 1)
                params[by, bx, s.inner_offset:s.inner_offset + s.inner_count] = \
                    _floats(inner.split(), i + 1, s.inner_count, "inner params")
                params[by, bx, s.logit_offset:s.logit_offset + s.logit_count] = \
                    _floats(logits.split(), i + 1, s.logit_count, "leaf logits")
                i += 1
    if i != len(lines):
        raise ForestFormatError("unexpected trailing content", i + 1)
    return ForestModel(spec, params)
