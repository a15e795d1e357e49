"""Sentences, dependency and binary constituency trees, and their readers.

Dependency trees use 1-based token indices with ``0`` for the root.
Constituency trees are nested pairs: a leaf is an ``int`` token index, an
internal node is a :class:`Node` with exactly two children.
"""

from __future__ import annotations

import json
import string
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, Union

import numpy as np


class FormatError(ValueError):
    """Malformed tree or dataset input; carries a line number or character offset."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = ""
        if line is not None:
            where = f"line {line}: "
        elif offset is not None:
            where = f"offset {offset}: "
        super().__init__(where + message)
        self.line = line
        self.offset = offset


class EmptySentenceError(ValueError):
    """Preprocessing left no tokens."""


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    label: int | None = None
    raw_length: int = 0

    def __len__(self) -> int:
        return len(self.tokens)


# ------------------------------------------------------------- tokenization

_PUNCT = set(string.punctuation)


def _is_punct(ch: str) -> bool:
    return ch in _PUNCT or unicodedata.category(ch).startswith(("P", "S"))


def normalize_token(token: str) -> str:
    """Lowercase and strip leading/trailing punctuation; may return ''."""
    i, j = 0, len(token)
    while i < j and _is_punct(token[i]):
        i += 1
    while j > i and _is_punct(token[j - 1]):
        j -= 1
    return token[i:j].lower()


def keep_token(norm: str) -> bool:
    # single characters and punctuation-only tokens are dropped
    return len(norm) > 1


def preprocess(text: str, label: int | None = None) -> Sentence:
    """Whitespace-tokenize, strip punctuation, lowercase, drop 1-char tokens."""
    tokens = tuple(t for t in (normalize_token(w) for w in text.split()) if keep_token(t))
    if not tokens:
        raise EmptySentenceError(f"no tokens survive preprocessing: {text!r}")
    return Sentence(tokens, label, len(text))


# ----------------------------------------------------------- dependency trees


@dataclass(frozen=True)
class DependencyTree:
    heads: tuple[int, ...]

    def __post_init__(self):
        validate_heads(self.heads)

    def __len__(self) -> int:
        return len(self.heads)

    @property
    def root(self) -> int:
        return self.heads.index(0) + 1

    def children(self, node: int) -> list[int]:
        return [i + 1 for i, h in enumerate(self.heads) if h == node]


def validate_heads(heads: Sequence[int], line: int | None = None) -> None:
    n = len(heads)
    if n == 0:
        raise FormatError("dependency tree has no tokens", line=line)
    for i, h in enumerate(heads):
        if not 0 <= h <= n:
            raise FormatError(f"token {i + 1} has head {h} outside 0..{n}", line=line)
        if h == i + 1:
            raise FormatError(f"token {i + 1} is its own head", line=line)
    # every node must reach the root within n steps
    for start in range(1, n + 1):
        node, steps = start, 0
        while node != 0:
            node = heads[node - 1]
            steps += 1
            if steps > n:
                raise FormatError(f"cycle through token {start}", line=line)
    roots = [i + 1 for i, h in enumerate(heads) if h == 0]
    if len(roots) != 1:
        raise FormatError(f"expected exactly one root, found {len(roots)}: {roots}", line=line)


def _conllu_blocks(text: str) -> Iterator[list[tuple[int, str]]]:
    block: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            if block:
                yield block
                block = []
            continue
        if line.startswith("#"):
            continue
        block.append((lineno, line))
    if block:
        yield block


def _parse_conllu_block(block: list[tuple[int, str]]) -> tuple[list[str], list[int]]:
    forms: list[str] = []
    heads: list[int] = []
    for lineno, line in block:
        cols = line.split("\t")
        if len(cols) < 3:
            raise FormatError(f"expected at least 3 tab-separated columns, got {len(cols)}", line=lineno)
        tid = cols[0]
        if "-" in tid or "." in tid:
            continue  # multiword ranges and empty nodes
        # a full 10-column CoNLL-U row keeps HEAD in column 7
        head_col = cols[6] if len(cols) == 10 else cols[2]
        try:
            i, h = int(tid), int(head_col)
        except ValueError:
            raise FormatError(f"non-integer ID or HEAD in {line!r}", line=lineno) from None
        if i != len(forms) + 1:
            raise FormatError(f"expected ID {len(forms) + 1}, got {i} (duplicate or missing ID)", line=lineno)
        forms.append(cols[1])
        heads.append(h)
    validate_heads(heads, line=block[0][0])
    return forms, heads


def parse_conllu(text: str) -> tuple[Sentence, DependencyTree]:
    """Read one sentence in the ``ID<TAB>FORM<TAB>HEAD`` format (raw tokens, no filtering)."""
    blocks = list(_conllu_blocks(text))
    if len(blocks) != 1:
        raise FormatError(f"expected one sentence, found {len(blocks)}")
    forms, heads = _parse_conllu_block(blocks[0])
    return Sentence(tuple(forms), None, len(" ".join(forms))), DependencyTree(tuple(heads))


def read_conllu(text: str) -> list[tuple[Sentence, DependencyTree]]:
    """Read every blank-line separated sentence."""
    out = []
    for block in _conllu_blocks(text):
        forms, heads = _parse_conllu_block(block)
        out.append((Sentence(tuple(forms), None, len(" ".join(forms))), DependencyTree(tuple(heads))))
    return out


def to_conllu(tokens: Sequence[str], tree: DependencyTree) -> str:
    return "".join(f"{i}\t{tok}\t{h}\n" for i, (tok, h) in enumerate(zip(tokens, tree.heads), start=1))


# --------------------------------------------------------- constituency trees


@dataclass(frozen=True)
class Node:
    left: "Subtree"
    right: "Subtree"
    label: str = "X"


Subtree = Union[int, Node]


@dataclass(frozen=True)
class ConstituencyTree:
    root: Subtree
    n: int

    def __post_init__(self):
        leaves = list(iter_leaves(self.root))
        if leaves != list(range(1, self.n + 1)):
            raise FormatError(f"leaves {leaves} do not enumerate 1..{self.n} in order")

    def __len__(self) -> int:
        return self.n


def iter_leaves(t: Subtree) -> Iterator[int]:
    stack = [t]
    while stack:
        node = stack.pop()
        if isinstance(node, Node):
            stack.append(node.right)
            stack.append(node.left)
        else:
            yield node


def iter_internal(t: Subtree) -> Iterator[Node]:
    stack = [t]
    while stack:
        node = stack.pop()
        if isinstance(node, Node):
            yield node
            stack.append(node.right)
            stack.append(node.left)


def _tokenize_sexpr(text: str) -> list[tuple[str, int]]:
    out, i, n = [], 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            out.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            out.append((text[i:j], i))
            i = j
    return out


def _read_nested(text: str):
    """Nested lists of ``(atom, offset)`` pairs; lists are ``(items, offset)``."""
    toks = _tokenize_sexpr(text)
    if not toks:
        raise FormatError("empty s-expression", offset=0)
    stack: list[tuple[list, int]] = []
    top = None
    for tok, off in toks:
        if top is not None:
            raise FormatError("trailing material after the tree", offset=off)
        if tok == "(":
            stack.append(([], off))
        elif tok == ")":
            if not stack:
                raise FormatError("unbalanced ')'", offset=off)
            items, start = stack.pop()
            node = ("list", items, start)
            if stack:
                stack[-1][0].append(node)
            else:
                top = node
        else:
            atom = ("atom", tok, off)
            if stack:
                stack[-1][0].append(atom)
            else:
                top = atom
    if stack:
        raise FormatError("unbalanced '(': missing ')'", offset=stack[-1][1])
    return top


def _build(node, leaves: list[str]):
    """Return an unbinarized ``(label, children)`` or leaf string index."""
    kind, payload, off = node
    if kind == "atom":
        leaves.append(payload)
        return len(leaves)
    items = payload
    label = "X"
    if items and items[0][0] == "atom" and len(items) > 1:
        label = items[0][1]
        items = items[1:]
    elif items and items[0][0] == "atom":
        raise FormatError("node has a label but no children", offset=off)
    if not items:
        raise FormatError("empty node", offset=off)
    kids = [_build(k, leaves) for k in items]
    return (label, kids)


def _binarize(t) -> Subtree:
    if isinstance(t, int):
        return t
    label, kids = t
    kids = [_binarize(k) for k in kids]
    if len(kids) == 1:
        return kids[0]
    acc = kids[-1]
    for k in reversed(kids[:-1]):
        acc = Node(k, acc, label)
    return acc


def parse_sexpr(text: str) -> tuple[Sentence, ConstituencyTree]:
    """Parse a Penn-style bracketing; right-binarize and collapse unary chains."""
    leaves: list[str] = []
    raw = _build(_read_nested(text), leaves)
    tree = ConstituencyTree(_binarize(raw), len(leaves))
    return Sentence(tuple(leaves), None, len(" ".join(leaves))), tree


def to_sexpr(tokens: Sequence[str], tree: ConstituencyTree) -> str:
    def rec(t: Subtree) -> str:
        if isinstance(t, Node):
            return f"({t.label} {rec(t.left)} {rec(t.right)})"
        return tokens[t - 1]

    return rec(tree.root)


def fallback_tree(sentence: Sentence | Sequence[str]) -> ConstituencyTree:
    """Right-branching binary tree over all tokens."""
    n = len(sentence)
    if n < 1:
        raise EmptySentenceError("fallback tree over zero tokens")
    acc: Subtree = n
    for i in range(n - 1, 0, -1):
        acc = Node(i, acc)
    return ConstituencyTree(acc, n)


# ------------------------------------------------------------------ traversal


@dataclass(frozen=True)
class ParentChildSet:
    """Bottom-up list of ``(parent, children)``; parents of constituency trees
    are numbered ``n+1, n+2, ...`` in post-order, leaves are ``1..n``."""

    entries: tuple[tuple[int, tuple[int, ...]], ...]
    root: int

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def bottom_up_order(tree: DependencyTree | ConstituencyTree) -> ParentChildSet:
    if isinstance(tree, DependencyTree):
        n = len(tree.heads)
        kids: list[list[int]] = [[] for _ in range(n + 1)]
        for i, h in enumerate(tree.heads, start=1):
            kids[h].append(i)
        entries = []
        stack = [(tree.root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                entries.append((node, tuple(kids[node])))
                continue
            if kids[node]:
                stack.append((node, True))
                for c in reversed(kids[node]):
                    stack.append((c, False))
        return ParentChildSet(tuple(entries), tree.root)

    next_id = tree.n + 1
    ids: dict[int, int] = {}
    entries = []
    stack = [(tree.root, False)]
    while stack:
        node, done = stack.pop()
        if not isinstance(node, Node):
            continue
        if done:
            left = node.left if isinstance(node.left, int) else ids[id(node.left)]
            right = node.right if isinstance(node.right, int) else ids[id(node.right)]
            ids[id(node)] = next_id
            entries.append((next_id, (left, right)))
            next_id += 1
            continue
        stack.append((node, True))
        stack.append((node.right, False))
        stack.append((node.left, False))
    root = tree.root if isinstance(tree.root, int) else ids[id(tree.root)]
    return ParentChildSet(tuple(entries), root)


def token_parents(order: ParentChildSet, n: int) -> list[int]:
    """For a constituency order, the id of the smallest constituent above each token."""
    parent = list(range(1, n + 1))
    for p, kids in order:
        for k in kids:
            if k <= n:
                parent[k - 1] = p
    return parent


# -------------------------------------------------------------------- pruning


def prune_dependency(tokens: Sequence[str], tree: DependencyTree) -> tuple[tuple[str, ...], DependencyTree]:
    """Normalize tokens and splice filtered ones out; their dependents move to their head.

    If the root itself is removed, its leftmost surviving descendant in the
    re-attached set becomes the new root and the others attach to it.
    """
    n = len(tokens)
    norm = [normalize_token(t) for t in tokens]
    keep = [keep_token(t) for t in norm]
    if not any(keep):
        raise EmptySentenceError(f"no tokens survive preprocessing: {list(tokens)!r}")
    heads = list(tree.heads)

    def surviving_head(i: int) -> int:
        h = heads[i - 1]
        while h != 0 and not keep[h - 1]:
            h = heads[h - 1]
        return h

    new_heads = {i: surviving_head(i) for i in range(1, n + 1) if keep[i - 1]}
    roots = [i for i, h in new_heads.items() if h == 0]
    new_root = roots[0]
    for r in roots[1:]:
        new_heads[r] = new_root
    remap = {old: new for new, old in enumerate(sorted(new_heads), start=1)}
    out_tokens = tuple(norm[i - 1] for i in sorted(new_heads))
    out_heads = tuple(0 if new_heads[i] == 0 else remap[new_heads[i]] for i in sorted(new_heads))
    return out_tokens, DependencyTree(out_heads)


def prune_constituency(tokens: Sequence[str], tree: ConstituencyTree) -> tuple[tuple[str, ...], ConstituencyTree]:
    """Normalize tokens and delete filtered leaves, collapsing resulting unaries."""
    norm = [normalize_token(t) for t in tokens]
    keep = [keep_token(t) for t in norm]
    if not any(keep):
        raise EmptySentenceError(f"no tokens survive preprocessing: {list(tokens)!r}")
    remap = {}
    for i, k in enumerate(keep, start=1):
        if k:
            remap[i] = len(remap) + 1

    def rec(t: Subtree):
        if isinstance(t, int):
            return remap.get(t)
        left, right = rec(t.left), rec(t.right)
        if left is None:
            return right
        if right is None:
            return left
        return Node(left, right, t.label)

    out_tokens = tuple(norm[i - 1] for i in sorted(remap))
    return out_tokens, ConstituencyTree(rec(tree.root), len(out_tokens))


# -------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Example:
    sentence: Sentence
    tree: DependencyTree | ConstituencyTree | None = None


@dataclass
class LabelMap:
    names: list[str] = field(default_factory=list)

    def index(self, name: str, grow: bool = True) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            if not grow:
                raise FormatError(f"unknown label {name!r}") from None
            self.names.append(name)
            return len(self.names) - 1

    def __len__(self) -> int:
        return len(self.names)


def read_tsv(text: str, labels: LabelMap, grow: bool = True) -> list[Sentence]:
    """``label<TAB>text`` per line; labels get indices in first-seen order."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise FormatError("expected 'label<TAB>text'", line=lineno)
        name, body = line.split("\t", 1)
        try:
            out.append(preprocess(body, labels.index(name.strip(), grow)))
        except (EmptySentenceError, FormatError) as e:
            raise FormatError(str(e), line=lineno) from None
    return out


def read_parsed(text: str, labels: LabelMap, grow: bool = True) -> list[Example]:
    """JSON-lines records ``{"label", "tokens", "heads" | "sexpr", "raw_length"?}``."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e.msg}", line=lineno) from None
        try:
            out.append(_parsed_record(rec, labels, grow))
        except (FormatError, EmptySentenceError, KeyError, TypeError) as e:
            raise FormatError(f"bad record: {e}", line=lineno) from None
    return out


def _parsed_record(rec: dict, labels: LabelMap, grow: bool) -> Example:
    label = labels.index(str(rec["label"]), grow)
    if "heads" in rec:
        tokens = list(rec["tokens"])
        toks, tree = prune_dependency(tokens, DependencyTree(tuple(int(h) for h in rec["heads"])))
    elif "sexpr" in rec:
        sent, ctree = parse_sexpr(rec["sexpr"])
        if "tokens" in rec and list(rec["tokens"]) != list(sent.tokens):
            raise FormatError("tokens disagree with the s-expression leaves")
        tokens = list(sent.tokens)
        toks, tree = prune_constituency(tokens, ctree)
    else:
        tokens = list(rec["tokens"])
        norm = tuple(t for t in (normalize_token(w) for w in tokens) if keep_token(t))
        if not norm:
            raise EmptySentenceError("no tokens survive preprocessing")
        toks, tree = norm, None
    raw = int(rec.get("raw_length", len(" ".join(tokens))))
    return Example(Sentence(toks, label, raw), tree)


def to_parsed_line(example: Example, labels: LabelMap) -> str:
    rec: dict = {"label": labels.names[example.sentence.label], "tokens": list(example.sentence.tokens)}
    if isinstance(example.tree, DependencyTree):
        rec["heads"] = list(example.tree.heads)
    elif isinstance(example.tree, ConstituencyTree):
        rec["sexpr"] = to_sexpr(example.sentence.tokens, example.tree)
    rec["raw_length"] = example.sentence.raw_length
    return json.dumps(rec, ensure_ascii=False)


def attach_trees(
    sentences: Sequence[Sentence],
    trees: Sequence[tuple[Sentence, DependencyTree | ConstituencyTree]],
) -> list[Example]:
    """Pair dataset sentences with parsed trees (same order); tokens come from the tree."""
    if len(sentences) != len(trees):
        raise FormatError(f"{len(sentences)} dataset lines but {len(trees)} trees")
    out = []
    for i, (s, (ts, tree)) in enumerate(zip(sentences, trees), start=1):
        try:
            if isinstance(tree, DependencyTree):
                toks, t = prune_dependency(ts.tokens, tree)
            else:
                toks, t = prune_constituency(ts.tokens, tree)
        except EmptySentenceError as e:
            raise FormatError(str(e), line=i) from None
        out.append(Example(Sentence(toks, s.label, s.raw_length), t))
    return out


def read_sexpr_file(text: str) -> list[tuple[Sentence, ConstituencyTree]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(parse_sexpr(line))
        except FormatError as e:
            raise FormatError(str(e), line=lineno) from None
    return out


def with_fallback_trees(sentences: Iterable[Sentence]) -> list[Example]:
    return [Example(s, fallback_tree(s)) for s in sentences]


# ------------------------------------------------------------- random trees


def random_dependency_tree(n: int, rng: np.random.Generator) -> DependencyTree:
    """Uniform random attachment order; every non-root token picks an earlier-placed head."""
    order = rng.permutation(n) + 1
    heads = [0] * n
    for pos in range(1, n):
        heads[order[pos] - 1] = int(order[rng.integers(pos)])
    return DependencyTree(tuple(heads))


def random_constituency_tree(n: int, rng: np.random.Generator) -> ConstituencyTree:
    def build(lo: int, hi: int) -> Subtree:
        if lo == hi:
            return lo
        split = int(rng.integers(lo, hi))
        return Node(build(lo, split), build(split + 1, hi))

    return ConstituencyTree(build(1, n), n)
