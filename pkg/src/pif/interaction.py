"""Local, global and hybrid interaction representations and the sentence classifier.

Local (LIR): an attentive Tree-LSTM.  Each parent word is turned into a
controller, ``tanh(W_h x_p + b_h)``, that scores its children with a bilinear
form; the attention-weighted child summary drives an LSTM-style composition.

Global (GIR): every word scores every other word with a second bilinear
form, the weighted sums are max-pooled into the sentence vector.

Hybrid (HIR): global attention over the per-token outputs of the local pass.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DomainError, Module, Parameter, Tensor
from .embed import BiLstmEncoder, EmbeddingTable, Vocabulary, bilstm_encode
from .treeio import (
    ConstituencyTree,
    DependencyTree,
    Example,
    bottom_up_order,
    token_parents,
)

MODES = ("lir", "gir", "hir")
TREE_KINDS = ("dependency", "constituency")
READOUTS = ("maxpool", "root")


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, shape)


class LirParams(Module):
    """Tree-LSTM parameters for one tree kind.

    Dependency: controller ``W_h`` reads the parent embedding (d_h x d_e).
    Constituency: internal nodes carry no word, so ``W_h`` reads a child's
    hidden state (d_h x d_h), the gate matrices take the concatenated
    left/right summaries (d_h x 2*d_h), and ``U_f`` does not exist.
    """

    def __init__(self, d_e: int, d_h: int, kind: str, rng: np.random.Generator, init_scale: float = 0.08):
        if kind not in TREE_KINDS:
            raise DomainError(f"unknown tree kind {kind!r}")
        self.kind, self.d_e, self.d_h = kind, d_e, d_h
        s = init_scale
        ctrl_in = d_e if kind == "dependency" else d_h
        gate_in = d_h if kind == "dependency" else 2 * d_h
        self.W_h = Parameter(_uniform(rng, (d_h, ctrl_in), s), name="lir_W_h")
        self.b_h = Parameter(np.zeros(d_h), name="lir_b_h")
        self.W_alpha = Parameter(_uniform(rng, (d_h, d_h), s), name="lir_W_alpha")
        for g in ("i", "o", "u"):
            setattr(self, f"U_{g}", Parameter(_uniform(rng, (d_h, d_e), s), name=f"lir_U_{g}"))
        if kind == "dependency":
            self.U_f = Parameter(_uniform(rng, (d_h, d_e), s), name="lir_U_f")
        for g in ("i", "o", "u"):
            setattr(self, f"W_{g}", Parameter(_uniform(rng, (d_h, gate_in), s), name=f"lir_W_{g}"))
        self.W_f = Parameter(_uniform(rng, (d_h, d_h), s), name="lir_W_f")
        for g in ("i", "o", "u"):
            setattr(self, f"b_{g}", Parameter(np.zeros(d_h), name=f"lir_b_{g}"))
        self.b_f = Parameter(np.ones(d_h), name="lir_b_f")


class GirParams(Module):
    def __init__(self, d_h: int, rng: np.random.Generator, init_scale: float = 0.08):
        self.W_alpha_g = Parameter(_uniform(rng, (d_h, d_h), init_scale), name="gir_W_alpha")


class ClassifierParams(Module):
    """``input -> tanh(batchnorm(W1 x + b1)) -> softmax(W_s . + b_s)``."""

    def __init__(
        self,
        d_in: int,
        n_classes: int,
        rng: np.random.Generator,
        hidden: int = 100,
        batch_norm: bool = True,
        momentum: float = 0.9,
        init_scale: float = 0.08,
        prefix: str = "clf",
    ):
        self.d_in, self.n_classes, self.hidden = d_in, n_classes, hidden
        self.batch_norm, self.momentum = batch_norm, momentum
        self.W1 = Parameter(_uniform(rng, (hidden, d_in), init_scale), name=f"{prefix}_W1")
        self.b1 = Parameter(np.zeros(hidden), name=f"{prefix}_b1")
        if batch_norm:
            self.bn_gain = Parameter(np.ones(hidden), name=f"{prefix}_bn_gain")
            self.bn_bias = Parameter(np.zeros(hidden), name=f"{prefix}_bn_bias")
        self.W_s = Parameter(_uniform(rng, (n_classes, hidden), init_scale), name=f"{prefix}_W_s")
        self.b_s = Parameter(np.zeros(n_classes), name=f"{prefix}_b_s")
        self.running_mean = np.zeros(hidden)
        self.running_var = np.ones(hidden)
        self.prefix = prefix


class WordHead(Module):
    """Per-word softmax layer behind the word-level loss term."""

    def __init__(self, d_h: int, n_classes: int, rng: np.random.Generator, init_scale: float = 0.08, prefix: str = "word"):
        self.W = Parameter(_uniform(rng, (n_classes, d_h), init_scale), name=f"{prefix}_W")
        self.b = Parameter(np.zeros(n_classes), name=f"{prefix}_b")


@dataclass
class NodeState:
    h: Tensor
    c: Tensor


# ----------------------------------------------------------------------- LIR


def attend(controller: Tensor, targets: Tensor, W_alpha: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Bilinear attention: logits ``controller^T W_alpha t_k``; returns (summary, weights)."""
    logits = dc.matmul(targets, dc.matmul(controller, W_alpha))
    weights = dc.softmax(logits, mask)
    return dc.matmul(weights, targets), weights


def lir_controller(parent_embedding: Tensor, child_states: Sequence[NodeState], params: LirParams) -> Tensor:
    if not child_states:
        raise DomainError("controller needs at least one child; use the leaf rule")
    hbar = dc.tanh(dc.matmul(params.W_h, parent_embedding) + params.b_h)
    summary, _ = attend(hbar, dc.stack([c.h for c in child_states]), params.W_alpha)
    return summary


def _gates(params: LirParams, x: Tensor | None, h_tilde: Tensor | None):
    def pre(g):
        z = getattr(params, f"b_{g}")
        if x is not None:
            z = dc.matmul(getattr(params, f"U_{g}"), x) + z
        if h_tilde is not None:
            z = dc.matmul(getattr(params, f"W_{g}"), h_tilde) + z
        return z

    return dc.sigmoid(pre("i")), dc.sigmoid(pre("o")), dc.tanh(pre("u"))


def lir_cell_dependency(
    parent_embedding: Tensor,
    h_tilde: Tensor | None,
    child_states: Sequence[NodeState],
    params: LirParams,
) -> NodeState:
    """Gated composition of a dependency node; ``h_tilde=None`` is the zero summary."""
    x = parent_embedding
    i, o, u = _gates(params, x, h_tilde)
    c = i * u
    if child_states:
        ux = dc.matmul(params.U_f, x)
        for k in child_states:
            f = dc.sigmoid(ux + dc.matmul(params.W_f, k.h) + params.b_f)
            c = c + f * k.c
    return NodeState(o * dc.tanh(c), c)


def leaf_cell(embedding: Tensor, params: LirParams) -> NodeState:
    """The childless case: zero summary, empty forget sum."""
    i, o, u = _gates(params, embedding, None)
    c = i * u
    return NodeState(o * dc.tanh(c), c)


def lir_cell_constituency(left: NodeState, right: NodeState, params: LirParams) -> NodeState:
    """Binary composition; each child in turn controls attention over both children."""
    pair = dc.stack([left.h, right.h])
    summaries = []
    for ctrl in (left.h, right.h):
        hbar = dc.tanh(dc.matmul(params.W_h, ctrl) + params.b_h)
        summaries.append(attend(hbar, pair, params.W_alpha)[0])
    h_tilde = dc.concat(*summaries)
    i, o, u = _gates(params, None, h_tilde)
    c = i * u
    for k in (left, right):
        c = c + dc.sigmoid(dc.matmul(params.W_f, k.h) + params.b_f) * k.c
    return NodeState(o * dc.tanh(c), c)


def lir_encode(
    tree: DependencyTree | ConstituencyTree,
    embeddings: Sequence[Tensor],
    leaf_h: Sequence[Tensor],
    params: LirParams,
) -> dict[int, NodeState]:
    """States for every tree node, visiting parents bottom-up.

    Leaves take their hidden state from ``leaf_h`` (the bi-LSTM outputs) and
    their memory cell from the leaf rule.  Constituency parents get ids
    ``n+1, n+2, ...`` as assigned by :func:`bottom_up_order`.
    """
    n = len(embeddings)
    if len(tree) != n or len(leaf_h) != n:
        raise DomainError(f"tree covers {len(tree)} tokens but the sentence has {n}")
    kind = "dependency" if isinstance(tree, DependencyTree) else "constituency"
    if kind != params.kind:
        raise DomainError(f"{kind} tree given to {params.kind} parameters")
    states: dict[int, NodeState] = {}
    order = bottom_up_order(tree)
    parents = {p for p, _ in order}
    for t in range(1, n + 1):
        if kind == "constituency" or t not in parents:
            states[t] = NodeState(leaf_h[t - 1], leaf_cell(embeddings[t - 1], params).c)
    for p, kids in order:
        if kind == "dependency":
            child = [states[k] for k in kids]
            h_tilde = lir_controller(embeddings[p - 1], child, params)
            states[p] = lir_cell_dependency(embeddings[p - 1], h_tilde, child, params)
        else:
            states[p] = lir_cell_constituency(states[kids[0]], states[kids[1]], params)
    return states


def token_states(tree, states: dict[int, NodeState], n: int) -> list[Tensor]:
    """Per-token outputs: a dependency token's own node; for constituency the
    smallest constituent above the token (the leaf itself when alone)."""
    if isinstance(tree, DependencyTree):
        return [states[t].h for t in range(1, n + 1)]
    return [states[p].h for p in token_parents(bottom_up_order(tree), n)]


def root_state(tree, states: dict[int, NodeState]) -> Tensor:
    return states[bottom_up_order(tree).root].h


# ----------------------------------------------------------------------- GIR


def gir_attend(hidden: Sequence[Tensor], g: int, params: GirParams, include_self: bool = False) -> Tensor:
    """Interaction vector of word ``g`` (0-based) against the rest of the sentence."""
    n = len(hidden)
    if not 0 <= g < n:
        raise DomainError(f"word index {g} out of range for {n} words")
    if n == 1:
        return hidden[0]
    H = dc.stack(list(hidden))
    mask = None
    if not include_self:
        mask = np.zeros(n, dtype=bool)
        mask[g] = True
    return attend(hidden[g], H, params.W_alpha_g, mask)[0]


def gir_interactions(hidden, params: GirParams, include_self: bool = False) -> tuple[Tensor, Tensor]:
    """All interaction vectors at once; returns (rows r_1..r_n, attention matrix)."""
    H = hidden if isinstance(hidden, Tensor) else dc.stack(list(hidden))
    n = H.shape[0]
    if n == 0:
        raise DomainError("global interaction over zero words")
    if n == 1:
        return H, Tensor(np.ones((1, 1)))
    logits = dc.matmul(dc.matmul(H, params.W_alpha_g), H.T)
    mask = None if include_self else np.eye(n, dtype=bool)
    weights = dc.softmax(logits, mask)
    return dc.matmul(weights, H), weights


def gir_encode(hidden, params: GirParams, include_self: bool = False) -> Tensor:
    return dc.maxpool_rows(gir_interactions(hidden, params, include_self)[0])


# ---------------------------------------------------------------- classifier


BN_EPS = 1e-5


def classify(
    s: Tensor,
    clf: ClassifierParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> Tensor:
    """Class probabilities for one sentence vector or a batch matrix (one row each).

    Batch normalization uses batch statistics when training on more than one
    row and the running estimates otherwise.
    """
    single = s.ndim == 1
    x = dc.stack([s]) if single else s
    x = dc.dropout(x, dropout, training, rng)
    z = dc.matmul(x, clf.W1.T) + clf.b1
    if clf.batch_norm:
        if training and x.shape[0] > 1:
            mu = dc.mean(z, axis=0)
            zc = z - mu
            var = dc.mean(zc * zc, axis=0)
            zn = zc / dc.sqrt(var + BN_EPS)
            m = clf.momentum
            clf.running_mean = m * clf.running_mean + (1 - m) * mu.data
            clf.running_var = m * clf.running_var + (1 - m) * var.data
        else:
            zn = (z - clf.running_mean) / np.sqrt(clf.running_var + BN_EPS)
        z = zn * clf.bn_gain + clf.bn_bias
    hid = dc.dropout(dc.tanh(z), dropout, training, rng)
    probs = dc.softmax(dc.matmul(hid, clf.W_s.T) + clf.b_s)
    return probs[0] if single else probs


def word_term(word_states, label: int, head: WordHead) -> Tensor:
    """Mean word-level cross-entropy with the sentence label on every token."""
    H = word_states if isinstance(word_states, Tensor) else dc.stack(list(word_states))
    probs = dc.softmax(dc.matmul(H, head.W.T) + head.b)
    return dc.cross_entropy(probs, label)


def combine_loss(word: Tensor, sentence: Tensor, gamma: float) -> Tensor:
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    return dc.scale(word, gamma) + dc.scale(sentence, 1.0 - gamma)


def joint_loss(word_states, s: Tensor, label: int, clf: ClassifierParams, head: WordHead, gamma: float) -> Tensor:
    """``gamma * mean_i NLL(word_i) + (1 - gamma) * NLL(sentence)`` for one sentence."""
    return combine_loss(word_term(word_states, label, head), dc.cross_entropy(classify(s, clf), label), gamma)


def predict(probs) -> int:
    """Arg-max class; ties go to the lowest index."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return int(np.argmax(p))


# --------------------------------------------------------------------- model


@dataclass
class ModelConfig:
    d_e: int = 400
    d_h: int = 200
    hidden: int = 100
    n_classes: int = 2
    mode: str = "hir"
    tree_kind: str = "constituency"
    readout: str = "maxpool"
    gir_include_self: bool = False
    batch_norm: bool = True
    bn_momentum: float = 0.9
    dropout_embed: float = 0.05
    dropout_layers: float = 0.4
    init_scale: float = 0.08

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tree_kind not in TREE_KINDS:
            raise DomainError(f"tree kind must be one of {TREE_KINDS}, got {self.tree_kind!r}")
        if self.readout not in READOUTS:
            raise DomainError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.d_h % 2:
            raise DomainError(f"d_h must be even for the bi-LSTM, got {self.d_h}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Encoded:
    word_states: Tensor  # n x d_h, the inputs of the word-level loss
    sentence: Tensor  # d_h
    token_features: Tensor  # n x d_h, the per-token output of the last interaction layer


GROUP_ORDER = ("embeddings", "bilstm", "lir", "gir", "classifier")


class SentenceModel:
    """Shared batching, loss and prediction for the interaction classifiers."""

    config: ModelConfig
    word_head: WordHead

    def head(self) -> ClassifierParams:
        raise NotImplementedError

    def sentence_vector(self, example: Example, training: bool, rng) -> tuple[Tensor, Tensor]:
        """Returns (word_states matrix, sentence vector)."""
        raise NotImplementedError

    def groups(self) -> dict[str, list[Parameter]]:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return [p for g in self.groups().values() for p in g]

    def loss_terms(self, examples: Sequence[Example], training: bool = True, rng=None) -> tuple[Tensor, Tensor, np.ndarray]:
        """Batch means of the word-level and sentence-level terms, plus class probabilities."""
        encoded = [self.sentence_vector(ex, training, rng) for ex in examples]
        probs = classify(
            dc.stack([s for _, s in encoded]),
            self.head(),
            training,
            rng,
            self.config.dropout_layers,
        )
        words = sents = None
        for b, (ex, (states, _)) in enumerate(zip(examples, encoded)):
            label = ex.sentence.label
            w = word_term(states, label, self.word_head)
            s = dc.cross_entropy(probs[b], label)
            words = w if words is None else words + w
            sents = s if sents is None else sents + s
        inv = 1.0 / len(examples)
        return dc.scale(words, inv), dc.scale(sents, inv), probs.data

    def batch_loss(self, examples: Sequence[Example], gamma: float, training: bool = True, rng=None) -> tuple[Tensor, np.ndarray]:
        """Mean joint loss over ``examples`` and the class-probability rows."""
        words, sents, probs = self.loss_terms(examples, training, rng)
        return combine_loss(words, sents, gamma), probs

    def predict_proba(self, examples: Sequence[Example], chunk: int = 64) -> np.ndarray:
        out = []
        with dc.no_grad():
            for start in range(0, len(examples), chunk):
                part = examples[start : start + chunk]
                vecs = [self.sentence_vector(ex, False, None)[1] for ex in part]
                out.append(classify(dc.stack(vecs), self.head()).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))


class HirModel(SentenceModel):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, rng: np.random.Generator, table: EmbeddingTable | None = None, encoder: BiLstmEncoder | None = None):
        self.config = c = config
        s = c.init_scale
        self.table = table if table is not None else EmbeddingTable.random(vocab, c.d_e, rng)
        self.encoder = encoder if encoder is not None else BiLstmEncoder(c.d_e, c.d_h, rng, s)
        if self.table.dim != c.d_e or self.encoder.d_out != c.d_h or self.encoder.d_in != c.d_e:
            raise DomainError("pretrained embeddings/encoder do not match d_e/d_h")
        self.lir = LirParams(c.d_e, c.d_h, c.tree_kind, rng, s)
        self.gir = GirParams(c.d_h, rng, s)
        self.clf = ClassifierParams(c.d_h, c.n_classes, rng, c.hidden, c.batch_norm, c.bn_momentum, s)
        self.word_head = WordHead(c.d_h, c.n_classes, rng, s)

    @property
    def vocab(self) -> Vocabulary:
        return self.table.vocab

    def head(self) -> ClassifierParams:
        return self.clf

    def groups(self) -> dict[str, list[Parameter]]:
        return {
            "embeddings": [self.table.weight],
            "bilstm": self.encoder.parameters(),
            "lir": self.lir.parameters(),
            "gir": self.gir.parameters(),
            "classifier": self.clf.parameters() + self.word_head.parameters(),
        }

    def encode(self, example: Example, training: bool = False, rng=None) -> Encoded:
        c = self.config
        tokens = example.sentence.tokens
        x = dc.dropout(self.table.lookup(tokens), c.dropout_embed, training, rng)
        rows = [x[t] for t in range(len(tokens))]
        hidden = bilstm_encode(x, self.encoder)
        if c.mode == "gir":
            H = dc.stack(hidden)
            R, _ = gir_interactions(H, self.gir, c.gir_include_self)
            return Encoded(H, dc.maxpool_rows(R), R)
        if example.tree is None:
            raise DomainError(f"mode {c.mode!r} needs a syntax tree")
        states = lir_encode(example.tree, rows, hidden, self.lir)
        H = dc.stack(token_states(example.tree, states, len(tokens)))
        if c.mode == "hir":
            R, _ = gir_interactions(H, self.gir, c.gir_include_self)
            return Encoded(H, dc.maxpool_rows(R), R)
        s = root_state(example.tree, states) if c.readout == "root" else dc.maxpool_rows(H)
        return Encoded(H, s, H)

    def sentence_vector(self, example, training, rng):
        e = self.encode(example, training, rng)
        return e.word_states, e.sentence


def hir_forward(example: Example, model: HirModel) -> tuple[Tensor, Tensor, Tensor]:
    """Inference-mode pass: (word_states, sentence vector, class probabilities)."""
    e = model.encode(example, training=False)
    return e.word_states, e.sentence, classify(e.sentence, model.clf)
