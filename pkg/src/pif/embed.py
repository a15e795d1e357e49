"""Vocabulary, embedding tables, the bi-LSTM encoder and a toy masked-LM pretrainer."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .checkpoint import fmt, read_named_tensors, write_named_tensors
from .diffcore import DomainError, Module, Parameter, Tensor
from .optim import AdamState, optimizer_step
from .seeding import substream
from .treeio import FormatError, Sentence

RESERVED = ("[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]")
PAD, UNK, MASK, CLS, SEP = range(5)


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        i = self.stoi.get(token)
        if i is None:
            i = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return i

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi


def _tokens_of(item) -> Sequence[str]:
    return item.tokens if isinstance(item, Sentence) else item


def build_vocab(corpus: Iterable, min_count: int = 1) -> Vocabulary:
    """Tokens seen at least ``min_count`` times, most frequent first (ties: first seen)."""
    if min_count < 1:
        raise DomainError(f"min_count must be >= 1, got {min_count}")
    counts: Counter = Counter()
    n = 0
    for item in corpus:
        counts.update(_tokens_of(item))
        n += 1
    if n == 0:
        raise DomainError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])  # stable: first-seen order on ties
    return Vocabulary(t for t, c in ranked if c >= min_count and t not in RESERVED)


@dataclass
class EmbeddingTable:
    vocab: Vocabulary
    weight: Parameter

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def random(cls, vocab: Vocabulary, dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        return cls(vocab, Parameter(rng.uniform(-0.1, 0.1, (len(vocab), dim)), name="embeddings"))

    def lookup(self, tokens: Sequence[str]) -> Tensor:
        return dc.index(self.weight, self.vocab.encode(tokens))

    def row(self, token: str) -> np.ndarray:
        return self.weight.data[self.vocab.index(token)]


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    v, d = table.weight.shape
    lines = [f"{v} {d}\n"]
    for i, tok in enumerate(table.vocab.itos):
        lines.append(tok + " " + " ".join(fmt(x) for x in table.weight.data[i]) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_embeddings(
    path: str | Path,
    vocab: Vocabulary | None = None,
    rng: np.random.Generator | None = None,
) -> EmbeddingTable:
    """Read a ``V D`` header followed by ``token v1 ... vD`` rows.

    With ``vocab`` given, rows are placed by that vocabulary and tokens missing
    from the file are drawn from uniform(-0.1, 0.1).  Without it the file order
    defines the vocabulary (reserved tokens are prepended when absent).
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise FormatError("missing 'V D' header", line=1)
    head = lines[0].split()
    try:
        if len(head) != 2:
            raise ValueError
        nv, d = int(head[0]), int(head[1])
    except ValueError:
        raise FormatError(f"malformed header {lines[0]!r}, expected 'V D'", line=1) from None
    rows: dict[str, np.ndarray] = {}
    order: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != d + 1:
            raise FormatError(f"expected token and {d} values, got {len(parts)} fields", line=lineno)
        try:
            rows[parts[0]] = np.array([float(x) for x in parts[1:]])
        except ValueError:
            raise FormatError("non-numeric embedding value", line=lineno) from None
        order.append(parts[0])
    if len(order) != nv:
        raise FormatError(f"header promises {nv} rows, found {len(order)}", line=1)

    if vocab is None:
        vocab = Vocabulary(order)
    rng = rng if rng is not None else np.random.default_rng(0)
    weight = rng.uniform(-0.1, 0.1, (len(vocab), d))
    for tok, vec in rows.items():
        if tok in vocab:
            weight[vocab.index(tok)] = vec
    return EmbeddingTable(vocab, Parameter(weight, name="embeddings"))


# --------------------------------------------------------------------- bi-LSTM


class BiLstmEncoder(Module):
    """Two single-layer LSTMs; output width is twice the per-direction width.

    Gate blocks are stacked in the order input, forget, candidate, output.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init_scale: float = 0.08):
        if d_out % 2:
            raise DomainError(f"bi-LSTM output width must be even, got {d_out}")
        h = d_out // 2
        self.d_in, self.hidden = d_in, h
        for side in ("fw", "bw"):
            setattr(self, f"{side}_Wx", Parameter(rng.uniform(-init_scale, init_scale, (4 * h, d_in)), name=f"lstm_{side}_Wx"))
            setattr(self, f"{side}_Wh", Parameter(rng.uniform(-init_scale, init_scale, (4 * h, h)), name=f"lstm_{side}_Wh"))
            b = np.zeros(4 * h)
            b[h : 2 * h] = 1.0
            setattr(self, f"{side}_b", Parameter(b, name=f"lstm_{side}_b"))

    @property
    def d_out(self) -> int:
        return 2 * self.hidden


def _lstm_pass(zx: Tensor, Wh: Parameter, b: Parameter, order: Iterable[int], h_dim: int) -> dict[int, Tensor]:
    h = c = None
    out = {}
    for t in order:
        z = zx[t] + b if h is None else zx[t] + dc.matmul(Wh, h) + b
        i = dc.sigmoid(z[0:h_dim])
        f = dc.sigmoid(z[h_dim : 2 * h_dim])
        g = dc.tanh(z[2 * h_dim : 3 * h_dim])
        o = dc.sigmoid(z[3 * h_dim :])
        c = i * g if c is None else f * c + i * g
        h = o * dc.tanh(c)
        out[t] = h
    return out


def bilstm_encode(embeddings, enc: BiLstmEncoder) -> list[Tensor]:
    """Run both directions from a zero state; step ``t`` returns ``[fw_t; bw_t]``."""
    x = embeddings if isinstance(embeddings, Tensor) else dc.stack(list(embeddings))
    n = x.shape[0]
    if n == 0:
        raise DomainError("bi-LSTM over an empty sequence")
    h = enc.hidden
    fw = _lstm_pass(dc.matmul(x, enc.fw_Wx.T), enc.fw_Wh, enc.fw_b, range(n), h)
    bw = _lstm_pass(dc.matmul(x, enc.bw_Wx.T), enc.bw_Wh, enc.bw_b, range(n - 1, -1, -1), h)
    return [dc.concat(fw[t], bw[t]) for t in range(n)]


def context_embed(tokens: Sequence[str], table: EmbeddingTable, enc: BiLstmEncoder) -> list[Tensor]:
    """Frozen context vectors: constants that never carry gradient."""
    with dc.no_grad():
        return [Tensor._wrap(v.data) for v in bilstm_encode(table.lookup(tokens), enc)]


def encoder_tensors(enc: BiLstmEncoder) -> dict[str, np.ndarray]:
    return {p.name: p.data for p in enc.parameters()}


def load_encoder_tensors(enc: BiLstmEncoder, tensors: dict[str, np.ndarray]) -> None:
    for p in enc.parameters():
        if p.name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {p.name!r}")
        if tensors[p.name].shape != p.shape:
            raise FormatError(f"tensor {p.name!r} has shape {tensors[p.name].shape}, expected {p.shape}")
        p.data[...] = tensors[p.name]


# ------------------------------------------------------------- masked-LM stand-in


@dataclass
class MlmConfig:
    d_e: int = 400
    d_h: int = 200
    mask_prob: float = 0.15
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.004
    pretrain_batch_size: int = 16
    clip_threshold: float = 5.0
    init_scale: float = 0.08


@dataclass
class Pretrained:
    table: EmbeddingTable
    encoder: BiLstmEncoder
    out_W: Parameter
    out_b: Parameter
    epoch_losses: list[float] = field(default_factory=list)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_embeddings(self.table, directory / "embeddings.txt")
        tensors = encoder_tensors(self.encoder)
        tensors["mlm_out_W"] = self.out_W.data
        tensors["mlm_out_b"] = self.out_b.data
        write_named_tensors(directory / "encoder.txt", tensors)

    @classmethod
    def load(cls, directory: str | Path) -> "Pretrained":
        directory = Path(directory)
        table = load_embeddings(directory / "embeddings.txt")
        tensors = read_named_tensors(directory / "encoder.txt")
        d_out = tensors["lstm_fw_Wh"].shape[1] * 2
        enc = BiLstmEncoder(table.dim, d_out, np.random.default_rng(0))
        load_encoder_tensors(enc, tensors)
        return cls(table, enc, Parameter(tensors["mlm_out_W"], name="mlm_out_W"), Parameter(tensors["mlm_out_b"], name="mlm_out_b"))


def _mask(ids: np.ndarray, prob: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Wrap with [CLS]/[SEP] and choose masked positions; returns (inputs, positions)."""
    wrapped = np.concatenate([[CLS], ids, [SEP]])
    pos = np.flatnonzero(rng.random(len(ids)) < prob) + 1
    inputs = wrapped.copy()
    inputs[pos] = MASK
    return inputs, pos


def _mlm_batch_loss(pre: Pretrained, batch: list[np.ndarray], prob: float, rng) -> tuple[Tensor | None, int, int]:
    rows, targets = [], []
    for ids in batch:
        inputs, pos = _mask(ids, prob, rng)
        if len(pos) == 0:
            continue
        hs = bilstm_encode(dc.index(pre.table.weight, inputs), pre.encoder)
        rows.extend(hs[p] for p in pos)
        targets.extend(int(ids[p - 1]) for p in pos)
    if not rows:
        return None, 0, 0
    logits = dc.matmul(dc.stack(rows), pre.out_W.T) + pre.out_b
    probs = dc.softmax(logits)
    correct = int(np.sum(probs.data.argmax(axis=1) == np.array(targets)))
    return dc.cross_entropy(probs, targets), len(targets), correct


def pretrain_toy_mlm(
    corpus: Sequence,
    config: MlmConfig,
    seed: int = 0,
    vocab: Vocabulary | None = None,
) -> Pretrained:
    """Train embeddings, a bi-LSTM and an output projection to recover [MASK]ed tokens."""
    if config.mask_prob <= 0:
        raise DomainError("mask probability 0 leaves no prediction targets")
    sents = [list(_tokens_of(s)) for s in corpus]
    if len(sents) < config.pretrain_batch_size:
        raise DomainError(f"corpus of {len(sents)} sentences cannot fill one batch of {config.pretrain_batch_size}")
    vocab = vocab if vocab is not None else build_vocab(sents)
    init = substream(seed, "pretrain")
    pre = Pretrained(
        EmbeddingTable.random(vocab, config.d_e, init),
        BiLstmEncoder(config.d_e, config.d_h, init, config.init_scale),
        Parameter(init.uniform(-config.init_scale, config.init_scale, (len(vocab), config.d_h)), name="mlm_out_W"),
        Parameter(np.zeros(len(vocab)), name="mlm_out_b"),
    )
    params = [pre.table.weight, *pre.encoder.parameters(), pre.out_W, pre.out_b]
    encoded = [vocab.encode(s) for s in sents]
    shuffle, mask_rng = substream(seed, "pretrain-shuffle"), substream(seed, "mask")
    state = AdamState()
    bs = config.pretrain_batch_size
    for _ in range(config.pretrain_epochs):
        order = shuffle.permutation(len(encoded))
        total, count = 0.0, 0
        for start in range(0, len(order), bs):
            batch = [encoded[i] for i in order[start : start + bs]]
            dc.zero_grad(params)
            with dc.Tape() as tape:
                loss, n_targets, _ = _mlm_batch_loss(pre, batch, config.mask_prob, mask_rng)
            if loss is None:
                continue
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite masked-LM loss at batch {start // bs}")
            dc.backward(loss, tape)
            dc.clip_global_norm(params, config.clip_threshold)
            optimizer_step(params, config.pretrain_lr, state)
            total += loss.item() * n_targets
            count += n_targets
        pre.epoch_losses.append(total / max(count, 1))
    return pre


def masked_accuracy(pre: Pretrained, corpus: Sequence, mask_prob: float = 0.15, seed: int = 0) -> float:
    """Fraction of masked positions whose original token is the arg-max prediction."""
    rng = substream(seed, "mask-eval")
    hits = total = 0
    with dc.no_grad():
        for s in corpus:
            _, n, c = _mlm_batch_loss(pre, [pre.table.vocab.encode(_tokens_of(s))], mask_prob, rng)
            hits += c
            total += n
    if total == 0:
        raise DomainError("no positions were masked")
    return hits / total
