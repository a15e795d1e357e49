"""Pre-train, interact, fine-tune: the staged training pipeline and its three variants.

``plain``  interaction model from random initialization.
``b``      masked-LM pretraining, then the interaction model fine-tuned from it.
``p``      as ``b``, then a classifier over per-token ``[I_x; C_x]`` features,
           where ``I_x`` comes from the fine-tuned interaction layer and ``C_x``
           from the frozen pretrained encoder.
"""

from __future__ import annotations

import copy
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .checkpoint import read_kv, read_named_tensors, write_kv, write_named_tensors
from .embed import (
    BiLstmEncoder,
    EmbeddingTable,
    MlmConfig,
    Pretrained,
    Vocabulary,
    build_vocab,
    context_embed,
    load_embeddings,
    load_encoder_tensors,
    pretrain_toy_mlm,
    save_embeddings,
)
from .interaction import ClassifierParams, Encoded, HirModel, ModelConfig, SentenceModel, WordHead
from .seeding import substream
from .train import ConfigError, FitResult, TrainConfig, fit, score, sweep_csv
from .treeio import (
    DependencyTree,
    Example,
    FormatError,
    LabelMap,
    attach_trees,
    fallback_tree,
    preprocess,
    read_conllu,
    read_parsed,
    read_sexpr_file,
    read_tsv,
)

VARIANTS = ("plain", "b", "p")


class StageError(RuntimeError):
    """A pipeline stage failed; the message starts with the stage name."""


@dataclass
class PipelineConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "plain"
    dataset: str = ""
    valid: str = ""
    test: str = ""
    trees: str = ""
    valid_trees: str = ""
    test_trees: str = ""
    fallback_trees: bool = False
    pretrain_corpus: str = ""
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.004
    pretrain_batch_size: int = 16
    mask_prob: float = 0.15
    feature_epochs: int = 0  # 0 reuses train.epochs

    def validate(self) -> None:
        self.train.validate()
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant != "plain" and not self.pretrain_corpus:
            raise ConfigError(f"variant {self.variant!r} needs pretrain_corpus")
        if not self.dataset:
            raise ConfigError("dataset is required")
        if self.train.mode != "gir" and not self.trees and not self.fallback_trees and not self.dataset.endswith(".jsonl"):
            raise ConfigError(f"mode {self.train.mode!r} needs trees (or fallback_trees)")
        for name in ("pretrain_epochs", "pretrain_lr", "pretrain_batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")
        if self.feature_epochs < 0:
            raise ConfigError(f"feature_epochs must be >= 0, got {self.feature_epochs}")

    def mlm_config(self) -> MlmConfig:
        t = self.train
        return MlmConfig(t.d_e, t.d_h, self.mask_prob, self.pretrain_epochs, self.pretrain_lr, self.pretrain_batch_size, t.clip_threshold, t.init_scale)

    def flat(self) -> dict:
        out = self.train.as_dict()
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"})
        return out


# ---------------------------------------------------------------------- data


def chain_dependency_tree(n: int) -> DependencyTree:
    """Dependency counterpart of the right-branching fallback: token i is headed by i+1."""
    return DependencyTree(tuple(range(2, n + 1)) + (0,))


def load_examples(path: str, trees: str, tree_kind: str, fallback: bool, labels: LabelMap, grow: bool) -> list[Example]:
    """Read a TSV (plus aligned tree file, or fallback trees) or a parsed JSON-lines file."""
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".jsonl"):
        return read_parsed(text, labels, grow)
    sentences = read_tsv(text, labels, grow)
    if trees:
        tree_text = Path(trees).read_text(encoding="utf-8")
        parsed = read_conllu(tree_text) if tree_kind == "dependency" else read_sexpr_file(tree_text)
        return attach_trees(sentences, parsed)
    if fallback:
        if tree_kind == "dependency":
            return [Example(s, chain_dependency_tree(len(s))) for s in sentences]
        return [Example(s, fallback_tree(s)) for s in sentences]
    return [Example(s) for s in sentences]


@dataclass
class Data:
    labels: LabelMap
    train: list[Example]
    valid: list[Example]
    test: list[Example]


def load_data(config: PipelineConfig) -> Data:
    labels = LabelMap()
    kind, fb = config.train.tree_kind, config.fallback_trees
    train = load_examples(config.dataset, config.trees, kind, fb, labels, True)
    valid = load_examples(config.valid, config.valid_trees, kind, fb, labels, False) if config.valid else []
    test = load_examples(config.test, config.test_trees, kind, fb, labels, False) if config.test else []
    if not train:
        raise ConfigError(f"dataset {config.dataset} holds no examples")
    if len(labels) < 2:
        raise ConfigError(f"dataset {config.dataset} has fewer than two labels")
    return Data(labels, train, valid, test)


def read_corpus(path: str) -> list[tuple[str, ...]]:
    """One sentence per line, preprocessed like the datasets; lines left empty are skipped."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        try:
            out.append(preprocess(line).tokens)
        except ValueError:
            continue
    return out


# -------------------------------------------------------------- feature model


class FeatureModel(SentenceModel):
    """Classifier over ``[I_x; C_x]`` per token, max-pooled into one 2*d_h vector."""

    def __init__(self, interaction: HirModel, context: Pretrained, rng: np.random.Generator):
        self.interaction = interaction
        self.config = interaction.config
        c = self.config
        self.context_table = copy.deepcopy(context.table)
        self.context_encoder = copy.deepcopy(context.encoder)
        for p in [self.context_table.weight, *self.context_encoder.parameters()]:
            p.frozen = True
        width = 2 * c.d_h
        self.clf = ClassifierParams(width, c.n_classes, rng, c.hidden, c.batch_norm, c.bn_momentum, c.init_scale, prefix="feature_clf")
        self.word_head = WordHead(width, c.n_classes, rng, c.init_scale, prefix="feature_word")
        self._context_cache: dict[tuple[str, ...], dc.Tensor] = {}

    def head(self) -> ClassifierParams:
        return self.clf

    def groups(self) -> dict[str, list[dc.Parameter]]:
        g = self.interaction.groups()
        g["classifier"] = self.clf.parameters() + self.word_head.parameters()
        return g

    def context(self, tokens: tuple[str, ...]) -> dc.Tensor:
        hit = self._context_cache.get(tokens)
        if hit is None:
            hit = dc.Tensor(np.stack([v.data for v in context_embed(tokens, self.context_table, self.context_encoder)]))
            self._context_cache[tokens] = hit
        return hit

    def features(self, example: Example, training: bool = False, rng=None) -> Encoded:
        e = self.interaction.encode(example, training, rng)
        F = dc.concat_cols(e.token_features, self.context(example.sentence.tokens))
        return Encoded(F, dc.maxpool_rows(F), F)

    def sentence_vector(self, example, training, rng):
        e = self.features(example, training, rng)
        return e.word_states, e.sentence


# ------------------------------------------------------------------- stages


def run_pretrain(config: PipelineConfig, vocab: Vocabulary) -> Pretrained | None:
    """Masked-LM pretraining over the corpus; skipped (None) for the plain variant."""
    if config.variant == "plain":
        return None
    if not config.pretrain_corpus or not Path(config.pretrain_corpus).exists():
        raise ConfigError(f"pretrain corpus {config.pretrain_corpus!r} not found")
    corpus = read_corpus(config.pretrain_corpus)
    try:
        return pretrain_toy_mlm(corpus, config.mlm_config(), config.train.seed, vocab)
    except ValueError as e:
        raise ConfigError(f"pretrain: {e}") from None


def model_config(t: TrainConfig, n_classes: int) -> ModelConfig:
    return ModelConfig(
        d_e=t.d_e,
        d_h=t.d_h,
        hidden=t.hidden,
        n_classes=n_classes,
        mode=t.mode,
        tree_kind=t.tree_kind,
        readout=t.readout,
        gir_include_self=t.gir_include_self,
        batch_norm=t.batch_norm,
        bn_momentum=t.bn_momentum,
        dropout_embed=t.dropout_embed,
        dropout_layers=t.dropout_layers,
        init_scale=t.init_scale,
    )


def run_finetune_interaction(config: PipelineConfig, data: Data, vocab: Vocabulary, pretrained: Pretrained | None, log=None) -> tuple[HirModel, FitResult]:
    """Interaction model trained end to end; pretrained weights (if any) are the initialization."""
    rng = substream(config.train.seed, "init")
    table = encoder = None
    if pretrained is not None:
        table, encoder = copy.deepcopy(pretrained.table), copy.deepcopy(pretrained.encoder)
    model = HirModel(model_config(config.train, len(data.labels)), vocab, rng, table, encoder)
    result = fit(model, data.train, config.train, data.valid, data.test, log=log)
    return model, result


def run_feature_stage(config: PipelineConfig, data: Data, model: HirModel, pretrained: Pretrained, log=None) -> tuple[FeatureModel, FitResult]:
    """Fresh classifier on ``[I_x; C_x]``; interaction layers keep training, the context encoder is frozen."""
    feature = FeatureModel(model, pretrained, substream(config.train.seed, "feature-init"))
    epochs = config.feature_epochs or config.train.epochs
    result = fit(feature, data.train, replace(config.train, epochs=epochs), data.valid, data.test, stream="feature/", log=log)
    return feature, result


@dataclass
class RunManifest:
    entries: list[dict]
    model: SentenceModel
    metrics_path: Path

    @property
    def final(self) -> dict:
        return self.entries[-1]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


def _final_error(result: FitResult) -> float:
    m = result.metrics
    if m.test_error is not None:
        return m.test_error
    valid = m.series("valid")
    if valid:
        return min(err for _, _, err in valid)
    return m.series("train")[-1][2]


def run_variant(config: PipelineConfig, out_dir: str | Path, log=None) -> RunManifest:
    """All stages of the chosen variant; writes checkpoints, metrics CSVs and ``manifest.jsonl``."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[dict] = [{"stage": "config", "seed": config.train.seed, "config": config.flat()}]

    def stage(name, fn):
        try:
            return fn()
        except (ConfigError, FormatError):
            raise
        except Exception as e:
            raise StageError(f"{name}: {e}") from e

    data = stage("data", lambda: load_data(config))
    if config.variant == "plain":
        vocab = build_vocab([ex.sentence.tokens for ex in data.train], config.train.min_count)
    else:
        corpus = read_corpus(config.pretrain_corpus) if Path(config.pretrain_corpus).exists() else []
        vocab = build_vocab(corpus + [ex.sentence.tokens for ex in data.train], config.train.min_count)

    pretrained = stage("pretrain", lambda: run_pretrain(config, vocab))
    if pretrained is not None:
        pretrained.save(out / "pretrain")
        entries.append({"stage": "pretrain", "checkpoint": "pretrain", "epoch_losses": pretrained.epoch_losses})

    model, result = stage("interaction", lambda: run_finetune_interaction(config, data, vocab, pretrained, log))
    save_model(model, data.labels, out / "interaction")
    result.metrics.write(out / "interaction_metrics.csv")
    entries.append(_stage_entry("interaction", "interaction", "interaction_metrics.csv", result))
    final_model, final_result, metrics_name = model, result, "interaction_metrics.csv"

    if config.variant == "p":
        feature, fresult = stage("feature", lambda: run_feature_stage(config, data, model, pretrained, log))
        save_model(feature, data.labels, out / "feature")
        fresult.metrics.write(out / "feature_metrics.csv")
        entry = _stage_entry("feature", "feature", "feature_metrics.csv", fresult)
        entry["classifier_input_width"] = feature.clf.d_in
        entries.append(entry)
        final_model, final_result, metrics_name = feature, fresult, "feature_metrics.csv"

    final_result.metrics.write(out / "metrics.csv")
    entries.append({"stage": "final", "variant": config.variant, "metrics": "metrics.csv", "source": metrics_name, "model": entries[-1]["checkpoint"], "error_rate": _final_error(final_result)})
    manifest = RunManifest(entries, final_model, out / "metrics.csv")
    (out / "manifest.jsonl").write_text(manifest.to_jsonl(), encoding="utf-8")
    return manifest


def _stage_entry(name: str, checkpoint: str, metrics: str, result: FitResult) -> dict:
    return {
        "stage": name,
        "checkpoint": checkpoint,
        "metrics": metrics,
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "first_epoch_loss": result.first_epoch_loss,
        "test_error": result.metrics.test_error,
    }


def read_manifest(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# -------------------------------------------------------------------- sweep


def _sweep_one(args) -> tuple[float, float]:
    config, gamma, out = args
    cfg = replace(config, train=replace(config.train, gamma=gamma))
    return gamma, run_variant(cfg, out).final["error_rate"]


def sweep(config: PipelineConfig, gammas: Sequence[float], out_dir: str | Path, workers: int = 1) -> tuple[list[tuple[float, float]], str]:
    """Independent runs per gamma; returns the (gamma, error) rows and the sweep CSV text."""
    out = Path(out_dir)
    jobs = [(config, float(g), out / f"gamma_{float(g):.2f}") for g in gammas]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    rows.sort()
    text = sweep_csv(rows)
    (out / "sweep.csv").write_text(text, encoding="utf-8", newline="\n")
    return rows, text


# --------------------------------------------------------------- persistence


def _running_stats(clf: ClassifierParams) -> dict[str, np.ndarray]:
    return {f"{clf.prefix}_running_mean": clf.running_mean, f"{clf.prefix}_running_var": clf.running_var}


def _model_tensors(model: SentenceModel) -> dict[str, np.ndarray]:
    hir = model.interaction if isinstance(model, FeatureModel) else model
    tensors = {p.name: p.data for p in hir.parameters() if p is not hir.table.weight}
    tensors.update(_running_stats(hir.clf))
    if isinstance(model, FeatureModel):
        tensors.update({p.name: p.data for p in model.clf.parameters() + model.word_head.parameters()})
        tensors.update(_running_stats(model.clf))
    return tensors


def save_model(model: SentenceModel, labels: LabelMap, directory: str | Path) -> None:
    """Directory with ``config.txt``, ``labels.txt``, ``embeddings.txt`` and ``params.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    hir = model.interaction if isinstance(model, FeatureModel) else model
    cfg = hir.config.as_dict()
    cfg["kind"] = "feature" if isinstance(model, FeatureModel) else "interaction"
    write_kv(d / "config.txt", cfg)
    (d / "labels.txt").write_text("".join(n + "\n" for n in labels.names), encoding="utf-8")
    save_embeddings(hir.table, d / "embeddings.txt")
    write_named_tensors(d / "params.txt", _model_tensors(model))
    if isinstance(model, FeatureModel):
        Pretrained(model.context_table, model.context_encoder, dc.Parameter(np.zeros((1, 1))), dc.Parameter(np.zeros(1))).save(d / "context")


def _parse_value(raw: str, like):
    if isinstance(like, bool):
        if raw not in ("true", "false"):
            raise FormatError(f"expected true/false, got {raw!r}")
        return raw == "true"
    return type(like)(raw)


def load_model(directory: str | Path) -> tuple[SentenceModel, LabelMap]:
    d = Path(directory)
    if not (d / "config.txt").exists():
        raise FileNotFoundError(f"no model at {d}")
    kv = read_kv((d / "config.txt").read_text(encoding="utf-8"))
    kind = kv.pop("kind", "interaction")
    defaults = ModelConfig()
    values = {}
    for f in fields(ModelConfig):
        if f.name in kv:
            values[f.name] = _parse_value(kv[f.name], getattr(defaults, f.name))
    config = ModelConfig(**values)
    labels = LabelMap([n for n in (d / "labels.txt").read_text(encoding="utf-8").splitlines() if n])
    table = load_embeddings(d / "embeddings.txt")
    rng = np.random.default_rng(0)
    hir = HirModel(config, table.vocab, rng, table=table)
    model: SentenceModel = hir
    if kind == "feature":
        model = FeatureModel(hir, Pretrained.load(d / "context"), rng)
    tensors = read_named_tensors(d / "params.txt")
    for p in model.parameters():
        if p is hir.table.weight:
            continue
        if p.name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {p.name!r}")
        if tensors[p.name].shape != p.shape:
            raise FormatError(f"tensor {p.name!r} has shape {tensors[p.name].shape}, expected {p.shape}")
        p.data[...] = tensors[p.name]
    heads = [hir.clf] + ([model.clf] if isinstance(model, FeatureModel) else [])
    for clf in heads:
        clf.running_mean = tensors[f"{clf.prefix}_running_mean"].copy()
        clf.running_var = tensors[f"{clf.prefix}_running_var"].copy()
    return model, labels


def evaluate_model(model: SentenceModel, examples: Sequence[Example], gamma: float = 0.5) -> tuple[float, float]:
    return score(model, examples, gamma)
