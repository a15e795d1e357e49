"""Command-line entry point: ``pif {pretrain,train,eval,sweep,buckets,gradcheck}``.

Every training knob is a flag named after its config field (``--lr-classifier``)
and may also be set in a ``key=value`` file passed with ``--config``.
Precedence: built-in defaults < config file < flags.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Sequence

from .checkpoint import read_kv, write_kv
from .embed import build_vocab, pretrain_toy_mlm
from .gradcheck import GRADCHECK_TOLERANCE, run_suite
from .pipeline import PipelineConfig, load_examples, load_model, read_corpus, read_manifest, run_variant, sweep
from .train import ConfigError, TrainConfig, buckets_csv, length_buckets, score

log = logging.getLogger("pif")

DEFAULT_GAMMAS = tuple(round(0.1 * i, 1) for i in range(11))
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_PIPE_FIELDS = {f.name: f for f in fields(PipelineConfig) if f.name != "train"}
_PRETRAIN_KEYS = ("d_e", "d_h", "seed", "clip_threshold", "init_scale", "min_count", "pretrain_epochs", "pretrain_lr", "pretrain_batch_size", "mask_prob")


def _default(f):
    return f.default if f.default is not MISSING else f.default_factory()


def parse_bool(raw: str) -> bool:
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _convert(name: str, raw, like):
    if raw is None or not isinstance(raw, str):
        return raw
    try:
        if isinstance(like, bool):
            return parse_bool(raw)
        return type(like)(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {type(like).__name__}") from None


def _add_field_flags(p: argparse.ArgumentParser, names: Sequence[str], skip: Sequence[str] = ()) -> None:
    for name in names:
        if name in skip:
            continue
        f = _TRAIN_FIELDS.get(name) or _PIPE_FIELDS[name]
        like = _default(f)
        flag = "--" + name.replace("_", "-")
        if isinstance(like, bool):
            p.add_argument(flag, dest=name, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            p.add_argument(flag, dest=name, default=None, metavar=type(like).__name__.upper())


def resolve(args: argparse.Namespace, allowed: Sequence[str]) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags over the ``allowed`` keys."""
    values = {}
    for name in allowed:
        f = _TRAIN_FIELDS.get(name) or _PIPE_FIELDS[name]
        values[name] = _default(f)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"--config file {path} not found")
        for key, raw in read_kv(path.read_text(encoding="utf-8")).items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            values[key] = _convert(key, raw, values[key])
    for name in allowed:
        raw = getattr(args, name, None)
        if raw is not None:
            values[name] = _convert(name, raw, values[name])
    return values


def pipeline_config(values: dict) -> PipelineConfig:
    train = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_FIELDS})
    cfg = PipelineConfig(train, **{k: v for k, v in values.items() if k in _PIPE_FIELDS})
    cfg.validate()
    return cfg


def _log_config(values: dict, out: Path | None) -> None:
    for k in sorted(values):
        log.info("config %s=%s", k, values[k])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_kv(out / "resolved_config.txt", dict(sorted(values.items())))


def _require(args, *names) -> None:
    for n in names:
        if not getattr(args, n.replace("-", "_"), None):
            raise ConfigError(f"missing required flag --{n}")


# ------------------------------------------------------------------ commands


def cmd_pretrain(args) -> int:
    _require(args, "corpus", "out")
    if not Path(args.corpus).exists():
        raise ConfigError(f"--corpus file {args.corpus} not found")
    values = resolve(args, _PRETRAIN_KEYS)
    cfg = pipeline_config({**values, "variant": "b", "pretrain_corpus": args.corpus, "dataset": args.corpus, "mode": "gir"})
    out = Path(args.out)
    _log_config(values, out)
    corpus = read_corpus(args.corpus)
    try:
        pre = pretrain_toy_mlm(corpus, cfg.mlm_config(), cfg.train.seed, build_vocab(corpus, cfg.train.min_count))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    pre.save(out)
    for i, loss in enumerate(pre.epoch_losses, start=1):
        print(f"epoch {i} mlm_loss {loss:.6f}")
    return 0


TRAIN_KEYS = tuple(_TRAIN_FIELDS) + tuple(_PIPE_FIELDS)


def _train_config(args) -> tuple[PipelineConfig, dict]:
    values = resolve(args, TRAIN_KEYS)
    if not values["dataset"]:
        raise ConfigError("missing required flag --dataset")
    if not Path(values["dataset"]).exists():
        raise ConfigError(f"--dataset file {values['dataset']} not found")
    return pipeline_config(values), values


def cmd_train(args) -> int:
    _require(args, "out")
    cfg, values = _train_config(args)
    out = Path(args.out)
    _log_config(values, out)
    manifest = run_variant(cfg, out, log=log.info)
    print(f"error_rate {manifest.final['error_rate']:.2f}")
    print(f"manifest {out / 'manifest.jsonl'}")
    return 0


def _gammas(raw: str | None) -> list[float]:
    if not raw:
        return list(DEFAULT_GAMMAS)
    try:
        gammas = [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--gammas must be comma-separated numbers, got {raw!r}") from None
    for g in gammas:
        if not 0.0 <= g <= 1.0:
            raise ConfigError(f"gamma {g} outside [0, 1]")
    if not gammas:
        raise ConfigError("--gammas is empty")
    return gammas


def cmd_sweep(args) -> int:
    _require(args, "out")
    cfg, values = _train_config(args)
    out = Path(args.out)
    _log_config(values, out)
    _, text = sweep(cfg, _gammas(args.gammas), out, workers=args.workers)
    sys.stdout.write(text)
    return 0


def _load_eval(args):
    _require(args, "model", "dataset")
    model_dir = Path(args.model)
    if (model_dir / "manifest.jsonl").exists():
        model_dir = model_dir / read_manifest(model_dir / "manifest.jsonl")[-1]["model"]
    if not (model_dir / "config.txt").exists():
        raise ConfigError(f"--model {args.model} is neither a run directory nor a saved model")
    if not Path(args.dataset).exists():
        raise ConfigError(f"--dataset file {args.dataset} not found")
    model, labels = load_model(model_dir)
    c = model.config
    fallback = parse_bool(args.fallback_trees) if args.fallback_trees else False
    if c.mode != "gir" and not args.trees and not fallback and not args.dataset.endswith(".jsonl"):
        raise ConfigError(f"model mode {c.mode!r} needs --trees or --fallback-trees")
    examples = load_examples(args.dataset, args.trees or "", c.tree_kind, fallback, labels, grow=False)
    return model, examples


def cmd_eval(args) -> int:
    model, examples = _load_eval(args)
    loss, err = score(model, examples, args.gamma)
    print(f"error_rate {err:.2f}")
    print(f"loss {loss:.6f}")
    return 0


def cmd_buckets(args) -> int:
    model, examples = _load_eval(args)
    if args.width <= 0:
        raise ConfigError(f"--width must be positive, got {args.width}")
    text = buckets_csv(length_buckets(model, examples, args.width))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)
    return 0


def _int_range(raw: str) -> list[int]:
    try:
        if "-" in raw:
            lo, hi = (int(x) for x in raw.split("-", 1))
            return list(range(lo, hi + 1))
        return [int(x) for x in raw.split(",")]
    except ValueError:
        raise ConfigError(f"--len expects N, N,M or LO-HI, got {raw!r}") from None


def cmd_gradcheck(args) -> int:
    try:
        d_e, d_h = (int(x) for x in args.dims.split(","))
    except ValueError:
        raise ConfigError(f"--dims expects d_e,d_h, got {args.dims!r}") from None
    if d_h % 2 or d_e < 1 or d_h < 2:
        raise ConfigError(f"--dims needs d_e >= 1 and an even d_h >= 2, got {args.dims}")
    lengths = _int_range(args.len)
    if not lengths or min(lengths) < 1:
        raise ConfigError(f"--len needs positive lengths, got {args.len}")
    kinds = ("dependency", "constituency") if args.tree_kind == "both" else (args.tree_kind,)
    gammas = _gammas(args.gammas)
    results = run_suite(d_e, d_h, args.classes, lengths, kinds, gammas, args.eps, args.seed, args.hidden)
    worst = 0.0
    for r in results:
        print(f"{r.tree_kind} len={r.length} gamma={r.gamma:g} entries={r.n_entries} max_rel_error={r.max_rel_error:.3e}")
        worst = max(worst, r.max_rel_error)
    print(f"max_rel_error {worst:.3e}")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pif", description="Interaction-representation text classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log resolved config and per-epoch metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-LM pretraining of embeddings and bi-LSTM")
    p.add_argument("--corpus", help="text file, one sentence per line")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--config")
    _add_field_flags(p, _PRETRAIN_KEYS)
    p.set_defaults(func=cmd_pretrain)

    for name, func, help_ in (("train", cmd_train, "run one pipeline variant"), ("sweep", cmd_sweep, "gamma sensitivity sweep")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help="output directory")
        p.add_argument("--config")
        _add_field_flags(p, TRAIN_KEYS)
        if name == "sweep":
            p.add_argument("--gammas", help="comma-separated; default 0.0,0.1,...,1.0")
            p.add_argument("--workers", type=int, default=1, help="parallel runs")
        p.set_defaults(func=func)

    for name, func in (("eval", cmd_eval), ("buckets", cmd_buckets)):
        p = sub.add_parser(name, help=f"{name} a saved model")
        p.add_argument("--model", help="run directory or saved model directory")
        p.add_argument("--dataset")
        p.add_argument("--trees")
        p.add_argument("--fallback-trees", dest="fallback_trees", nargs="?", const="true", default=None)
        if name == "eval":
            p.add_argument("--gamma", type=float, default=0.5, help="weighting of the reported loss")
        else:
            p.add_argument("--width", type=int, default=100, help="bucket width in characters")
            p.add_argument("--out", help="CSV path (also printed)")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny random model")
    p.add_argument("--dims", default="8,6", help="d_e,d_h")
    p.add_argument("--len", default="5", help="sentence length: N, N,M or LO-HI")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--hidden", type=int, default=8, help="classifier hidden width")
    p.add_argument("--tree-kind", dest="tree_kind", choices=("dependency", "constituency", "both"), default="both")
    p.add_argument("--gammas", default="0,0.5,1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
