"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data/format error, 3 numeric
failure. Settings come from flags, optionally seeded by ``--config FILE``: a
JSON object with flat dotted keys such as ``"train.learning_rate"``,
``"model.hidden"``, ``"paths.toxins"`` or ``"seed"``. Flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from tipformer import __version__
from tipformer.data import (
    Corpus,
    InteractionPair,
    _rows,
    parse_corpus,
    read_manifest,
    read_proteins,
    read_toxins,
    sample_negatives,
    split,
    write_corpus,
    write_manifest,
)
from tipformer.embeddings import (
    PROTEIN_DIM,
    TOXIN_DIM,
    Featurizer,
    FallbackEmbeddings,
    PrecomputedEmbeddings,
    load_embeddings,
    protein_fallback,
    toxin_fallback,
)
from tipformer.errors import ConfigError, DataError, TipFormerError, UsageError
from tipformer.evaluation import (
    evaluate_scores,
    export_features,
    external_test,
    format_summary,
    read_scores,
    roc_auc,
    score_pairs,
    summarize,
    write_metrics,
)
from tipformer.model import ModelConfig, TipFormer
from tipformer.pipeline import METHODS, Experiment
from tipformer.toy import make_toy_corpus
from tipformer.training import TrainConfig, fit, load_checkpoint, save_checkpoint, write_log

PATH_KEYS = ("toxins", "proteins", "pairs", "manifest", "checkpoint", "toxin_embeddings", "protein_embeddings", "out")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config merging


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object of dotted keys")
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__)
    for key in raw:
        section, _, name = key.partition(".")
        ok = (
            key == "seed"
            or (section == "model" and name in model_keys)
            or (section == "train" and name in train_keys)
            or (section == "paths" and name in PATH_KEYS)
        )
        if not ok:
            raise ConfigError(f"unknown config key {key!r}")
    return raw


class Settings:
    """Flag values layered over the config file."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = load_config_file(getattr(args, "config", None))

    def get(self, key: str, flag: str | None = None, default=None):
        value = getattr(self.args, flag or key.split(".")[-1], None)
        if value is not None:
            return value
        return self.file.get(key, default)

    def path(self, name: str, required: bool = True) -> str | None:
        value = self.get(f"paths.{name}", name)
        if value is None and required:
            raise UsageError(f"missing required path --{name.replace('_', '-')}")
        return value

    def seed(self, default: int = 0) -> int:
        return int(self.get("seed", "seed", default))

    def model_config(self, base: dict | None = None) -> ModelConfig:
        raw = dict(base or {})
        raw.update({k.split(".", 1)[1]: v for k, v in self.file.items() if k.startswith("model.")})
        for flag, key in (("variant", "variant"), ("hidden", "hidden"), ("heads", "heads"), ("layers", "num_interaction_layers")):
            value = getattr(self.args, flag, None)
            if value is not None:
                raw[key] = value
        return ModelConfig.from_dict(raw)

    def train_config(self) -> TrainConfig:
        raw = {k.split(".", 1)[1]: v for k, v in self.file.items() if k.startswith("train.")}
        for flag, key in (("lr", "learning_rate"), ("epochs", "max_epochs"), ("patience", "patience"), ("dropout", "dropout_rate")):
            value = getattr(self.args, flag, None)
            if value is not None:
                raw[key] = value
        raw["seed"] = self.seed(raw.get("seed", 0))
        return TrainConfig.from_dict(raw)


def _check_exists(*paths: str | None) -> None:
    for p in paths:
        if p is not None and p != "fallback" and not Path(p).exists():
            raise DataError(f"{p}: file not found")


def _entities(settings: Settings) -> Corpus:
    toxins, proteins = settings.path("toxins"), settings.path("proteins")
    _check_exists(toxins, proteins)
    return Corpus(read_toxins(toxins), read_proteins(proteins))


def _sources(settings: Settings, config: ModelConfig):
    if config.embedding == "fallback":
        return toxin_fallback(config.fallback_dim), protein_fallback(config.fallback_dim)
    t_path = settings.path("toxin_embeddings")
    p_path = settings.path("protein_embeddings")
    _check_exists(t_path, p_path)
    return (
        PrecomputedEmbeddings(load_embeddings(t_path, config.toxin_input_dim), t_path),
        PrecomputedEmbeddings(load_embeddings(p_path, config.protein_input_dim), p_path),
    )


def _embedding_base(settings: Settings) -> dict:
    t = settings.get("paths.toxin_embeddings", "toxin_embeddings")
    p = settings.get("paths.protein_embeddings", "protein_embeddings")
    if (t is None or t == "fallback") and (p is None or p == "fallback"):
        return {"embedding": "fallback"}
    if t is None or p is None or "fallback" in (t, p):
        raise UsageError("give both --toxin-embeddings and --protein-embeddings, or neither")
    return {"embedding": "precomputed", "toxin_input_dim": TOXIN_DIM, "protein_input_dim": PROTEIN_DIM}


def _features_for(settings: Settings, corpus: Corpus, config: ModelConfig) -> Featurizer:
    t_src, p_src = _sources(settings, config)
    if isinstance(t_src, FallbackEmbeddings):
        print(f"embeddings: {t_src.description}", file=sys.stderr)
    return Featurizer(corpus, t_src, p_src)


def _split_for(settings: Settings, corpus: Corpus):
    manifest = settings.path("manifest")
    _check_exists(manifest)
    return read_manifest(manifest, corpus)


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--fractions must be three comma-separated numbers, got {text!r}") from None
    if len(values) != 3:
        raise UsageError(f"--fractions must be three comma-separated numbers, got {text!r}")
    return values  # type: ignore[return-value]


# ---------------------------------------------------------------- commands


def cmd_make_toy(args, settings: Settings) -> int:
    corpus = make_toy_corpus(args.n_toxins, args.n_proteins, args.n_pairs, settings.seed())
    paths = write_corpus(corpus, settings.path("out"))
    n_t, n_p, n_pairs = corpus.counts
    print(f"wrote {n_t} toxins, {n_p} proteins, {n_pairs} pairs to {paths['pairs'].parent}")
    return 0


def cmd_split(args, settings: Settings) -> int:
    fractions = _fractions(args.fractions)
    toxins, proteins, pairs = settings.path("toxins"), settings.path("proteins"), settings.path("pairs")
    _check_exists(toxins, proteins, pairs)
    corpus = parse_corpus(toxins, proteins, pairs)
    seed = settings.seed()
    all_pairs = list(corpus.pairs)
    if args.neg_ratio > 0:
        all_pairs += sample_negatives(corpus, args.neg_ratio, seed)
    ds = split(all_pairs, args.policy, fractions, seed)
    write_manifest(ds, settings.path("out"))
    sizes = " ".join(f"{n}={len(ds.partition(n))}" for n in ("train", "val", "test"))
    print(f"policy={ds.policy} seed={seed} {sizes}")
    if ds.metadata:
        print(f"held-out entities: {ds.metadata['held_out_entities']} (val {ds.metadata['val_entities']}, train {ds.metadata['train_entities']})")
    return 0


def cmd_train(args, settings: Settings) -> int:
    corpus = _entities(settings)
    ds = _split_for(settings, corpus)
    model_cfg = settings.model_config(_embedding_base(settings))
    train_cfg = settings.train_config()
    feats = _features_for(settings, corpus, model_cfg)
    model = TipFormer(model_cfg, seed=train_cfg.seed)
    out = Path(settings.path("checkpoint", required=False) or settings.path("out"))
    log_path = Path(args.log) if args.log else out.with_suffix(".log.tsv")

    def progress(entry):
        print(f"epoch {entry.epoch}: train_loss={entry.train_loss:.4f} val_loss={entry.val_loss:.4f}", file=sys.stderr)

    result = fit(ds, model, train_cfg, feats, progress)
    save_checkpoint(result.model, out, result.optimizer, train_cfg, result.best_metadata())
    write_log(result.log, log_path)
    print(f"best_val_loss={result.best_val_loss:.6f} epoch={result.best_epoch} checkpoint={out}")
    return 0


def _load_model(settings: Settings):
    ckpt_path = settings.path("checkpoint")
    _check_exists(ckpt_path)
    return load_checkpoint(ckpt_path)


def cmd_evaluate(args, settings: Settings) -> int:
    out = Path(settings.path("out"))
    if args.repeats:
        return _evaluate_repeats(args, settings, out)
    corpus = _entities(settings)
    ds = _split_for(settings, corpus)
    pairs = ds.all_pairs() if args.partition == "all" else list(ds.partition(args.partition))
    if not pairs:
        raise DataError(f"partition {args.partition!r} of the manifest is empty")
    if args.scores:
        _check_exists(args.scores)
        table = read_scores(args.scores)
        missing = [p for p in pairs if p.key not in table]
        if missing:
            raise DataError(f"no external score for {missing[0].toxin_id}/{missing[0].protein_id}")
        scores = [table[p.key] for p in pairs]
    else:
        ckpt = _load_model(settings)
        feats = _features_for(settings, corpus, ckpt.model.config)
        scores = score_pairs(ckpt.model, pairs, feats)
    if args.external:
        report = external_test(scores, args.threshold)
        row = report.row()
        out.write_text("pre\ttp\tfp\n" + f"{row['pre']}\t{row['tp']}\t{row['fp']}\n", encoding="utf-8")
        print(f"external test: pre={row['pre']} tp={row['tp']} fp={row['fp']}")
        return 0
    labels = [p.label for p in pairs]
    report = evaluate_scores(scores, labels, args.threshold)
    write_metrics(summarize([report]), out)
    if args.roc:
        if report.auc is None:
            raise DataError("ROC export needs both labels present in the partition")
        roc_auc(scores, labels)[1].write(args.roc)
    acc = "undefined" if report.acc is None else f"{report.acc:.4f}"
    print(f"pairs={len(pairs)} acc={acc} auc={'undefined' if report.auc is None else f'{report.auc:.4f}'}")
    return 0


def _evaluate_repeats(args, settings: Settings, out: Path) -> int:
    toxins, proteins, pairs = settings.path("toxins"), settings.path("proteins"), settings.path("pairs")
    _check_exists(toxins, proteins, pairs)
    corpus = parse_corpus(toxins, proteins, pairs)
    model_cfg = settings.model_config(_embedding_base(settings))
    feats = _features_for(settings, corpus, model_cfg)
    exp = Experiment(
        corpus,
        feats,
        model_cfg,
        settings.train_config(),
        method=args.method,
        policy=args.policy,
        fractions=_fractions(args.fractions),
        neg_ratio=args.neg_ratio,
    )
    summary = exp.repeat(args.repeats, settings.seed())
    write_metrics(summary, out)
    print(f"{args.method} over {summary.n_runs} runs: {format_summary(summary)}")
    return 0


def cmd_predict(args, settings: Settings) -> int:
    corpus = _entities(settings)
    ckpt = _load_model(settings)
    feats = _features_for(settings, corpus, ckpt.model.config)
    if args.pair_list:
        _check_exists(args.pair_list)
        keys = [(t, p) for _, (t, p) in _rows(args.pair_list, 2)]
    else:
        keys = [(t, p) for t in corpus.toxins for p in corpus.proteins]
    pairs = [InteractionPair(t, p, 0) for t, p in keys]
    scores = score_pairs(ckpt.model, pairs, feats)
    lines = ["toxin_id\tprotein_id\tprobability\n"]
    lines += [f"{p.toxin_id}\t{p.protein_id}\t{s!r}\n" for p, s in zip(pairs, scores)]
    Path(settings.path("out")).write_text("".join(lines), encoding="utf-8")
    print(f"scored {len(pairs)} pairs")
    return 0


def cmd_hotspots(args, settings: Settings) -> int:
    corpus = _entities(settings)
    ckpt = _load_model(settings)
    feats = _features_for(settings, corpus, ckpt.model.config)
    hits = ckpt.model.extract_hotspots(feats.toxin(args.toxin_id), feats.protein(args.protein_id), args.k, args.offset)
    lines = ["residue_number\tscore\n"] + [f"{r}\t{s!r}\n" for r, s in hits]
    Path(settings.path("out")).write_text("".join(lines), encoding="utf-8")
    print("top residues: " + ", ".join(str(r) for r, _ in hits))
    return 0


def cmd_export_features(args, settings: Settings) -> int:
    corpus = _entities(settings)
    ds = _split_for(settings, corpus)
    ckpt = _load_model(settings)
    feats = _features_for(settings, corpus, ckpt.model.config)
    pairs = ds.all_pairs() if args.partition == "all" else list(ds.partition(args.partition))
    n = export_features(ckpt.model, pairs, feats, settings.path("out"))
    print(f"exported {n} feature rows")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tipformer", description="Toxin-protein interaction prediction toolkit.")
    parser.add_argument("--version", action="version", version=f"tipformer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, func, help_text: str):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file of flat dotted keys; flags override it")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        return p

    def entities(p, pairs: bool = False):
        p.add_argument("--toxins", help="toxins.tsv (toxin_id, smiles)")
        p.add_argument("--proteins", help="proteins.tsv (protein_id, sequence)")
        if pairs:
            p.add_argument("--pairs", help="pairs.tsv (toxin_id, protein_id, label)")

    def embeddings(p):
        p.add_argument("--toxin-embeddings", dest="toxin_embeddings", help="TPFE file (dim 384) or 'fallback'")
        p.add_argument("--protein-embeddings", dest="protein_embeddings", help="TPFE file (dim 1024) or 'fallback'")

    p = command("make-toy", cmd_make_toy, "Write the synthetic toy corpus (toxins/proteins/pairs TSV).")
    p.add_argument("--out", required=False, help="output directory")
    p.add_argument("--n-toxins", type=int, default=60)
    p.add_argument("--n-proteins", type=int, default=60)
    p.add_argument("--n-pairs", type=int, default=480, help="labeled pairs, half positive")

    p = command("split", cmd_split, "Split labeled pairs into a train/val/test manifest.")
    entities(p, pairs=True)
    p.add_argument("--policy", choices=["random", "new-toxin", "new-target", "new_toxin", "new_target"], default="random")
    p.add_argument("--fractions", default="0.8,0.1,0.1", help="train,val,test fractions summing to 1")
    p.add_argument("--neg-ratio", type=float, default=0.0, help="sample this many negatives per positive (0 = none)")
    p.add_argument("--out", help="manifest path")

    p = command("train", cmd_train, "Train a model on a split manifest and write a TPFC checkpoint.")
    entities(p)
    embeddings(p)
    p.add_argument("--manifest", help="split manifest")
    p.add_argument("--variant", choices=["tipformer", "deepcnn"])
    p.add_argument("--epochs", type=int, help="maximum epochs (default 50)")
    p.add_argument("--patience", type=int, help="early-stopping patience (default 10)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--dropout", type=float, help="dropout rate (default 0.2)")
    p.add_argument("--hidden", type=int, help="hidden dimension (default 32)")
    p.add_argument("--heads", type=int, help="attention heads (default 8)")
    p.add_argument("--layers", type=int, help="interaction layers (default 2)")
    p.add_argument("--checkpoint", help="checkpoint path to write")
    p.add_argument("--out", help="alias for --checkpoint")
    p.add_argument("--log", help="epoch log TSV (default: <checkpoint>.log.tsv)")

    p = command("evaluate", cmd_evaluate, "Score a partition and write a metrics TSV, or run the repeat protocol.")
    entities(p, pairs=True)
    embeddings(p)
    p.add_argument("--manifest", help="split manifest")
    p.add_argument("--checkpoint", help="TPFC checkpoint")
    p.add_argument("--scores", help="external scores TSV (toxin_id, protein_id, score)")
    p.add_argument("--partition", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--roc", help="also write ROC points (threshold, fpr, tpr)")
    p.add_argument("--external", action="store_true", help="treat all pairs as known interactions (precision protocol)")
    p.add_argument("--repeats", type=int, help="run the full split/train/test protocol this many times")
    p.add_argument("--method", choices=METHODS, default="tipformer", help="model used by --repeats")
    p.add_argument("--policy", choices=["random", "new-toxin", "new-target", "new_toxin", "new_target"], default="random")
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--neg-ratio", type=float, default=0.0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", help="metrics TSV path")

    p = command("predict", cmd_predict, "Score toxin-protein pairs (full cross product unless --pair-list).")
    entities(p)
    embeddings(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pair-list", help="TSV of toxin_id, protein_id pairs to score")
    p.add_argument("--out", help="output TSV")

    p = command("hotspots", cmd_hotspots, "Top-k protein residues from the toxin x residue interaction map.")
    entities(p)
    embeddings(p)
    p.add_argument("--checkpoint")
    p.add_argument("--toxin-id", required=True)
    p.add_argument("--protein-id", required=True)
    p.add_argument("--k", type=int, default=28)
    p.add_argument("--offset", type=int, default=0, help="added to 1-based sequence positions")
    p.add_argument("--out", help="output TSV")

    p = command("export-features", cmd_export_features, "Write pooled pre-head features as CSV.")
    entities(p)
    embeddings(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--partition", choices=["train", "val", "test", "all"], default="all")
    p.add_argument("--out", help="output CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings(args)
        return args.func(args, settings)
    except TipFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
