"""Command-line front end.

    hireformer [--config FILE] <subcommand> [--section.key=value ...]

Every subcommand reads the config, applies overrides, writes under the run
directory ``$HIREFORMER_RUN_ROOT/<run.name>`` and prints a one-line summary.
Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attnviz import (
    HeatmapDoc, attention_scores, render_heatmap_html, scores_record, sentence_texts, share_over_uniform, write_scores,
)
from .config import ConfigError, RunConfig, load_config, run_dir
from .corpusgen import generate_corpus, read_manifest
from .evaluation import DegenerateDataError, MetricError, baseline_metrics, evaluate_model_scores, format_table, save_report
from .marketdata import VolumeDataError, join_and_label, load_volume_csv, read_labeled, split_dataset, write_labeled
from .numerics import CheckpointError, ContractError, precision
from .textpipe import BPEError, DocumentError, Vocab, corpus_text_lines, load_documents, train_bpe
from .training import NumericError, TrainingError, load_training_checkpoint, predict_proba, run_finetune, run_pretraining

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = {
    "gen-corpus": "generate the synthetic corpus, volume CSV and manifest",
    "tokenizer-train": "train the byte-level BPE vocabulary on the corpus",
    "labels": "join documents with volumes, label them and split train/val/test",
    "pretrain": "masked-sentence pretraining on documents dated before the holdout",
    "finetune": "train the volume-direction classifier",
    "evaluate": "test metrics with bootstrap intervals, plus random and majority baselines",
    "analyze": "sentence attention scores and heatmaps",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> _Parser:
    p = _Parser(prog="hireformer", description="Hierarchical Reformer pipeline for filings and trade volume.",
                epilog="Any config field can be set as --section.key=value (flags override the file). "
                       "Outputs go to $HIREFORMER_RUN_ROOT/<run.name> (default ./runs/default).")
    p.add_argument("--config", help="YAML config file")
    sub = p.add_subparsers(dest="command", metavar="<subcommand>")
    for name, text in COMMANDS.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", dest="sub_config", help="YAML config file")
        if name == "analyze":
            sp.add_argument("--channel", choices=("raw", "norm"))
            sp.add_argument("--top-k", type=int)
    return p


# --- run-directory layout -----------------------------------------------------------------

class Layout:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = run_dir(cfg)

    def stage(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def corpus(self) -> Path:
        return Path(self.cfg.paths.corpus) if self.cfg.paths.corpus else self.root / "corpus" / "corpus.jsonl"

    @property
    def volumes(self) -> Path:
        return Path(self.cfg.paths.volumes) if self.cfg.paths.volumes else self.root / "corpus" / "volumes.csv"

    @property
    def manifest(self) -> Path:
        return Path(self.cfg.paths.manifest) if self.cfg.paths.manifest else self.root / "corpus" / "manifest.jsonl"

    vocab = property(lambda self: self.root / "tokenizer" / "vocab.json")
    labels = property(lambda self: self.root / "labels" / "labels.jsonl")
    pretrained = property(lambda self: self.root / "pretrain" / "final.ckpt")
    finetuned = property(lambda self: self.root / "finetune" / "best.ckpt")


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `hireformer {stage}` first")
    return path


def _documents(lay: Layout):
    vocab = Vocab.load(_need(lay.vocab, "tokenizer-train"))
    return load_documents(_need(lay.corpus, "gen-corpus"), vocab), vocab


def _splits(lay: Layout):
    docs, vocab = _documents(lay)
    splits = read_labeled(_need(lay.labels, "labels"), {d.doc_id: d for d in docs})
    return splits, vocab


def _summary(lay: Layout, stage: str, payload: dict, name: str = "summary.json") -> None:
    out = lay.stage(stage)
    lay.cfg.dump(out / "config.yaml")
    record = {"config_hash": lay.cfg.hash(), "stage": stage, **payload}
    with open(out / name, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fresh(path: Path) -> Path:
    """Logs are appended to; start from an empty file so reruns are identical."""
    if path.exists():
        path.unlink()
    return path


# --- subcommands -------------------------------------------------------------------------

def cmd_gen_corpus(lay: Layout, args) -> str:
    out = lay.stage("corpus")
    gen = generate_corpus(lay.cfg.corpus)
    gen.write(out)
    n_signal = sum(m["intended_label"] for m in gen.manifest)
    _summary(lay, "corpus", {"n_docs": len(gen.records), "n_signal": n_signal})
    return f"gen-corpus: {len(gen.records)} documents ({n_signal} with a planted signal) -> {out}"


def cmd_tokenizer_train(lay: Layout, args) -> str:
    vocab = train_bpe(corpus_text_lines(_need(lay.corpus, "gen-corpus")), lay.cfg.tokenizer.vocab_size)
    out = lay.stage("tokenizer")
    vocab.save(out / "vocab.json")
    _summary(lay, "tokenizer", {"vocab_size": vocab.size})
    return f"tokenizer-train: vocabulary of {vocab.size} tokens -> {out / 'vocab.json'}"


def cmd_labels(lay: Layout, args) -> str:
    docs, _ = _documents(lay)
    examples, skipped = join_and_label(docs, load_volume_csv(_need(lay.volumes, "gen-corpus")))
    splits = split_dataset(examples, lay.cfg.split)
    out = lay.stage("labels")
    write_labeled(out / "labels.jsonl", splits)
    sizes = {k: len(v) for k, v in splits.items()}
    pos = {k: float(np.mean([e.y for e in v])) if v else None for k, v in splits.items()}
    _summary(lay, "labels", {"sizes": sizes, "positive_rate": pos,
                             "skipped": dict(sorted(skipped.counts.items()))})
    return (f"labels: train {sizes['train']} / val {sizes['val']} / test {sizes['test']}, "
            f"{skipped.total} skipped -> {out / 'labels.jsonl'}")


def cmd_pretrain(lay: Layout, args) -> str:
    docs, vocab = _documents(lay)
    corpus = [d for d in docs if d.filing_date < lay.cfg.split.holdout_start]
    model_cfg = _model_config(lay.cfg, vocab)
    out = lay.stage("pretrain")
    res = run_pretraining(corpus, lay.cfg.pretrain, model_config=model_cfg,
                          log_path=_fresh(out / "log.jsonl"), ckpt_dir=out)
    first, last = res.log[0]["loss"], res.log[-1]["loss"]
    _summary(lay, "pretrain", {"n_docs": len(corpus), "steps": len(res.log), "first_loss": first,
                               "last_loss": last})
    return f"pretrain: {len(res.log)} steps on {len(corpus)} documents, loss {first:.3f} -> {last:.3f}"


def _model_config(cfg: RunConfig, vocab: Vocab):
    return replace(cfg.model, vocab_size=vocab.size)


def cmd_finetune(lay: Layout, args) -> str:
    splits, vocab = _splits(lay)
    fcfg = lay.cfg.finetune
    ckpt = None
    if fcfg.init == "checkpoint":
        ckpt = Path(fcfg.checkpoint) if fcfg.checkpoint else lay.pretrained
    out = lay.stage("finetune")
    res = run_finetune(splits["train"], splits["val"], fcfg.train, _model_config(lay.cfg, vocab),
                       init=fcfg.init, checkpoint=ckpt, log_path=_fresh(out / "log.jsonl"), ckpt_dir=out)
    with open(out / "trace.json", "w", encoding="utf-8") as fh:
        json.dump(res.trace, fh, indent=2, sort_keys=True)
        fh.write("\n")
    best = next(t for t in res.trace if t["step"] == res.best_step)
    _summary(lay, "finetune", {"best_step": res.best_step, "best": best, "init": fcfg.init})
    return (f"finetune: best step {res.best_step}, val loss {best['val_loss']:.4f}, "
            f"val ROC-AUC {best['val_auc']:.4f}")


def _load_finetuned(lay: Layout):
    model, _, _, _ = load_training_checkpoint(_need(lay.finetuned, "finetune"))
    return model


def cmd_evaluate(lay: Layout, args) -> str:
    splits, _ = _splits(lay)
    model = _load_finetuned(lay)
    ev = lay.cfg.eval
    labels = {k: np.array([e.y for e in v]) for k, v in splits.items()}
    scores = {k: predict_proba(model, [e.doc for e in splits[k]]) for k in ("val", "test")}
    report = evaluate_model_scores("model", scores["val"], labels["val"], scores["test"], labels["test"],
                                   ev.bootstrap, ev.workers)
    base = baseline_metrics(labels["train"], labels["test"], ev.bootstrap, ev.workers)
    reports = [report, base["random"], base["majority"]]
    out = lay.stage("eval")
    save_report(out / "report.json", reports)
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    with open(out / "scores.jsonl", "w", encoding="utf-8") as fh:
        for e, s in zip(splits["test"], scores["test"]):
            fh.write(json.dumps({"doc_id": e.doc_id, "score": float(s), "y": int(e.y)}, sort_keys=True) + "\n")
    _summary(lay, "eval", {"n_test": len(splits["test"]), "roc_auc": report.metrics["roc_auc"].point,
                           "mcc": report.metrics["mcc"].point, "f1": report.metrics["f1"].point})
    print(table)
    m = report.metrics
    return (f"evaluate: test ROC-AUC {m['roc_auc'].point:.4f}, MCC {m['mcc'].point:.4f}, "
            f"F1 {m['f1'].point:.4f} on {len(splits['test'])} documents")


def cmd_analyze(lay: Layout, args) -> str:
    acfg = lay.cfg.analyze
    channel = args.channel or acfg.channel
    top_k = args.top_k if args.top_k is not None else acfg.top_k
    if top_k < 1:
        raise UsageError("--top-k must be at least 1")
    splits, vocab = _splits(lay)
    if acfg.split not in splits:
        raise UsageError(f"analyze.split must be one of train/val/test, got {acfg.split!r}")
    model = _load_finetuned(lay)
    manifest = read_manifest(lay.manifest) if lay.manifest.exists() else {}
    out = lay.stage("analysis")
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    for old in heat_dir.glob("*.html"):
        old.unlink()
    records, hits, planted_scores, n_planted = [], 0, [], 0
    for i, ex in enumerate(splits[acfg.split]):
        doc = ex.doc
        ds = attention_scores(model, doc)
        values = ds.channel(channel)
        rec = scores_record(doc.doc_id, channel, values, top_k)
        rec["prediction"] = ds.prediction
        planted = manifest.get(doc.doc_id, {}).get("planted_index")
        if planted is not None and planted < len(values):
            rec["planted_index"] = planted
            n_planted += 1
            hits += planted in rec["top_k"]
            planted_scores.append(share_over_uniform(values, planted))
        records.append(rec)
        if i < acfg.max_docs:
            heat = HeatmapDoc.build(sentence_texts(doc, vocab), values, ds.prediction, channel,
                                    {"doc_id": doc.doc_id, "ticker": doc.ticker, "top_k": rec["top_k"]})
            render_heatmap_html(heat, heat_dir / f"{doc.doc_id}.html")
    write_scores(out / f"scores_{channel}.jsonl", records)
    payload = {"channel": channel, "top_k": top_k, "n_docs": len(records), "n_planted": n_planted}
    if n_planted:
        payload["planted_top_k_rate"] = hits / n_planted
        payload["planted_score_over_uniform"] = float(np.mean(planted_scores))
    _summary(lay, "analysis", payload, f"summary_{channel}.json")
    line = f"analyze: {channel} scores for {len(records)} documents, {min(acfg.max_docs, len(records))} heatmaps"
    if n_planted:
        line += f", planted sentence in top-{top_k} for {hits}/{n_planted}"
    return line


HANDLERS = {
    "gen-corpus": cmd_gen_corpus, "tokenizer-train": cmd_tokenizer_train, "labels": cmd_labels,
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "evaluate": cmd_evaluate, "analyze": cmd_analyze,
}

DATA_ERRORS = (VolumeDataError, DocumentError, BPEError, TrainingError, CheckpointError, ContractError,
               MetricError, DegenerateDataError, FileNotFoundError)


def _split_overrides(rest: Sequence[str]) -> list[str]:
    out = []
    for item in rest:
        if not item.startswith("--") or "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {item!r}")
        out.append(item[2:])
    return out


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        cfg = load_config(args.sub_config or args.config, _split_overrides(rest))
    except (UsageError, ConfigError) as exc:
        parser.print_help(sys.stderr)
        print(f"\nerror: {exc}", file=sys.stderr)
        return EXIT_USAGE
    lay = Layout(cfg)
    try:
        with precision(cfg.run.precision):
            line = HANDLERS[args.command](lay, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(line)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
