"""Command-line pipelines wiring the toolkit modules together.

One binary with subcommands. Each command reads an optional JSON config
(flags override config values), writes its artifacts plus a ``manifest.json``
into the output directory, and exits nonzero after removing partial outputs
when anything fails. Manifests embed the resolved config, input checksums,
the seed, and the toolkit version, so identical configs and inputs produce
identical output checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys
from pathlib import Path

from . import __version__, collection, corpus, metrics, tokenizer, vocab_adapt

_GLOBAL_KEYS = {"seed", "threads", "out"}
_COMMAND_KEYS = {
    "tokenizer-train": {"corpus", "format", "language", "source", "vocab_size", "special_tokens"},
    "fertility": {"corpus", "format", "language", "source", "model_a", "model_b"},
    "adapt": {"old_model", "new_model", "old_embeddings"},
    "build-collection": {"templates", "records", "plan", "language"},
    "score": {"metric", "predictions", "char_order", "word_order", "beta", "max_order", "smoothing"},
}


class ConfigError(ValueError):
    pass


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_config(args: argparse.Namespace) -> dict:
    config: dict = {}
    if args.config is not None:
        with open(args.config, encoding="utf-8") as handle:
            config = json.load(handle)
        if not isinstance(config, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    allowed = _COMMAND_KEYS[args.command] | _GLOBAL_KEYS
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    for flag in ("seed", "threads", "out"):
        value = getattr(args, flag)
        if value is not None:
            config[flag] = value
    config.setdefault("seed", 0)
    config.setdefault("threads", os.cpu_count() or 1)
    config.setdefault("out", "out")
    config["seed"] = int(config["seed"])
    config["threads"] = int(config["threads"])
    if config["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return config


def _require(config: dict, key: str):
    if key not in config:
        raise ConfigError(f"missing required config key {key!r}")
    return config[key]


def _corpus_files(config: dict) -> list[dict]:
    """Normalize the 'corpus' entry to per-file dicts with defaults applied."""
    entries = _require(config, "corpus")
    if isinstance(entries, (str, Path)):
        entries = [entries]
    files = []
    for entry in entries:
        if isinstance(entry, (str, Path)):
            entry = {"path": str(entry)}
        resolved = {
            "path": str(entry["path"]),
            "format": entry.get("format", config.get("format", corpus.PLAIN_LINES)),
            "language": entry.get("language", config.get("language")),
            "source": entry.get("source", config.get("source", Path(entry["path"]).stem)),
        }
        if resolved["language"] is None:
            raise ConfigError(f"no language given for corpus file {resolved['path']}")
        files.append(resolved)
    return files


def _ingest_all(files: list[dict]):
    # (source, id) pairs must stay unique across the whole run, not just
    # within one file; collisions only happen when files share a source.
    seen: set[tuple[str, str]] = set()

    def checked(stream):
        for doc in stream:
            key = (doc.source, doc.id)
            if key in seen:
                raise corpus.IngestError(
                    f"duplicate document id {doc.id!r} for source {doc.source!r} "
                    "across corpus files"
                )
            seen.add(key)
            yield doc

    streams = [
        checked(
            corpus.ingest(
                entry["path"],
                entry["format"],
                language=entry["language"],
                source=entry["source"],
            )
        )
        for entry in files
    ]
    return itertools.chain.from_iterable(streams)


class _Outputs:
    """Tracks files written into the out directory so failures can clean up."""

    def __init__(self, outdir: Path):
        self.outdir = outdir
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        target = self.outdir / name
        self.written.append(target)
        return target

    def write_json(self, name: str, payload: dict) -> None:
        text = json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
        self.path(name).write_text(text, encoding="utf-8", newline="\n")

    def cleanup(self) -> None:
        for target in self.written:
            target.unlink(missing_ok=True)

    def checksums(self) -> dict[str, str]:
        return {target.name: _sha256_file(target) for target in sorted(self.written)}


def _write_manifest(out: _Outputs, command: str, config: dict, inputs: list) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": config["seed"],
        "config": {key: config[key] for key in sorted(config)},
        "inputs": {str(path): _sha256_file(path) for path in sorted(set(map(str, inputs)))},
        "outputs": out.checksums(),
    }
    out.write_json("manifest.json", manifest)


def _cmd_tokenizer_train(config: dict, out: _Outputs) -> list:
    vocab_size = int(_require(config, "vocab_size"))
    specials = config.get("special_tokens", list(tokenizer.REQUIRED_SPECIALS))
    files = _corpus_files(config)
    model = tokenizer.train_bpe(
        _ingest_all(files), vocab_size, specials, seed=config["seed"]
    )
    tokenizer.save_model(model, out.path("tokenizer.json"))
    return [entry["path"] for entry in files]


def _fertility_payload(report: tokenizer.FertilityReport) -> dict:
    return report.to_json_dict()


def _cmd_fertility(config: dict, out: _Outputs) -> list:
    path_a = _require(config, "model_a")
    path_b = _require(config, "model_b")
    model_a = tokenizer.load_model(path_a)
    model_b = tokenizer.load_model(path_b)
    files = _corpus_files(config)
    docs = list(_ingest_all(files))
    reports_a = {r.language: r for r in tokenizer.fertility(model_a, docs)}
    reports_b = {r.language: r for r in tokenizer.fertility(model_b, docs)}
    comparison = {}
    for language in sorted(reports_a):
        a, b = reports_a[language], reports_b[language]
        entry = {
            "a": _fertility_payload(a),
            "b": _fertility_payload(b),
            "improvement_tokens_per_doc_pct": tokenizer.compare_fertility(a, b),
        }
        if b.tokens_per_word > 0:
            entry["improvement_tokens_per_word_pct"] = (
                (b.tokens_per_word - a.tokens_per_word) / b.tokens_per_word * 100.0
            )
        comparison[language] = entry
    out.write_json(
        "fertility.json",
        {"model_a": str(path_a), "model_b": str(path_b), "languages": comparison},
    )
    return [path_a, path_b] + [entry["path"] for entry in files]


def _cmd_adapt(config: dict, out: _Outputs) -> list:
    old_model_path = _require(config, "old_model")
    new_model_path = _require(config, "new_model")
    old_emb_path = _require(config, "old_embeddings")
    old_tok = tokenizer.load_model(old_model_path)
    new_tok = tokenizer.load_model(new_model_path)
    old_emb = vocab_adapt.load_embeddings(old_emb_path)
    new_emb, report = vocab_adapt.adapt_embeddings(old_tok, old_emb, new_tok)
    vocab_adapt.save_embeddings(new_emb, out.path("embeddings.bin"))
    out.write_json("adaptation.json", report.to_json_dict())
    return [old_model_path, new_model_path, old_emb_path]


def _cmd_build_collection(config: dict, out: _Outputs) -> list:
    templates_path = _require(config, "templates")
    plan_path = _require(config, "plan")
    record_entries = _require(config, "records")
    if isinstance(record_entries, (str, Path)):
        record_entries = [record_entries]
    registry = collection.TemplateRegistry.from_json_file(templates_path)
    plan = collection.SamplingPlan.from_json_file(plan_path)
    record_paths = []
    records = []
    for entry in record_entries:
        if isinstance(entry, (str, Path)):
            entry = {"path": str(entry)}
        path = str(entry["path"])
        record_paths.append(path)
        records.extend(
            corpus.read_task_records(
                path,
                language=entry.get("language", config.get("language")),
                source=entry.get("source", Path(path).stem),
            )
        )
    instances, manifest = collection.build_collection(registry, records, plan)
    phase1, phase2 = collection.split_phases(instances)
    targets = plan.target_totals or {}
    if "phase1" in targets:
        phase1 = collection.subsample_to_target(phase1, targets["phase1"], plan.seed)
    if "phase2" in targets:
        phase2 = collection.subsample_to_target(phase2, targets["phase2"], plan.seed)
    written = {
        "phase1": collection.write_instances_jsonl(phase1, out.path("phase1.jsonl")),
        "phase2": collection.write_instances_jsonl(phase2, out.path("phase2.jsonl")),
    }
    payload = manifest.to_json_dict()
    payload["written_per_phase"] = written
    out.write_json("collection_manifest.json", payload)
    return [templates_path, plan_path] + record_paths


def _cmd_score(config: dict, out: _Outputs) -> list:
    metric = _require(config, "metric")
    predictions = _require(config, "predictions")
    if metric == "weighted_f1":
        report = metrics.weighted_f1(metrics.read_labeled_pairs(predictions))
    elif metric == "chrf_pp":
        report = metrics.chrf_pp(
            metrics.read_prediction_pairs(predictions),
            char_order=int(config.get("char_order", 6)),
            word_order=int(config.get("word_order", 2)),
            beta=float(config.get("beta", 2.0)),
        )
    elif metric == "corpus_bleu":
        report = metrics.corpus_bleu(
            metrics.read_prediction_pairs(predictions),
            max_order=int(config.get("max_order", 4)),
            smoothing=config.get("smoothing", metrics.SMOOTHING_ADD_EPS_EXP),
        )
    elif metric == "rouge_l":
        report = metrics.rouge_l(
            metrics.read_prediction_pairs(predictions),
            beta=float(config.get("beta", 1.2)),
        )
    elif metric == "mc1_accuracy":
        report = metrics.mc1_accuracy(metrics.read_mc1_items(predictions))
    elif metric == "safety_preference":
        report = metrics.safety_preference(metrics.read_likelihood_pairs(predictions))
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    out.write_json("report.json", report.to_json_dict())
    return [predictions]


_HANDLERS = {
    "tokenizer-train": _cmd_tokenizer_train,
    "fertility": _cmd_fertility,
    "adapt": _cmd_adapt,
    "build-collection": _cmd_build_collection,
    "score": _cmd_score,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="langadapt",
        description="Data-level language adaptation pipelines.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "tokenizer-train": "train a byte-level BPE vocabulary from corpus files",
        "fertility": "compare token efficiency of two tokenizers on one corpus",
        "adapt": "remap an embedding matrix onto a new vocabulary",
        "build-collection": "compile an instruction corpus from records and templates",
        "score": "score a predictions file with one metric",
    }
    for command in _HANDLERS:
        sub = subparsers.add_parser(command, help=help_text[command])
        sub.add_argument("--config", type=Path, help="JSON config file")
        sub.add_argument("--seed", type=int, help="seed recorded in the manifest")
        sub.add_argument("--threads", type=int, help="worker threads (never changes results)")
        sub.add_argument("--out", type=Path, help="output directory (default: out)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out: _Outputs | None = None
    try:
        config = _resolve_config(args)
        outdir = Path(config["out"])
        outdir.mkdir(parents=True, exist_ok=True)
        config["out"] = str(outdir)
        out = _Outputs(outdir)
        inputs = _HANDLERS[args.command](config, out)
        _write_manifest(out, args.command, config, inputs)
    except Exception as exc:  # distilled to an exit code; partial outputs removed
        if out is not None:
            out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
