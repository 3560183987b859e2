"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    load_checkpoint,
    model_from_checkpoint,
    provider_from_checkpoint,
    save_checkpoint,
)
from .losses import LAMBDA_AUX, LossWeights, cov2
from .moe import GateConfig
from .pipeline import STAGES, StageConfig, UsageError, evaluate, gate_heatmap, train_stage
from .text import (
    ASPECTS,
    REQUIRED_COLUMNS,
    SENTIMENTS,
    LookupMissError,
    SchemaError,
    SpellingTable,
    canonical_aspect,
    canonical_sentiment,
    ingest_csv_with_stats,
    label_distribution,
    make_provider,
    normalize_text_counted,
    split_dataset,
    synth_corpus,
    write_reviews_csv,
)

log = logging.getLogger("moe_absa")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (set, tuple)):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n", encoding="utf-8")


# --- options with config-file overrides ------------------------------------------
# (flag, dest, type, default, help). A default of None means "stage default".

_BOOL = "bool"
TRAIN_OPTIONS = [
    ("--lr", "learning_rate", float, None, "learning rate (reference: 2e-5 sentiment, 1.7e-5 acd, 1.8552e-5 absa)"),
    ("--batch-size", "batch_size", int, None, "batch size (reference: 32 sentiment, 8 acd, 8 absa)"),
    ("--epochs", "epochs", int, None, "epochs (reference: 4 sentiment, 4 acd, 3 absa)"),
    ("--n-experts", "n_experts", int, 6, "number of experts (reference: 6)"),
    ("--top-k", "top_k", int, 3, "experts per token (reference: 3)"),
    ("--capacity-factor", "capacity_factor", float, 1.8, "capacity factor (reference: 1.8)"),
    ("--noise-scale", "noise_scale", float, 0.098323, "Gumbel noise scale on gate logits during training (reference: 0.098323)"),
    ("--n-groups", "n_groups", int, 1, "local routing groups per batch"),
    ("--ir", "intra_group_rectify", _BOOL, True, "intra-group rectification of dropped tokens"),
    ("--fr", "fill_in_rectify", _BOOL, True, "fill-in rectification of padding slots"),
    ("--routing", "routing", str, "dynamic", "dynamic or hard_gate"),
    ("--aux", "enable_aux", _BOOL, True, "importance (Var/Mean^2) load-balancing loss"),
    ("--mse", "enable_mse", _BOOL, True, "MSE-to-uniform load-balancing loss"),
    ("--lambda-aux", "lambda_aux", float, LAMBDA_AUX, "weight of the importance loss (reference: 0.011822)"),
    ("--lambda-mse", "lambda_mse", float, LAMBDA_AUX, "weight of the MSE loss"),
    ("--hidden", "hidden", int, 256, "expert hidden width (reference: 256)"),
    ("--gate-input", "gate_input", str, "aspect", "aspect or aspect+sentence"),
    ("--class-weighting", "class_weighting", _BOOL, False, "inverse-frequency class weights in the loss"),
    ("--drop-empty", "drop_empty", _BOOL, True, "drop reviews without aspects in the acd stage"),
    ("--acd-threshold", "acd_threshold", float, 0.5, "sigmoid decision threshold for aspect detection"),
    ("--trace", "trace", _BOOL, True, "write a per-token routing trace (absa)"),
    ("--provider", "provider", str, "hashed_ngram", "hashed_ngram or precomputed_file"),
    ("--dim", "dim", int, 256, "hashed embedding width"),
    ("--embed-seed", "embed_seed", int, 42, "hash seed of the embedding provider"),
    ("--embeddings", "embeddings", str, None, "precomputed embedding file"),
    ("--spelling-table", "spelling_table", str, None, "wrong,correct CSV replacing the default table"),
]
GLOBAL_KEYS = {"seed"}


def _add_options(p: argparse.ArgumentParser, options) -> None:
    for flag, dest, typ, _default, help_ in options:
        if typ is _BOOL:
            p.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None, help=help_)
        else:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _convert(value: str, typ):
    if typ is _BOOL:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return typ(value)
    except ValueError:
        raise ConfigError(f"bad value {value!r}") from None


def resolve_options(args: argparse.Namespace, options, file_values: dict[str, str]) -> dict:
    """flag > config file > built-in default."""
    known = {dest: typ for _, dest, typ, _, _ in options}
    # flag spellings (lr, batch_size, ...) are accepted as aliases
    alias = {flag[2:].replace("-", "_"): dest for flag, dest, _, _, _ in options}
    file_values = {alias.get(k, k): v for k, v in file_values.items()}
    unknown = set(file_values) - set(known) - GLOBAL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for _, dest, typ, default, _ in options:
        val = getattr(args, dest, None)
        if val is None and dest in file_values:
            val = _convert(file_values[dest], typ)
        out[dest] = default if val is None else val
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 42)")
    common.add_argument("--config", default=None, help="flat key=value file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="moe-absa", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("preprocess", parents=[common], help="normalize review text in a CSV")
    pp.add_argument("input")
    pp.add_argument("output")
    pp.add_argument("--spelling-table", default=None)

    ps = sub.add_parser("synth", parents=[common], help="write a synthetic labeled corpus")
    ps.add_argument("--n", type=int, required=True)
    ps.add_argument("--out", required=True)
    ps.add_argument("--multi-aspect-prob", type=float, default=0.25)
    ps.add_argument("--no-decorate", action="store_true", help="skip emoji/arabic-letter/misspelling noise")

    pt = sub.add_parser("train", parents=[common], help="train one pipeline stage")
    pt.add_argument("stage", choices=STAGES)
    pt.add_argument("--data", required=True)
    pt.add_argument("--out-dir", required=True)
    _add_options(pt, TRAIN_OPTIONS)

    pe = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--out-dir", required=True)
    pe.add_argument("--stage", choices=STAGES, default=None, help="expected checkpoint stage")
    pe.add_argument("--split", choices=("test", "validation", "train", "all"), default="test")
    pe.add_argument("--spelling-table", default=None)

    pr = sub.add_parser("route-stats", parents=[common], help="heatmap and COV² from a routing trace")
    pr.add_argument("--trace", required=True)
    pr.add_argument("--out-dir", required=True)
    pr.add_argument("--n-experts", type=int, default=6)
    return p


def _seed(args, file_values) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_values:
        return int(_convert(file_values["seed"], int))
    return 42


def _spelling(path: str | None) -> SpellingTable | None:
    if path is None:
        return None
    try:
        return SpellingTable.from_csv(path)
    except OSError as exc:
        raise DataError(f"cannot read spelling table: {exc}") from None


def _ingest(path: str):
    try:
        return ingest_csv_with_stats(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


# --- commands ----------------------------------------------------------------------

def cmd_preprocess(args, seed: int) -> int:
    table = _spelling(args.spelling_table)
    counts = Counter()
    out_rows = []
    try:
        fh = open(args.input, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or any(c not in header for c in REQUIRED_COLUMNS):
            raise SchemaError(f"{args.input}: header must contain {','.join(REQUIRED_COLUMNS)}")
        col = {c: header.index(c) for c in REQUIRED_COLUMNS}
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"{args.input}:{rowno}: expected {len(header)} fields, got {len(row)}")
            counts["rows_in"] += 1
            text, n = normalize_text_counted(row[col["review"]], table)
            counts["replacements"] += n
            aspect = canonical_aspect(row[col["Category"]])
            raw_sent = row[col["sentiment"]].strip()
            sentiment = canonical_sentiment(raw_sent) if raw_sent else ""
            if not text or aspect is None or sentiment is None:
                counts["rows_rejected"] += 1
                continue
            out_rows.append((text, aspect, sentiment))
    with open(args.output, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        w.writerows(out_rows)
    counts["rows_out"] = len(out_rows)
    stats = {k: counts[k] for k in ("rows_in", "rows_out", "rows_rejected", "replacements")}
    write_json(Path(args.output + ".meta.json"), {"command": "preprocess", "seed": seed, "input": args.input, "spelling_table": args.spelling_table, "stats": stats})
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_synth(args, seed: int) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if not 0.0 <= args.multi_aspect_prob <= 1.0:
        raise ConfigError("--multi-aspect-prob must lie in [0, 1]")
    records = synth_corpus(seed, args.n, args.multi_aspect_prob, decorate=not args.no_decorate)
    write_reviews_csv(records, args.out)
    pairs = Counter((a, s) for r in records for a, s in r.sentiments.items())
    total = sum(pairs.values())
    target = label_distribution()
    marginals = {
        f"{a}/{s}": {"count": pairs[(a, s)], "share": pairs[(a, s)] / total, "target": target[(a, s)]}
        for a in ASPECTS
        for s in SENTIMENTS
    }
    doc = {"command": "synth", "seed": seed, "n": args.n, "multi_aspect_prob": args.multi_aspect_prob, "decorate": not args.no_decorate, "pairs": total, "marginals": marginals}
    write_json(Path(args.out + ".meta.json"), doc)
    print(json.dumps({k: round(v["share"], 4) for k, v in marginals.items()}, sort_keys=True, ensure_ascii=False))
    return EXIT_OK


def _stage_config(stage: str, opts: dict, seed: int) -> StageConfig:
    try:
        gate = GateConfig(
            n_experts=opts["n_experts"],
            top_k=opts["top_k"],
            capacity_factor=opts["capacity_factor"],
            noise_scale=opts["noise_scale"],
            n_groups=opts["n_groups"],
            intra_group_rectify=opts["intra_group_rectify"],
            fill_in_rectify=opts["fill_in_rectify"],
        )
        weights = LossWeights(opts["lambda_aux"], opts["lambda_mse"], opts["enable_aux"], opts["enable_mse"])
        return StageConfig(
            stage,
            learning_rate=opts["learning_rate"],
            batch_size=opts["batch_size"],
            epochs=opts["epochs"],
            seed=seed,
            gate=gate,
            loss_weights=weights,
            routing=opts["routing"],
            hidden=opts["hidden"],
            gate_input=opts["gate_input"],
            class_weighting=opts["class_weighting"],
            drop_empty=opts["drop_empty"],
            acd_threshold=opts["acd_threshold"],
            trace=opts["trace"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def write_pr_csv(path: Path, curves: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "precision", "recall"])
        for cls, pts in curves.items():
            for p, r, t in pts:
                w.writerow([cls, repr(t), repr(p), repr(r)])


def write_heatmap_csv(path: Path, heat: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASPECTS)
        for row in heat:
            w.writerow([repr(float(v)) for v in row])


TRACE_COLUMNS = ["step", "token", "aspect", "routed", "drops", "ir_target", "fr_fills", "unresolved", "gate_probs"]


def write_trace_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_train(args, seed: int, file_values: dict) -> int:
    opts = resolve_options(args, TRAIN_OPTIONS, file_values)
    config = _stage_config(args.stage, opts, seed)
    if opts["provider"] == "precomputed_file" and not opts["embeddings"]:
        raise ConfigError("--provider precomputed_file needs --embeddings")
    try:
        provider = make_provider(opts["provider"], opts["dim"], opts["embed_seed"], opts["embeddings"])
    except OSError as exc:
        raise DataError(f"cannot read embeddings: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    spelling = _spelling(opts["spelling_table"])
    records, stats = _ingest(args.data)
    try:
        split = split_dataset(records, seed=seed)
        result = train_stage(split, config, provider, spelling)
    except UsageError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev = evaluate(result.model, split.validation, provider, spelling) if split.validation else None
    final = ev.metrics_document() if ev else {}
    save_checkpoint(result.model, out / "model.ckpt", result.rng, {"validation": final})
    doc = {
        "command": "train",
        "stage": args.stage,
        "seed": seed,
        "data": args.data,
        "config": config.to_dict(),
        "provider": provider.describe(),
        "spelling_table": opts["spelling_table"],
        "ingest": vars(stats),
        "split_sizes": {"train": len(split.train), "validation": len(split.validation), "test": len(split.test)},
        "history": result.history,
        "final_train_loss": result.final_loss,
        "validation": final,
    }
    write_json(out / "metrics.json", doc)
    if ev is not None:
        write_pr_csv(out / "pr_curves.csv", ev.curves)
    if args.stage == "absa":
        if result.heatmap is not None:
            write_heatmap_csv(out / "heatmap.csv", result.heatmap)
        if config.trace:
            write_trace_csv(out / "routing_trace.csv", result.traces)
    print(json.dumps({"stage": args.stage, "seed": seed, "val_weighted_f1": final.get("weighted", {}).get("f1"), **{k: v for k, v in final.items() if k.startswith("cov2")}}, sort_keys=True, default=_jsonable))
    return EXIT_OK


def cmd_eval(args, seed: int) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None
    except CheckpointIntegrityError as exc:
        raise DataError(str(exc)) from None
    if args.stage is not None and ckpt.stage != args.stage:
        raise ConfigError(f"checkpoint stage {ckpt.stage!r} does not match --stage {args.stage}")
    model = model_from_checkpoint(ckpt)
    try:
        provider = provider_from_checkpoint(ckpt)
    except OSError as exc:
        raise DataError(f"cannot read embeddings: {exc}") from None
    spelling = _spelling(args.spelling_table)
    records, stats = _ingest(args.data)
    if args.split == "all":
        subset = records
    else:
        split = split_dataset(records, seed=model.config.seed)
        subset = {"test": split.test, "validation": split.validation, "train": split.train}[args.split]
    try:
        ev = evaluate(model, subset, provider, spelling)
    except UsageError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = ev.metrics_document(
        {
            "command": "eval",
            "stage": ckpt.stage,
            "seed": seed,
            "checkpoint": args.checkpoint,
            "data": args.data,
            "split": args.split,
            "config": ckpt.config,
            "provider": ckpt.provider,
        }
    )
    write_json(out / "metrics.json", doc)
    write_pr_csv(out / "pr_curves.csv", ev.curves)
    if ev.heatmap is not None:
        write_heatmap_csv(out / "heatmap.csv", ev.heatmap)
    summary = {"stage": ckpt.stage, "weighted_f1": ev.report.weighted["f1"]}
    if ev.cov2 is not None:
        summary.update({f"cov2_{k}": v for k, v in ev.cov2.items()})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def route_stats(rows: Sequence[dict], n_experts: int = 6, window: int = 10) -> tuple[dict, np.ndarray]:
    """Recompute heatmap and COV² from routing-trace rows."""
    if not rows:
        raise DataError("empty routing trace")
    steps = sorted({int(r["step"]) for r in rows})
    first = set(steps[:window])
    occ_all = np.zeros(n_experts)
    occ_win = np.zeros(n_experts)
    probs, probs_win, aspects = [], [], []
    for r in rows:
        occ = np.zeros(n_experts)
        for part in filter(None, r["routed"].split(";")):
            occ[int(part.split(":")[0])] += 1
        if r["ir_target"] != "":
            occ[int(r["ir_target"])] += 1
        for e in filter(None, r["fr_fills"].split(";")):
            occ[int(e)] += 1
        g = np.array([float(x) for x in r["gate_probs"].split(";")])
        occ_all += occ
        probs.append(g)
        aspects.append(r["aspect"])
        if int(r["step"]) in first:
            occ_win += occ
            probs_win.append(g)
    probs = np.vstack(probs)
    stats = {
        "steps": len(steps),
        "tokens": len(rows),
        "dropped_unresolved": int(sum(int(r["unresolved"] or 0) for r in rows)),
        "cov2_soft": cov2(probs.mean(axis=0)),
        "cov2_hard": cov2(occ_all / occ_all.sum()),
        "cov2_soft_10": cov2(np.vstack(probs_win).mean(axis=0)),
        "cov2_hard_10": cov2(occ_win / occ_win.sum()),
        "occupancy": occ_all.astype(int).tolist(),
    }
    return stats, gate_heatmap(probs, aspects, n_experts)


def cmd_route_stats(args, seed: int) -> int:
    try:
        with open(args.trace, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(TRACE_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise SchemaError(f"{args.trace}: missing trace columns {sorted(missing)}")
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {args.trace}: {exc}") from None
    stats, heat = route_stats(rows, args.n_experts)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "route_stats.json", {"command": "route-stats", "seed": seed, "trace": args.trace, **stats})
    write_heatmap_csv(out / "heatmap.csv", heat)
    print(json.dumps({k: v for k, v in stats.items() if k.startswith("cov2")}, sort_keys=True))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        if file_values and args.command != "train":
            unknown = set(file_values) - GLOBAL_KEYS
            if unknown:
                raise ConfigError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        seed = _seed(args, file_values)
        if args.command == "preprocess":
            return cmd_preprocess(args, seed)
        if args.command == "synth":
            return cmd_synth(args, seed)
        if args.command == "train":
            return cmd_train(args, seed, file_values)
        if args.command == "eval":
            return cmd_eval(args, seed)
        return cmd_route_stats(args, seed)
    except (ConfigError, CheckpointFormatError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError, LookupMissError, CheckpointIntegrityError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
