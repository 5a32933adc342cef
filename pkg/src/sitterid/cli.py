"""Command-line pipeline orchestration.

Commands: ``synth, split, pairs, train-lora, train-head, embed, fuse,
eval, roc``, each reading its upstream artifacts from the output directory
and writing its own, plus a JSON-lines run log. Exit codes: 0 ok, 2 bad
config/usage, 3 missing upstream artifact, 4 contract violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import fusion, metrics, numerics
from .config import ConfigError, RunConfig, load_run_config
from .corpus import (Manifest, EmbeddingRecord, ManifestError, generate_pairs,
                     load_manifest, load_pairs_csv, save_manifest, save_pairs_csv,
                     synth_generate, split_by_identity)
from .encoder import (encode, head_forward, load_encoder, load_head,
                      save_encoder, save_head, tokenize)
from .lora import load_adapters, save_adapters
from .training import save_history, train_head, train_lora

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CONTRACT = 4

BASE_SYSTEMS = ("clip-base", "clip-lora", "fr-base", "fr-tuned")


class MissingArtifact(FileNotFoundError):
    """An upstream pipeline artifact does not exist yet."""


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `sitterid {producer}` first")
    return path


def _artifacts(cfg: RunConfig) -> dict[str, Path]:
    out = cfg.out_dir
    return {
        "manifest": out / "manifest.txt",
        "split": out / "manifest_split.txt",
        "pairs": out / f"pairs_{cfg.eval_split}.csv",
        "encoder": out / "encoder.txt",
        "adapters": out / "lora_adapters.txt",
        "history_lora": out / "history_lora.csv",
        "head": out / "head.txt",
        "history_head": out / "history_head.csv",
        "embeddings": out / "embeddings.txt",
        "fused": out / "embeddings_fused.txt",
        "report_txt": out / "report.txt",
        "report_csv": out / "report.csv",
        "roc_svg": out / "roc.svg",
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    manifest = synth_generate(cfg.synth)
    save_manifest(manifest, art["manifest"])
    return [art["manifest"]]


def cmd_split(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    src = cfg.manifest_path if cfg.manifest_path is not None else art["manifest"]
    _require(Path(src), "synth")
    manifest = split_by_identity(load_manifest(src), cfg.ratios, cfg.seed)
    save_manifest(manifest, art["split"])
    return [art["split"]]


def cmd_pairs(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    manifest = load_manifest(_require(art["split"], "split"))
    pairs = generate_pairs(manifest, cfg.eval_split, cfg.impostor_cap, cfg.seed)
    save_pairs_csv(pairs, art["pairs"])
    return [art["pairs"]]


def cmd_train_lora(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    manifest = load_manifest(_require(art["split"], "split"))
    result = train_lora(manifest, cfg.lora_source, cfg.train_cfg, cfg.encoder_cfg)
    save_encoder(result.encoder_cfg, result.encoder_weights, art["encoder"])
    save_adapters(result.adapters, art["adapters"])
    save_history(result.history, art["history_lora"])
    best = result.history[result.best_epoch]
    print(f"train-lora: best epoch {result.best_epoch} "
          f"(val EER {metrics.format_rate(best.val_eer)}, "
          f"{len(result.history) - 1} epochs run)")
    return [art["encoder"], art["adapters"], art["history_lora"]]


def cmd_train_head(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    manifest = load_manifest(_require(art["split"], "split"))
    result = train_head(manifest, cfg.head_source, cfg.train_cfg)
    save_head(result.head, art["head"])
    save_history(result.history, art["history_head"])
    best = result.history[result.best_epoch]
    print(f"train-head: best epoch {result.best_epoch} "
          f"(val EER {metrics.format_rate(best.val_eer)}, "
          f"{len(result.history) - 1} epochs run)")
    return [art["head"], art["history_head"]]


def cmd_embed(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    manifest = load_manifest(_require(art["split"], "split"))
    enc_cfg, enc_weights = load_encoder(_require(art["encoder"], "train-lora"))
    adapters = load_adapters(_require(art["adapters"], "train-lora"))
    head = load_head(_require(art["head"], "train-head"))

    records = []
    for rec in sorted(manifest.records, key=lambda r: r.item_id):
        if cfg.lora_source not in rec.vectors:
            raise ManifestError(f"item {rec.item_id!r} lacks source {cfg.lora_source!r}")
        if cfg.head_source not in rec.vectors:
            raise ManifestError(f"item {rec.item_id!r} lacks source {cfg.head_source!r}")
        toks = tokenize(rec.vectors[cfg.lora_source], enc_cfg)
        vectors = {
            "clip-base": encode(enc_cfg, enc_weights, [], toks),
            "clip-lora": encode(enc_cfg, enc_weights, adapters, toks),
            "fr-base": fusion.l2_normalize(rec.vectors[cfg.head_source]),
            "fr-tuned": head_forward(head, rec.vectors[cfg.head_source]),
        }
        records.append(EmbeddingRecord(rec.item_id, rec.identity_id, rec.split, vectors))
    dims = {"clip-base": enc_cfg.embed_dim, "clip-lora": enc_cfg.embed_dim,
            "fr-base": head.d_in, "fr-tuned": head.d_out}
    save_manifest(Manifest(records=records, source_dims=dims, seed=manifest.seed),
                  art["embeddings"])
    return [art["embeddings"]]


def cmd_fuse(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    manifest = load_manifest(_require(art["embeddings"], "embed"))
    records = [EmbeddingRecord(r.item_id, r.identity_id, r.split, dict(r.vectors))
               for r in manifest.records]
    dims = dict(manifest.source_dims)
    for combo in cfg.fusion_combos:
        missing = [t for t in combo if t not in manifest.source_dims]
        if missing:
            raise ManifestError(f"fusion combo {'+'.join(combo)}: "
                                f"source tag(s) {missing} absent from manifest")
        spec = fusion.FusionSpec(sources=tuple(combo),
                                 dims=tuple(manifest.source_dims[t] for t in combo))
        for rec in records:
            rec.vectors[spec.tag] = fusion.fuse(rec.vectors, spec)
        dims[spec.tag] = spec.fused_dim
    save_manifest(Manifest(records=records, source_dims=dims, seed=manifest.seed),
                  art["fused"])
    return [art["fused"]]


def _system_names(cfg: RunConfig, manifest: Manifest) -> list[str]:
    names = [t for t in BASE_SYSTEMS if t in manifest.source_dims]
    for combo in cfg.fusion_combos:
        tag = fusion.FusionSpec(sources=tuple(combo)).tag
        if tag in manifest.source_dims:
            names.append(tag)
    return names


def cmd_eval(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    manifest = load_manifest(_require(art["fused"], "fuse"))
    pairs = load_pairs_csv(_require(art["pairs"], "pairs"))
    record_map = manifest.record_map()

    outputs = []
    systems: dict[str, metrics.ScoreSet] = {}
    for name in _system_names(cfg, manifest):
        def provider(item_id: str, _tag=name):
            rec = record_map.get(item_id)
            if rec is None or _tag not in rec.vectors:
                raise ManifestError(f"no {_tag!r} embedding for item {item_id!r}")
            return rec.vectors[_tag]
        scores = metrics.score_pairs(pairs, provider)
        systems[name] = scores
        path = cfg.out_dir / f"scores_{name}.csv"
        metrics.save_scores_csv(pairs, scores, path)
        outputs.append(path)

    reports = metrics.report(systems, far_targets=cfg.far_targets)
    art["report_txt"].write_text(metrics.render_report_text(reports), encoding="utf-8")
    art["report_csv"].write_text(metrics.render_report_csv(reports), encoding="utf-8")
    print(metrics.render_report_text(reports), end="")
    return outputs + [art["report_txt"], art["report_csv"]]


def cmd_roc(cfg: RunConfig) -> list[Path]:
    art = _artifacts(cfg)
    score_files = sorted(cfg.out_dir.glob("scores_*.csv"))
    if not score_files:
        raise MissingArtifact(f"no scores_*.csv under {cfg.out_dir}; run `sitterid eval` first")
    outputs = []
    curves = {}
    for path in score_files:
        name = path.stem[len("scores_"):]
        _, scores = metrics.load_scores_csv(path)
        roc = metrics.sweep(scores)
        curves[name] = roc
        roc_path = cfg.out_dir / f"roc_{name}.csv"
        metrics.save_roc_csv(roc, roc_path)
        outputs.append(roc_path)
    metrics.plot_roc(curves, art["roc_svg"])
    return outputs + [art["roc_svg"]]


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "pairs": cmd_pairs,
    "train-lora": cmd_train_lora,
    "train-head": cmd_train_head,
    "embed": cmd_embed,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "roc": cmd_roc,
}


def _log_run(cfg: RunConfig, command: str, outputs: list[Path], wall: float) -> None:
    entry = {
        "command": command,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "wall_time_s": round(wall, 3),
        "outputs": {p.name: hashlib.sha256(p.read_bytes()).hexdigest()[:16]
                    for p in outputs if p.exists()},
    }
    with open(cfg.out_dir / "run_log.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="config file (defaults to the built-in preset)")
    common.add_argument("--seed", type=int, default=None, help="override [run] seed")
    common.add_argument("--out", type=Path, default=None, help="override [paths] out")

    parser = argparse.ArgumentParser(
        prog="sitterid",
        description="Sitter verification pipeline over embedding manifests.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out)
    except ConfigError as exc:
        print(f"sitterid: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](cfg)
    except MissingArtifact as exc:
        print(f"sitterid: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"sitterid: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ManifestError, metrics.ProtocolError, numerics.ShapeError,
            ValueError, RuntimeError) as exc:
        print(f"sitterid: {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    _log_run(cfg, args.command, outputs, time.perf_counter() - start)
    for path in outputs:
        print(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
