"""Run configuration: one flat key=value file drives the whole pipeline.

The file is INI-style (configparser); every key has a default, so an empty
or missing config runs the standard preset. Command-line flags override
file values. One seed propagates to every stochastic stage.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .corpus import SynthConfig
from .encoder import EncoderConfig
from .training import MiningConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


PAPER_PRESET = """\
# sitterid pipeline configuration (standard preset)

[paths]
# out: directory for all artifacts; manifest: optional external manifest to
# ingest instead of the synthetic one written by `synth`.
out = runs/default

[run]
seed = 7

[synth]
n_identities = 40
items_per_identity = 6
dims = clip:32,fr:64
style_noise = 0.4
source_noise = clip:0.3,fr:0.2

[split]
ratios = 0.6,0.2,0.2

[encoder]
n_layers = 2
d_model = 16
n_heads = 2
d_ff = 32
seq_len = 4
embed_dim = 8

[train]
margin = 0.5
batch_size = 48
learning_rate = 1e-5
patience = 10
max_epochs = 15
lora_rank = 16
lora_alpha = 16
triples_per_anchor = 2
adam_beta1 = 0.9
adam_beta2 = 0.999
adam_eps = 1e-8
lora_source = clip
head_source = fr

[mining]
hard_fraction = 0.30
top_pool = 50
next_pool = 450

[fusion]
combos = clip-lora+fr-base, clip-lora+fr-tuned, clip-lora+fr-base+fr-tuned

[eval]
split = test
far_targets = 0.001,0.01
impostor_cap = none
"""


@dataclass
class RunConfig:
    out_dir: Path
    seed: int
    manifest_path: Path | None
    synth: SynthConfig
    ratios: tuple[float, float, float]
    encoder_cfg: EncoderConfig
    train_cfg: TrainConfig
    lora_source: str
    head_source: str
    fusion_combos: list[list[str]]
    eval_split: str
    far_targets: list[float]
    impostor_cap: int | None
    config_hash: str = ""


def _parse_tag_map(text: str, value_type=int) -> dict:
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"expected tag:value entries, got {part!r}")
        tag, val = part.split(":", 1)
        out[tag.strip()] = value_type(val)
    if not out:
        raise ConfigError(f"empty tag map {text!r}")
    return out


def write_preset(path: str | Path) -> None:
    """Write the standard preset config file (the shipped ``paper.cfg``)."""
    Path(path).write_text(PAPER_PRESET, encoding="utf-8")


def load_run_config(path: str | Path | None = None, seed: int | None = None,
                    out_dir: str | Path | None = None) -> RunConfig:
    """Read config (falling back to the preset defaults) and apply overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string(PAPER_PRESET)
    config_hash = hashlib.sha256(PAPER_PRESET.encode()).hexdigest()[:16]
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        config_hash = hashlib.sha256(text.encode()).hexdigest()[:16]

    def get(section, key, conv=str):
        try:
            return conv(parser.get(section, key).strip())
        except (configparser.Error, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None

    run_seed = seed if seed is not None else get("run", "seed", int)
    if run_seed < 0:
        raise ConfigError("[run] seed: must be non-negative")
    out = Path(out_dir) if out_dir is not None else Path(get("paths", "out"))
    manifest_path = None
    if parser.has_option("paths", "manifest"):
        raw = parser.get("paths", "manifest").strip()
        if raw and raw.lower() != "none":
            manifest_path = Path(raw)

    ratios = tuple(get("split", "ratios", lambda s: [float(x) for x in s.split(",")]))
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"[split] ratios: need three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"[split] ratios: must sum to 1, got sum={sum(ratios)!r}")

    try:
        synth = SynthConfig(
            n_identities=get("synth", "n_identities", int),
            items_per_identity=get("synth", "items_per_identity", int),
            dim_per_source=_parse_tag_map(get("synth", "dims")),
            style_noise=get("synth", "style_noise", float),
            source_noise=_parse_tag_map(get("synth", "source_noise"), float),
            seed=run_seed,
        )
        encoder_cfg = EncoderConfig(
            n_layers=get("encoder", "n_layers", int),
            d_model=get("encoder", "d_model", int),
            n_heads=get("encoder", "n_heads", int),
            d_ff=get("encoder", "d_ff", int),
            seq_len=get("encoder", "seq_len", int),
            embed_dim=get("encoder", "embed_dim", int),
        )
        mining = MiningConfig(
            hard_fraction=get("mining", "hard_fraction", float),
            top_pool=get("mining", "top_pool", int),
            next_pool=get("mining", "next_pool", int),
        )
        train_cfg = TrainConfig(
            margin=get("train", "margin", float),
            batch_size=get("train", "batch_size", int),
            learning_rate=get("train", "learning_rate", float),
            patience=get("train", "patience", int),
            max_epochs=get("train", "max_epochs", int),
            mining=mining,
            seed=run_seed,
            adam=(get("train", "adam_beta1", float),
                  get("train", "adam_beta2", float),
                  get("train", "adam_eps", float)),
            lora_rank=get("train", "lora_rank", int),
            lora_alpha=get("train", "lora_alpha", float),
            triples_per_anchor=get("train", "triples_per_anchor", int),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    combos = []
    for combo in get("fusion", "combos").split(","):
        combo = combo.strip()
        if combo:
            combos.append([t.strip() for t in combo.split("+")])
    far_targets = [float(x) for x in get("eval", "far_targets").split(",") if x.strip()]
    if any(not (0 < f < 1) for f in far_targets):
        raise ConfigError(f"[eval] far_targets: values must be in (0, 1), got {far_targets}")
    cap_raw = get("eval", "impostor_cap").lower()
    impostor_cap = None if cap_raw in ("none", "") else int(cap_raw)
    eval_split = get("eval", "split")
    if eval_split not in ("train", "val", "test"):
        raise ConfigError(f"[eval] split: must be train/val/test, got {eval_split!r}")

    return RunConfig(
        out_dir=out, seed=run_seed, manifest_path=manifest_path, synth=synth,
        ratios=ratios, encoder_cfg=encoder_cfg, train_cfg=train_cfg,
        lora_source=get("train", "lora_source"),
        head_source=get("train", "head_source"),
        fusion_combos=combos, eval_split=eval_split, far_targets=far_targets,
        impostor_cap=impostor_cap, config_hash=config_hash,
    )
