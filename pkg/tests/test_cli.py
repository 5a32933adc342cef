"""Pipeline command behavior: artifacts, exit codes, determinism."""

import numpy as np
import pytest

from sitterid.cli import main
from sitterid.corpus import load_manifest

FAST_CFG = """\
[paths]
out = {out}

[run]
seed = 11

[synth]
n_identities = 12
items_per_identity = 4
dims = clip:32,fr:64
style_noise = 0.4
source_noise = clip:0.3,fr:0.2

[encoder]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 16
seq_len = 2
embed_dim = 8

[train]
learning_rate = 1e-3
max_epochs = 2
patience = 2
lora_rank = 4
lora_alpha = 4
"""


@pytest.fixture
def fast_config(tmp_path):
    out = tmp_path / "run"
    cfg_path = tmp_path / "fast.cfg"
    cfg_path.write_text(FAST_CFG.format(out=out), encoding="utf-8")
    return cfg_path, out


def _run(cfg_path, command):
    return main([command, "--config", str(cfg_path)])


def test_full_pipeline(fast_config, capsys):
    cfg_path, out = fast_config
    for command in ("synth", "split", "pairs", "train-lora", "train-head",
                    "embed", "fuse", "eval", "roc"):
        assert _run(cfg_path, command) == 0, command

    assert (out / "manifest.txt").exists()
    assert (out / "manifest_split.txt").exists()
    assert (out / "pairs_test.csv").exists()
    assert (out / "encoder.txt").exists()
    assert (out / "lora_adapters.txt").exists()
    assert (out / "head.txt").exists()
    assert (out / "embeddings.txt").exists()
    assert (out / "embeddings_fused.txt").exists()
    assert (out / "report.txt").exists()
    assert (out / "roc.svg").exists()
    assert (out / "run_log.jsonl").exists()

    report = (out / "report.txt").read_text()
    for system in ("clip-base", "clip-lora", "fr-base", "fr-tuned",
                   "fused[clip-lora+fr-base]", "fused[clip-lora+fr-tuned]",
                   "fused[clip-lora+fr-base+fr-tuned]"):
        assert system in report, system

    log_lines = (out / "run_log.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 9


def test_synth_deterministic_bytes(fast_config):
    cfg_path, out = fast_config
    assert _run(cfg_path, "synth") == 0
    first = (out / "manifest.txt").read_bytes()
    assert _run(cfg_path, "synth") == 0
    assert (out / "manifest.txt").read_bytes() == first


def test_eval_rerun_identical_bytes(fast_config):
    cfg_path, out = fast_config
    for command in ("synth", "split", "pairs", "train-lora", "train-head",
                    "embed", "fuse"):
        assert _run(cfg_path, command) == 0
    assert _run(cfg_path, "eval") == 0
    report = (out / "report.txt").read_bytes()
    report_csv = (out / "report.csv").read_bytes()
    assert _run(cfg_path, "eval") == 0
    assert (out / "report.txt").read_bytes() == report
    assert (out / "report.csv").read_bytes() == report_csv


def test_invalid_ratio_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[split]\nratios = 0.6,0.2,0.1\n", encoding="utf-8")
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "ratios" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_missing_upstream_exits_3(fast_config, capsys):
    cfg_path, out = fast_config
    assert _run(cfg_path, "split") == 3
    assert "synth" in capsys.readouterr().err


def test_fuse_unknown_tag_exits_4(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = tmp_path / "bad_combo.cfg"
    cfg.write_text(FAST_CFG.format(out=out)
                   + "\n[fusion]\ncombos = clip-lora+no-such-source\n",
                   encoding="utf-8")
    for command in ("synth", "split", "pairs", "train-lora", "train-head", "embed"):
        assert main([command, "--config", str(cfg)]) == 0
    assert main(["fuse", "--config", str(cfg)]) == 4
    assert "no-such-source" in capsys.readouterr().err


def test_seed_override_changes_manifest(fast_config):
    cfg_path, out = fast_config
    assert _run(cfg_path, "synth") == 0
    base = (out / "manifest.txt").read_text()
    assert main(["synth", "--config", str(cfg_path), "--seed", "99"]) == 0
    assert (out / "manifest.txt").read_text() != base
    assert load_manifest(out / "manifest.txt").seed == 99


def test_embed_produces_unit_vectors(fast_config):
    cfg_path, out = fast_config
    for command in ("synth", "split", "train-lora", "train-head", "embed"):
        assert _run(cfg_path, command) == 0
    m = load_manifest(out / "embeddings.txt")
    assert set(m.source_dims) == {"clip-base", "clip-lora", "fr-base", "fr-tuned"}
    for rec in m.records[:5]:
        for tag, vec in rec.vectors.items():
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-9, tag
