"""Walkthrough: the full experiment matrix, library-level.

Synthesize a two-source corpus, adapt the encoder (LoRA) on one source and
the linear head on the other, embed everything, fuse, and evaluate the
seven systems side by side: two base models, two tuned models, and three
fusion combinations. The `sitterid` CLI runs the same stages from a config
file; see README.
"""

from sitterid import metrics
from sitterid.corpus import (EmbeddingRecord, Manifest, SynthConfig, generate_pairs,
                             split_by_identity, synth_generate)
from sitterid.encoder import EncoderConfig, encode, head_forward, tokenize
from sitterid.fusion import FusionSpec, fuse, l2_normalize
from sitterid.training import TrainConfig, train_head, train_lora

SEED = 23

corpus_cfg = SynthConfig(
    n_identities=40, items_per_identity=6,
    dim_per_source={"clip": 32, "fr": 64},
    style_noise=0.4, source_noise={"clip": 0.3, "fr": 0.2}, seed=SEED,
)
manifest = split_by_identity(synth_generate(corpus_cfg), (0.6, 0.2, 0.2), seed=SEED)

encoder_cfg = EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32,
                            seq_len=4, embed_dim=8)
train_cfg = TrainConfig(learning_rate=3e-3, max_epochs=30, patience=10,
                        seed=SEED, lora_rank=16, lora_alpha=16.0)

print("training LoRA adapters on the 'clip' source ...")
lora_result = train_lora(manifest, "clip", train_cfg, encoder_cfg)
print(f"  best epoch {lora_result.best_epoch}, "
      f"val EER {metrics.format_rate(lora_result.history[lora_result.best_epoch].val_eer)}")

print("training the linear head on the 'fr' source ...")
head_result = train_head(manifest, "fr", train_cfg)
print(f"  best epoch {head_result.best_epoch}")

# embed every item under all four systems
records = []
for rec in manifest.records:
    toks = tokenize(rec.vectors["clip"], encoder_cfg)
    records.append(EmbeddingRecord(rec.item_id, rec.identity_id, rec.split, {
        "clip-base": encode(encoder_cfg, lora_result.encoder_weights, [], toks),
        "clip-lora": encode(encoder_cfg, lora_result.encoder_weights,
                            lora_result.adapters, toks),
        "fr-base": l2_normalize(rec.vectors["fr"]),
        "fr-tuned": head_forward(head_result.head, rec.vectors["fr"]),
    }))
dims = {"clip-base": 8, "clip-lora": 8, "fr-base": 64, "fr-tuned": 64}
embedded = Manifest(records=records, source_dims=dims, seed=SEED)

pairs = generate_pairs(embedded, "test", seed=SEED)
record_map = embedded.record_map()

combos = [("clip-lora", "fr-base"),
          ("clip-lora", "fr-tuned"),
          ("clip-lora", "fr-base", "fr-tuned")]
systems = {}
for tag in ("clip-base", "clip-lora", "fr-base", "fr-tuned"):
    systems[tag] = metrics.score_pairs(pairs, lambda i, t=tag: record_map[i].vectors[t])
for combo in combos:
    spec = FusionSpec(sources=combo)
    systems[spec.tag] = metrics.score_pairs(
        pairs, lambda i, s=spec: fuse(record_map[i].vectors, s))

rows = metrics.report(systems, far_targets=(0.001, 0.01))
print()
print(metrics.render_report_text(rows))
