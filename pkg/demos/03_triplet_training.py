"""Walkthrough: triplet-loss training with hard negative mining.

Trains Q/V adapters on a small synthetic corpus and prints the per-epoch
history (train loss, validation EER, best-epoch marker). Early stopping
restores the best-validation-EER checkpoint.
"""

from sitterid.corpus import SynthConfig, split_by_identity, synth_generate
from sitterid.encoder import EncoderConfig
from sitterid.metrics import format_rate
from sitterid.training import MiningConfig, TrainConfig, train_lora

corpus_cfg = SynthConfig(
    n_identities=40, items_per_identity=6,
    dim_per_source={"clip": 32, "fr": 64}, style_noise=0.4,
    source_noise={"clip": 0.3, "fr": 0.2}, seed=23,
)
manifest = split_by_identity(synth_generate(corpus_cfg), (0.6, 0.2, 0.2), seed=23)

encoder_cfg = EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32,
                            seq_len=4, embed_dim=8)
train_cfg = TrainConfig(
    margin=0.5,
    batch_size=48,
    learning_rate=3e-3,        # desk-scale rate; the preset file keeps 1e-5
    patience=10,
    max_epochs=30,
    mining=MiningConfig(hard_fraction=0.30, top_pool=50, next_pool=450),
    seed=23,
    lora_rank=16,
    lora_alpha=16.0,
)

result = train_lora(manifest, "clip", train_cfg, encoder_cfg)

print("epoch  train_loss  val_eer   best")
for row in result.history:
    loss = "   -  " if row.epoch == 0 else f"{row.train_loss:.4f}"
    marker = "  *" if row.is_best else ""
    print(f"{row.epoch:5d}  {loss:>10}  {format_rate(row.val_eer):>7}{marker}")

best = result.history[result.best_epoch]
print(f"\nbest epoch {result.best_epoch}: val EER {format_rate(best.val_eer)} "
      f"(epoch 0 was {format_rate(result.history[0].val_eer)})")
print(f"returned {len(result.adapters)} adapters "
      f"(rank {result.adapters[0].rank}, Q and V on every layer)")
