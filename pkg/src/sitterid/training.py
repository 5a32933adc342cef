"""Triplet-loss training with hard negative mining, Adam, and early stopping.

Two trainers share one engine: ``train_lora`` adapts Q/V low-rank factors
of the small encoder (base weights frozen), ``train_head`` tunes the final
linear layer over fixed backbone vectors. Per epoch, all training
embeddings are recomputed once and used as the (epoch-stale) hardness
reference for mining; batches then recompute embeddings on the tape so
gradients reflect current parameters. Early stopping monitors validation
EER; the returned parameters are a checkpoint of the best epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics, numerics as nm
from .corpus import Manifest, generate_pairs
from .encoder import (EncoderConfig, HeadWeights, encode, head_forward_t,
                      init_encoder, init_head, tokenize)
from .lora import LoraAdapter, init_adapter


@dataclass
class MiningConfig:
    """Hard-negative mining pools: a top pool and a wider next pool.

    ``hard_fraction`` of each anchor's negatives come uniformly from the
    ``top_pool`` hardest candidates; the rest come uniformly from the next
    ``next_pool`` hardness ranks. When fewer candidates exist than the two
    pools cover, pool sizes shrink proportionally (minimum 1).
    """

    hard_fraction: float = 0.30
    top_pool: int = 50
    next_pool: int = 450

    def __post_init__(self):
        if not (0.0 <= self.hard_fraction <= 1.0):
            raise ValueError(f"hard_fraction must be in [0, 1], got {self.hard_fraction}")
        if self.top_pool < 1:
            raise ValueError("top_pool must be >= 1")
        if self.next_pool < 0:
            raise ValueError("next_pool must be >= 0")


@dataclass
class TrainConfig:
    """Full training recipe; defaults follow the standard preset."""

    margin: float = 0.5
    batch_size: int = 48
    learning_rate: float = 1e-5
    patience: int = 10
    max_epochs: int = 100
    mining: MiningConfig = field(default_factory=MiningConfig)
    seed: int = 0
    adam: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    lora_rank: int = 16
    lora_alpha: float = 16.0
    triples_per_anchor: int = 2

    def __post_init__(self):
        if not (0.0 < self.margin < 2.0):
            raise ValueError(f"margin must be in (0, 2), got {self.margin}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.triples_per_anchor < 1:
            raise ValueError("triples_per_anchor must be >= 1")
        if self.lora_rank < 1 or self.lora_alpha <= 0:
            raise ValueError("lora_rank must be >= 1 and lora_alpha > 0")


@dataclass
class TripletBatch:
    """(anchor, positive, negative) index triples into one split."""

    triples: list[tuple[int, int, int]]

    def validate(self, identities: list[str]) -> None:
        for a, p, n in self.triples:
            if a == p:
                raise ValueError(f"anchor == positive at index {a}")
            if identities[a] != identities[p]:
                raise ValueError(f"anchor {a} and positive {p} differ in identity")
            if identities[a] == identities[n]:
                raise ValueError(f"negative {n} shares the anchor's identity")

    def __len__(self) -> int:
        return len(self.triples)


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_eer: float
    is_best: bool


@dataclass
class LoraTrainResult:
    adapters: list[LoraAdapter]
    history: list[EpochStats]
    best_epoch: int
    encoder_cfg: EncoderConfig
    encoder_weights: object


@dataclass
class HeadTrainResult:
    head: HeadWeights
    history: list[EpochStats]
    best_epoch: int


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def triplet_loss(e_a: np.ndarray, e_p: np.ndarray, e_n: np.ndarray,
                 margin: float) -> float:
    """``max(0, d(a,p) - d(a,n) + margin)`` with cosine distance ``1 - x.y``.

    Inputs must already be unit vectors (normalization is the model's job).
    """
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in (e_a, e_p, e_n)]
    for v in vecs:
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError(f"triplet_loss expects unit vectors, got norm {np.linalg.norm(v)!r}")
    a, p, n = vecs
    return max(0.0, float(np.dot(a, n) - np.dot(a, p)) + margin)


def batch_triplet_loss_t(emb: nm.Tensor, batch: TripletBatch, margin: float,
                         tape: nm.Tape | None) -> nm.Tensor:
    """Mean triplet loss over a batch, differentiable through ``emb`` rows."""
    ia = np.array([t[0] for t in batch.triples])
    ip = np.array([t[1] for t in batch.triples])
    ineg = np.array([t[2] for t in batch.triples])
    a = nm.gather_rows(emb, ia, tape)
    p = nm.gather_rows(emb, ip, tape)
    n = nm.gather_rows(emb, ineg, tape)
    ap = nm.sum_cols(nm.mul(a, p, tape), tape)
    an = nm.sum_cols(nm.mul(a, n, tape), tape)
    viol = nm.relu(nm.add_const(nm.sub(an, ap, tape), margin, tape), tape)
    return nm.scale(nm.sum_all(viol, tape), 1.0 / len(batch), tape)


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------

def mining_pools(n_candidates: int, cfg: MiningConfig) -> tuple[int, int]:
    """Effective (top_pool_size, next_pool_end) ranks for a candidate count.

    With enough candidates the pools are exactly (top_pool, top_pool +
    next_pool); with fewer, both shrink in proportion, keeping at least one
    top slot, and the next pool ends at the last candidate.
    """
    pool_total = cfg.top_pool + cfg.next_pool
    if n_candidates >= pool_total:
        return cfg.top_pool, pool_total
    top = max(1, int(n_candidates * cfg.top_pool / pool_total + 0.5))
    return min(top, n_candidates), n_candidates


def mine_negatives(anchor_idx: int, current_embeddings: np.ndarray,
                   identities: list[str], cfg: MiningConfig, n_select: int,
                   rng: np.random.Generator) -> list[int]:
    """Pick negatives for one anchor from hardness-ranked pools.

    Hardness ranks candidates by descending cosine similarity to the anchor
    under the embeddings passed in (the caller controls staleness).
    ``ceil(hard_fraction * n_select)`` come uniformly without replacement
    from the top pool, the rest uniformly from the next pool.
    """
    emb = np.asarray(current_embeddings, dtype=np.float64)
    idents = np.asarray(identities)
    candidates = np.nonzero(idents != idents[anchor_idx])[0]
    if candidates.size == 0:
        raise ValueError(f"anchor {anchor_idx}: no cross-identity candidates")
    if n_select > candidates.size:
        raise ValueError(f"cannot select {n_select} negatives from "
                         f"{candidates.size} candidates")

    anchor = emb[anchor_idx]
    cand_emb = emb[candidates]
    norms = np.linalg.norm(cand_emb, axis=1) * np.linalg.norm(anchor)
    sims = (cand_emb @ anchor) / np.where(norms == 0, 1.0, norms)
    ranked = candidates[np.argsort(-sims, kind="stable")]

    top_n, next_hi = mining_pools(candidates.size, cfg)
    n_hard = min(math.ceil(cfg.hard_fraction * n_select), n_select, top_n)
    n_rand = n_select - n_hard

    picks = list(rng.choice(top_n, size=n_hard, replace=False))
    next_size = next_hi - top_n
    if n_rand <= next_size:
        picks += list(top_n + rng.choice(next_size, size=n_rand, replace=False))
    else:
        # next pool exhausted: take it whole, spill into the remaining ranks
        picks += list(range(top_n, next_hi))
        extra = n_rand - next_size
        beyond = candidates.size - next_hi
        picks += list(next_hi + rng.choice(beyond, size=extra, replace=False))
    return [int(ranked[k]) for k in picks]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns fresh parameter arrays."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------------------
# shared trainer engine
# ---------------------------------------------------------------------------

def _epoch_triples(identities: list[str], embeddings: np.ndarray,
                   cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    by_identity: dict[str, list[int]] = {}
    for i, ident in enumerate(identities):
        by_identity.setdefault(ident, []).append(i)
    triples = []
    for a, ident in enumerate(identities):
        mates = [i for i in by_identity[ident] if i != a]
        if not mates:
            continue
        tpa = cfg.triples_per_anchor
        pos = rng.choice(mates, size=tpa, replace=len(mates) < tpa)
        negs = mine_negatives(a, embeddings, identities, cfg.mining, tpa, rng)
        triples.extend((a, int(p), int(n)) for p, n in zip(pos, negs))
    if not triples:
        raise ValueError("no trainable triples: every identity has a single item")
    return triples


def _fit(cfg: TrainConfig, params: dict[str, nm.Tensor], identities: list[str],
         embed_rows: Callable[[np.ndarray, nm.Tape], nm.Tensor],
         embed_train_np: Callable[[], np.ndarray],
         val_eer: Callable[[], float]) -> tuple[dict[str, np.ndarray], list[EpochStats], int]:
    """Generic triplet trainer; returns (best values, history, best epoch)."""
    rng = np.random.default_rng(cfg.seed)
    values = {k: p.value for k, p in params.items()}
    state = AdamState.for_params(values)

    best_eer = val_eer()
    best_epoch = 0
    best_values = {k: p.value.copy() for k, p in params.items()}
    history = [EpochStats(0, float("nan"), best_eer, True)]
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        reference = embed_train_np()
        triples = _epoch_triples(identities, reference, cfg, rng)
        order = rng.permutation(len(triples))
        loss_sum = 0.0
        for at in range(0, len(order), cfg.batch_size):
            chunk = [triples[k] for k in order[at:at + cfg.batch_size]]
            flat = np.array(chunk).reshape(-1)
            unique, inverse = np.unique(flat, return_inverse=True)
            local = inverse.reshape(-1, 3)
            batch = TripletBatch([tuple(t) for t in local])

            tape = nm.Tape()
            tape.watch(*params.values())
            emb = embed_rows(unique, tape)
            loss = batch_triplet_loss_t(emb, batch, cfg.margin, tape)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise RuntimeError(f"non-finite loss {loss_value} at epoch {epoch}; "
                                   "check learning rate and input scaling")
            loss_sum += loss_value * len(batch)

            nm.backward(tape, loss)
            grads = {k: p.grad for k, p in params.items()}
            new_values = adam_step({k: p.value for k, p in params.items()}, grads,
                                   state, cfg.learning_rate, cfg.adam[:2], cfg.adam[2])
            for k, p in params.items():
                p.value = new_values[k]

        train_loss = loss_sum / len(triples)
        eer_now = val_eer()
        improved = eer_now < best_eer
        if improved:
            best_eer = eer_now
            best_epoch = epoch
            best_values = {k: p.value.copy() for k, p in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
        history.append(EpochStats(epoch, train_loss, eer_now, improved))
        if bad_epochs >= cfg.patience:
            break

    return best_values, history, best_epoch


def _val_eer_fn(manifest: Manifest, source_tag: str, seed: int,
                embed_many: Callable[[list[np.ndarray]], list[np.ndarray]]):
    """Build a closure computing validation EER under current parameters."""
    val_records = manifest.split_records("val")
    if len(val_records) < 2 or len({r.identity_id for r in val_records}) < 2:
        raise ValueError("validation split needs >= 2 records across >= 2 identities")
    val_pairs = generate_pairs(manifest, "val", impostor_cap=None, seed=seed)
    val_vecs = [r.vectors[source_tag] for r in val_records]
    val_ids = [r.item_id for r in val_records]

    def compute() -> float:
        embs = embed_many(val_vecs)
        provider = dict(zip(val_ids, embs))
        return metrics.eer(metrics.sweep(metrics.score_pairs(val_pairs, provider)))

    return compute


def _check_train_split(manifest: Manifest, source_tag: str):
    train_records = manifest.split_records("train")
    if not train_records:
        raise ValueError("manifest has no train split")
    for rec in train_records:
        if source_tag not in rec.vectors:
            raise ValueError(f"item {rec.item_id!r} lacks source {source_tag!r}")
    counts: dict[str, int] = {}
    for rec in train_records:
        counts[rec.identity_id] = counts.get(rec.identity_id, 0) + 1
    multi = [ident for ident, c in counts.items() if c >= 2]
    if len(multi) < 2:
        raise ValueError("training needs >= 2 identities with >= 2 items each")
    return train_records


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def train_lora(manifest: Manifest, source_tag: str, cfg: TrainConfig,
               encoder_cfg: EncoderConfig) -> LoraTrainResult:
    """Adapt Q/V LoRA factors of the small encoder; base weights stay frozen.

    Returns the adapters of the best-validation-EER epoch plus the full
    per-epoch history (epoch 0 is the pre-training evaluation).
    """
    train_records = _check_train_split(manifest, source_tag)
    weights = init_encoder(encoder_cfg, seed=cfg.seed)

    adapters = []
    params: dict[str, nm.Tensor] = {}
    adapter_params: dict[tuple[int, str], tuple[nm.Tensor, nm.Tensor]] = {}
    for layer in range(encoder_cfg.n_layers):
        for k, target in enumerate(("query", "value")):
            ad = init_adapter(encoder_cfg.d_model, encoder_cfg.d_model,
                              cfg.lora_rank, cfg.lora_alpha,
                              seed=cfg.seed * 1000 + 2 * layer + k,
                              target=target, layer_index=layer)
            adapters.append(ad)
            t_a = nm.Tensor(ad.a_down, requires_grad=True, name=f"layer{layer}.{target}.a_down")
            t_b = nm.Tensor(ad.b_up, requires_grad=True, name=f"layer{layer}.{target}.b_up")
            params[t_a.name] = t_a
            params[t_b.name] = t_b
            adapter_params[(layer, target)] = (t_a, t_b)

    tokens = [tokenize(r.vectors[source_tag], encoder_cfg) for r in train_records]
    identities = [r.identity_id for r in train_records]

    def embed_rows(indices: np.ndarray, tape: nm.Tape) -> nm.Tensor:
        rows = [encode(encoder_cfg, weights, adapters, tokens[i], tape, adapter_params)
                for i in indices]
        return rows[0] if len(rows) == 1 else nm.concat_rows(rows, tape)

    def embed_train_np() -> np.ndarray:
        return np.stack([encode(encoder_cfg, weights, adapters, t, None, adapter_params)
                         for t in tokens])

    def embed_many(vecs: list[np.ndarray]) -> list[np.ndarray]:
        return [encode(encoder_cfg, weights, adapters,
                       tokenize(v, encoder_cfg), None, adapter_params) for v in vecs]

    val_eer = _val_eer_fn(manifest, source_tag, cfg.seed, embed_many)
    best_values, history, best_epoch = _fit(cfg, params, identities, embed_rows,
                                            embed_train_np, val_eer)

    best_adapters = [
        LoraAdapter(best_values[f"layer{ad.layer_index}.{ad.target}.a_down"],
                    best_values[f"layer{ad.layer_index}.{ad.target}.b_up"],
                    rank=ad.rank, alpha=ad.alpha, target=ad.target,
                    layer_index=ad.layer_index)
        for ad in adapters
    ]
    return LoraTrainResult(adapters=best_adapters, history=history,
                           best_epoch=best_epoch, encoder_cfg=encoder_cfg,
                           encoder_weights=weights)


def train_head(manifest: Manifest, source_tag: str, cfg: TrainConfig,
               d_out: int | None = None, init: str = "auto",
               with_bias: bool = False) -> HeadTrainResult:
    """Tune the final linear layer over fixed backbone vectors.

    Same recipe as ``train_lora`` with the model swapped for an affine map
    plus L2 normalization.
    """
    train_records = _check_train_split(manifest, source_tag)
    d_in = manifest.source_dims[source_tag]
    head = init_head(d_in, d_out, seed=cfg.seed, init=init, with_bias=with_bias)

    w = nm.Tensor(head.w, requires_grad=True, name="head.w")
    bias = (nm.Tensor(head.bias.reshape(1, -1), requires_grad=True, name="head.bias")
            if head.bias is not None else None)
    params = {"head.w": w}
    if bias is not None:
        params["head.bias"] = bias

    x_train = np.stack([r.vectors[source_tag] for r in train_records])
    identities = [r.identity_id for r in train_records]

    def embed_rows(indices: np.ndarray, tape: nm.Tape) -> nm.Tensor:
        return head_forward_t(w, bias, x_train[indices], tape)

    def embed_train_np() -> np.ndarray:
        return head_forward_t(w, bias, x_train, None).value

    def embed_many(vecs: list[np.ndarray]) -> list[np.ndarray]:
        out = head_forward_t(w, bias, np.stack(vecs), None).value
        return list(out)

    val_eer = _val_eer_fn(manifest, source_tag, cfg.seed, embed_many)
    best_values, history, best_epoch = _fit(cfg, params, identities, embed_rows,
                                            embed_train_np, val_eer)

    best_head = HeadWeights(
        w=best_values["head.w"],
        bias=best_values["head.bias"].reshape(-1) if bias is not None else None)
    return HeadTrainResult(head=best_head, history=history, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# history file
# ---------------------------------------------------------------------------

def save_history(history: list[EpochStats], path: str | Path) -> None:
    lines = ["epoch,train_loss,val_eer,is_best"]
    for row in history:
        loss = "nan" if math.isnan(row.train_loss) else repr(float(row.train_loss))
        lines.append(f"{row.epoch},{loss},{repr(float(row.val_eer))},{int(row.is_best)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
