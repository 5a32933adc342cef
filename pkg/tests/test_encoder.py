"""Encoder contracts: unit outputs, LoRA sites, determinism, checkpoints."""

import numpy as np
import pytest

from sitterid import numerics as nm
from sitterid.encoder import (EncoderConfig, HeadWeights, encode, head_forward,
                              head_forward_t, init_encoder, init_head,
                              load_encoder, load_head, save_encoder, save_head,
                              tokenize)
from sitterid.lora import init_adapter
from sitterid.training import TripletBatch, batch_triplet_loss_t
from conftest import finite_difference, rel_err

TOY = EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, seq_len=4, embed_dim=8)


def _adapters(cfg, r=4, seed0=100, perturb=None):
    ads = []
    k = 0
    for li in range(cfg.n_layers):
        for t in ("query", "value"):
            ad = init_adapter(cfg.d_model, cfg.d_model, r, float(r), seed=seed0 + k,
                              target=t, layer_index=li)
            if perturb is not None:
                ad.b_up = perturb.standard_normal(ad.b_up.shape)
            ads.append(ad)
            k += 1
    return ads


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(n_layers=1, d_model=15, n_heads=2, d_ff=8, seq_len=2, embed_dim=4)
    with pytest.raises(ValueError):
        EncoderConfig(n_layers=0, d_model=16, n_heads=2, d_ff=8, seq_len=2, embed_dim=4)


def test_tokenize_pads_and_reshapes():
    vec = np.arange(1.0, 33.0)
    toks = tokenize(vec, TOY)
    assert toks.shape == (4, 16)
    np.testing.assert_array_equal(toks[0], vec[:16])
    np.testing.assert_array_equal(toks[1], vec[16:])
    np.testing.assert_array_equal(toks[2:], np.zeros((2, 16)))
    with pytest.raises(ValueError):
        tokenize(np.ones(65), TOY)


def test_encode_unit_norm(rng):
    w = init_encoder(TOY, seed=0)
    for _ in range(5):
        emb = encode(TOY, w, [], tokenize(rng.standard_normal(32), TOY))
        assert abs(np.linalg.norm(emb) - 1.0) < 1e-12
        assert emb.shape == (8,)


def test_adapters_at_init_are_neutral(rng):
    w = init_encoder(TOY, seed=1)
    toks = tokenize(rng.standard_normal(32), TOY)
    base = encode(TOY, w, [], toks)
    adapted = encode(TOY, w, _adapters(TOY), toks)
    np.testing.assert_array_equal(base, adapted)


def test_permutation_invariance(rng):
    # exact in exact arithmetic; float reassociation leaves ~1e-16 dust
    w = init_encoder(TOY, seed=2)
    toks = tokenize(rng.standard_normal(32), TOY)
    base = encode(TOY, w, [], toks)
    for _ in range(3):
        perm = rng.permutation(TOY.seq_len)
        assert np.abs(base - encode(TOY, w, [], toks[perm])).max() < 1e-12


def test_encode_deterministic(rng):
    w = init_encoder(TOY, seed=3)
    ads = _adapters(TOY, perturb=np.random.default_rng(5))
    toks = tokenize(rng.standard_normal(32), TOY)
    a = encode(TOY, w, ads, toks)
    b = encode(TOY, w, ads, toks)
    np.testing.assert_array_equal(a, b)


def test_init_encoder_deterministic():
    w1 = init_encoder(TOY, seed=9)
    w2 = init_encoder(TOY, seed=9)
    np.testing.assert_array_equal(w1.layers[0].wq, w2.layers[0].wq)
    np.testing.assert_array_equal(w1.proj, w2.proj)
    assert np.all(w1.layers[0].ln1_gain == 1.0)
    assert np.all(w1.layers[1].ln2_bias == 0.0)


def test_adapter_site_validation(rng):
    w = init_encoder(TOY, seed=0)
    toks = tokenize(rng.standard_normal(32), TOY)
    bad = init_adapter(TOY.d_model, TOY.d_model, 2, 2.0, seed=0, layer_index=5)
    with pytest.raises(ValueError, match="out of range"):
        encode(TOY, w, [bad], toks)
    a1 = init_adapter(TOY.d_model, TOY.d_model, 2, 2.0, seed=0, layer_index=0)
    a2 = init_adapter(TOY.d_model, TOY.d_model, 2, 2.0, seed=1, layer_index=0)
    with pytest.raises(ValueError, match="duplicate"):
        encode(TOY, w, [a1, a2], toks)


def test_lora_sites_receive_gradient_and_matter(rng):
    """Perturbing Q/V adapters changes the embedding; their grads are nonzero."""
    w = init_encoder(TOY, seed=4)
    prng = np.random.default_rng(17)
    ads = _adapters(TOY, perturb=prng)
    toks = tokenize(rng.standard_normal(32), TOY)

    params = {}
    adapter_params = {}
    for ad in ads:
        ta = nm.Tensor(ad.a_down, requires_grad=True)
        tb = nm.Tensor(ad.b_up, requires_grad=True)
        params[(ad.layer_index, ad.target, "a")] = ta
        params[(ad.layer_index, ad.target, "b")] = tb
        adapter_params[(ad.layer_index, ad.target)] = (ta, tb)

    tape = nm.Tape()
    tape.watch(*params.values())
    emb = encode(TOY, w, ads, toks, tape, adapter_params)
    target = nm.Tensor(np.linspace(-1, 1, TOY.embed_dim).reshape(1, -1))
    loss = nm.sum_all(nm.mul(emb, target, tape), tape)
    nm.backward(tape, loss)
    for key, p in params.items():
        assert np.any(p.grad != 0.0), f"zero gradient at site {key}"

    before = encode(TOY, w, ads, toks)
    ads[0].b_up = ads[0].b_up + 0.5
    after = encode(TOY, w, ads, toks)
    assert np.abs(before - after).max() > 0


def test_head_identity_passthrough(rng):
    v = rng.standard_normal(6)
    v /= np.linalg.norm(v)
    head = init_head(6)
    np.testing.assert_allclose(head_forward(head, v), v, atol=1e-15)


def test_head_unit_norm(rng):
    head = init_head(8, 5, seed=3, init="gaussian")
    for _ in range(5):
        out = head_forward(head, rng.standard_normal(8))
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12


def test_head_dim_mismatch():
    head = init_head(6)
    with pytest.raises(ValueError):
        head_forward(head, np.ones(7))


def test_head_gradient_vs_finite_differences(rng):
    d = 6
    w = nm.Tensor(0.5 * rng.standard_normal((d, d)) + np.eye(d), requires_grad=True)
    x = rng.standard_normal((3, d))

    def forward():
        tape = nm.Tape()
        tape.watch(w)
        emb = head_forward_t(w, None, x, tape)
        loss = batch_triplet_loss_t(emb, TripletBatch([(0, 1, 2)]), 1.2, tape)
        return loss, tape

    loss, tape = forward()
    assert loss.item() > 1e-3  # hinge active, away from the kink
    nm.backward(tape, loss)
    got = w.grad.copy()
    want = finite_difference(lambda: forward()[0].item(), {"w": w.value})["w"]
    assert rel_err(got, want) < 1e-5


def test_encoder_checkpoint_round_trip(tmp_path, rng):
    w = init_encoder(TOY, seed=21)
    path = tmp_path / "encoder.txt"
    save_encoder(TOY, w, path)
    cfg2, w2 = load_encoder(path)
    assert cfg2 == TOY
    toks = tokenize(rng.standard_normal(32), TOY)
    np.testing.assert_array_equal(encode(TOY, w, [], toks), encode(cfg2, w2, [], toks))


def test_head_checkpoint_round_trip(tmp_path, rng):
    head = HeadWeights(w=rng.standard_normal((5, 8)), bias=rng.standard_normal(5))
    path = tmp_path / "head.txt"
    save_head(head, path)
    loaded = load_head(path)
    np.testing.assert_array_equal(loaded.w, head.w)
    np.testing.assert_array_equal(loaded.bias, head.bias)
    head2 = HeadWeights(w=rng.standard_normal((4, 4)))
    save_head(head2, path)
    assert load_head(path).bias is None
