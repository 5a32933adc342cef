"""Small pre-norm transformer encoder with LoRA sites on Q/V projections.

The encoder maps a ``seq_len x d_model`` token matrix to a unit-norm
embedding: per layer, pre-norm multi-head self-attention plus a pre-norm
feed-forward block, then mean pooling over the sequence, a final layer
norm, a linear projection to ``embed_dim``, and L2 normalization. There is
no positional encoding: tokens are treated as a set, so embeddings are
invariant to token order.

Also hosts the fixed-backbone linear head (affine map + L2 normalization)
and checkpoint I/O for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .lora import LoraAdapter

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    seq_len: int
    embed_dim: int

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "seq_len", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(eq=False)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass(eq=False)
class EncoderWeights:
    layers: list[LayerWeights]
    proj: np.ndarray
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray


@dataclass(eq=False)
class HeadWeights:
    """Final linear layer over a fixed backbone embedding."""

    w: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise ValueError("head weight must be 2-D")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.w.shape[0]:
                raise ValueError(f"bias dim {self.bias.shape[0]} != d_out {self.w.shape[0]}")

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    @property
    def d_out(self) -> int:
        return self.w.shape[0]


def init_encoder(cfg: EncoderConfig, seed: int) -> EncoderWeights:
    """Gaussian init (std 0.02) for projections; unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    std = 0.02
    d, f = cfg.d_model, cfg.d_ff
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerWeights(
            wq=std * rng.standard_normal((d, d)),
            wk=std * rng.standard_normal((d, d)),
            wv=std * rng.standard_normal((d, d)),
            wo=std * rng.standard_normal((d, d)),
            w1=std * rng.standard_normal((f, d)),
            w2=std * rng.standard_normal((d, f)),
            ln1_gain=np.ones((1, d)), ln1_bias=np.zeros((1, d)),
            ln2_gain=np.ones((1, d)), ln2_bias=np.zeros((1, d)),
        ))
    proj = std * rng.standard_normal((cfg.embed_dim, d))
    return EncoderWeights(layers=layers, proj=proj,
                          lnf_gain=np.ones((1, d)), lnf_bias=np.zeros((1, d)))


def encoder_param_count(cfg: EncoderConfig) -> int:
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 2 * d * f + 4 * d
    return cfg.n_layers * per_layer + cfg.embed_dim * d + 2 * d


def init_head(d_in: int, d_out: int | None = None, seed: int = 0,
              init: str = "auto", with_bias: bool = False) -> HeadWeights:
    """Identity head when square (``auto``), else gaussian std 0.02."""
    d_out = d_in if d_out is None else d_out
    if init == "auto":
        init = "identity" if d_out == d_in else "gaussian"
    if init == "identity":
        if d_out != d_in:
            raise ValueError(f"identity init needs d_out == d_in, got {d_out} != {d_in}")
        w = np.eye(d_out)
    elif init == "gaussian":
        w = 0.02 * np.random.default_rng(seed).standard_normal((d_out, d_in))
    else:
        raise ValueError(f"unknown head init {init!r}")
    bias = np.zeros(d_out) if with_bias else None
    return HeadWeights(w=w, bias=bias)


def tokenize(vec: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Reshape a source vector into ``seq_len x d_model`` tokens, zero-padded.

    Deterministic and invertible (row-wise fill), so no learned patch
    embedding is needed.
    """
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    slots = cfg.seq_len * cfg.d_model
    if vec.shape[0] > slots:
        raise ValueError(f"vector of dim {vec.shape[0]} exceeds "
                         f"seq_len*d_model = {slots}")
    padded = np.zeros(slots)
    padded[:vec.shape[0]] = vec
    return padded.reshape(cfg.seq_len, cfg.d_model)


def _adapter_sites(cfg: EncoderConfig, adapters: list[LoraAdapter],
                   adapter_params: dict | None):
    """Map (layer_index, target) -> (a_down, b_up, scaling); values may be tensors."""
    sites = {}
    for ad in adapters:
        if ad.layer_index >= cfg.n_layers:
            raise ValueError(f"adapter layer_index {ad.layer_index} out of range "
                             f"for {cfg.n_layers} layers")
        if ad.d_in != cfg.d_model or ad.d_out != cfg.d_model:
            raise ValueError(f"adapter dims ({ad.d_out}, {ad.d_in}) do not match "
                             f"d_model {cfg.d_model}")
        key = (ad.layer_index, ad.target)
        if key in sites:
            raise ValueError(f"duplicate adapter for layer {ad.layer_index} {ad.target}")
        if adapter_params and key in adapter_params:
            a_down, b_up = adapter_params[key]
        else:
            a_down, b_up = ad.a_down, ad.b_up
        sites[key] = (a_down, b_up, ad.scaling)
    return sites


def _lora_term(x, site, tape):
    a_down, b_up, scaling = site
    return nm.scale(nm.matmul_t(nm.matmul_t(x, a_down, tape), b_up, tape), scaling, tape)


def encode(cfg: EncoderConfig, weights: EncoderWeights, adapters: list[LoraAdapter],
           tokens, tape: nm.Tape | None = None, adapter_params: dict | None = None):
    """Embed one token matrix; unit-norm output.

    Without a tape, returns a plain 1-D array of length ``embed_dim``. With
    a tape, returns the ``1 x embed_dim`` tensor so a loss can be built on
    top; ``adapter_params`` may then supply tensor-valued factors keyed by
    ``(layer_index, target)`` so gradients reach the trainable adapters.
    An empty adapter list gives the base model.
    """
    tok = tokens.value if isinstance(tokens, nm.Tensor) else np.asarray(tokens, dtype=np.float64)
    if tok.shape != (cfg.seq_len, cfg.d_model):
        raise ValueError(f"tokens shape {tok.shape} != "
                         f"({cfg.seq_len}, {cfg.d_model})")
    sites = _adapter_sites(cfg, adapters, adapter_params)

    inv_sqrt_dh = 1.0 / math.sqrt(cfg.d_head)
    h = tokens if isinstance(tokens, nm.Tensor) else nm.Tensor(tok)
    for li, lw in enumerate(weights.layers):
        x = nm.layer_norm(h, lw.ln1_gain, lw.ln1_bias, LN_EPS, tape)
        q = nm.matmul_t(x, lw.wq, tape)
        if (li, "query") in sites:
            q = nm.add(q, _lora_term(x, sites[(li, "query")], tape), tape)
        k = nm.matmul_t(x, lw.wk, tape)
        v = nm.matmul_t(x, lw.wv, tape)
        if (li, "value") in sites:
            v = nm.add(v, _lora_term(x, sites[(li, "value")], tape), tape)
        heads = []
        for hd in range(cfg.n_heads):
            lo, hi = hd * cfg.d_head, (hd + 1) * cfg.d_head
            qh = nm.slice_cols(q, lo, hi, tape)
            kh = nm.slice_cols(k, lo, hi, tape)
            vh = nm.slice_cols(v, lo, hi, tape)
            scores = nm.scale(nm.matmul_t(qh, kh, tape), inv_sqrt_dh, tape)
            heads.append(nm.matmul(nm.softmax_rows(scores, tape), vh, tape))
        o = heads[0] if cfg.n_heads == 1 else nm.concat_cols(heads, tape)
        h = nm.add(h, nm.matmul_t(o, lw.wo, tape), tape)
        x2 = nm.layer_norm(h, lw.ln2_gain, lw.ln2_bias, LN_EPS, tape)
        ff = nm.matmul_t(nm.gelu(nm.matmul_t(x2, lw.w1, tape), tape), lw.w2, tape)
        h = nm.add(h, ff, tape)

    pooled = nm.mean_rows(h, tape)
    pooled = nm.layer_norm(pooled, weights.lnf_gain, weights.lnf_bias, LN_EPS, tape)
    emb = nm.l2_normalize_rows(nm.matmul_t(pooled, weights.proj, tape), tape)
    if tape is None:
        return emb.value[0].copy()
    return emb


def head_forward(head: HeadWeights, backbone_vec: np.ndarray) -> np.ndarray:
    """L2-normalized affine map of a fixed backbone vector."""
    x = np.asarray(backbone_vec, dtype=np.float64).reshape(-1)
    if x.shape[0] != head.d_in:
        raise ValueError(f"input dim {x.shape[0]} != head d_in {head.d_in}")
    y = head.w @ x
    if head.bias is not None:
        y = y + head.bias
    n = np.linalg.norm(y)
    if n == 0.0:
        raise ValueError("head output is the zero vector; cannot normalize")
    return y / n


def head_forward_t(w, bias, x, tape: nm.Tape | None = None) -> nm.Tensor:
    """Tensor head forward over a batch of row vectors (``n x d_in``)."""
    y = nm.matmul_t(x, w, tape)
    if bias is not None:
        ones = nm.Tensor(np.ones((y.rows, 1)))
        y = nm.add(y, nm.matmul(ones, bias, tape), tape)
    return nm.l2_normalize_rows(y, tape)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def _fmt(mat: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(mat).reshape(-1))


def _named_matrices(weights: EncoderWeights):
    for i, lw in enumerate(weights.layers):
        yield f"layer{i}.wq", lw.wq
        yield f"layer{i}.wk", lw.wk
        yield f"layer{i}.wv", lw.wv
        yield f"layer{i}.wo", lw.wo
        yield f"layer{i}.w1", lw.w1
        yield f"layer{i}.w2", lw.w2
        yield f"layer{i}.ln1.gain", lw.ln1_gain
        yield f"layer{i}.ln1.bias", lw.ln1_bias
        yield f"layer{i}.ln2.gain", lw.ln2_gain
        yield f"layer{i}.ln2.bias", lw.ln2_bias
    yield "final.proj", weights.proj
    yield "final.ln.gain", weights.lnf_gain
    yield "final.ln.bias", weights.lnf_bias


def save_encoder(cfg: EncoderConfig, weights: EncoderWeights, path: str | Path) -> None:
    lines = [f"#encoder v1 n_layers={cfg.n_layers} d_model={cfg.d_model} "
             f"n_heads={cfg.n_heads} d_ff={cfg.d_ff} seq_len={cfg.seq_len} "
             f"embed_dim={cfg.embed_dim}"]
    for name, mat in _named_matrices(weights):
        mat = np.atleast_2d(mat)
        lines.append(f"{name}\t{mat.shape[0]}x{mat.shape[1]}\t{_fmt(mat)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_matrix_lines(lines):
    mats = {}
    for line in lines:
        if not line.strip():
            continue
        name, shape_s, payload = line.split("\t")
        rows, cols = (int(x) for x in shape_s.split("x"))
        mats[name] = np.array([float(x) for x in payload.split(",")]).reshape(rows, cols)
    return mats


def load_encoder(path: str | Path) -> tuple[EncoderConfig, EncoderWeights]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#encoder v1 "):
        raise ValueError(f"{path}: expected '#encoder v1 ...' header")
    fields = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    cfg = EncoderConfig(**{k: int(v) for k, v in fields.items()})
    mats = _parse_matrix_lines(lines[1:])
    layers = []
    for i in range(cfg.n_layers):
        layers.append(LayerWeights(
            wq=mats[f"layer{i}.wq"], wk=mats[f"layer{i}.wk"],
            wv=mats[f"layer{i}.wv"], wo=mats[f"layer{i}.wo"],
            w1=mats[f"layer{i}.w1"], w2=mats[f"layer{i}.w2"],
            ln1_gain=mats[f"layer{i}.ln1.gain"], ln1_bias=mats[f"layer{i}.ln1.bias"],
            ln2_gain=mats[f"layer{i}.ln2.gain"], ln2_bias=mats[f"layer{i}.ln2.bias"],
        ))
    return cfg, EncoderWeights(layers=layers, proj=mats["final.proj"],
                               lnf_gain=mats["final.ln.gain"],
                               lnf_bias=mats["final.ln.bias"])


def save_head(head: HeadWeights, path: str | Path) -> None:
    has_bias = int(head.bias is not None)
    lines = [f"#head v1 d_in={head.d_in} d_out={head.d_out} bias={has_bias}"]
    lines.append(f"w\t{head.w.shape[0]}x{head.w.shape[1]}\t{_fmt(head.w)}")
    if head.bias is not None:
        lines.append(f"bias\t1x{head.bias.shape[0]}\t{_fmt(head.bias)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_head(path: str | Path) -> HeadWeights:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#head v1 "):
        raise ValueError(f"{path}: expected '#head v1 ...' header")
    mats = _parse_matrix_lines(lines[1:])
    bias = mats["bias"].reshape(-1) if "bias" in mats else None
    return HeadWeights(w=mats["w"], bias=bias)
