"""Low-rank adapters: factor pairs, adapted forward, merge, parameter counts.

An adapter stores a down-projection ``a_down`` (r x d_in) and an
up-projection ``b_up`` (d_out x r); the effective weight update is
``delta_w = (alpha / r) * b_up @ a_down``. ``b_up`` starts at zero, so a
fresh adapter leaves the base model bit-identical. Adapters live apart
from base weights; merging is an explicit export step.

Checkpoint format (UTF-8, LF):
    ``#lora v1 layers=<L> rank=<r> alpha=<a>``
    then one line per factor:
    ``<layer_index>\\t<q|v>\\t<a_down|b_up>\\t<rows>x<cols>\\t<v,v,...>``
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

TARGETS = ("query", "value")
_TARGET_CODE = {"query": "q", "value": "v"}
_CODE_TARGET = {"q": "query", "v": "value"}


@dataclass(eq=False)
class LoraAdapter:
    """Low-rank factor pair attached to one projection matrix."""

    a_down: np.ndarray
    b_up: np.ndarray
    rank: int
    alpha: float
    target: str
    layer_index: int

    def __post_init__(self):
        self.a_down = np.asarray(self.a_down, dtype=np.float64)
        self.b_up = np.asarray(self.b_up, dtype=np.float64)
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.a_down.ndim != 2 or self.b_up.ndim != 2:
            raise ValueError("adapter factors must be 2-D")
        r_a, d_in = self.a_down.shape
        d_out, r_b = self.b_up.shape
        if r_a != self.rank or r_b != self.rank:
            raise ValueError(f"factor shapes {self.a_down.shape}/{self.b_up.shape} "
                             f"disagree with rank {self.rank}")
        if not (1 <= self.rank <= min(d_in, d_out)):
            raise ValueError(f"rank {self.rank} outside [1, min({d_in}, {d_out})]")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.layer_index < 0:
            raise ValueError(f"layer_index must be >= 0, got {self.layer_index}")

    @property
    def d_in(self) -> int:
        return self.a_down.shape[1]

    @property
    def d_out(self) -> int:
        return self.b_up.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Materialized weight update ``(alpha / r) * b_up @ a_down``."""
        return self.scaling * (self.b_up @ self.a_down)


def init_adapter(d_in: int, d_out: int, r: int, alpha: float, seed: int,
                 target: str = "query", layer_index: int = 0) -> LoraAdapter:
    """Fresh adapter: gaussian ``a_down`` (std 1/sqrt(d_in)), zero ``b_up``.

    Zero ``b_up`` guarantees the adapted forward equals the base forward at
    initialization. Deterministic under seed.
    """
    if r > min(d_in, d_out):
        raise ValueError(f"rank {r} exceeds min(d_in={d_in}, d_out={d_out})")
    rng = np.random.default_rng(seed)
    a_down = rng.standard_normal((r, d_in)) / np.sqrt(d_in)
    b_up = np.zeros((d_out, r))
    return LoraAdapter(a_down, b_up, rank=r, alpha=alpha, target=target,
                       layer_index=layer_index)


def adapted_forward(w_base: np.ndarray, ad: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """``w_base @ x + (alpha/r) * b_up @ (a_down @ x)`` without forming delta_w.

    Column convention: ``x`` is ``d_in x n`` (columns are inputs).
    """
    w_base = np.asarray(w_base, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if w_base.shape != (ad.d_out, ad.d_in):
        raise ValueError(f"base weight {w_base.shape} does not match adapter "
                         f"({ad.d_out}, {ad.d_in})")
    if x.shape[0] != ad.d_in:
        raise ValueError(f"input has {x.shape[0]} rows, adapter expects {ad.d_in}")
    return w_base @ x + ad.scaling * (ad.b_up @ (ad.a_down @ x))


def merge(w_base: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    """Bake the adapter into the base weight: ``w_base + delta_w``."""
    w_base = np.asarray(w_base, dtype=np.float64)
    if w_base.shape != (ad.d_out, ad.d_in):
        raise ValueError(f"base weight {w_base.shape} does not match adapter "
                         f"({ad.d_out}, {ad.d_in})")
    return w_base + ad.delta()


def trainable_param_count(adapters: list[LoraAdapter], encoder_cfg) -> tuple[int, float]:
    """Adapter parameter total ``sum r * (d_in + d_out)`` and its ratio to the encoder."""
    from .encoder import encoder_param_count  # runtime import avoids a module cycle

    count = sum(ad.rank * (ad.d_in + ad.d_out) for ad in adapters)
    total = encoder_param_count(encoder_cfg)
    return count, count / total


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def _fmt(values: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in values.reshape(-1))


def save_adapters(adapters: list[LoraAdapter], path: str | Path) -> None:
    if not adapters:
        raise ValueError("nothing to save: empty adapter list")
    ranks = {ad.rank for ad in adapters}
    alphas = {ad.alpha for ad in adapters}
    if len(ranks) != 1 or len(alphas) != 1:
        raise ValueError("checkpoint format requires a homogeneous rank/alpha")
    n_layers = 1 + max(ad.layer_index for ad in adapters)
    lines = [f"#lora v1 layers={n_layers} rank={ranks.pop()} alpha={repr(float(alphas.pop()))}"]
    for ad in sorted(adapters, key=lambda a: (a.layer_index, a.target)):
        code = _TARGET_CODE[ad.target]
        for name, mat in (("a_down", ad.a_down), ("b_up", ad.b_up)):
            lines.append(f"{ad.layer_index}\t{code}\t{name}\t"
                         f"{mat.shape[0]}x{mat.shape[1]}\t{_fmt(mat)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_adapters(path: str | Path) -> list[LoraAdapter]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#lora v1 "):
        raise ValueError(f"{path}: expected '#lora v1 ...' header")
    fields = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    rank = int(fields["rank"])
    alpha = float(fields["alpha"])
    factors: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        layer_s, code, name, shape_s, payload = line.split("\t")
        rows, cols = (int(x) for x in shape_s.split("x"))
        mat = np.array([float(x) for x in payload.split(",")]).reshape(rows, cols)
        key = (int(layer_s), _CODE_TARGET[code])
        factors.setdefault(key, {})[name] = mat
    adapters = []
    for (layer_index, target), mats in sorted(factors.items()):
        if set(mats) != {"a_down", "b_up"}:
            raise ValueError(f"{path}: layer {layer_index} {target}: incomplete factor pair")
        adapters.append(LoraAdapter(mats["a_down"], mats["b_up"], rank=rank,
                                    alpha=alpha, target=target, layer_index=layer_index))
    return adapters
