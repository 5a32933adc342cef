"""Embedding corpus: manifest model, file format, splits, pairs, synthesis.

A manifest is a set of items, each with an identity label, a split
assignment, and one embedding vector per source model (e.g. ``clip``,
``fr``). Manifests are treated as immutable after construction; operations
that change assignments return a new manifest.

Manifest file format (UTF-8, LF):
    line 1:  ``#manifest v1 sources=<tag>:<dim>[,<tag>:<dim>...] seed=<u64>``
    then one record per line:
    ``<item_id>\\t<identity_id>\\t<split>\\t<tag>=<v,v,...>[\\t<tag>=...]``
Floats are serialized with shortest round-trip-exact formatting. Records
are written sorted by item_id; tags in sorted order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test", "unassigned")
GENUINE = "genuine"
IMPOSTOR = "impostor"

_TAG_FORBIDDEN = set("=:,\t\n ")


class ManifestError(ValueError):
    """Malformed manifest content or violated manifest invariants."""


def _check_tag(tag: str) -> str:
    if not tag or any(c in _TAG_FORBIDDEN for c in tag):
        raise ManifestError(f"invalid source tag {tag!r} (no whitespace, '=', ':' or ',')")
    return tag


@dataclass(eq=False)
class EmbeddingRecord:
    """One item: identity label, split assignment, one vector per source tag."""

    item_id: str
    identity_id: str
    split: str
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.item_id!r}: unknown split {self.split!r}")
        if not self.vectors:
            raise ManifestError(f"record {self.item_id!r}: needs at least one source vector")
        self.vectors = {
            _check_tag(t): np.asarray(v, dtype=np.float64).reshape(-1)
            for t, v in self.vectors.items()
        }
        for t, v in self.vectors.items():
            if not np.all(np.isfinite(v)):
                raise ManifestError(f"record {self.item_id!r}: non-finite values under {t!r}")


@dataclass(eq=False)
class Manifest:
    """A validated collection of embedding records."""

    records: list[EmbeddingRecord]
    source_dims: dict[str, int]
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.item_id in seen:
                raise ManifestError(f"duplicate item_id {rec.item_id!r}")
            seen.add(rec.item_id)
            for tag, vec in rec.vectors.items():
                want = self.source_dims.get(tag)
                if want is None:
                    raise ManifestError(
                        f"record {rec.item_id!r}: tag {tag!r} not declared in source_dims")
                if vec.shape[0] != want:
                    raise ManifestError(
                        f"record {rec.item_id!r}: {tag!r} has dim {vec.shape[0]}, "
                        f"manifest declares {want}")
        by_identity: dict[str, set[str]] = {}
        for rec in self.records:
            by_identity.setdefault(rec.identity_id, set()).add(rec.split)
        for ident, splits in by_identity.items():
            if len(splits) > 1:
                raise ManifestError(
                    f"identity {ident!r} spans splits {sorted(splits)}; "
                    "splits must be identity-disjoint")

    def identities(self, split: str | None = None) -> list[str]:
        """Sorted identity labels, optionally restricted to one split."""
        ids = {r.identity_id for r in self.records if split is None or r.split == split}
        return sorted(ids)

    def split_records(self, split: str) -> list[EmbeddingRecord]:
        """Records of one split, sorted by item_id."""
        return sorted((r for r in self.records if r.split == split), key=lambda r: r.item_id)

    def record_map(self) -> dict[str, EmbeddingRecord]:
        return {r.item_id: r for r in self.records}


@dataclass(frozen=True)
class VerificationPair:
    """An unordered reference/probe comparison with its ground-truth label."""

    ref_item: str
    probe_item: str
    label: str


@dataclass
class SynthConfig:
    """Synthetic identity-cluster generator settings.

    ``style_noise`` is the magnitude of a per-item perturbation whose
    direction is shared across sources (the item's "style"); each entry of
    ``source_noise`` adds an independent per-source perturbation, so
    different sources fail on different items (complementary noise).
    """

    n_identities: int
    items_per_identity: int
    dim_per_source: dict[str, int]
    style_noise: float = 0.0
    source_noise: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 1 or self.items_per_identity < 1:
            raise ValueError("n_identities and items_per_identity must be >= 1")
        if not self.dim_per_source:
            raise ValueError("need at least one source")
        for tag, dim in self.dim_per_source.items():
            _check_tag(tag)
            if dim < 1:
                raise ValueError(f"source {tag!r}: dim must be >= 1")
        if self.style_noise < 0:
            raise ValueError("style_noise must be >= 0")
        for tag, s in self.source_noise.items():
            if tag not in self.dim_per_source:
                raise ValueError(f"source_noise for unknown tag {tag!r}")
            if s < 0:
                raise ValueError(f"source_noise[{tag!r}] must be >= 0")


# ---------------------------------------------------------------------------
# manifest file I/O
# ---------------------------------------------------------------------------

def _format_floats(vec: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in vec)


def save_manifest(m: Manifest, path: str | Path) -> None:
    """Write a manifest in canonical order (records by item_id, tags sorted)."""
    tags = sorted(m.source_dims)
    header_sources = ",".join(f"{t}:{m.source_dims[t]}" for t in tags)
    lines = [f"#manifest v1 sources={header_sources} seed={m.seed}"]
    for rec in sorted(m.records, key=lambda r: r.item_id):
        fields = [rec.item_id, rec.identity_id, rec.split]
        fields += [f"{t}={_format_floats(rec.vectors[t])}" for t in sorted(rec.vectors)]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest file; errors name the offending line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#manifest v1 "):
        raise ManifestError(f"{path}: line 1: expected '#manifest v1 ...' header")
    header = lines[0]
    source_dims: dict[str, int] = {}
    seed = None
    for token in header.split()[2:]:
        if token.startswith("sources="):
            body = token[len("sources="):]
            if body:
                for part in body.split(","):
                    if ":" not in part:
                        raise ManifestError(f"{path}: line 1: bad source spec {part!r}")
                    tag, dim = part.split(":", 1)
                    source_dims[_check_tag(tag)] = int(dim)
        elif token.startswith("seed="):
            seed = int(token[len("seed="):])
    if seed is None or seed < 0:
        raise ManifestError(f"{path}: line 1: missing or negative seed")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        recno = len(records) + 1
        where = f"{path}: record {recno} (line {lineno})"
        fields = line.split("\t")
        if len(fields) < 4:
            raise ManifestError(f"{where}: expected item, identity, split and >=1 vector field")
        item_id, identity_id, split = fields[0], fields[1], fields[2]
        if split not in SPLITS:
            raise ManifestError(f"{where}: unknown split {split!r}")
        vectors: dict[str, np.ndarray] = {}
        for fld in fields[3:]:
            if "=" not in fld:
                raise ManifestError(f"{where}: malformed vector field {fld!r}")
            tag, payload = fld.split("=", 1)
            if tag not in source_dims:
                raise ManifestError(f"{where}: tag {tag!r} not declared in header")
            if tag in vectors:
                raise ManifestError(f"{where}: duplicate tag {tag!r}")
            try:
                vec = np.array([float(x) for x in payload.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise ManifestError(f"{where}: bad decimal in {tag!r}: {exc}") from None
            if vec.shape[0] != source_dims[tag]:
                raise ManifestError(
                    f"{where}: {tag!r} has dim {vec.shape[0]}, header declares {source_dims[tag]}")
            vectors[tag] = vec
        try:
            records.append(EmbeddingRecord(item_id, identity_id, split, vectors))
        except ManifestError as exc:
            raise ManifestError(f"{where}: {exc}") from None

    try:
        return Manifest(records=records, source_dims=source_dims, seed=seed)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def manifests_equal(a: Manifest, b: Manifest) -> bool:
    """Equality under canonical record ordering, bit-exact on vectors."""
    if a.seed != b.seed or a.source_dims != b.source_dims:
        return False
    ra = sorted(a.records, key=lambda r: r.item_id)
    rb = sorted(b.records, key=lambda r: r.item_id)
    if len(ra) != len(rb):
        return False
    for x, y in zip(ra, rb):
        if (x.item_id, x.identity_id, x.split) != (y.item_id, y.identity_id, y.split):
            return False
        if sorted(x.vectors) != sorted(y.vectors):
            return False
        for tag in x.vectors:
            if not np.array_equal(x.vectors[tag], y.vectors[tag]):
                return False
    return True


# ---------------------------------------------------------------------------
# splitting and pair protocols
# ---------------------------------------------------------------------------

def split_counts(n_identities: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Identity counts per split for the given train/val/test ratios.

    Val and test take the floor of their quota (at least 1 each); train
    absorbs every remaining identity. E.g. 7 identities at 60:20:20 give
    5/1/1, and 210 give 126/42/42.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1 within 1e-9, got sum={sum(ratios)!r}")
    if n_identities < 3:
        raise ValueError(f"need at least 3 identities to form 3 splits, got {n_identities}")
    n_val = max(1, math.floor(n_identities * ratios[1]))
    n_test = max(1, math.floor(n_identities * ratios[2]))
    n_train = n_identities - n_val - n_test
    if n_train < 1:
        raise ValueError(f"ratios {ratios} leave no identities for train with n={n_identities}")
    return n_train, n_val, n_test


def split_by_identity(m: Manifest, ratios: tuple[float, float, float],
                      seed: int) -> Manifest:
    """Assign every identity wholly to train/val/test; deterministic under seed."""
    identities = m.identities()
    n_train, n_val, n_test = split_counts(len(identities), ratios)
    rng = np.random.default_rng(seed)
    order = [identities[i] for i in rng.permutation(len(identities))]
    assignment = {}
    for ident in order[:n_train]:
        assignment[ident] = "train"
    for ident in order[n_train:n_train + n_val]:
        assignment[ident] = "val"
    for ident in order[n_train + n_val:]:
        assignment[ident] = "test"
    records = [
        EmbeddingRecord(r.item_id, r.identity_id, assignment[r.identity_id], dict(r.vectors))
        for r in m.records
    ]
    return Manifest(records=records, source_dims=dict(m.source_dims), seed=m.seed)


def generate_pairs(m: Manifest, split: str, impostor_cap: int | None = None,
                   seed: int = 0) -> list[VerificationPair]:
    """All genuine pairs plus all (or ``impostor_cap`` sampled) impostor pairs.

    Pairs are unordered and deduplicated; output lists genuine pairs first,
    both blocks in lexicographic item order. Deterministic under seed.
    """
    recs = m.split_records(split)
    if len(recs) < 2:
        raise ValueError(f"split {split!r} has {len(recs)} records; need >= 2")
    idents = {r.identity_id for r in recs}
    if len(idents) < 2:
        raise ValueError(f"split {split!r} has a single identity; no impostor pairs possible")

    genuine = []
    impostor = []
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            a, b = recs[i], recs[j]
            if a.identity_id == b.identity_id:
                genuine.append(VerificationPair(a.item_id, b.item_id, GENUINE))
            else:
                impostor.append(VerificationPair(a.item_id, b.item_id, IMPOSTOR))
    if impostor_cap is not None and impostor_cap < len(impostor):
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(impostor), size=impostor_cap, replace=False))
        impostor = [impostor[k] for k in keep]
    return genuine + impostor


def save_pairs_csv(pairs: list[VerificationPair], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ref_item", "probe_item", "label"])
        for p in pairs:
            writer.writerow([p.ref_item, p.probe_item, p.label])


def load_pairs_csv(path: str | Path) -> list[VerificationPair]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["ref_item", "probe_item", "label"]:
            raise ManifestError(f"{path}: unexpected pairs header {header}")
        pairs = []
        for ref, probe, label in reader:
            if label not in (GENUINE, IMPOSTOR):
                raise ManifestError(f"{path}: unknown pair label {label!r}")
            pairs.append(VerificationPair(ref, probe, label))
    return pairs


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def synth_generate(cfg: SynthConfig) -> Manifest:
    """Generate identity clusters on the unit sphere, one vector per source.

    Each identity gets a random unit center per source. Each item adds a
    style perturbation (direction shared across sources via a common draw)
    and an independent per-source perturbation, then renormalizes:

        v = unit(center + style_noise * u_style + source_noise[tag] * u_src)

    where ``u_style`` and ``u_src`` are unit vectors. Deterministic under
    ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    tags = sorted(cfg.dim_per_source)
    max_dim = max(cfg.dim_per_source.values())
    records = []
    for i in range(cfg.n_identities):
        ident = f"id{i:04d}"
        centers = {t: _unit(rng.standard_normal(cfg.dim_per_source[t])) for t in tags}
        for j in range(cfg.items_per_identity):
            style_full = rng.standard_normal(max_dim)
            vectors = {}
            for t in tags:
                dim = cfg.dim_per_source[t]
                v = centers[t].copy()
                if cfg.style_noise > 0:
                    v = v + cfg.style_noise * _unit(style_full[:dim])
                s_noise = cfg.source_noise.get(t, 0.0)
                if s_noise > 0:
                    v = v + s_noise * _unit(rng.standard_normal(dim))
                vectors[t] = _unit(v)
            records.append(EmbeddingRecord(f"{ident}_it{j:03d}", ident, "unassigned", vectors))
    return Manifest(records=records, source_dims=dict(cfg.dim_per_source), seed=cfg.seed)
