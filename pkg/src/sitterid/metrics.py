"""Verification metrics: score sets, FMR/FNMR sweeps, EER, TAR@FAR, reports.

Threshold semantics are accept-on-equal (a comparison is accepted iff
``score >= threshold``). A sweep evaluates every unique score plus a +inf
sentinel, so FMR is non-decreasing and FNMR non-increasing along the
curve. EER interpolates linearly between the two bracketing thresholds
when there is no exact FMR = FNMR point; TAR@FAR uses the conservative
operating point (largest FMR <= target), never interpolated.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import GENUINE, IMPOSTOR, VerificationPair


class ProtocolError(ValueError):
    """Score sets computed under different pair protocols cannot be compared."""


@dataclass(eq=False)
class ScoreSet:
    """Labeled comparison scores: genuine (same identity) vs impostor."""

    scores: np.ndarray
    labels: np.ndarray  # True = genuine
    protocol_hash: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must align")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[float, str]],
                     protocol_hash: str = "") -> "ScoreSet":
        scores, labels = [], []
        for s, lab in entries:
            if lab not in (GENUINE, IMPOSTOR):
                raise ValueError(f"unknown label {lab!r}")
            scores.append(s)
            labels.append(lab == GENUINE)
        return cls(np.array(scores, dtype=np.float64), np.array(labels, dtype=bool),
                   protocol_hash)

    @property
    def n_genuine(self) -> int:
        return int(self.labels.sum())

    @property
    def n_impostor(self) -> int:
        return int((~self.labels).sum())

    def genuine_scores(self) -> np.ndarray:
        return self.scores[self.labels]

    def impostor_scores(self) -> np.ndarray:
        return self.scores[~self.labels]


@dataclass(eq=False)
class RocCurve:
    """FMR/FNMR at strictly decreasing thresholds (accept iff score >= t)."""

    thresholds: np.ndarray
    fmr: np.ndarray
    fnmr: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.fmr = np.asarray(self.fmr, dtype=np.float64)
        self.fnmr = np.asarray(self.fnmr, dtype=np.float64)
        n = self.thresholds.shape[0]
        if self.fmr.shape[0] != n or self.fnmr.shape[0] != n:
            raise ValueError("curve arrays must align")
        if np.any(np.diff(self.thresholds) >= 0):
            raise ValueError("thresholds must be strictly decreasing")
        if np.any(np.diff(self.fmr) < 0):
            raise ValueError("fmr must be non-decreasing along the sweep")
        for name, arr in (("fmr", self.fmr), ("fnmr", self.fnmr)):
            if np.any((arr < 0) | (arr > 1)):
                raise ValueError(f"{name} outside [0, 1]")

    def __len__(self) -> int:
        return self.thresholds.shape[0]

    @property
    def tar(self) -> np.ndarray:
        return 1.0 - self.fnmr


@dataclass
class EvalReport:
    """One system's verification summary over a fixed pair protocol."""

    system: str
    eer: float
    tar_at_far: dict[float, float]
    n_genuine: int
    n_impostor: int
    protocol_hash: str = ""


def protocol_hash(pairs: Sequence[VerificationPair]) -> str:
    """Order-independent digest of a pair protocol."""
    lines = sorted(f"{p.ref_item}\t{p.probe_item}\t{p.label}" for p in pairs)
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def score_pairs(pairs: Sequence[VerificationPair], provider) -> ScoreSet:
    """Cosine-score every pair; ``provider`` maps item_id to its vector.

    ``provider`` may be a mapping or a callable. The resulting score set
    carries a digest of the pair protocol so reports can refuse to compare
    systems evaluated on different protocols.
    """
    get: Callable[[str], np.ndarray]
    if isinstance(provider, Mapping):
        def get(item_id: str) -> np.ndarray:
            if item_id not in provider:
                raise KeyError(f"no embedding for item {item_id!r}")
            return provider[item_id]
    else:
        get = provider
    entries = [(cosine(get(p.ref_item), get(p.probe_item)), p.label) for p in pairs]
    return ScoreSet.from_entries(entries, protocol_hash(pairs))


def sweep(scores: ScoreSet) -> RocCurve:
    """FMR/FNMR at every unique score plus a +inf sentinel."""
    gen = np.sort(scores.genuine_scores())
    imp = np.sort(scores.impostor_scores())
    if gen.size == 0 or imp.size == 0:
        raise ValueError("sweep needs at least one genuine and one impostor score")
    uniq = np.unique(np.concatenate([gen, imp]))[::-1]
    thresholds = np.concatenate([[np.inf], uniq])
    fmr = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    fnmr = np.searchsorted(gen, thresholds, side="left") / gen.size
    return RocCurve(thresholds=thresholds, fmr=fmr, fnmr=fnmr)


def eer(roc: RocCurve) -> float:
    """Error rate at the FMR = FNMR crossing (linearly interpolated)."""
    if len(roc) < 2:
        raise ValueError("degenerate curve: need at least two points")
    diff = roc.fmr - roc.fnmr
    idx = np.nonzero(diff >= 0)[0]
    if idx.size == 0:
        raise ValueError("curve has no FMR = FNMR crossing")
    k = int(idx[0])
    if diff[k] == 0.0:
        return float(roc.fmr[k])
    if k == 0:
        return float(roc.fmr[0])
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    return float(roc.fmr[k - 1] + alpha * (roc.fmr[k] - roc.fmr[k - 1]))


def tar_at_far(roc: RocCurve, far_target: float) -> float:
    """TAR at the conservative operating point: largest FMR <= target."""
    if not (0.0 < far_target < 1.0):
        raise ValueError(f"far_target must be in (0, 1), got {far_target}")
    ok = roc.fmr <= far_target
    best_fmr = roc.fmr[ok].max()
    at = ok & (roc.fmr == best_fmr)
    return float(1.0 - roc.fnmr[at].min())


def format_rate(v: float) -> str:
    """Percent with one decimal, the table convention (0.099 -> '9.9%')."""
    return f"{100.0 * v:.1f}%"


def report(systems: Mapping[str, ScoreSet],
           far_targets: Sequence[float] = (0.001, 0.01)) -> list[EvalReport]:
    """Per-system EER and TAR@FAR rows over one shared protocol."""
    if not systems:
        raise ValueError("no systems to report")
    hashes = {s.protocol_hash for s in systems.values()}
    if len(hashes) > 1:
        raise ProtocolError(f"protocol hash mismatch across systems: {sorted(hashes)}")
    out = []
    for name, scores in systems.items():
        roc = sweep(scores)
        out.append(EvalReport(
            system=name,
            eer=eer(roc),
            tar_at_far={f: tar_at_far(roc, f) for f in far_targets},
            n_genuine=scores.n_genuine,
            n_impostor=scores.n_impostor,
            protocol_hash=scores.protocol_hash,
        ))
    return out


def _far_header(far: float) -> str:
    return f"TAR@{far * 100:g}%FAR"


def render_report_text(reports: Sequence[EvalReport]) -> str:
    """Aligned text table with one-decimal percentages."""
    fars = list(reports[0].tar_at_far)
    header = ["System", "EER"] + [_far_header(f) for f in fars]
    rows = [[r.system, format_rate(r.eer)] + [format_rate(r.tar_at_far[f]) for f in fars]
            for r in reports]
    widths = [max(len(header[c]), *(len(row[c]) for row in rows)) for c in range(len(header))]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(row) for row in rows]) + "\n"


def render_report_csv(reports: Sequence[EvalReport]) -> str:
    fars = list(reports[0].tar_at_far)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["system", "eer"] + [_far_header(f).lower() for f in fars]
                    + ["n_genuine", "n_impostor"])
    for r in reports:
        writer.writerow([r.system, format_rate(r.eer)]
                        + [format_rate(r.tar_at_far[f]) for f in fars]
                        + [r.n_genuine, r.n_impostor])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# score / curve files
# ---------------------------------------------------------------------------

def save_scores_csv(pairs: Sequence[VerificationPair], scores: ScoreSet,
                    path: str | Path) -> None:
    if len(pairs) != scores.scores.shape[0]:
        raise ValueError("pairs and scores must align")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ref_item", "probe_item", "label", "score"])
        for p, s in zip(pairs, scores.scores):
            writer.writerow([p.ref_item, p.probe_item, p.label, repr(float(s))])


def load_scores_csv(path: str | Path) -> tuple[list[VerificationPair], ScoreSet]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["ref_item", "probe_item", "label", "score"]:
            raise ValueError(f"{path}: unexpected scores header {header}")
        pairs, entries = [], []
        for ref, probe, label, score in reader:
            pairs.append(VerificationPair(ref, probe, label))
            entries.append((float(score), label))
    return pairs, ScoreSet.from_entries(entries, protocol_hash(pairs))


def save_roc_csv(roc: RocCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fmr", "fnmr", "tar"])
        for t, a, r in zip(roc.thresholds, roc.fmr, roc.fnmr):
            writer.writerow([repr(float(t)), repr(float(a)), repr(float(r)),
                             repr(float(1.0 - r))])


def plot_roc(curves: Mapping[str, RocCurve], path: str | Path,
             title: str = "Verification ROC") -> None:
    """Write a self-contained SVG: TAR vs FMR, log-scaled FMR axis."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "sitterid"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.5))
        for name, roc in curves.items():
            pos = roc.fmr > 0
            ax.plot(roc.fmr[pos], roc.tar[pos], label=name, linewidth=1.4)
        ax.set_xscale("log")
        ax.set_xlabel("False Match Rate")
        ax.set_ylabel("True Accept Rate")
        ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
