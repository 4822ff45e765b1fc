"""Cosine matching and verification / identification metrics.

Conventions (all deterministic):

* a comparison is accepted iff ``score >= threshold``;
* EER sweeps thresholds over the unique scores and their midpoints, picks the
  point minimizing ``|FAR - FRR|`` (lowest threshold on ties) and reports
  ``(FAR + FRR) / 2`` there;
* VR@FAR takes the lowest swept threshold whose FAR does not exceed the
  target (no interpolation); the sweep also includes a reject-all point
  just above the highest score;
* AUC is the Mann-Whitney probability with ties counted one half;
* Rank-1 uses the best single gallery image, ties going to the lower index.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import container
from .backbone import Model, forward_embed
from .errors import DegenerateInputError, ProtocolError
from .synthdata import Entry, IdentityDataset, Modality
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

FAR_TARGETS = (0.0001, 0.001, 0.01, 0.05)
METRIC_NAMES = ("auc", "eer", "rank1") + tuple(f"vr@far={f:g}" for f in FAR_TARGETS)


@dataclass(frozen=True)
class ScoreRecord:
    probe_id: str
    reference_id: str
    genuine: bool
    score: float


@dataclass
class ScoreSet:
    records: list[ScoreRecord]

    def __len__(self) -> int:
        return len(self.records)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(genuine scores, impostor scores) as float64 arrays."""
        scores = np.array([r.score for r in self.records], dtype=np.float64)
        mask = np.array([r.genuine for r in self.records], dtype=bool)
        return scores[mask], scores[~mask]

    def check(self) -> tuple[np.ndarray, np.ndarray]:
        gen, imp = self.arrays()
        if len(gen) == 0 or len(imp) == 0:
            raise ProtocolError(f"need genuine and impostor scores, got {len(gen)} genuine / {len(imp)} impostor")
        if not (np.all(np.isfinite(gen)) and np.all(np.isfinite(imp))):
            raise ProtocolError("scores must be finite")
        return gen, imp


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def embed_entries(model: Model, entries: list[Entry], batch: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(entries), batch):
            chunk = np.stack([e.image for e in entries[start:start + batch]])
            out.append(forward_embed(model, Tensor(chunk)).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.embed_dim), dtype=np.float32)


def _unit_rows(emb: np.ndarray, entries: list[Entry], role: str) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        name = entries[zero[0]].path if entries else f"row {zero[0]}"
        raise DegenerateInputError(f"zero-norm {role} embedding for entry {name}")
    return emb / norms[:, None]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of ``a`` against every row of ``b``."""
    return _unit_rows(a, [], "probe") @ _unit_rows(b, [], "reference").T


def score_matrix(model: Model, gallery: list[Entry], probes: list[Entry]) -> ScoreSet:
    """One record per (probe, gallery) pair, probe-major, with cosine similarity."""
    if not gallery or not probes:
        raise ProtocolError("score_matrix(): gallery and probes must be nonempty")
    g = _unit_rows(embed_entries(model, gallery), gallery, "gallery")
    p = _unit_rows(embed_entries(model, probes), probes, "probe")
    sims = np.clip(p @ g.T, -1.0, 1.0)
    records = [ScoreRecord(pe.path, ge.path, pe.identity_id == ge.identity_id, float(sims[i, j]))
               for i, pe in enumerate(probes) for j, ge in enumerate(gallery)]
    return ScoreSet(records)


def cross_modal_scores(model: Model, dataset: IdentityDataset, ids) -> ScoreSet:
    """Source images of ``ids`` as gallery, their target images as probes."""
    gallery = [dataset.entries[i] for i in dataset.select(ids, Modality.SOURCE)]
    probes = [dataset.entries[i] for i in dataset.select(ids, Modality.TARGET)]
    return score_matrix(model, gallery, probes)


def retention_scores(model: Model, dataset: IdentityDataset, ids) -> ScoreSet:
    """Source-only matching: per identity the first half of its captures is gallery, the rest probes."""
    gallery, probes = [], []
    for ident in sorted(set(int(i) for i in ids)):
        own = [dataset.entries[i] for i in dataset.indices(ident, Modality.SOURCE)]
        if len(own) < 2:
            raise ProtocolError(f"identity {ident} needs at least 2 source images for retention scoring")
        half = len(own) // 2
        gallery.extend(own[:half])
        probes.extend(own[half:])
    return score_matrix(model, gallery, probes)


# ---------------------------------------------------------------------------
# verification metrics
# ---------------------------------------------------------------------------

def _sweep(gen: np.ndarray, imp: np.ndarray) -> np.ndarray:
    uniq = np.unique(np.concatenate([gen, imp]))
    mids = (uniq[:-1] + uniq[1:]) / 2
    return np.unique(np.concatenate([uniq, mids]))


def _accept_counts(sorted_scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return len(sorted_scores) - np.searchsorted(sorted_scores, thresholds, side="left")


def eer(scores: ScoreSet) -> tuple[float, float]:
    """(equal error rate, threshold)."""
    gen, imp = scores.check()
    ts = _sweep(gen, imp)
    fa = _accept_counts(np.sort(imp), ts)
    fr = len(gen) - _accept_counts(np.sort(gen), ts)
    ng, ni = len(gen), len(imp)
    # |FA/ni - FR/ng| compared exactly in integers
    gap = np.abs(fa * ng - fr * ni)
    k = int(np.argmin(gap))
    # one division of exact integers, so the result is the correctly rounded rational
    return int(fa[k] * ng + fr[k] * ni) / (2 * ni * ng), float(ts[k])


def auc(scores: ScoreSet) -> float:
    gen, imp = scores.check()
    ranks = rankdata(np.concatenate([gen, imp]))
    ng, ni = len(gen), len(imp)
    # tied ranks are multiples of 1/2, so twice the rank sum is an exact integer
    u2 = int(round(2 * ranks[:ng].sum())) - ng * (ng + 1)
    return u2 / (2 * ng * ni)


def roc_points(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, TAR) over the full sweep including the reject-all point, by increasing threshold."""
    gen, imp = scores.check()
    ts = np.append(_sweep(gen, imp), np.nextafter(max(gen.max(), imp.max()), math.inf))
    far = _accept_counts(np.sort(imp), ts) / len(imp)
    tar = _accept_counts(np.sort(gen), ts) / len(gen)
    return ts, far, tar


def vr_at_far(scores: ScoreSet, far_target: float) -> tuple[float, float]:
    """(TAR, threshold) at the lowest swept threshold with FAR <= far_target."""
    if not 0.0 < far_target < 1.0:
        raise ProtocolError(f"far_target={far_target} outside (0, 1)")
    ts, far, tar = roc_points(scores)
    n_imp = len(scores.arrays()[1])
    if n_imp * far_target < 1:
        log.warning("vr_at_far(): %d impostor scores cannot resolve FAR=%g", n_imp, far_target)
    k = int(np.flatnonzero(far <= far_target)[0])
    return float(tar[k]), float(ts[k])


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------

def rank1(gallery_embeddings, probe_embeddings, gallery_ids, probe_ids) -> float:
    """Fraction of probes whose most similar gallery embedding shares their identity."""
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    missing = sorted(set(probe_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        raise ProtocolError(f"rank1(): probe identities {missing} absent from gallery")
    sims = cosine_matrix(np.asarray(probe_embeddings), np.asarray(gallery_embeddings))
    best = np.argmax(sims, axis=1)
    return float(np.mean(gallery_ids[best] == probe_ids))


def rank1_from_scores(scores: ScoreSet) -> float:
    """Rank-1 over a score set: per probe, the first highest-scoring record decides."""
    best: dict[str, ScoreRecord] = {}
    for r in scores.records:
        cur = best.get(r.probe_id)
        if cur is None or r.score > cur.score:
            best[r.probe_id] = r
    if not best:
        raise ProtocolError("rank1_from_scores(): empty score set")
    return sum(r.genuine for r in best.values()) / len(best)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class VerificationReport:
    auc: float
    eer: float
    rank1: float
    vr_at_far: dict[float, float]
    thresholds: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        out = {"auc": self.auc, "eer": self.eer, "rank1": self.rank1}
        for f in FAR_TARGETS:
            out[f"vr@far={f:g}"] = self.vr_at_far[f]
        return out


def verification_report(scores: ScoreSet) -> VerificationReport:
    e, t_eer = eer(scores)
    vr, thresholds = {}, {"eer": t_eer}
    for f in FAR_TARGETS:
        vr[f], thresholds[f"vr@far={f:g}"] = vr_at_far(scores, f)
    return VerificationReport(auc(scores), e, rank1_from_scores(scores), vr, thresholds)


@dataclass
class FoldReport:
    folds: list[VerificationReport]
    mean: dict[str, float]
    std: dict[str, float]

    def to_tsv(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{k}\t{self.mean[k]:.6f}\t{self.std[k]:.6f}\n" for k in self.mean)

    def to_text(self, prefix: str = "") -> str:
        lines = []
        for k in self.mean:
            lines.append(f"{prefix}{k}.mean={self.mean[k]:.6f}\n")
            lines.append(f"{prefix}{k}.std={self.std[k]:.6f}\n")
        return "".join(lines)


def aggregate_folds(reports: list[VerificationReport]) -> FoldReport:
    """Per-metric mean and sample standard deviation (0 for a single fold)."""
    if not reports:
        raise ProtocolError("aggregate_folds(): no reports")
    table = {k: np.array([r.as_dict()[k] for r in reports], dtype=np.float64) for k in METRIC_NAMES}
    mean = {k: float(v.mean()) for k, v in table.items()}
    std = {k: float(v.std(ddof=1)) if len(v) > 1 else 0.0 for k, v in table.items()}
    return FoldReport(list(reports), mean, std)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

SCORE_HEADER = ("probe_id", "reference_id", "label", "score")


def format_scores(scores: ScoreSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_HEADER)
    for r in scores.records:
        writer.writerow((r.probe_id, r.reference_id, int(r.genuine), f"{r.score:.6f}"))
    return buf.getvalue()


def parse_scores(text: str) -> ScoreSet:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SCORE_HEADER:
        raise ProtocolError(f"score CSV must start with header {','.join(SCORE_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4 or row[2] not in ("0", "1"):
            raise ProtocolError(f"score CSV line {lineno}: malformed row {row}")
        records.append(ScoreRecord(row[0], row[1], row[2] == "1", float(row[3])))
    return ScoreSet(records)


def export_scores(scores: ScoreSet, path) -> None:
    try:
        Path(path).write_text(format_scores(scores), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write scores to {path}: {exc}") from exc


def load_scores(path) -> ScoreSet:
    return parse_scores(Path(path).read_text(encoding="utf-8"))


def export_embeddings(entries: list[Entry], model: Model, path) -> None:
    """Write one embedding tensor per entry, named by the entry path, to an .xst container."""
    emb = embed_entries(model, entries)
    records = [container.Record(e.path, container.TAG_FROZEN, emb[i]) for i, e in enumerate(entries)]
    try:
        container.write(path, "kind=embeddings\n", records)
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
