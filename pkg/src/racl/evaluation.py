"""Scoring, equal error rate, subset breakdowns and embedding-distance reports.

Scores are spoof probabilities, so a higher score means "more likely fake".
At threshold tau a bona fide utterance is falsely rejected as spoof when its
score is >= tau (FAR in the terminology used here) and a spoof utterance is
missed when its score is < tau (FRR). The EER is read off where the two rates
cross, interpolating linearly between the bracketing operating points.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from racl.audio import PROVENANCE_ORDER, ManifestRow, Provenance, load_clip
from racl.config import RunConfig
from racl.errors import RaclError, UndefinedEERError
from racl.losses import spoof_probability

log = logging.getLogger(__name__)


def _as_scores(x, name):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise UndefinedEERError(f"EER undefined: no {name} scores")
    return a


def _interpolate(far, frr) -> float:
    d = np.asarray(far) - np.asarray(frr)
    i = int(np.argmax(d <= 0.0))  # d is non-increasing and ends negative
    if i == 0:
        return 100.0 * float(far[0])
    t = d[i - 1] / (d[i - 1] - d[i])
    return 100.0 * float(far[i - 1] + t * (far[i] - far[i - 1]))


def eer(bona_scores, spoof_scores) -> float:
    """Equal error rate in percent, O(n log n)."""
    bona = np.sort(_as_scores(bona_scores, "bona fide"))
    spoof = np.sort(_as_scores(spoof_scores, "spoof"))
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    far = 1.0 - np.searchsorted(bona, thresholds, side="left") / bona.size
    frr = np.searchsorted(spoof, thresholds, side="left") / spoof.size
    return _interpolate(far, frr)


def eer_oracle(bona_scores, spoof_scores) -> float:
    """Exhaustive O(n^2) EER: count errors directly at every score, every midpoint and +inf."""
    bona = [float(s) for s in _as_scores(bona_scores, "bona fide")]
    spoof = [float(s) for s in _as_scores(spoof_scores, "spoof")]
    distinct = sorted(set(bona) | set(spoof))
    candidates = list(distinct)
    candidates += [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
    candidates.append(float("inf"))
    candidates.sort()
    far, frr = [], []
    for tau in candidates:
        far.append(sum(1 for s in bona if s >= tau) / len(bona))
        frr.append(sum(1 for s in spoof if s < tau) / len(spoof))
    for k in range(len(candidates)):
        if far[k] - frr[k] <= 0.0:
            if k == 0:
                return 100.0 * far[0]
            d0, d1 = far[k - 1] - frr[k - 1], far[k] - frr[k]
            t = d0 / (d0 - d1)
            return 100.0 * (far[k - 1] + t * (far[k] - far[k - 1]))
    raise AssertionError("unreachable: FAR - FRR is negative at +inf")


@dataclass(frozen=True)
class ScoreRecord:
    source_id: str
    subset: str
    label: int
    score: float
    provenance: Provenance = Provenance.BONAFIDE


def write_scores(path, records: list[ScoreRecord], config_hash: str | None = None) -> None:
    lines = [f"# config_hash={config_hash}"] if config_hash else []
    lines += [f"{r.source_id}\t{r.subset}\t{r.label}\t{r.score!r}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path) -> list[ScoreRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        sid, subset, label, score = line.split("\t")
        label = int(label)
        prov = Provenance.BONAFIDE if label == 0 else Provenance.SPOOF
        out.append(ScoreRecord(sid, subset, label, float(score), prov))
    return out


@dataclass
class Scored:
    records: list[ScoreRecord]
    embeddings: np.ndarray
    errors: list[str] = field(default_factory=list)


def score_manifest(rows: list[ManifestRow], params: dict[str, np.ndarray], cfg: RunConfig,
                   workers: int = 1, batch_size: int = 32) -> Scored:
    """Per-utterance spoof probabilities and embeddings; unreadable rows are reported, not fatal."""
    from racl.train import embed_and_score, extractor_for

    extractor = extractor_for(cfg)

    def one(row: ManifestRow):
        try:
            clip = load_clip(row.path, row.provenance, row.source_id, cfg.audio.sample_rate,
                             cfg.audio.target_len)
        except Exception as exc:
            return None, f"{row.path}: {exc}"
        return extractor(clip).layers, None

    records, embeds, errors = [], [], []
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, len(rows), batch_size):
            chunk = rows[start : start + batch_size]
            results = list(executor.map(one, chunk)) if executor else [one(r) for r in chunk]
            ok = [(r, feats) for r, (feats, _) in zip(chunk, results) if feats is not None]
            errors.extend(err for _, err in results if err is not None)
            if not ok:
                continue
            # each utterance runs alone so batch composition never changes its bits
            for row, feats in ok:
                logits, emb = embed_and_score(params, feats[None])
                p = float(spoof_probability(logits)[0])
                records.append(ScoreRecord(row.source_id, row.subset or "all",
                                           row.provenance.binary(), p, row.provenance))
                embeds.append(emb[0])
    finally:
        if executor is not None:
            executor.shutdown()
    emb_arr = np.stack(embeds) if embeds else np.zeros((0, cfg.head.embed))
    return Scored(records, emb_arr, errors)


def subset_report(records: list[ScoreRecord]) -> tuple[dict[str, float | None], float]:
    """Per-subset EER and the unweighted mean over subsets where it is defined."""
    if not records:
        raise RaclError("no scored records to report on")
    groups: dict[str, list[ScoreRecord]] = {}
    for r in records:
        groups.setdefault(r.subset, []).append(r)
    per: dict[str, float | None] = {}
    for name in sorted(groups):
        recs = groups[name]
        bona = [r.score for r in recs if r.label == 0]
        spoof = [r.score for r in recs if r.label == 1]
        if not bona or not spoof:
            warnings.warn(f"subset {name!r} has a single class; EER undefined and excluded from the mean")
            per[name] = None
            continue
        per[name] = eer(bona, spoof)
    defined = [v for v in per.values() if v is not None]
    if not defined:
        raise UndefinedEERError("no subset has both bona fide and spoof scores")
    return per, float(np.mean(defined))


def embedding_distances(embeddings: np.ndarray, provenance) -> dict:
    """Mean Euclidean distances between provenance classes.

    Off-diagonal entries average over all cross-class pairs, diagonal entries
    over within-class pairs i < j. Classes that are absent (or, on the
    diagonal, have a single member) yield None.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    prov = [Provenance(p) for p in provenance]
    groups = {c: emb[[i for i, p in enumerate(prov) if p is c]] for c in PROVENANCE_ORDER}
    k = len(PROVENANCE_ORDER)
    matrix: list[list[float | None]] = [[None] * k for _ in range(k)]
    for a in range(k):
        for b in range(a, k):
            ga, gb = groups[PROVENANCE_ORDER[a]], groups[PROVENANCE_ORDER[b]]
            if a == b:
                if len(ga) < 2:
                    continue
                diff = ga[:, None, :] - ga[None, :, :]
                d = np.sqrt(np.sum(diff * diff, axis=-1))
                iu = np.triu_indices(len(ga), k=1)
                val = float(np.mean(d[iu]))
            else:
                if len(ga) == 0 or len(gb) == 0:
                    continue
                diff = ga[:, None, :] - gb[None, :, :]
                val = float(np.mean(np.sqrt(np.sum(diff * diff, axis=-1))))
            matrix[a][b] = matrix[b][a] = val

    bona = groups[Provenance.BONAFIDE]
    others = emb[[i for i, p in enumerate(prov) if p is not Provenance.BONAFIDE]]
    vs_others = None
    if len(bona) and len(others):
        diff = bona[:, None, :] - others[None, :, :]
        vs_others = float(np.mean(np.sqrt(np.sum(diff * diff, axis=-1))))
    return {
        "classes": [c.value for c in PROVENANCE_ORDER],
        "matrix": matrix,
        "bona_vs_others": vs_others,
        "bona_vs_rec_bona": matrix[0][2],
    }


def distances_oracle(embeddings, provenance) -> list[list[float | None]]:
    """Plain double loop over samples; independent check for embedding_distances."""
    emb = [list(map(float, e)) for e in np.asarray(embeddings)]
    prov = [Provenance(p) for p in provenance]
    k = len(PROVENANCE_ORDER)
    sums = [[0.0] * k for _ in range(k)]
    counts = [[0] * k for _ in range(k)]
    for i in range(len(emb)):
        for j in range(len(emb)):
            a, b = PROVENANCE_ORDER.index(prov[i]), PROVENANCE_ORDER.index(prov[j])
            if a == b and j <= i:
                continue
            d = sum((x - y) ** 2 for x, y in zip(emb[i], emb[j])) ** 0.5
            sums[a][b] += d
            counts[a][b] += 1
    out = [[None] * k for _ in range(k)]
    for a in range(k):
        for b in range(k):
            if a == b and counts[a][a]:
                out[a][b] = sums[a][a] / counts[a][a]
            elif a != b and counts[a][b]:
                out[a][b] = sums[a][b] / counts[a][b]
    return out


@dataclass
class EvalReport:
    subsets: dict[str, float | None]
    average_eer: float
    pooled_eer: float
    distances: dict
    n_scored: int
    n_failed: int
    config_hash: str
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_report(scored: Scored, cfg: RunConfig) -> EvalReport:
    per, avg = subset_report(scored.records)
    bona = [r.score for r in scored.records if r.label == 0]
    spoof = [r.score for r in scored.records if r.label == 1]
    pooled = eer(bona, spoof)
    dist = embedding_distances(scored.embeddings, [r.provenance for r in scored.records])
    return EvalReport(per, avg, pooled, dist, len(scored.records), len(scored.errors), cfg.hash(),
                      cfg.to_dict())


def report_schema() -> dict:
    text = resources.files("racl").joinpath("schemas/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def write_embeddings(path, records: list[ScoreRecord], embeddings: np.ndarray,
                     config_hash: str | None = None) -> None:
    lines = [f"# config_hash={config_hash}"] if config_hash else []
    for r, e in zip(records, embeddings):
        lines.append("\t".join([r.source_id, r.provenance.value] + [repr(float(v)) for v in e]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
