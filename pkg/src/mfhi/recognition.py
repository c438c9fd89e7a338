"""Test-time protocols (I2A, A2I, I2I) and their ranking metrics.

Every ranking breaks score ties by ascending candidate id so that reports are
reproducible.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import DegenerateInputError, Tensor
from .dataset import Dataset, category_vectors
from .model import MfhiModel
from .prototypes import MlpParams, PrototypeSet, prototype

PROTOCOLS = ("i2a", "a2i", "i2i")
DEFAULT_TOP = (1, 5, 10)


class ProtocolViolation(RuntimeError):
    """Test identities overlap the training identities."""


class ShapeMismatch(ValueError):
    """Checkpoint and dataset disagree on attribute count or feature channels."""


@dataclass
class RankedResult:
    query_id: object
    ids: np.ndarray
    scores: np.ndarray

    def top(self, k: int) -> np.ndarray:
        return self.ids[:k]


def rank_candidates(scores, ids, descending: bool = True) -> np.ndarray:
    """Ordering of candidates by score, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids)
    key = -scores if descending else scores
    return np.lexsort((ids, key))


def _unit_rows(x, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise DegenerateInputError(f"zero-norm {what} at rows {np.flatnonzero(norms <= 1e-12)[:10].tolist()}")
    return x / norms


def cosine_matrix(a, b) -> np.ndarray:
    return _unit_rows(a, "query") @ _unit_rows(b, "candidate").T


def classify_i2a(v, prototypes: PrototypeSet, query_id=None):
    """Nearest prototype by cosine similarity; returns ``(identity, RankedResult)``."""
    sims = cosine_matrix(v, prototypes.prototypes)[0]
    ids = np.asarray(prototypes.ids)
    order = rank_candidates(sims, ids)
    result = RankedResult(query_id, ids[order], sims[order])
    return result.ids[0], result


def retrieve_a2i(a_hat, mlp: MlpParams, gallery, gallery_ids, query_id=None) -> RankedResult:
    """Rank gallery features by cosine similarity to the prototype of ``a_hat``."""
    gallery = np.atleast_2d(np.asarray(gallery.data if isinstance(gallery, Tensor) else gallery))
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    m = prototype(Tensor(np.asarray(a_hat, dtype=mlp.w1.dtype)), mlp)
    sims = cosine_matrix(m, gallery)[0]
    ids = np.asarray(gallery_ids)
    order = rank_candidates(sims, ids)
    return RankedResult(query_id, ids[order], sims[order])


def retrieve_i2i(v_q, gallery, gallery_ids, query_id=None, exclude=()) -> RankedResult:
    """Rank gallery by ascending Euclidean distance between l2-normalized features.

    Candidates whose id is in ``exclude`` are dropped; scores are distances.
    """
    q = _unit_rows(v_q, "query")[0]
    g = _unit_rows(gallery, "gallery feature")
    ids = np.asarray(gallery_ids)
    if len(exclude):
        keep = ~np.isin(ids, list(exclude))
        g, ids = g[keep], ids[keep]
    dist = np.sqrt(((g - q) ** 2).sum(axis=1))
    order = rank_candidates(dist, ids, descending=False)
    return RankedResult(query_id, ids[order], dist[order])


# ---------------------------------------------------------------------------
# Metrics


def _ids(ranking) -> list:
    return list(ranking.ids) if isinstance(ranking, RankedResult) else list(ranking)


def metric_topP_per_class(rankings, truths, Ps: Sequence[int] = DEFAULT_TOP) -> dict:
    """Mean over classes of the per-class fraction of queries whose truth is in the top P.

    Computed in exact rationals and rounded once, so results do not depend on
    summation order.
    """
    per_class: dict = {}
    for ranking, truth in zip(rankings, truths, strict=True):
        ids = _ids(ranking)
        if truth not in ids:
            raise ValueError(f"true identity {truth!r} is not among the prototypes")
        per_class.setdefault(truth, []).append(ids.index(truth))
    if not per_class:
        return {P: None for P in Ps}
    out = {}
    for P in Ps:
        accs = [Fraction(sum(pos < P for pos in positions), len(positions)) for positions in per_class.values()]
        out[P] = float(sum(accs) / len(accs))
    return out


def _first_hits(rankings, relevance):
    hits = []
    for ranking, rel in zip(rankings, relevance, strict=True):
        rel = set(rel)
        if not rel:
            continue
        ids = _ids(ranking)
        first = next((i for i, c in enumerate(ids) if c in rel), None)
        hits.append(first)
    return hits


def metric_cmc(rankings, relevance, Ps: Sequence[int] = DEFAULT_TOP) -> dict:
    """Fraction of queries with a relevant item in the top P; empty relevant sets are skipped.

    Returns ``None`` per P when no query has a relevant item.
    """
    hits = _first_hits(rankings, relevance)
    if not hits:
        return {P: None for P in Ps}
    return {P: float(Fraction(sum(h is not None and h < P for h in hits), len(hits))) for P in Ps}


def _exact_ap(ranking, relevant) -> Fraction:
    ids = _ids(ranking)
    rel = set(relevant)
    missing = rel - set(ids)
    if missing:
        raise ValueError(f"relevant items not in ranking: {sorted(missing)[:10]}")
    found, total = 0, Fraction(0)
    for rank, cand in enumerate(ids, start=1):
        if cand in rel:
            found += 1
            total += Fraction(found, rank)
    return total / found


def average_precision(ranking, relevant) -> float:
    """Mean of precision@k over the ranks k of the relevant items."""
    return float(_exact_ap(ranking, relevant))


def metric_map(rankings, relevance) -> Optional[float]:
    aps = [_exact_ap(r, rel) for r, rel in zip(rankings, relevance, strict=True) if len(rel)]
    return float(sum(aps) / len(aps)) if aps else None


# ---------------------------------------------------------------------------
# Protocol runner


@dataclass
class MetricsReport:
    protocol: str
    top_p: Optional[dict] = None
    cmc: Optional[dict] = None
    mAP: Optional[float] = None
    num_queries: int = 0
    num_gallery: int = 0
    num_identities: int = 0
    seed: Optional[int] = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("top_p", "cmc"):
            if d[key] is not None:
                d[key] = {str(k): v for k, v in d[key].items()}
        return d

    def to_text(self) -> str:
        rows = [f"protocol      {self.protocol.upper()}", f"seed          {self.seed}", f"config hash   {self.config_hash}",
                f"queries       {self.num_queries}", f"gallery       {self.num_gallery}",
                f"identities    {self.num_identities}", ""]
        header, values = [], []
        for label, table in (("Top-", self.top_p), ("R@", self.cmc)):
            for k, v in (table or {}).items():
                header.append(f"{label}{k}")
                values.append("n/a" if v is None else f"{100 * v:.2f}")
        if self.protocol != "i2a":
            header.append("mAP")
            values.append("n/a" if self.mAP is None else f"{100 * self.mAP:.2f}")
        widths = [max(len(h), len(v)) for h, v in zip(header, values)]
        rows.append(" | ".join(h.rjust(w) for h, w in zip(header, widths)))
        rows.append("-+-".join("-" * w for w in widths))
        rows.append(" | ".join(v.rjust(w) for v, w in zip(values, widths)))
        return "\n".join(rows) + "\n"

    def file_stem(self) -> str:
        return f"report_{self.protocol}_seed{self.seed}_{self.config_hash}"


def write_report(report: MetricsReport, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = report.file_stem()
    txt = out / f"{stem}.txt"
    js = out / f"{stem}.json"
    txt.write_text(report.to_text())
    js.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return [txt, js]


def embed_features(model: MfhiModel, features: np.ndarray, batch: int = 256) -> np.ndarray:
    """Pooled visual features for a stack of feature maps (no tape, float64 out)."""
    chunks = []
    for start in range(0, len(features), batch):
        F = Tensor(features[start:start + batch].astype(model.dtype, copy=False))
        chunks.append(model.embed(F).feature.data.astype(np.float64))
    return np.concatenate(chunks) if chunks else np.zeros((0, model.spec.channels))


def check_disjoint(train_identities, ds: Dataset) -> None:
    test_ids = set(ds.identities[ds.indices("gallery", "probe")].tolist())
    overlap = test_ids & set(train_identities)
    if overlap:
        raise ProtocolViolation(f"test identities overlap training identities: {sorted(overlap)[:10]}")


def evaluate(
    protocol: str,
    model: MfhiModel,
    ds: Dataset,
    top: Sequence[int] = DEFAULT_TOP,
    train_identities: Optional[Sequence[int]] = None,
    seed: Optional[int] = None,
    cfg_hash: str = "",
    gallery_is_probe: bool = False,
) -> MetricsReport:
    """Run one protocol on the test split of ``ds``.

    I2A classifies gallery images against prototypes built from the gallery's
    category-level attributes; A2I ranks the gallery for each category-level
    attribute query; I2I ranks the gallery for each probe image.  Reid-style
    datasets use semantic ids for I2A/A2I classes and relevance.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if train_identities is not None:
        check_disjoint(train_identities, ds)
    top = tuple(int(p) for p in top)
    gal = ds.indices("gallery")
    if gal.size == 0:
        raise ValueError("dataset has no gallery images")
    use_semantic = ds.manifest.flavor == "reid-style"
    report = MetricsReport(protocol, seed=seed, config_hash=cfg_hash)

    if protocol in ("i2a", "a2i"):
        labels = ds.class_labels(use_semantic)[gal]
        classes, vectors = category_vectors(ds.attributes[gal], labels)
        protos = model.prototypes(vectors, ids=classes.tolist())
        feats = embed_features(model, ds.features[gal])
        if protocol == "i2a":
            rankings = [classify_i2a(f, protos, query_id=int(i))[1] for f, i in zip(feats, ds.image_ids[gal])]
            report.top_p = metric_topP_per_class(rankings, labels.tolist(), top)
            report.num_queries = len(rankings)
        else:
            sims = cosine_matrix(protos.prototypes, feats)
            gallery_ids = ds.image_ids[gal]
            rankings, relevance = [], []
            for row, cls in enumerate(classes):
                order = rank_candidates(sims[row], gallery_ids)
                rankings.append(RankedResult(int(cls), gallery_ids[order], sims[row][order]))
                relevance.append(set(gallery_ids[labels == cls].tolist()))
            report.cmc = metric_cmc(rankings, relevance, top)
            report.mAP = metric_map(rankings, relevance)
            report.num_queries = len(rankings)
        report.num_gallery = int(gal.size)
        report.num_identities = int(len(classes))
        return report

    if gallery_is_probe:
        gal = ds.indices("gallery", "probe")
        probes = gal
    else:
        probes = ds.indices("probe")
        if probes.size == 0:
            raise ValueError("dataset has no probe images")
    g_feats = embed_features(model, ds.features[gal])
    q_feats = embed_features(model, ds.features[probes])
    gallery_ids = ds.image_ids[gal]
    gallery_idents = ds.identities[gal]
    rankings, relevance = [], []
    for f, row in zip(q_feats, probes):
        qid = int(ds.image_ids[row])
        exclude = (qid,) if gallery_is_probe else ()
        res = retrieve_i2i(f, g_feats, gallery_ids, query_id=qid, exclude=exclude)
        rankings.append(res)
        rel = gallery_ids[(gallery_idents == ds.identities[row]) & (gallery_ids != qid)]
        relevance.append(set(rel.tolist()))
    report.cmc = metric_cmc(rankings, relevance, top)
    report.mAP = metric_map(rankings, relevance)
    report.num_queries = len(rankings)
    report.num_gallery = int(gal.size)
    report.num_identities = int(len(set(ds.identities[probes].tolist())))
    return report


def check_compatible(ckpt, ds: Dataset) -> None:
    """Refuse a dataset whose attribute count or feature shape differs from the checkpoint's."""
    spec = ckpt.model.spec
    want = (spec.num_attributes, spec.channels)
    have = (ds.num_attributes, int(ds.feature_shape[0]))
    if want != have:
        raise ShapeMismatch(
            f"checkpoint expects Q={want[0]} attributes and C={want[1]} channels "
            f"(config {ckpt.config_hash}); dataset has Q={have[0]} and C={have[1]}"
        )


def evaluate_checkpoint(protocol: str, ckpt, ds: Dataset, top: Sequence[int] = DEFAULT_TOP, **kw) -> MetricsReport:
    """``evaluate`` with provenance and the disjointness guard taken from a checkpoint."""
    check_compatible(ckpt, ds)
    report = evaluate(
        protocol,
        ckpt.model,
        ds,
        top=top,
        train_identities=ckpt.meta.get("train_identities", []),
        seed=ckpt.config.seed,
        cfg_hash=ckpt.config_hash,
        **kw,
    )
    return report
