"""Reference-dataset index and multimodal similarity retrieval.

Scoring is exact brute force: a query's score against a reference package
is the sum of per-modality cosine similarities, and the top-1 package is
the argmax over the whole reference set. Ties break by ascending id so
results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import FeatureBundle
from .packages import MODALITIES, Package, ValidationError

GPS_SIMILARITIES = ("cosine", "neg_euclidean")


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero-norm inputs score 0 by convention."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"cosine: shape mismatch {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _modality_similarity(name: str, u: np.ndarray, v: np.ndarray, gps_sim: str) -> float:
    if name == "gps" and gps_sim == "neg_euclidean":
        return -float(np.linalg.norm(np.asarray(u) - np.asarray(v)))
    return cosine(u, v)


def score_pair(
    q: FeatureBundle,
    r: FeatureBundle,
    modalities: Sequence[str] = MODALITIES,
    gps_sim: str = "cosine",
) -> float:
    """Sum of per-modality similarities over the requested modality set (Eq. 1 inner sum)."""
    if not modalities:
        raise ValidationError("score_pair: empty modality set")
    total = 0.0
    for m in modalities:
        total += _modality_similarity(m, q.modality(m), r.modality(m), gps_sim)
    return total


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked ids with their similarity sums, plus the modalities used."""

    ranked: tuple[tuple[str, float], ...]
    modalities: tuple[str, ...]

    @property
    def top_id(self) -> str:
        return self.ranked[0][0]

    def ids(self) -> list[str]:
        return [pid for pid, _ in self.ranked]


@dataclass(frozen=True)
class ReferenceIndex:
    """Immutable, normalized feature store over the reference dataset."""

    ids: tuple[str, ...]
    matrices: dict[str, np.ndarray]  # modality -> (n, d)
    norms: dict[str, np.ndarray]  # modality -> (n,)
    modalities: tuple[str, ...]
    gps_sim: str = "cosine"

    def __len__(self) -> int:
        return len(self.ids)

    def check(self) -> None:
        n = len(self.ids)
        for m in self.modalities:
            if self.matrices[m].shape[0] != n:
                raise ValidationError(f"index matrix for {m!r} has wrong row count")
            recomputed = np.linalg.norm(self.matrices[m], axis=1)
            if not np.allclose(recomputed, self.norms[m], atol=1e-9, rtol=0.0):
                raise ValidationError(f"cached norms stale for modality {m!r}")

    def _scores(self, q: FeatureBundle, modalities: Sequence[str]) -> np.ndarray:
        n = len(self.ids)
        total = np.zeros(n)
        for m in modalities:
            if m not in self.matrices:
                raise ValidationError(f"index does not carry modality {m!r}")
            qv = np.asarray(q.modality(m), dtype=np.float64)
            mat = self.matrices[m]
            if m == "gps" and self.gps_sim == "neg_euclidean":
                total -= np.linalg.norm(mat - qv[None, :], axis=1)
                continue
            qn = float(np.linalg.norm(qv))
            if qn == 0.0:
                continue  # zero query vector scores 0 against everything
            denom = self.norms[m] * qn
            sims = np.zeros(n)
            nonzero = denom > 0.0
            sims[nonzero] = (mat[nonzero] @ qv) / denom[nonzero]
            total += sims
        return total

    def retrieve(self, q: FeatureBundle, modalities: Sequence[str] | None = None, k: int = 1) -> RetrievalResult:
        """Top-k by summed similarity, ordered descending, ties by ascending id."""
        if modalities is None:
            modalities = self.modalities
        if not modalities:
            raise ValidationError("retrieve: empty modality set")
        if k < 1:
            raise ValidationError(f"retrieve: k={k} must be >= 1")
        if len(self.ids) == 0:
            raise ValidationError("retrieve: empty reference index")
        scores = self._scores(q, modalities)
        ids_arr = np.array(self.ids)
        order = np.lexsort((ids_arr, -scores))[:k]
        ranked = tuple((str(ids_arr[i]), float(scores[i])) for i in order)
        return RetrievalResult(ranked=ranked, modalities=tuple(modalities))


def retrieve_top_k(
    q: FeatureBundle, index: ReferenceIndex, modalities: Sequence[str] | None = None, k: int = 1
) -> RetrievalResult:
    return index.retrieve(q, modalities=modalities, k=k)


def retrieve_per_modality(
    q: FeatureBundle, index: ReferenceIndex, modality: str, k: int = 1
) -> RetrievalResult:
    return index.retrieve(q, modalities=[modality], k=k)


class PackageRetriever:
    """Estimator-style wrapper: ``fit`` builds the immutable index, then query away.

    Parameters
    ----------
    modalities : which feature slots the index carries.
    gps_sim : 'cosine' follows the similarity metric literally; cosine on
        2-d coordinates is scale-invariant and degenerate near the origin,
        so 'neg_euclidean' is available as an alternative ranking score.
    """

    def __init__(self, modalities: Sequence[str] = MODALITIES, gps_sim: str = "cosine"):
        self.modalities = tuple(modalities)
        self.gps_sim = gps_sim

    def get_params(self, deep: bool = True) -> dict:
        return {"modalities": self.modalities, "gps_sim": self.gps_sim}

    def set_params(self, **params) -> "PackageRetriever":
        for k, v in params.items():
            setattr(self, k, v)
        return self

    def fit(self, bundles: Mapping[str, FeatureBundle], y=None) -> "PackageRetriever":
        if self.gps_sim not in GPS_SIMILARITIES:
            raise ValidationError(f"gps_sim must be one of {GPS_SIMILARITIES}")
        ids = tuple(bundles.keys())
        matrices: dict[str, np.ndarray] = {}
        norms: dict[str, np.ndarray] = {}
        for m in self.modalities:
            rows = [np.asarray(bundles[i].modality(m), dtype=np.float64) for i in ids]
            mat = np.stack(rows) if rows else np.zeros((0, 0))
            matrices[m] = mat
            norms[m] = np.linalg.norm(mat, axis=1) if rows else np.zeros(0)
        self.index_ = ReferenceIndex(
            ids=ids, matrices=matrices, norms=norms,
            modalities=self.modalities, gps_sim=self.gps_sim,
        )
        return self

    def retrieve(self, q: FeatureBundle, modalities: Sequence[str] | None = None, k: int = 1) -> RetrievalResult:
        self._check_fitted()
        return self.index_.retrieve(q, modalities=modalities, k=k)

    def predict(self, bundles: Iterable[FeatureBundle]) -> list[str]:
        """Top-1 reference id per query bundle, using all index modalities."""
        self._check_fitted()
        return [self.index_.retrieve(b, k=1).top_id for b in bundles]

    def _check_fitted(self) -> None:
        if not hasattr(self, "index_"):
            raise ValidationError("PackageRetriever is not fitted; call fit() first")


def top1_cluster_accuracy(
    queries: Sequence[Package],
    bundles: Mapping[str, FeatureBundle],
    index: ReferenceIndex,
    ref_cluster_by_id: Mapping[str, int | None],
    modalities: Sequence[str] | None = None,
) -> dict[str, float]:
    """Top-1 retrieval accuracy against ground-truth clusters.

    Reports the manipulated / unmanipulated / overall partition used by
    the retrieval-accuracy experiment. A hit means the retrieved package
    belongs to the query's own cluster.
    """
    hits = {"manipulated": 0, "unmanipulated": 0}
    totals = {"manipulated": 0, "unmanipulated": 0}
    for q in queries:
        part = "manipulated" if q.integrity_label == "manipulated" else "unmanipulated"
        totals[part] += 1
        top = index.retrieve(bundles[q.id], modalities=modalities, k=1).top_id
        if ref_cluster_by_id.get(top) is not None and ref_cluster_by_id[top] == q.cluster_id:
            hits[part] += 1
    out = {}
    for part in ("manipulated", "unmanipulated"):
        out[part] = hits[part] / totals[part] if totals[part] else 0.0
    total = totals["manipulated"] + totals["unmanipulated"]
    out["overall"] = (hits["manipulated"] + hits["unmanipulated"]) / total if total else 0.0
    return out
