"""Evaluation metrics, modality-importance experiment, and the SRS baseline.

AUC is rank-based (Mann-Whitney with average ranks for ties) and is
checked in the test suite against brute-force pair counting. The
importance experiment projects every modality of the query and retrieved
packages to a common dimension, trains a Gini random forest, and sums
per-dimension importances back into modality blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.ensemble import RandomForestClassifier

from .embedding import FeatureBundle, zero_modality
from .packages import MODALITIES, Package, ValidationError
from .retrieval import ReferenceIndex, top1_cluster_accuracy


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve; positives are the tampered class (label 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc requires both classes present")
    ranks = rankdata(scores, method="average")
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def f1_scores(labels: Sequence[int], predictions: Sequence[int]) -> tuple[float, float]:
    """(F1 tampered, F1 clean); tampered is label 1. Zero denominators give 0."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)

    def f1(positive: int) -> float:
        tp = int(np.sum((predictions == positive) & (labels == positive)))
        fp = int(np.sum((predictions == positive) & (labels != positive)))
        fn = int(np.sum((predictions != positive) & (labels == positive)))
        denom = 2 * tp + fp + fn
        return 2.0 * tp / denom if denom else 0.0

    return f1(1), f1(0)


def jaccard(a: Iterable, b: Iterable) -> float:
    """|A n B| / |A u B|; two empty sets overlap fully by convention."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def srs_score(query: FeatureBundle, index: ReferenceIndex, k: int = 10) -> float:
    """Semantic-retrieval integrity score: mean pairwise Jaccard of the
    per-modality top-k id sets. High overlap means the modalities agree,
    which indicates a clean package."""
    if k < 1:
        raise ValidationError("srs_score: k must be >= 1")
    sets = [set(index.retrieve(query, modalities=[m], k=k).ids()) for m in MODALITIES]
    pairs = [(0, 1), (0, 2), (1, 2)]
    return float(np.mean([jaccard(sets[i], sets[j]) for i, j in pairs]))


def random_projection(X: np.ndarray, L: int, seed: int) -> np.ndarray:
    """Gaussian random projection to L dims; entries have variance 1/L."""
    X = np.asarray(X, dtype=np.float64)
    if L < 1:
        raise ValidationError("random_projection: L must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    R = rng.standard_normal((X.shape[1], L)) / np.sqrt(L)
    return X @ R


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    trees: int = 50,
    max_depth: int = 8,
    seed: int = 0,
) -> tuple[RandomForestClassifier, np.ndarray]:
    """Bagged Gini forest with sqrt-feature subsampling; returns normalized importances."""
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ValidationError("train_forest requires both classes in y")
    forest = RandomForestClassifier(
        n_estimators=trees,
        criterion="gini",
        max_depth=max_depth,
        max_features="sqrt",
        bootstrap=True,
        random_state=seed,
        n_jobs=1,
    )
    forest.fit(X, y)
    importances = forest.feature_importances_.astype(np.float64)
    total = importances.sum()
    if total > 0:
        importances = importances / total
    return forest, importances


@dataclass(frozen=True)
class ImportanceReport:
    """Mean per-modality Gini importance, split by query / retrieved side."""

    L: int
    trials: int
    query: dict[str, float]
    retrieved: dict[str, float]

    def by_modality(self) -> dict[str, float]:
        return {m: self.query[m] + self.retrieved[m] for m in MODALITIES}


@dataclass(frozen=True)
class PairedFeatures:
    """Paired (query, retrieved) modality features plus tamper labels."""

    query: dict[str, np.ndarray]  # modality -> (n, d_m)
    retrieved: dict[str, np.ndarray]
    labels: np.ndarray  # 1 = manipulated


def collect_pairs(
    queries: Sequence[Package],
    bundles: Mapping[str, FeatureBundle],
    index: ReferenceIndex,
) -> PairedFeatures:
    """Top-1 retrieve each query and stack per-modality features for both sides."""
    q_rows = {m: [] for m in MODALITIES}
    r_rows = {m: [] for m in MODALITIES}
    labels = []
    ref_bundle_cache: dict[str, int] = {pid: i for i, pid in enumerate(index.ids)}
    for q in queries:
        top = index.retrieve(bundles[q.id], k=1).top_id
        for m in MODALITIES:
            q_rows[m].append(bundles[q.id].modality(m))
            r_rows[m].append(index.matrices[m][ref_bundle_cache[top]])
        labels.append(1 if q.integrity_label == "manipulated" else 0)
    return PairedFeatures(
        query={m: np.stack(q_rows[m]) for m in MODALITIES},
        retrieved={m: np.stack(r_rows[m]) for m in MODALITIES},
        labels=np.array(labels),
    )


def modality_importance(
    pairs: PairedFeatures,
    L: int = 64,
    trials: int = 30,
    seed: int = 0,
    trees: int = 50,
    max_depth: int = 8,
) -> ImportanceReport:
    """Repeated random-projection + forest experiment, importances averaged over trials.

    Per trial, every modality block (query and retrieved sides separately)
    is projected to L dims, the blocks are concatenated, a forest is
    trained on manipulated-vs-clean, and per-dimension importances are
    summed within each block.
    """
    sides = [("q", pairs.query), ("r", pairs.retrieved)]
    sums = {side: {m: 0.0 for m in MODALITIES} for side, _ in sides}
    for trial in range(trials):
        blocks = []
        keys = []
        for si, (side, feats) in enumerate(sides):
            for mi, m in enumerate(MODALITIES):
                proj_seed = ((seed + trial) * 100 + si * 10 + mi) * 2 + 1
                blocks.append(random_projection(feats[m], L, proj_seed))
                keys.append((side, m))
        X = np.concatenate(blocks, axis=1)
        _, importances = train_forest(X, pairs.labels, trees=trees, max_depth=max_depth, seed=seed + trial)
        for bi, (side, m) in enumerate(keys):
            sums[side][m] += float(importances[bi * L : (bi + 1) * L].sum())
    return ImportanceReport(
        L=L,
        trials=trials,
        query={m: sums["q"][m] / trials for m in MODALITIES},
        retrieved={m: sums["r"][m] / trials for m in MODALITIES},
    )


# --- evaluation protocol -------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    auc: float
    f1_tampered: float
    f1_clean: float
    retrieval_top1: dict[str, float]  # manipulated / unmanipulated / overall
    counts: dict[str, int]

    def lines(self) -> list[str]:
        out = [
            f"auc\t{self.auc!r}",
            f"f1_tampered\t{self.f1_tampered!r}",
            f"f1_clean\t{self.f1_clean!r}",
        ]
        for part in ("manipulated", "unmanipulated", "overall"):
            out.append(f"retrieval_top1_{part}\t{self.retrieval_top1[part]!r}")
        for key in sorted(self.counts):
            out.append(f"{key}\t{self.counts[key]}")
        return out


class DetectorScorer:
    """Adapts a fitted detector to the evaluation protocol."""

    def __init__(self, detector, ref_bundles: Mapping[str, FeatureBundle]):
        self.detector = detector
        self.ref_bundles = ref_bundles

    def tamper_scores(
        self,
        query_ids: Sequence[str],
        bundles: Mapping[str, FeatureBundle],
        index: ReferenceIndex | None,
        missing: str | None = None,
    ) -> np.ndarray:
        outputs = self.detector.predict_packages(
            [bundles[q] for q in query_ids],
            index,
            ref_bundles=self.ref_bundles,
            query_ids=list(query_ids),
            missing=missing,
        )
        return np.array([o.tamper_score for o in outputs])


class SRSScorer:
    """Baseline scorer: tamper score = 1 - retrieval-overlap integrity score."""

    def __init__(self, k: int = 10):
        self.k = k

    def tamper_scores(
        self,
        query_ids: Sequence[str],
        bundles: Mapping[str, FeatureBundle],
        index: ReferenceIndex,
        missing: str | None = None,
    ) -> np.ndarray:
        if missing is not None:
            zeroed = {
                pid: i for i, pid in enumerate(index.ids)
            }  # rebuild matrices with the modality zeroed
            matrices = {m: v.copy() for m, v in index.matrices.items()}
            matrices[missing][:] = 0.0
            норms = None
            index = ReferenceIndex(
                ids=index.ids,
                matrices=matrices,
                norms={m: np.linalg.norm(v, axis=1) for m, v in matrices.items()},
                modalities=index.modalities,
                gps_sim=index.gps_sim,
            )
        return np.array([1.0 - srs_score(bundles[q], index, self.k) for q in query_ids])


def evaluate_run(
    scorer,
    test_packages: Sequence[Package],
    bundles: Mapping[str, FeatureBundle],
    index: ReferenceIndex,
    ref_clusters: Mapping[str, int | None],
    missing: str | None = None,
    threshold: float = 0.5,
) -> EvalReport:
    """Score the test split and assemble the full evaluation report.

    With ``missing`` set, the scorer sees retrieved packages with that
    modality zeroed; retrieval-accuracy diagnostics always use intact
    features.
    """
    query_ids = [p.id for p in test_packages]
    labels = np.array([1 if p.integrity_label == "manipulated" else 0 for p in test_packages])
    scores = scorer.tamper_scores(query_ids, bundles, index, missing=missing)
    predictions = (scores >= threshold).astype(int)
    f1_t, f1_c = f1_scores(labels, predictions)
    report = EvalReport(
        auc=roc_auc(scores, labels),
        f1_tampered=f1_t,
        f1_clean=f1_c,
        retrieval_top1=top1_cluster_accuracy(test_packages, bundles, index, ref_clusters),
        counts={
            "n_test": len(test_packages),
            "n_tampered": int(labels.sum()),
            "n_clean": int((1 - labels).sum()),
        },
    )
    return report
