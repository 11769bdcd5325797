"""Multitask integrity detector with a gated related-package branch.

Architecture: per-modality balancing layers project image/text/gps
features to a common width and concatenate. A relationship Siamese net
and a manipulation Siamese net (shared tower per net, combined as
[f_q, f_r, |f_q - f_r|]) read the balanced query/retrieved vectors; a
forget gate driven by the relationship net scales the manipulation
feature before the integrity head sees it. A single-package branch
assesses the query alone; with the related branch disabled the model
degenerates to single-package assessment (SPA).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .analysis import roc_auc
from .embedding import FeatureBundle, zero_modality
from .nn import Tensor
from .packages import MODALITIES, Package, ValidationError
from .retrieval import ReferenceIndex

GATE_MODES = ("fixed", "learnable")
POOLING_MODES = ("average", "attention")
MANIP_CLASSES = ("clean", "manipulated", "unknown")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class ModelOutput:
    """All head outputs for one query."""

    integrity_prob: float  # probability the query is clean
    relationship_prob: float | None
    manipulation_probs: tuple[float, float, float] | None  # over MANIP_CLASSES
    retrieved_id: str | None

    @property
    def tamper_score(self) -> float:
        return 1.0 - self.integrity_prob


@dataclass(frozen=True)
class PairSample:
    """One training/eval example: query plus its retrieved reference package."""

    query_id: str
    query: FeatureBundle
    retrieved_id: str | None
    retrieved: FeatureBundle | None
    label_clean: int  # 1 = clean, 0 = manipulated (always the query's own label)
    label_related: int | None = None  # 1 = same cluster
    label_manip: int | None = None  # index into MANIP_CLASSES


@dataclass
class ForgetGate:
    mode: str
    W: Tensor | None = None
    b: Tensor | None = None

    def __post_init__(self) -> None:
        if self.mode not in GATE_MODES:
            raise ValidationError(f"gate mode {self.mode!r} not one of {GATE_MODES}")
        if (self.mode == "learnable") != (self.W is not None and self.b is not None):
            raise ValidationError("learnable gate requires W and b; fixed gate forbids them")


def attention_pool(token_matrix: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    """Additive attention over token vectors; returns a (1, d_txt) tensor.

    Scores are u' tanh(W h + c) per token, softmax-normalized. An empty
    matrix falls back to the zero vector (missing text).
    """
    token_matrix = np.asarray(token_matrix, dtype=np.float64)
    if token_matrix.shape[0] == 0:
        return Tensor(np.zeros((1, token_matrix.shape[1])))
    h = Tensor(token_matrix)
    scores = nn.matmul(nn.tanh(nn.linear(h, params["attention.W"], params["attention.c"])), params["attention.u"])
    alpha = nn.softmax(scores, axis=0)
    return nn.sum_axis(nn.mul(alpha, h), axis=0, keepdims=True)


def balance(img: Tensor, txt: Tensor, gps: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Project each modality to the common width and concatenate (image, text, gps)."""
    blocks = [
        nn.relu(nn.linear(img, params["balance.image.W"], params["balance.image.b"])),
        nn.relu(nn.linear(txt, params["balance.text.W"], params["balance.text.b"])),
        nn.relu(nn.linear(gps, params["balance.gps.W"], params["balance.gps.b"])),
    ]
    return nn.concat(blocks, axis=1)


def _siamese(prefix: str, q_bal: Tensor, r_bal: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    fq = nn.relu(nn.linear(q_bal, params[f"{prefix}.tower.W"], params[f"{prefix}.tower.b"]))
    fr = nn.relu(nn.linear(r_bal, params[f"{prefix}.tower.W"], params[f"{prefix}.tower.b"]))
    comb = nn.concat([fq, fr, nn.absval(nn.sub(fq, fr))], axis=1)
    return nn.relu(nn.linear(comb, params[f"{prefix}.combine.W"], params[f"{prefix}.combine.b"]))


def related_forward(
    q_bal: Tensor, r_bal: Tensor, params: Mapping[str, Tensor]
) -> tuple[Tensor, Tensor, Tensor]:
    """Run both Siamese nets; returns (relationship_prob, rel_feat, manip_feat_raw)."""
    rel_feat = _siamese("rel", q_bal, r_bal, params)
    rel_prob = nn.sigmoid(nn.linear(rel_feat, params["rel.head.W"], params["rel.head.b"]))
    manip_feat = _siamese("man", q_bal, r_bal, params)
    return rel_prob, rel_feat, manip_feat


def manipulation_head(manip_feat: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """3-class softmax over (clean, manipulated, unknown) on the raw manipulation feature."""
    return nn.softmax(nn.linear(manip_feat, params["man.head.W"], params["man.head.b"]), axis=1)


def apply_gate(gate: ForgetGate, rel_prob: Tensor, rel_feat: Tensor, manip_feat: Tensor) -> Tensor:
    """Scale the manipulation feature by the relationship signal.

    Fixed mode multiplies by the scalar relationship probability, so an
    unrelated retrieval (prob 0) zeroes the branch exactly. Learnable
    mode gates elementwise with sigmoid(W rel_feat + b).
    """
    if gate.mode == "fixed":
        return nn.mul(rel_prob, manip_feat)
    return nn.mul(manip_feat, nn.sigmoid(nn.linear(rel_feat, gate.W, gate.b)))


def single_forward(q_bal: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return nn.relu(nn.linear(q_bal, params["single.W"], params["single.b"]))


def integrity_forward(
    gated_feat: Tensor | None, single_feat: Tensor, params: Mapping[str, Tensor]
) -> Tensor:
    """Affine + sigmoid on the concatenated features; no hidden layers."""
    x = single_feat if gated_feat is None else nn.concat([gated_feat, single_feat], axis=1)
    return nn.sigmoid(nn.linear(x, params["integrity.W"], params["integrity.b"]))


def multitask_loss(
    p_clean: Tensor,
    rel_prob: Tensor | None,
    manip_probs: Tensor | None,
    y_clean: np.ndarray,
    y_rel: np.ndarray | None,
    y_manip: np.ndarray | None,
    lambda_rel: float = 1.0,
    lambda_man: float = 1.0,
) -> Tensor:
    """Integrity BCE plus weighted relationship BCE and 3-class manipulation CE."""
    total = nn.binary_cross_entropy(p_clean, y_clean)
    if rel_prob is not None and lambda_rel != 0.0:
        total = nn.add(total, nn.scale(nn.binary_cross_entropy(rel_prob, y_rel), lambda_rel))
    if manip_probs is not None and lambda_man != 0.0:
        total = nn.add(total, nn.scale(nn.categorical_cross_entropy(manip_probs, y_manip), lambda_man))
    return total


def build_training_pairs(
    queries: Sequence[Package],
    bundles: Mapping[str, FeatureBundle],
    index: ReferenceIndex | None,
    ref_clusters: Mapping[str, int | None],
    unrelated_rate: float = 0.0,
    seed: int = 0,
    related_branch: bool = True,
) -> list[PairSample]:
    """Pair each query with its top-1 retrieval and derive multitask labels.

    Relationship label is 1 iff retrieved and query share a ground-truth
    cluster; the manipulation label falls back to `unknown` for unrelated
    retrievals. A fraction ``unrelated_rate`` of queries is duplicated
    with a uniformly sampled foreign-cluster reference package to balance
    the relationship classes.
    """
    pairs: list[PairSample] = []
    if not related_branch:
        for q in queries:
            pairs.append(
                PairSample(
                    query_id=q.id,
                    query=bundles[q.id],
                    retrieved_id=None,
                    retrieved=None,
                    label_clean=1 if q.integrity_label == "clean" else 0,
                )
            )
        return pairs

    if index is None or len(index) == 0:
        raise ValidationError("build_training_pairs: empty reference index")

    def make(q: Package, rid: str, related: int) -> PairSample:
        manip = (1 if q.integrity_label == "manipulated" else 0) if related else 2
        return PairSample(
            query_id=q.id,
            query=bundles[q.id],
            retrieved_id=rid,
            retrieved=bundles[rid],
            label_clean=1 if q.integrity_label == "clean" else 0,
            label_related=related,
            label_manip=manip,
        )

    for q in queries:
        top = index.retrieve(bundles[q.id], k=1).top_id
        related = int(
            q.cluster_id is not None and ref_clusters.get(top) == q.cluster_id
        )
        pairs.append(make(q, top, related))

    n_inject = int(round(unrelated_rate * len(queries)))
    if n_inject > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
        chosen = rng.choice(len(queries), size=min(n_inject, len(queries)), replace=False)
        ref_ids = list(index.ids)
        for qi in sorted(chosen):
            q = queries[int(qi)]
            foreign = [r for r in ref_ids if ref_clusters.get(r) != q.cluster_id]
            if not foreign:
                continue
            rid = foreign[int(rng.integers(len(foreign)))]
            pairs.append(make(q, rid, 0))
    return pairs


class RepurposingDetector(BaseEstimator):
    """Trainable integrity model over (query, retrieved) feature-bundle pairs.

    sklearn-style estimator: hyperparameters in the constructor,
    ``fit(train_pairs, val_pairs)`` learns parameters with minibatch Adam
    on the multitask loss, ``predict_proba`` returns the probability that
    a query is clean. Fully deterministic given ``seed``.
    """

    def __init__(
        self,
        d_balance: int = 32,
        hidden: int = 32,
        gate: str = "learnable",
        text_pooling: str = "attention",
        related_branch: bool = True,
        attention_dim: int | None = None,
        lambda_rel: float = 1.0,
        lambda_man: float = 1.0,
        miss_rate: float = 0.0,
        learning_rate: float = 0.001,
        epochs: int = 60,
        batch_size: int = 16,
        patience: int = 10,
        seed: int = 0,
    ):
        self.d_balance = d_balance
        self.hidden = hidden
        self.gate = gate
        self.text_pooling = text_pooling
        self.related_branch = related_branch
        self.attention_dim = attention_dim
        self.lambda_rel = lambda_rel
        self.lambda_man = lambda_man
        self.miss_rate = miss_rate
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.seed = seed

    # -- construction ----------------------------------------------------

    def _param_specs(self, d_img: int, d_txt: int) -> list[nn.ParamSpec]:
        db, h = self.d_balance, self.hidden
        a = self.attention_dim or d_txt
        specs = [
            nn.ParamSpec("balance.image.W", (db, d_img), "he"),
            nn.ParamSpec("balance.image.b", (db,), "zeros"),
            nn.ParamSpec("balance.text.W", (db, d_txt), "he"),
            nn.ParamSpec("balance.text.b", (db,), "zeros"),
            nn.ParamSpec("balance.gps.W", (db, 2), "he"),
            nn.ParamSpec("balance.gps.b", (db,), "zeros"),
        ]
        if self.text_pooling == "attention":
            specs += [
                nn.ParamSpec("attention.W", (a, d_txt), "glorot"),
                nn.ParamSpec("attention.c", (a,), "zeros"),
                nn.ParamSpec("attention.u", (a, 1), "glorot"),
            ]
        if self.related_branch:
            for prefix in ("rel", "man"):
                specs += [
                    nn.ParamSpec(f"{prefix}.tower.W", (h, 3 * db), "he"),
                    nn.ParamSpec(f"{prefix}.tower.b", (h,), "zeros"),
                    nn.ParamSpec(f"{prefix}.combine.W", (h, 3 * h), "he"),
                    nn.ParamSpec(f"{prefix}.combine.b", (h,), "zeros"),
                ]
            specs += [
                nn.ParamSpec("rel.head.W", (1, h), "glorot"),
                nn.ParamSpec("rel.head.b", (1,), "zeros"),
                nn.ParamSpec("man.head.W", (3, h), "glorot"),
                nn.ParamSpec("man.head.b", (3,), "zeros"),
            ]
            if self.gate == "learnable":
                specs += [
                    nn.ParamSpec("gate.W", (h, h), "glorot"),
                    nn.ParamSpec("gate.b", (h,), "ones"),  # starts mostly open
                ]
        specs += [
            nn.ParamSpec("single.W", (h, 3 * db), "he"),
            nn.ParamSpec("single.b", (h,), "zeros"),
            nn.ParamSpec("integrity.W", (1, 2 * h if self.related_branch else h), "glorot"),
            nn.ParamSpec("integrity.b", (1,), "zeros"),
        ]
        return specs

    def _validate_config(self) -> None:
        if self.gate not in GATE_MODES:
            raise ValidationError(f"gate must be one of {GATE_MODES}")
        if self.text_pooling not in POOLING_MODES:
            raise ValidationError(f"text_pooling must be one of {POOLING_MODES}")
        if self.d_balance <= 0 or self.hidden <= 0:
            raise ValidationError("dims must be positive")
        for name in ("miss_rate",):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1]")

    def forget_gate(self) -> ForgetGate:
        if self.gate == "learnable":
            return ForgetGate("learnable", self.params_["gate.W"], self.params_["gate.b"])
        return ForgetGate("fixed")

    # -- forward ----------------------------------------------------------

    def _pooled_text(self, bundle: FeatureBundle, params: Mapping[str, Tensor]) -> Tensor:
        if self.text_pooling == "attention":
            return attention_pool(bundle.text_tokens, params)
        return Tensor(bundle.text_pooled.reshape(1, -1))

    def _balanced(self, bundles: Sequence[FeatureBundle], params: Mapping[str, Tensor]) -> Tensor:
        img = Tensor(np.stack([b.image for b in bundles]))
        gps = Tensor(np.stack([b.gps for b in bundles]))
        txt = nn.concat([self._pooled_text(b, params) for b in bundles], axis=0)
        return balance(img, txt, gps, params)

    def forward(
        self,
        batch: Sequence[PairSample],
        params: Mapping[str, Tensor] | None = None,
        retrieved_override: Sequence[FeatureBundle] | None = None,
    ) -> dict[str, Tensor | None]:
        """Full forward pass on a batch of pair samples; returns head tensors."""
        params = params if params is not None else self.params_
        q_bal = self._balanced([s.query for s in batch], params)
        single_feat = single_forward(q_bal, params)
        if not self.related_branch:
            p_clean = integrity_forward(None, single_feat, params)
            return {"p_clean": p_clean, "rel_prob": None, "manip_probs": None}
        retrieved = retrieved_override or [s.retrieved for s in batch]
        if any(r is None for r in retrieved):
            raise ValidationError("related-branch forward requires retrieved bundles")
        r_bal = self._balanced(retrieved, params)
        rel_prob, rel_feat, manip_feat = related_forward(q_bal, r_bal, params)
        gate = ForgetGate("fixed") if self.gate == "fixed" else ForgetGate(
            "learnable", params["gate.W"], params["gate.b"]
        )
        gated = apply_gate(gate, rel_prob, rel_feat, manip_feat)
        p_clean = integrity_forward(gated, single_feat, params)
        return {
            "p_clean": p_clean,
            "rel_prob": rel_prob,
            "manip_probs": manipulation_head(manip_feat, params),
        }

    def batch_loss(
        self,
        batch: Sequence[PairSample],
        params: Mapping[str, Tensor] | None = None,
        retrieved_override: Sequence[FeatureBundle] | None = None,
    ) -> Tensor:
        out = self.forward(batch, params=params, retrieved_override=retrieved_override)
        y_clean = np.array([s.label_clean for s in batch], dtype=np.float64).reshape(-1, 1)
        if not self.related_branch:
            return multitask_loss(out["p_clean"], None, None, y_clean, None, None)
        y_rel = np.array([s.label_related for s in batch], dtype=np.float64).reshape(-1, 1)
        y_man = np.array([s.label_manip for s in batch], dtype=np.int64)
        return multitask_loss(
            out["p_clean"], out["rel_prob"], out["manip_probs"],
            y_clean, y_rel, y_man, self.lambda_rel, self.lambda_man,
        )

    # -- training ----------------------------------------------------------

    def fit(self, train_pairs: Sequence[PairSample], val_pairs: Sequence[PairSample] | None = None):
        self._validate_config()
        if not train_pairs:
            raise ValidationError("fit: empty training set")
        if self.related_branch and any(p.retrieved is None for p in train_pairs):
            raise ValidationError("fit: related-branch training requires retrieved bundles")
        first = train_pairs[0].query
        self.d_img_ = first.image.shape[0]
        self.d_txt_ = first.text_pooled.shape[0]
        self.params_ = nn.init_params(self._param_specs(self.d_img_, self.d_txt_), self.seed)
        shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 11])))
        dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 12])))
        adam = nn.AdamState(lr=self.learning_rate)
        self.history_ = []
        self.dropout_stats_ = {"presentations": 0, "zeroed": 0, "by_modality": {m: 0 for m in MODALITIES}}
        best_auc = -np.inf
        best_params: dict[str, np.ndarray] | None = None
        best_epoch = -1

        n = len(train_pairs)
        for epoch in range(self.epochs):
            order = shuffle_rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch_size):
                batch = [train_pairs[int(i)] for i in order[start : start + self.batch_size]]
                override = self._dropout_retrieved(batch, dropout_rng)
                loss = self.batch_loss(batch, retrieved_override=override)
                value = float(loss.value)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch starting {start}"
                    )
                grads = nn.backward(loss, self.params_)
                nn.adam_step(self.params_, grads, adam)
                epoch_loss += value * len(batch)
            epoch_loss /= n

            val_auc = float("nan")
            if val_pairs:
                scores = 1.0 - self.predict_proba(val_pairs)
                labels = np.array([1 - p.label_clean for p in val_pairs])
                val_auc = roc_auc(scores, labels)
                if val_auc > best_auc:
                    best_auc = val_auc
                    best_epoch = epoch
                    best_params = {k: t.value.copy() for k, t in self.params_.items()}
            self.history_.append({"epoch": epoch, "train_loss": epoch_loss, "val_auc": val_auc})
            if val_pairs and epoch - best_epoch > self.patience:
                break

        if best_params is not None:
            for k, t in self.params_.items():
                t.value = best_params[k]
        self.best_epoch_ = best_epoch if best_params is not None else len(self.history_) - 1
        return self

    def _dropout_retrieved(
        self, batch: Sequence[PairSample], rng: np.random.Generator
    ) -> list[FeatureBundle] | None:
        """Missing-modality training scheme: zero one random modality of a
        retrieved package with probability miss_rate per presentation."""
        if not self.related_branch:
            return None
        stats = self.dropout_stats_
        out = []
        for s in batch:
            stats["presentations"] += 1
            bundle = s.retrieved
            if self.miss_rate > 0.0 and rng.random() < self.miss_rate:
                m = MODALITIES[int(rng.integers(len(MODALITIES)))]
                bundle = zero_modality(bundle, m)
                stats["zeroed"] += 1
                stats["by_modality"][m] += 1
            out.append(bundle)
        return out

    # -- inference ----------------------------------------------------------

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise ValidationError("detector is not fitted; call fit() or load()")

    def predict_proba(self, pairs: Sequence[PairSample], chunk: int = 256) -> np.ndarray:
        """P(clean) per pair sample."""
        self._check_fitted()
        probs = []
        for start in range(0, len(pairs), chunk):
            out = self.forward(pairs[start : start + chunk])
            probs.append(out["p_clean"].value.reshape(-1))
        return np.concatenate(probs) if probs else np.zeros(0)

    def predict(self, pairs: Sequence[PairSample]) -> np.ndarray:
        """Predicted integrity label per pair, thresholding tamper score at 0.5."""
        p_clean = self.predict_proba(pairs)
        return np.where(1.0 - p_clean >= 0.5, "manipulated", "clean")

    def predict_output(self, pair: PairSample) -> ModelOutput:
        self._check_fitted()
        out = self.forward([pair])
        rel = out["rel_prob"]
        man = out["manip_probs"]
        return ModelOutput(
            integrity_prob=float(out["p_clean"].value.reshape(-1)[0]),
            relationship_prob=float(rel.value.reshape(-1)[0]) if rel is not None else None,
            manipulation_probs=tuple(man.value.reshape(-1).tolist()) if man is not None else None,
            retrieved_id=pair.retrieved_id,
        )

    def predict_packages(
        self,
        bundles: Sequence[FeatureBundle],
        index: ReferenceIndex | None,
        ref_bundles: Mapping[str, FeatureBundle] | None = None,
        query_ids: Sequence[str] | None = None,
        missing: str | None = None,
    ) -> list[ModelOutput]:
        """Retrieve top-1 for each query and run the full forward pass.

        ``missing`` zeroes that modality in every retrieved package before
        scoring (the missing-modality test protocol). SPA ignores the index.
        """
        self._check_fitted()
        ids = query_ids or [f"q{i}" for i in range(len(bundles))]
        outputs = []
        for pid, b in zip(ids, bundles):
            if not self.related_branch:
                pair = PairSample(pid, b, None, None, label_clean=1)
            else:
                if index is None or len(index) == 0:
                    raise ValidationError("predict requires a non-empty reference index")
                if ref_bundles is None:
                    raise ValidationError("predict with the related branch needs reference bundles")
                top = index.retrieve(b, k=1).top_id
                retrieved = ref_bundles[top]
                if missing is not None:
                    retrieved = zero_modality(retrieved, missing)
                pair = PairSample(pid, b, top, retrieved, label_clean=1)
            outputs.append(self.predict_output(pair))
        return outputs

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        self._check_fitted()
        meta = {
            "format": 1,
            "estimator": self.get_params(),
            "dims": {"d_img": int(self.d_img_), "d_txt": int(self.d_txt_)},
            "modality_order": list(MODALITIES),
        }
        nn.save_tensors(path, {k: t.value for k, t in self.params_.items()}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "RepurposingDetector":
        arrays, meta = nn.load_tensors(path)
        det = cls(**meta["estimator"])
        det.d_img_ = int(meta["dims"]["d_img"])
        det.d_txt_ = int(meta["dims"]["d_txt"])
        det.params_ = {
            spec.name: Tensor(arrays[spec.name])
            for spec in det._param_specs(det.d_img_, det.d_txt_)
        }
        det.history_ = []
        return det
