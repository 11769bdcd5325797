"""Embedding providers and per-package feature assembly.

Two built-in providers cover the pretrained extractors this toolkit
deliberately keeps out of process: a deterministic hash-based token
embedder (text) and a loader for precomputed image feature files. Every
downstream consumer sees only :class:`FeatureBundle`, so providers are
interchangeable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .packages import Package, ValidationError, normalize_gps


@dataclass
class FeatureBundle:
    """Per-modality numeric features for one package.

    A missing modality is an all-zero vector with its presence flag off;
    the network only ever sees the zero vector, the flag exists for logs
    and protocol checks.
    """

    image: np.ndarray
    text_tokens: np.ndarray  # (num_tokens, d_txt); zero rows allowed
    text_pooled: np.ndarray
    gps: np.ndarray
    present: dict[str, bool] = field(
        default_factory=lambda: {"image": True, "text": True, "gps": True}
    )

    def copy(self) -> "FeatureBundle":
        return FeatureBundle(
            image=self.image.copy(),
            text_tokens=self.text_tokens.copy(),
            text_pooled=self.text_pooled.copy(),
            gps=self.gps.copy(),
            present=dict(self.present),
        )

    def modality(self, name: str) -> np.ndarray:
        if name == "image":
            return self.image
        if name == "text":
            return self.text_pooled
        if name == "gps":
            return self.gps
        raise KeyError(f"unknown modality {name!r}")


def zero_modality(bundle: FeatureBundle, name: str) -> FeatureBundle:
    """Copy of ``bundle`` with one modality zeroed and flagged absent."""
    out = bundle.copy()
    if name == "image":
        out.image[:] = 0.0
    elif name == "text":
        out.text_tokens = np.zeros((0, out.text_tokens.shape[1]))
        out.text_pooled[:] = 0.0
    elif name == "gps":
        out.gps[:] = 0.0
    else:
        raise KeyError(f"unknown modality {name!r}")
    out.present[name] = False
    return out


def check_bundle(bundle: FeatureBundle, d_img: int, d_txt: int) -> None:
    """Validate dims and finiteness against the corpus-level configuration."""
    if bundle.image.shape != (d_img,):
        raise ValidationError(f"image feature shape {bundle.image.shape} != ({d_img},)")
    if bundle.text_pooled.shape != (d_txt,):
        raise ValidationError(f"pooled text shape {bundle.text_pooled.shape} != ({d_txt},)")
    if bundle.text_tokens.ndim != 2 or bundle.text_tokens.shape[1] != d_txt:
        raise ValidationError(f"token matrix shape {bundle.text_tokens.shape} incompatible with d_txt={d_txt}")
    if bundle.gps.shape != (2,):
        raise ValidationError(f"gps vector shape {bundle.gps.shape} != (2,)")
    for name in ("image", "text_tokens", "text_pooled", "gps"):
        if not np.all(np.isfinite(getattr(bundle, name))):
            raise ValidationError(f"non-finite entries in {name}")


@dataclass(frozen=True)
class EmbeddingConfig:
    """Deterministic embedding setup; fully determines hash-based vectors."""

    d_txt: int = 32
    d_img: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_txt <= 0 or self.d_img <= 0:
            raise ValidationError("embedding dims must be positive")

    def to_dict(self) -> dict:
        return {"kind": "hash_tokens", "d_txt": self.d_txt, "d_img": self.d_img, "seed": self.seed}

    @staticmethod
    def from_dict(doc: Mapping) -> "EmbeddingConfig":
        return EmbeddingConfig(
            d_txt=int(doc["d_txt"]), d_img=int(doc["d_img"]), seed=int(doc["seed"])
        )


def _token_rng(token: str, seed: int) -> np.random.Generator:
    digest = hashlib.blake2b(
        f"{seed}\x1f{token}".encode("utf-8"), digest_size=8
    ).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "big")))


def hash_embed_token(token: str, cfg: EmbeddingConfig) -> np.ndarray:
    """Deterministic pseudo-normal embedding keyed by (seed, lowercased token).

    Entries are drawn from a unit-variance stream and scaled by 1/sqrt(d)
    so the expected squared norm is 1.
    """
    if not token:
        raise ValidationError("cannot embed an empty token")
    rng = _token_rng(token.lower(), cfg.seed)
    return rng.standard_normal(cfg.d_txt) / np.sqrt(cfg.d_txt)


def embed_tokens(tokens: Iterable[str], cfg: EmbeddingConfig) -> np.ndarray:
    rows = [hash_embed_token(t, cfg) for t in tokens]
    if not rows:
        return np.zeros((0, cfg.d_txt))
    return np.stack(rows)


def pool_average(token_matrix: np.ndarray) -> tuple[np.ndarray, bool]:
    """Arithmetic mean over token rows; empty input pools to zero, flagged absent."""
    token_matrix = np.asarray(token_matrix, dtype=np.float64)
    if token_matrix.ndim != 2:
        raise ValidationError(f"expected a 2-d token matrix, got shape {token_matrix.shape}")
    if token_matrix.shape[0] == 0:
        return np.zeros(token_matrix.shape[1]), False
    return token_matrix.mean(axis=0), True


# --- precomputed image features ----------------------------------------------

def save_precomputed(features: Mapping[str, np.ndarray], dim: int, path: str | Path) -> None:
    """Write the documented feature-file format: ``dim=<D>`` header, then id + floats."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"dim={dim}\n")
        for pid in features:
            vec = np.asarray(features[pid], dtype=np.float64)
            if vec.shape != (dim,):
                raise ValidationError(f"feature for {pid!r} has shape {vec.shape}, want ({dim},)")
            fh.write(pid + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def load_precomputed(path: str | Path, ids: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Load precomputed features, optionally restricted to ``ids``.

    Raises:
        ValidationError: malformed header or a row whose width disagrees
            with the header (error names the line number).
        KeyError: a requested id is absent (error names the id).
    """
    path = Path(path)
    table: dict[str, np.ndarray] = {}
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise ValidationError(f"{path}:1: expected 'dim=<D>' header, got {header!r}")
        try:
            dim = int(header[4:])
        except ValueError as exc:
            raise ValidationError(f"{path}:1: bad dimension in header {header!r}") from exc
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            pid, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValidationError(
                    f"{path}:{lineno}: row for {pid!r} has {len(values)} values, header says {dim}"
                )
            vec = np.array([float(v) for v in values], dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"{path}:{lineno}: non-finite feature value")
            table[pid] = vec
    if ids is None:
        return table
    out = {}
    for pid in ids:
        if pid not in table:
            raise KeyError(f"no precomputed feature for package id {pid!r}")
        out[pid] = table[pid]
    return out


class FeatureExtractor:
    """Transformer from packages to feature bundles.

    Follows the fit/transform idiom: ``fit`` is stateless here (providers
    are fully configured up front) and returns self so the extractor drops
    into sklearn-style pipelines.
    """

    def __init__(self, config: EmbeddingConfig, image_features: Mapping[str, np.ndarray] | None = None):
        self.config = config
        self.image_features = dict(image_features) if image_features else {}

    def get_params(self, deep: bool = True) -> dict:
        return {"config": self.config, "image_features": self.image_features}

    def fit(self, packages=None, y=None) -> "FeatureExtractor":
        return self

    def transform_one(self, package: Package) -> FeatureBundle:
        cfg = self.config
        tokens = embed_tokens(package.tokens, cfg)
        pooled, has_text = pool_average(tokens)
        image = self.image_features.get(package.id)
        has_image = image is not None
        if image is None:
            image = np.zeros(cfg.d_img)
        else:
            image = np.asarray(image, dtype=np.float64)
        bundle = FeatureBundle(
            image=image,
            text_tokens=tokens,
            text_pooled=pooled,
            gps=normalize_gps(*package.gps),
            present={"image": has_image, "text": has_text, "gps": True},
        )
        check_bundle(bundle, cfg.d_img, cfg.d_txt)
        return bundle

    def transform(self, packages: Iterable[Package]) -> dict[str, FeatureBundle]:
        return {p.id: self.transform_one(p) for p in packages}
