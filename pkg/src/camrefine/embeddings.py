"""Embedding datasets: in-memory container, file formats, camera views, synthetic data.

Features are stored as float32 (the canonical on-disk width) with rows
length-normalized at ingestion; all downstream math upcasts to float64.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

BIN_MAGIC = b"EMB1"

# |row norm - 1| tolerated before a row is re-normalized at ingestion.
NORM_TOLERANCE = 1e-6


class EmbeddingParseError(ValueError):
    """A file failed validation; the message names the offending line or byte offset."""


def l2_normalize(features: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm (float64 result).

    Raises ValueError if any row has zero (or near-zero) norm.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {feats.shape}")
    norms = np.linalg.norm(feats, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ValueError(f"cannot normalize zero-norm row {bad[0]}")
    return feats / norms[:, None]


@dataclass(frozen=True)
class EmbeddingSet:
    """N feature vectors with camera ids and optional ground-truth identities.

    Immutable after construction; safe to share across threads.
    ``features`` rows are unit-norm float32, ``camera_ids`` covers every
    camera index in [0, num_cameras).
    """

    features: np.ndarray
    camera_ids: np.ndarray
    num_cameras: int
    identities: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        cams = np.asarray(self.camera_ids, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "camera_ids", cams)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        n = feats.shape[0]
        if cams.shape != (n,):
            raise ValueError(f"camera_ids length {cams.shape} does not match N={n}")
        if self.num_cameras < 1:
            raise ValueError("num_cameras must be >= 1")
        if cams.min() < 0 or cams.max() >= self.num_cameras:
            raise ValueError(
                f"camera ids must lie in [0, {self.num_cameras}), got range "
                f"[{cams.min()}, {cams.max()}]"
            )
        present = np.unique(cams)
        if present.size != self.num_cameras:
            missing = sorted(set(range(self.num_cameras)) - set(present.tolist()))
            raise ValueError(f"cameras {missing} have no items")
        if self.identities is not None:
            ids = np.asarray(self.identities, dtype=np.int64)
            object.__setattr__(self, "identities", ids)
            if ids.shape != (n,):
                raise ValueError(f"identities length {ids.shape} does not match N={n}")
        self.features.setflags(write=False)
        self.camera_ids.setflags(write=False)
        if self.identities is not None:
            self.identities.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def without_identities(self) -> "EmbeddingSet":
        """Label-stripped view handed to clustering/refinement/training code."""
        if self.identities is None:
            return self
        return EmbeddingSet(self.features, self.camera_ids, self.num_cameras, None)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic camera-shift generator."""

    num_identities: int
    cameras: int
    images_per_identity_per_camera: int
    dim: int
    identity_spread: float = 0.02
    camera_shift_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_identities", "cameras", "images_per_identity_per_camera", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.identity_spread < 0 or self.camera_shift_strength < 0:
            raise ValueError("spreads must be >= 0")


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingSet:
    """Generate a deterministic embedding set with per-camera domain shift.

    Each identity has a unit base vector; each camera applies a fixed random
    affine perturbation (mixing matrix + bias) scaled by
    ``camera_shift_strength``; each image adds isotropic Gaussian noise with
    per-coordinate std ``identity_spread``. Rows are length-normalized.
    """
    rng = np.random.default_rng(spec.seed)
    ids, cams, per, d = (
        spec.num_identities,
        spec.cameras,
        spec.images_per_identity_per_camera,
        spec.dim,
    )
    base = l2_normalize(rng.normal(size=(ids, d)))
    cam_mix = rng.normal(size=(cams, d, d)) / np.sqrt(d)
    cam_bias = rng.normal(size=(cams, d)) / np.sqrt(d)
    noise = rng.normal(size=(ids, cams, per, d))

    # rows ordered identity-major, then camera, then image
    shifted = base[:, None, :] + spec.camera_shift_strength * (
        np.einsum("cde,ie->icd", cam_mix, base) + cam_bias[None, :, :]
    )
    images = shifted[:, :, None, :] + spec.identity_spread * noise
    features = l2_normalize(images.reshape(ids * cams * per, d)).astype(np.float32)

    camera_ids = np.tile(np.repeat(np.arange(cams), per), ids)
    identities = np.repeat(np.arange(ids), cams * per)
    return EmbeddingSet(features, camera_ids, cams, identities)


class CameraView(NamedTuple):
    camera_id: int
    indices: np.ndarray
    subset: EmbeddingSet


def split_by_camera(embedding_set: EmbeddingSet) -> list[CameraView]:
    """Partition the set by camera; index lists are disjoint, ordered, and cover [0, N)."""
    views = []
    for cam in range(embedding_set.num_cameras):
        idx = np.flatnonzero(embedding_set.camera_ids == cam)
        ids = None if embedding_set.identities is None else embedding_set.identities[idx]
        subset = EmbeddingSet(
            embedding_set.features[idx], np.zeros(idx.size, dtype=np.int64), 1, ids
        )
        views.append(CameraView(cam, idx, subset))
    return views


def _ingest_features(raw: np.ndarray) -> np.ndarray:
    """Normalize rows at ingestion; rows already unit within tolerance pass through
    untouched so that binary round trips stay bit-exact."""
    feats = np.asarray(raw, dtype=np.float32)
    norms = np.linalg.norm(feats.astype(np.float64), axis=1)
    off = np.abs(norms - 1.0) > NORM_TOLERANCE
    if np.any(off):
        fixed = feats.astype(np.float64)
        fixed[off] /= norms[off, None]
        feats = fixed.astype(np.float32)
    return feats


def save_embeddings(embedding_set: EmbeddingSet, path, fmt: str = "bin") -> None:
    """Write an embedding set to ``path`` in csv or bin format."""
    if fmt == "csv":
        _save_csv(embedding_set, path)
    elif fmt == "bin":
        _save_bin(embedding_set, path)
    else:
        raise ValueError(f"unknown format {fmt!r} (expected 'csv' or 'bin')")


def load_embeddings(path, fmt: Optional[str] = None) -> EmbeddingSet:
    """Read an embedding set; ``fmt`` defaults to 'csv' for .csv paths, else 'bin'."""
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "bin"
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "bin":
        return _load_bin(path)
    raise ValueError(f"unknown format {fmt!r} (expected 'csv' or 'bin')")


def _save_csv(embedding_set: EmbeddingSet, path) -> None:
    has_labels = embedding_set.identities is not None
    header = ["id", "camera"] + (["label"] if has_labels else [])
    header += [f"f{j}" for j in range(embedding_set.dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(embedding_set.n):
            row = [str(i), str(int(embedding_set.camera_ids[i]))]
            if has_labels:
                row.append(str(int(embedding_set.identities[i])))
            # 9 significant digits round-trip float32 exactly
            row += [f"{float(v):.9g}" for v in embedding_set.features[i]]
            writer.writerow(row)


def _load_csv(path) -> EmbeddingSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmbeddingParseError(f"{path}: line 1: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "id" or header[1] != "camera":
            raise EmbeddingParseError(
                f"{path}: line 1: malformed header (expected 'id,camera[,label],f0..')"
            )
        has_labels = header[2] == "label"
        feat_names = header[3:] if has_labels else header[2:]
        if feat_names != [f"f{j}" for j in range(len(feat_names))] or not feat_names:
            raise EmbeddingParseError(
                f"{path}: line 1: malformed header (feature columns must be f0..f{{D-1}})"
            )
        width = len(header)
        dim = len(feat_names)

        row_ids, cams, labels, feats = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise EmbeddingParseError(
                    f"{path}: line {lineno}: expected {width} columns, got {len(row)}"
                )
            row_ids.append(row[0])
            try:
                cams.append(int(row[1]))
                if has_labels:
                    labels.append(int(row[2]))
                feats.append([float(v) for v in row[3 if has_labels else 2 :]])
            except ValueError as exc:
                raise EmbeddingParseError(f"{path}: line {lineno}: {exc}") from None
            if cams[-1] < 0:
                raise EmbeddingParseError(f"{path}: line {lineno}: negative camera id")
            if not all(np.isfinite(feats[-1])):
                raise EmbeddingParseError(f"{path}: line {lineno}: non-finite feature value")
    if not feats:
        raise EmbeddingParseError(f"{path}: line 2: no data rows")
    if len(set(row_ids)) != len(row_ids):
        raise EmbeddingParseError(f"{path}: duplicate row ids")
    features = np.asarray(feats, dtype=np.float64)
    try:
        features = _ingest_features(features)
    except ValueError as exc:
        raise EmbeddingParseError(f"{path}: {exc}") from None
    camera_ids = np.asarray(cams, dtype=np.int64)
    identities = np.asarray(labels, dtype=np.int64) if has_labels else None
    try:
        return EmbeddingSet(features, camera_ids, int(camera_ids.max()) + 1, identities)
    except ValueError as exc:
        raise EmbeddingParseError(f"{path}: {exc}") from None


def _save_bin(embedding_set: EmbeddingSet, path) -> None:
    n, d, c = embedding_set.n, embedding_set.dim, embedding_set.num_cameras
    if c > 0xFFFF:
        raise ValueError(f"binary format stores camera ids as u16; C={c} too large")
    has_labels = embedding_set.identities is not None
    if has_labels:
        ids = embedding_set.identities
        if ids.min() < 0 or ids.max() > 0xFFFFFFFF:
            raise ValueError("binary format stores labels as u32; labels out of range")
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(struct.pack("<IIIB", n, d, c, 1 if has_labels else 0))
        fh.write(embedding_set.camera_ids.astype("<u2").tobytes())
        if has_labels:
            fh.write(embedding_set.identities.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(embedding_set.features, dtype="<f4").tobytes())


def _load_bin(path) -> EmbeddingSet:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(blob):
            raise EmbeddingParseError(
                f"{path}: byte {len(blob)}: truncated file ({what} needs "
                f"{offset + count} bytes)"
            )

    need(0, 4, "magic")
    if blob[:4] != BIN_MAGIC:
        raise EmbeddingParseError(f"{path}: byte 0: bad magic {blob[:4]!r}")
    need(4, 13, "header")
    n, d, c, has_labels = struct.unpack_from("<IIIB", blob, 4)
    if n < 1 or d < 1 or c < 1:
        raise EmbeddingParseError(f"{path}: byte 4: invalid dimensions N={n} D={d} C={c}")
    if has_labels not in (0, 1):
        raise EmbeddingParseError(f"{path}: byte 16: has_labels flag must be 0 or 1")
    offset = 17
    need(offset, 2 * n, "camera ids")
    camera_ids = np.frombuffer(blob, dtype="<u2", count=n, offset=offset).astype(np.int64)
    bad = np.flatnonzero(camera_ids >= c)
    if bad.size:
        raise EmbeddingParseError(
            f"{path}: byte {offset + 2 * int(bad[0])}: camera id "
            f"{int(camera_ids[bad[0]])} >= declared C={c}"
        )
    offset += 2 * n
    identities = None
    if has_labels:
        need(offset, 4 * n, "labels")
        identities = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
        offset += 4 * n
    need(offset, 4 * n * d, "features")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    finite = np.isfinite(feats)
    if not finite.all():
        flat = int(np.flatnonzero(~finite.ravel())[0])
        raise EmbeddingParseError(f"{path}: byte {offset + 4 * flat}: non-finite feature value")
    norms = np.linalg.norm(feats.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms < 1e-12)
    if zero.size:
        raise EmbeddingParseError(
            f"{path}: byte {offset + 4 * int(zero[0]) * d}: zero-norm feature row {int(zero[0])}"
        )
    try:
        return EmbeddingSet(_ingest_features(feats), camera_ids, c, identities)
    except ValueError as exc:
        raise EmbeddingParseError(f"{path}: {exc}") from None
