"""Synthetic composed-retrieval embedding world.

Concepts live on the unit sphere in R^D. A clean triplet pairs a reference
concept with a target concept; the modification embedding is the concept
difference pushed through a fixed orthonormal modality map, so queries and
modifications occupy genuinely different coordinate systems. Corruption
replaces one element of a triplet with the matching element of another
triplet, mimicking dataset-level shuffling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, InputError, ParseError, ShapeError
from .rng import RngState, STREAM_NOISE, STREAM_WORLD

CORRUPTION_NONE = "none"
REF_SHUFFLE = "ref_shuffle"
MOD_SHUFFLE = "mod_shuffle"
TAR_SHUFFLE = "tar_shuffle"
CORRUPTION_KINDS = (REF_SHUFFLE, MOD_SHUFFLE, TAR_SHUFFLE)

# short tags used on disk
_TAG_TO_KIND = {"none": CORRUPTION_NONE, "ref": REF_SHUFFLE,
                "mod": MOD_SHUFFLE, "tar": TAR_SHUFFLE}
_KIND_TO_TAG = {v: k for k, v in _TAG_TO_KIND.items()}

DATA_SCHEMA = "airknow-data-v1"


@dataclass(frozen=True)
class WorldSpec:
    """Generation parameters for a synthetic embedding world."""

    embed_dim: int = 256
    concept_count: int = 32
    intra_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim {self.embed_dim} < 2")
        if self.concept_count < 2:
            raise ConfigError(f"concept_count {self.concept_count} < 2")
        if self.intra_noise < 0:
            raise ConfigError(f"intra_noise {self.intra_noise} < 0")


@dataclass
class World:
    """Realized world: concept vectors plus the fixed modality map."""

    spec: WorldSpec
    concepts: np.ndarray       # (C, D), unit rows
    modality_map: np.ndarray   # (D, D), orthonormal columns


@dataclass
class Triplet:
    id: str
    z_r: np.ndarray
    z_m: np.ndarray
    z_t: np.ndarray
    oracle_corruption: str = CORRUPTION_NONE


@dataclass
class Dataset:
    triplets: list
    dim: int
    sigma: float = 0.0
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        ids = [t.id for t in self.triplets]
        if len(set(ids)) != len(ids):
            raise InputError("triplet ids are not unique")

    def __len__(self):
        return len(self.triplets)

    def by_id(self) -> dict:
        return {t.id: t for t in self.triplets}

    def arrays(self):
        """Stacked (Zr, Zm, Zt) matrices in dataset order."""
        zr = np.stack([t.z_r for t in self.triplets])
        zm = np.stack([t.z_m for t in self.triplets])
        zt = np.stack([t.z_t for t in self.triplets])
        return zr, zm, zt

    def clean_mask(self) -> np.ndarray:
        """Oracle-only ground truth; read by the oracle arbiter and evaluation."""
        return np.array([t.oracle_corruption == CORRUPTION_NONE for t in self.triplets])


def _normalize_rows(X):
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("zero-norm row during normalization")
    return X / norms


def generate_world(spec: WorldSpec) -> World:
    """Concepts drawn uniformly on the sphere; modality map by QR with sign fix."""
    g = RngState(spec.seed, STREAM_WORLD).generator()
    concepts = _normalize_rows(
        g.standard_normal((spec.concept_count, spec.embed_dim))
    )
    q, r = np.linalg.qr(g.standard_normal((spec.embed_dim, spec.embed_dim)))
    q = q * np.sign(np.diag(r))
    return World(spec, concepts, q)


def sample_clean_triplets(world: World, n: int, rng: RngState,
                          id_prefix: str = "t") -> list:
    """Draw n clean triplets: distinct concept pairs plus intra-concept noise."""
    if n < 1:
        raise InputError(f"n {n} < 1")
    spec = world.spec
    C, D, eta = spec.concept_count, spec.embed_dim, spec.intra_noise
    if C < 2:
        raise ConfigError("world has fewer than 2 concepts")
    g = rng.generator()
    i = g.integers(0, C, size=n)
    j = (i + 1 + g.integers(0, C - 1, size=n)) % C
    diff = world.concepts[j] - world.concepts[i]
    if eta == 0.0:
        z_r = world.concepts[i].copy()
        z_t = world.concepts[j].copy()
        z_m = _normalize_rows(diff @ world.modality_map.T)
    else:
        xi_r = g.standard_normal((n, D))
        xi_t = g.standard_normal((n, D))
        xi_m = g.standard_normal((n, D))
        z_r = _normalize_rows(world.concepts[i] + eta * xi_r)
        z_t = _normalize_rows(world.concepts[j] + eta * xi_t)
        z_m = _normalize_rows(diff @ world.modality_map.T + eta * xi_m)
    return [
        Triplet(f"{id_prefix}{k:06d}", z_r[k], z_m[k], z_t[k], CORRUPTION_NONE)
        for k in range(n)
    ]


def inject_noise(triplets, sigma, kind_mix=None, rng=None, seed=0,
                 split="train") -> Dataset:
    """Corrupt exactly floor(sigma * N) triplets by element replacement.

    Each selected triplet has one element (kind drawn from ``kind_mix``)
    replaced by the matching element of another, uniformly drawn triplet
    (never itself); replacement elements come from the original, uncorrupted
    list.
    """
    if not 0.0 <= sigma <= 1.0:
        raise ConfigError(f"sigma {sigma} outside [0, 1]")
    if kind_mix is None:
        kind_mix = {k: 1.0 for k in CORRUPTION_KINDS}
    weights = np.array([float(kind_mix.get(k, 0.0)) for k in CORRUPTION_KINDS])
    if np.any(weights < 0) or weights.sum() == 0.0:
        raise ConfigError("kind_mix weights must be nonnegative and not all zero")
    weights = weights / weights.sum()

    n = len(triplets)
    n_corrupt = int(np.floor(sigma * n))
    if n_corrupt > 0 and n < 2:
        raise ConfigError("need at least 2 triplets to shuffle")
    if rng is None:
        rng = RngState(seed, STREAM_NOISE)
    g = rng.generator()

    out = [Triplet(t.id, t.z_r.copy(), t.z_m.copy(), t.z_t.copy(), CORRUPTION_NONE)
           for t in triplets]
    if n_corrupt > 0:
        selected = g.permutation(n)[:n_corrupt]
        kinds = g.choice(len(CORRUPTION_KINDS), size=n_corrupt, p=weights)
        partners = g.integers(0, n - 1, size=n_corrupt)
        for s, kind_idx, p in zip(selected, kinds, partners):
            partner = p + 1 if p >= s else p  # skip self
            kind = CORRUPTION_KINDS[kind_idx]
            donor = triplets[partner]
            if kind == REF_SHUFFLE:
                out[s].z_r = donor.z_r.copy()
            elif kind == MOD_SHUFFLE:
                out[s].z_m = donor.z_m.copy()
            else:
                out[s].z_t = donor.z_t.copy()
            out[s].oracle_corruption = kind
    dim = out[0].z_r.shape[0] if out else 0
    return Dataset(out, dim=dim, sigma=float(sigma), seed=seed, split=split)


def write_dataset(dataset: Dataset, path):
    """JSON Lines: header record then one object per triplet (LF, UTF-8)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {"schema": DATA_SCHEMA, "dim": dataset.dim,
                  "sigma": dataset.sigma, "seed": dataset.seed,
                  "split": dataset.split}
        fh.write(json.dumps(header) + "\n")
        for t in dataset.triplets:
            rec = {"id": t.id,
                   "z_r": t.z_r.tolist(),
                   "z_m": t.z_m.tolist(),
                   "z_t": t.z_t.tolist(),
                   "oracle_corruption": _KIND_TO_TAG[t.oracle_corruption]}
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> Dataset:
    """Inverse of :func:`write_dataset`; round-trip is exact on vector values."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1: invalid JSON ({exc})") from exc
    if header.get("schema") != DATA_SCHEMA:
        raise ParseError(f"{path}: line 1: expected schema {DATA_SCHEMA!r}")
    dim = int(header["dim"])
    triplets = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
        for key in ("id", "z_r", "z_m", "z_t", "oracle_corruption"):
            if key not in rec:
                raise ParseError(f"{path}: line {lineno}: missing key {key!r}")
        vecs = {}
        for key in ("z_r", "z_m", "z_t"):
            v = np.asarray(rec[key], dtype=np.float64)
            if v.ndim != 1 or v.shape[0] != dim:
                raise ShapeError(
                    f"{path}: line {lineno}: {key} has dim {v.shape} != {dim}"
                )
            if not np.isfinite(v).all():
                raise DomainError(f"{path}: line {lineno}: {key} has non-finite entries")
            if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise DomainError(f"{path}: line {lineno}: {key} is not unit-norm")
            vecs[key] = v
        tag = rec["oracle_corruption"]
        if tag not in _TAG_TO_KIND:
            raise ParseError(f"{path}: line {lineno}: unknown corruption tag {tag!r}")
        triplets.append(Triplet(str(rec["id"]), vecs["z_r"], vecs["z_m"],
                                vecs["z_t"], _TAG_TO_KIND[tag]))
    return Dataset(triplets, dim=dim, sigma=float(header.get("sigma", 0.0)),
                   seed=int(header.get("seed", 0)),
                   split=str(header.get("split", "train")))
