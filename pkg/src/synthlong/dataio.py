"""On-disk formats, manifests and train/validation/test splits.

Reals go to CSV with 17 significant digits, which round-trips any float64
exactly.  Images are 8-bit binary PGM (``P5``).  A JSON manifest lists every
file in the output tree with its SHA-256 digest; it is always written last,
so a directory without a manifest is an incomplete run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ChecksumMismatch, InvalidArgument, UnsupportedVersion
from .sampling import Stream, derive_rng

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.8636, 0.0455, 0.0909)


# --------------------------------------------------------------------------
# atomic writes and checksums

def atomic_write_bytes(path, data: bytes) -> Path:
    """Write ``data`` to a sibling temporary file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------
# CSV

def format_real(v: float) -> str:
    """17-significant-digit decimal, lossless for float64."""
    return format(float(v), ".17g")


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_real(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_table(path, ids: Sequence[int], values: np.ndarray, columns: Sequence[str]) -> Path:
    """CSV with an ``id`` column followed by the columns of ``values`` ``(n, k)``."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != len(ids) or values.shape[1] != len(columns):
        raise InvalidArgument(f"table {Path(path).name}: {len(ids)} ids, {len(columns)} columns, "
                              f"values {values.shape}")
    rows = ([int(i), *map(float, row)] for i, row in zip(ids, values))
    return atomic_write_text(path, csv_text(["id", *columns], rows))


def read_table(path):
    """Inverse of :func:`write_table`: ``(ids, values, columns)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "id":
            raise InvalidArgument(f"{path}: first column must be 'id'")
        rows = list(reader)
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    values = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float).reshape(
        len(rows), len(header) - 1)
    return ids, values, header[1:]


def write_observations(path, ids: Sequence[int], sigma2: float, times, y) -> Path:
    """Long-format CSV ``id, sigma2, time, y``; ``y`` is ``(n, J)`` on a shared grid."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape != (len(ids), times.size):
        raise InvalidArgument(f"observations {y.shape} do not match {len(ids)} ids x {times.size} times")
    rows = ([int(i), float(sigma2), float(t), float(v)]
            for i, yi in zip(ids, y) for t, v in zip(times, yi))
    return atomic_write_text(path, csv_text(["id", "sigma2", "time", "y"], rows))


def read_observations(path):
    """``(ids, sigma2, times, y)`` with ``y`` of shape ``(n, J)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["id", "sigma2", "time", "y"]:
            raise InvalidArgument(f"{path}: unexpected observation header")
        rows = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in reader]
    if not rows:
        return np.empty(0, dtype=np.int64), float("nan"), np.empty(0), np.empty((0, 0))
    ids = list(dict.fromkeys(r[0] for r in rows))
    times = np.array([r[2] for r in rows if r[0] == ids[0]])
    if len(rows) != len(ids) * times.size:
        raise InvalidArgument(f"{path}: subjects do not share one time grid")
    y = np.array([r[3] for r in rows]).reshape(len(ids), times.size)
    return np.array(ids, dtype=np.int64), rows[0][1], times, y


# --------------------------------------------------------------------------
# PGM

def quantize(img) -> np.ndarray:
    """Map [0, 1] intensities to uint8 with round-half-up."""
    img = np.asarray(img, dtype=float)
    if not np.all(np.isfinite(img)):
        raise InvalidArgument("image contains non-finite pixels")
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def pgm_bytes(img) -> bytes:
    q = quantize(img)
    if q.ndim != 2:
        raise InvalidArgument(f"PGM needs a 2-D image, got shape {q.shape}")
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_pgm(path, img) -> Path:
    return atomic_write_bytes(path, pgm_bytes(img))


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise InvalidArgument(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidArgument(f"{path}: only maxval 255 is supported, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w).astype(float) / 255.0


def image_name(subject_id: int) -> str:
    return f"images/{int(subject_id):07d}.pgm"


def level_name(sigma2: float) -> str:
    """File stem for a noise level, e.g. ``sigma2_9``."""
    s = format(float(sigma2), "g").replace(".", "p").replace("-", "m")
    return f"sigma2_{s}"


# --------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test proportions, or exact counts when ``counts`` is set."""

    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    counts: tuple[int, int, int] | None = None

    def __post_init__(self):
        f = tuple(float(v) for v in self.fractions)
        if len(f) != 3 or min(f) <= 0 or abs(sum(f) - 1.0) > 1e-9:
            raise InvalidArgument(f"split fractions must be positive and sum to 1, got {f}")
        object.__setattr__(self, "fractions", f)
        if self.counts is not None:
            c = tuple(int(v) for v in self.counts)
            if len(c) != 3 or min(c) < 0:
                raise InvalidArgument(f"split counts must be three non-negative integers, got {c}")
            object.__setattr__(self, "counts", c)

    def sizes(self, n: int) -> tuple[int, int, int]:
        """Split sizes; validation and test are rounded half-up and train takes the rest."""
        if self.counts is not None:
            if sum(self.counts) != n:
                raise InvalidArgument(f"split counts {self.counts} do not sum to n={n}")
            return self.counts
        n_val = math.floor(self.fractions[1] * n + 0.5)
        n_test = math.floor(self.fractions[2] * n + 0.5)
        return n - n_val - n_test, n_val, n_test

    def to_dict(self) -> dict:
        return {"fractions": list(self.fractions),
                "counts": None if self.counts is None else list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        counts = d.get("counts")
        return cls(fractions=tuple(d.get("fractions", DEFAULT_FRACTIONS)),
                   counts=None if counts is None else tuple(counts))


def split(ids, spec: SplitSpec = SplitSpec(), seed: int = 0):
    """Seeded disjoint partition of ``ids`` into ``(train, val, test)`` sorted arrays."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size
    if n < 3:
        raise InvalidArgument(f"need at least 3 ids to split, got {n}")
    if np.unique(ids).size != n:
        raise InvalidArgument("ids must be unique")
    n_train, n_val, n_test = spec.sizes(n)
    if min(n_train, n_val, n_test) < 0:
        raise InvalidArgument(f"split sizes {(n_train, n_val, n_test)} are invalid for n={n}")
    perm = derive_rng(seed, Stream.SPLIT).permutation(n)
    shuffled = ids[perm]
    parts = (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])
    return tuple(np.sort(p) for p in parts)


def write_splits(path, train, val, test) -> Path:
    labelled = sorted([(int(i), name) for name, part in zip(SPLIT_NAMES, (train, val, test))
                       for i in part])
    return atomic_write_text(path, csv_text(["id", "split"], labelled))


def read_splits(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    return {name: np.array([int(r[0]) for r in rows if r[1] == name], dtype=np.int64)
            for name in SPLIT_NAMES}


# --------------------------------------------------------------------------
# manifest

@dataclass
class Manifest:
    schema_version: int
    seed: int
    config_digest: str
    config: dict
    n_subjects: int
    counts: dict
    levels: list
    eta_indices: list
    files: dict
    stages: list

    def to_json(self) -> str:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        doc = json.loads(text)
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise UnsupportedVersion(f"manifest schema version {version} is not supported "
                                     f"(this reader handles {SCHEMA_VERSION})")
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__})


def inventory(root) -> dict[str, str]:
    """SHA-256 of every regular file under ``root`` except the manifest and temporaries."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel != MANIFEST_NAME and not p.name.startswith("."):
            out[rel] = sha256_file(p)
    return out


def commit_manifest(root, manifest: Manifest) -> Manifest:
    """Refresh the file inventory and write the manifest last."""
    manifest.files = inventory(root)
    atomic_write_text(Path(root) / MANIFEST_NAME, manifest.to_json())
    return manifest


def load_manifest(root) -> Manifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise InvalidArgument(f"no manifest at {path}; the run is missing or incomplete")
    return Manifest.from_json(path.read_text())


def verify(root) -> Manifest:
    """Check every listed file against its recorded digest.

    Raises
    ------
    ChecksumMismatch
        For the first file whose content differs (or is missing).
    """
    root = Path(root)
    manifest = load_manifest(root)
    for rel, expected in sorted(manifest.files.items()):
        p = root / rel
        if not p.is_file():
            raise ChecksumMismatch(rel, expected, "missing file")
        actual = sha256_file(p)
        if actual != expected:
            raise ChecksumMismatch(rel, expected, actual)
    return manifest


def tree_digest(root) -> str:
    """One digest over the whole output tree, manifest included."""
    root = Path(root)
    h = hashlib.sha256()
    for rel, digest in sorted(inventory(root).items()):
        h.update(f"{rel}\0{digest}\n".encode())
    m = root / MANIFEST_NAME
    if m.exists():
        h.update(f"{MANIFEST_NAME}\0{sha256_file(m)}\n".encode())
    return h.hexdigest()


# --------------------------------------------------------------------------
# dataset

def write_dataset(root, ids: Sequence[int], latents: np.ndarray, images: np.ndarray | None,
                  eta: np.ndarray, eta_hat: dict, observations: dict, times,
                  manifest: Manifest, splits=None) -> Manifest:
    """Write the generated dataset and commit its manifest.

    ``eta_hat`` and ``observations`` map each noise level to ``(n, 3)`` and
    ``(n, J)`` arrays.  ``images`` may be ``None`` when images are written
    incrementally by the caller.  The manifest is only written after every
    other file is in place.
    """
    root = Path(root)
    ids = [int(i) for i in ids]
    n = len(ids)
    latents = np.asarray(latents, dtype=float)
    latents = latents.reshape(n, latents.shape[-1] if latents.size == 0 else -1)
    eta = np.asarray(eta, dtype=float).reshape(n, 3)
    if len(set(ids)) != n:
        raise InvalidArgument("subject ids are not unique")
    if images is not None and len(images) != n:
        raise InvalidArgument(f"{len(images)} images for {n} subjects")
    for s2 in manifest.levels:
        if s2 not in eta_hat or s2 not in observations:
            raise InvalidArgument(f"sigma2={s2}: missing eta_hat or observations")
        if np.asarray(eta_hat[s2]).shape[0] != n or np.asarray(observations[s2]).shape[0] != n:
            raise InvalidArgument(f"sigma2={s2}: arrays not aligned with subject ids")
    d = latents.shape[1]
    write_table(root / "latents.csv", ids, latents, [f"z{j}" for j in range(d)])
    write_table(root / "eta.csv", ids, eta, ["eta1", "eta2", "eta3"])
    for s2 in manifest.levels:
        stem = level_name(s2)
        write_table(root / "eta_hat" / f"{stem}.csv", ids, eta_hat[s2], ["eta1", "eta2", "eta3"])
        write_observations(root / "observations" / f"{stem}.csv", ids, s2, times, observations[s2])
    if images is not None:
        for i, img in zip(ids, images):
            write_pgm(root / image_name(i), img)
    if splits is not None:
        write_splits(root / "splits.csv", *splits)
        manifest.counts = {name: int(len(p)) for name, p in zip(SPLIT_NAMES, splits)}
    else:
        manifest.counts = {"train": n, "val": 0, "test": 0}
    manifest.n_subjects = n
    return commit_manifest(root, manifest)


class Dataset:
    """Lazy read access to a dataset directory.

    Construction verifies every checksum; arrays are read on first use and
    cached.
    """

    def __init__(self, root, check: bool = True):
        self.root = Path(root)
        self.manifest = verify(self.root) if check else load_manifest(self.root)
        self._cache: dict = {}

    def _path(self, rel: str) -> Path:
        if rel not in self.manifest.files:
            raise InvalidArgument(f"{rel} is not listed in the manifest of {self.root}")
        p = self.root / rel
        if not p.is_file():
            raise InvalidArgument(f"file listed in manifest is missing: {rel}")
        return p

    def _cached(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    @property
    def levels(self) -> tuple[float, ...]:
        return tuple(float(s) for s in self.manifest.levels)

    @property
    def n_subjects(self) -> int:
        return int(self.manifest.n_subjects)

    def ids(self) -> np.ndarray:
        return self.latents()[0]

    def latents(self):
        """``(ids, Z)``."""
        def load():
            if self.n_subjects == 0 and "latents.csv" not in self.manifest.files:
                return np.empty(0, dtype=np.int64), np.empty((0, 0))
            ids, z, _ = read_table(self._path("latents.csv"))
            return ids, z
        return self._cached("latents", load)

    def eta(self) -> np.ndarray:
        return self._cached("eta", lambda: read_table(self._path("eta.csv"))[1])

    def eta_hat(self, sigma2: float) -> np.ndarray:
        rel = f"eta_hat/{level_name(sigma2)}.csv"
        return self._cached(rel, lambda: read_table(self._path(rel))[1])

    def observations(self, sigma2: float):
        """``(ids, times, y)`` at one noise level."""
        rel = f"observations/{level_name(sigma2)}.csv"

        def load():
            ids, _, times, y = read_observations(self._path(rel))
            return ids, times, y
        return self._cached(rel, load)

    def image(self, subject_id: int) -> np.ndarray:
        return read_pgm(self._path(image_name(subject_id)))

    def images(self, ids: Iterable[int]) -> np.ndarray:
        ids = list(ids)
        if not ids:
            return np.empty((0, 0, 0))
        return np.stack([self.image(i) for i in ids])

    def splits(self) -> dict[str, np.ndarray]:
        return self._cached("splits", lambda: read_splits(self._path("splits.csv")))

    def rows(self, subject_ids) -> np.ndarray:
        """Row positions of ``subject_ids`` in the per-subject tables."""
        ids = self.ids()
        pos = {int(i): k for k, i in enumerate(ids)}
        try:
            return np.array([pos[int(i)] for i in subject_ids], dtype=np.int64)
        except KeyError as exc:
            raise InvalidArgument(f"unknown subject id {exc.args[0]}") from None


def read_dataset(root, check: bool = True) -> Dataset:
    return Dataset(root, check)
