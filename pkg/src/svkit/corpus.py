"""Dataset, embedding, trial-list and score-file I/O.

File formats:

* embedding sets: binary, magic ``EMB1``, little-endian u32 dim, u64 record
  count, then per record a u16 name length, the UTF-8 name, and ``dim``
  float32 values.  Record order is preserved exactly.
* named matrix containers (features, checkpoints): magic ``MAT1``, u32 entry
  count, per entry u16 name length + name, u32 rows, u32 cols, float32 data.
* trial lists: text, one ``enroll test [label]`` per line with label in
  {target, nontarget, 1, 0}.
* score files: the same grammar with a trailing real, ``enroll test score``.
* manifests: text, ``utt speaker domain duration [speed augment]`` with ``-``
  for a missing speaker id.

Everything round-trips bit-exactly; nothing is ever sorted implicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, FormatError

EMB_MAGIC = b"EMB1"
MAT_MAGIC = b"MAT1"

DOMAINS = ("source", "target")

_LABEL_ALIASES = {"target": "target", "1": "target", "nontarget": "nontarget", "0": "nontarget"}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    utt: str
    speaker: str | None
    domain: str
    duration: float
    # augmentation tags filled in by the offline plan; clean originals keep defaults
    speed: float = 1.0
    augment: str = "clean"


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = set()
        for i, e in enumerate(self.entries):
            where = f"manifest entry {i} ({e.utt!r})"
            if e.utt in seen:
                raise DataError(f"{where}: duplicate utterance id")
            seen.add(e.utt)
            if e.domain not in DOMAINS:
                raise DataError(f"{where}: unknown domain {e.domain!r}")
            if not (e.duration > 0) or not np.isfinite(e.duration):
                raise DataError(f"{where}: duration must be > 0, got {e.duration}")
            if e.domain == "source" and not e.speaker:
                raise DataError(f"{where}: source-domain entry lacks a speaker id")

    def __len__(self):
        return len(self.entries)

    def speakers(self) -> list[str]:
        out, seen = [], set()
        for e in self.entries:
            if e.speaker is not None and e.speaker not in seen:
                seen.add(e.speaker)
                out.append(e.speaker)
        return out


def write_manifest(manifest: Manifest, path) -> None:
    manifest.validate()
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            spk = e.speaker if e.speaker is not None else "-"
            f.write(f"{e.utt} {spk} {e.domain} {e.duration:.17g} {e.speed:.17g} {e.augment}\n")


def read_manifest(path) -> Manifest:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) not in (4, 6):
                raise FormatError(f"{path}:{lineno}: expected 4 or 6 fields, got {len(fields)}")
            utt, spk, domain, dur = fields[:4]
            speed, augment = (float(fields[4]), fields[5]) if len(fields) == 6 else (1.0, "clean")
            try:
                duration = float(dur)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad duration {dur!r}") from None
            entries.append(ManifestEntry(utt, None if spk == "-" else spk, domain,
                                         duration, speed, augment))
    return Manifest(entries)


# ---------------------------------------------------------------------------
# embedding sets
# ---------------------------------------------------------------------------

class EmbeddingSet:
    """Named collection of fixed-dimension vectors, stored float32.

    Record order is preserved; names must be unique and values finite.
    """

    def __init__(self, names, vectors, dim: int | None = None):
        vectors = np.asarray(vectors, dtype=np.float32)
        names = list(names)
        if vectors.ndim == 1:
            vectors = vectors.reshape(len(names), -1) if names else vectors.reshape(0, dim or 0)
        if dim is not None and vectors.size == 0:
            vectors = vectors.reshape(0, dim)
        if vectors.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got shape {vectors.shape}")
        if len(names) != vectors.shape[0]:
            raise DataError(f"{len(names)} names but {vectors.shape[0]} vectors")
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate embedding names: {dup[:5]}")
        if not np.all(np.isfinite(vectors)):
            raise DataError("embedding set contains non-finite values")
        self.names = names
        self.vectors = vectors
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._index

    def vector(self, name: str) -> np.ndarray:
        try:
            return self.vectors[self._index[name]]
        except KeyError:
            raise DataError(f"no embedding named {name!r}") from None

    def index_of(self, name: str) -> int:
        return self._index[name]

    def __eq__(self, other):
        return (isinstance(other, EmbeddingSet) and self.names == other.names
                and self.vectors.shape == other.vectors.shape
                and bool(np.all(self.vectors == other.vectors)))


def write_embedding_set(embset: EmbeddingSet, path) -> None:
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<IQ", embset.dim, len(embset)))
        for name, vec in zip(embset.names, embset.vectors):
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"embedding name too long ({len(raw)} bytes): {name[:40]!r}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(vec.astype("<f4", copy=False).tobytes())


def read_embedding_set(path) -> EmbeddingSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {EMB_MAGIC!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header, expected at least 16 bytes, "
                          f"file has {len(data)} bytes")
    dim, count = struct.unpack_from("<IQ", data, 4)
    pos = 16
    names = []
    vectors = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        # cheapest lower bound on what the rest of the file still owes us
        remaining_min = (count - i) * (2 + vec_bytes)
        if len(data) - pos < 2:
            raise FormatError(
                f"{path}: truncated at record {i + 1}/{count}: expected at least "
                f"{pos + remaining_min} bytes, file has {len(data)} bytes")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) - pos < nlen + vec_bytes:
            raise FormatError(
                f"{path}: truncated at record {i + 1}/{count}: expected at least "
                f"{pos + nlen + vec_bytes + (count - i - 1) * (2 + vec_bytes)} bytes, "
                f"file has {len(data)} bytes")
        names.append(data[pos:pos + nlen].decode("utf-8"))
        pos += nlen
        vectors[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
        pos += vec_bytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return EmbeddingSet(names, vectors, dim=dim)


# ---------------------------------------------------------------------------
# named matrix containers (feature files, model checkpoints)
# ---------------------------------------------------------------------------

def write_matrices(path, matrices: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAT_MAGIC)
        f.write(struct.pack("<I", len(matrices)))
        for name, mat in matrices.items():
            mat = np.atleast_2d(np.asarray(mat, dtype=np.float32))
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            f.write(mat.astype("<f4", copy=False).tobytes())


def read_matrices(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAT_MAGIC!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            need = 4 * rows * cols
            if len(data) - pos < need:
                raise struct.error
            mat = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos)
            pos += need
        except (struct.error, UnicodeDecodeError):
            raise FormatError(f"{path}: truncated at matrix {i + 1}/{count}, "
                              f"file has {len(data)} bytes") from None
        out[name] = mat.reshape(rows, cols).copy()
    return out


# ---------------------------------------------------------------------------
# trial lists
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    label: str | None = None  # "target" | "nontarget" | None


@dataclass
class TrialList:
    pairs: list[Trial] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = set()
        labeled = None
        for i, t in enumerate(self.pairs):
            key = (t.enroll, t.test)
            if key in seen:
                raise DataError(f"trial {i}: duplicate pair {key}")
            seen.add(key)
            if t.label is not None and t.label not in ("target", "nontarget"):
                raise DataError(f"trial {i}: bad label {t.label!r}")
            has = t.label is not None
            if labeled is None:
                labeled = has
            elif labeled != has:
                raise DataError(f"trial {i}: mixed labeled and unlabeled pairs")

    @property
    def labeled(self) -> bool:
        return bool(self.pairs) and self.pairs[0].label is not None

    def __len__(self):
        return len(self.pairs)

    def labels01(self) -> np.ndarray:
        """Labels as 1 for target, 0 for nontarget."""
        if not self.labeled:
            raise DataError("trial list is unlabeled")
        return np.array([1 if t.label == "target" else 0 for t in self.pairs])

    def without_labels(self) -> "TrialList":
        return TrialList([replace(t, label=None) for t in self.pairs])


def parse_trial_list(path) -> TrialList:
    pairs = []
    labeled = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 2:
                raise FormatError(f"{path}:{lineno}: expected `enroll test [label]`, "
                                  f"got {len(fields)} field(s)")
            if len(fields) > 3:
                raise FormatError(f"{path}:{lineno}: too many fields ({len(fields)})")
            label = None
            if len(fields) == 3:
                try:
                    label = _LABEL_ALIASES[fields[2]]
                except KeyError:
                    raise FormatError(f"{path}:{lineno}: unknown label token "
                                      f"{fields[2]!r}") from None
            has = label is not None
            if labeled is None:
                labeled = has
            elif labeled != has:
                raise FormatError(f"{path}:{lineno}: mixed labeled and unlabeled lines")
            pairs.append(Trial(fields[0], fields[1], label))
    try:
        return TrialList(pairs)
    except DataError as e:
        raise FormatError(f"{path}: {e}") from None


def write_trial_list(trials: TrialList, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials.pairs:
            if t.label is None:
                f.write(f"{t.enroll} {t.test}\n")
            else:
                f.write(f"{t.enroll} {t.test} {t.label}\n")


# ---------------------------------------------------------------------------
# score sets
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    pairs: TrialList
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.pairs),):
            raise DataError(f"{len(self.pairs)} trials but score shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("score set contains non-finite scores")

    def with_labels_from(self, labeled: TrialList) -> "ScoreSet":
        """Attach labels by (enroll, test) lookup; order stays score order."""
        lookup = {(t.enroll, t.test): t.label for t in labeled.pairs}
        pairs = []
        for t in self.pairs.pairs:
            key = (t.enroll, t.test)
            if key not in lookup:
                raise DataError(f"pair {key} missing from the labeled trial list")
            pairs.append(Trial(t.enroll, t.test, lookup[key]))
        return ScoreSet(TrialList(pairs), self.scores.copy())


def write_score_set(scores: ScoreSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t, s in zip(scores.pairs.pairs, scores.scores):
            f.write(f"{t.enroll} {t.test} {s:.17g}\n")


def read_score_set(path) -> ScoreSet:
    pairs, values = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected `enroll test score`, "
                                  f"got {len(fields)} field(s)")
            try:
                values.append(float(fields[2]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad score {fields[2]!r}") from None
            pairs.append(Trial(fields[0], fields[1]))
    return ScoreSet(TrialList(pairs), np.array(values, dtype=np.float64))
