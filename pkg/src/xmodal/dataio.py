"""Study / Corpus containers and the ``LMTR`` binary format.

Layout (all integers little-endian)::

    b"LMTR" | u32 version | u32 dim | u32 grid_h | u32 grid_w | u32 n_studies
    per study:
        u32 id_len | id (UTF-8)
        u8 flags            bit0 lateral, bit1 label, bit2 grounding
        u32 n_tokens
        f32[grid_h*grid_w*dim] frontal          (row-major)
        f32[grid_h*grid_w*dim] lateral          (only if bit0)
        f32[n_tokens*dim]      tokens
        u8[n_tokens]           token mask
        i32 label                               (-1 = none)
        u32 n_grounding
        per grounding: u32 y0 x0 y1 x1 | u32 n_idx | u32[n_idx] token indices

A sibling ``<file>.json`` manifest holds the corpus id, split, counts and the
SHA-256 of the binary file.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .posenc import GridShape

MAGIC = b"LMTR"
FORMAT_VERSION = 1
DEFAULT_TOKEN_CAP = 97

_LATERAL, _LABEL, _GROUNDING = 1, 2, 4


class CorpusFormatError(ValueError):
    pass


class BadMagicError(CorpusFormatError):
    pass


class VersionMismatchError(CorpusFormatError):
    pass


class TruncatedFileError(CorpusFormatError):
    pass


class ChecksumMismatchError(CorpusFormatError):
    pass


@dataclass(frozen=True)
class Box:
    """Half-open grid rectangle: rows [y0, y1), columns [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int

    def within(self, grid):
        return 0 <= self.y0 < self.y1 <= grid.height and 0 <= self.x0 < self.x1 <= grid.width

    def mask(self, grid):
        m = np.zeros((grid.height, grid.width), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m.ravel()

    def area(self):
        return (self.y1 - self.y0) * (self.x1 - self.x0)


@dataclass(frozen=True)
class Grounding:
    box: Box
    token_indices: tuple


@dataclass
class Study:
    id: str
    frontal: np.ndarray
    tokens: np.ndarray
    token_mask: np.ndarray
    grid: GridShape
    lateral: np.ndarray | None = None
    label: int | None = None
    grounding: list = field(default_factory=list)

    @property
    def dim(self):
        return self.frontal.shape[1]

    def validate(self, token_cap=DEFAULT_TOKEN_CAP):
        d = self.frontal.shape[1]
        mats = [("frontal", self.frontal), ("tokens", self.tokens)]
        if self.lateral is not None:
            mats.append(("lateral", self.lateral))
        for name, m in mats:
            if m.ndim != 2 or m.shape[1] != d:
                raise ValueError(f"study {self.id}: {name} has shape {m.shape}, expected (*, {d})")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"study {self.id}: {name} contains non-finite values")
        for name in ("frontal", "lateral"):
            m = getattr(self, name)
            if m is not None and m.shape[0] != self.grid.size:
                raise ValueError(f"study {self.id}: {name} has {m.shape[0]} rows, grid needs {self.grid.size}")
        n_w = self.tokens.shape[0]
        if n_w > token_cap:
            raise ValueError(f"study {self.id}: {n_w} tokens exceeds cap {token_cap}")
        if self.token_mask.shape != (n_w,):
            raise ValueError(f"study {self.id}: token mask length {self.token_mask.shape} != {n_w}")
        for g in self.grounding:
            if not g.box.within(self.grid):
                raise ValueError(f"study {self.id}: box {g.box} outside grid")
            for t in g.token_indices:
                if not (0 <= t < n_w) or not self.token_mask[t]:
                    raise ValueError(f"study {self.id}: phrase token {t} invalid or masked")


@dataclass
class Corpus:
    studies: list
    dim: int
    grid: GridShape
    split: str = "train"
    id: str = "corpus"

    def __len__(self):
        return len(self.studies)

    def validate(self, token_cap=DEFAULT_TOKEN_CAP):
        if not self.studies:
            raise ValueError("empty corpus")
        for s in self.studies:
            if s.dim != self.dim or s.grid != self.grid:
                raise ValueError(f"study {s.id}: dim/grid differ from corpus")
            s.validate(token_cap)


def _f32_bytes(m):
    return np.ascontiguousarray(m, dtype="<f4").tobytes()


def encode_corpus(corpus):
    corpus.validate()
    for s in corpus.studies:
        for m in (s.frontal, s.tokens, s.lateral):
            if m is not None and np.isnan(m).any():
                raise ValueError(f"study {s.id}: NaN in features, refusing to write")
    g = corpus.grid
    parts = [MAGIC, struct.pack("<5I", FORMAT_VERSION, corpus.dim, g.height, g.width, len(corpus))]
    for s in corpus.studies:
        sid = s.id.encode("utf-8")
        flags = (_LATERAL if s.lateral is not None else 0) | (_LABEL if s.label is not None else 0)
        flags |= _GROUNDING if s.grounding else 0
        parts.append(struct.pack("<I", len(sid)) + sid)
        parts.append(struct.pack("<BI", flags, s.tokens.shape[0]))
        parts.append(_f32_bytes(s.frontal))
        if s.lateral is not None:
            parts.append(_f32_bytes(s.lateral))
        parts.append(_f32_bytes(s.tokens))
        parts.append(np.asarray(s.token_mask, dtype=np.uint8).tobytes())
        parts.append(struct.pack("<i", -1 if s.label is None else int(s.label)))
        parts.append(struct.pack("<I", len(s.grounding)))
        for gr in s.grounding:
            b = gr.box
            parts.append(struct.pack("<5I", b.y0, b.x0, b.y1, b.x1, len(gr.token_indices)))
            parts.append(struct.pack(f"<{len(gr.token_indices)}I", *gr.token_indices))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(f"truncated: need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, rows, dim):
        raw = self.take(4 * rows * dim)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, dim)


def decode_corpus(buf, split="train", corpus_id="corpus"):
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise BadMagicError("bad magic")
    version, dim, gh, gw, n = r.unpack("<5I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, reader supports {FORMAT_VERSION}")
    grid = GridShape(gh, gw)
    # every study carries at least its frontal matrix; reject absurd headers before allocating
    min_study = 4 + 1 + 4 + 4 * grid.size * dim + 4 + 4
    if n * min_study > len(buf) - r.pos:
        raise TruncatedFileError(f"truncated: header declares {n} studies, file too short")
    studies = []
    for _ in range(n):
        (id_len,) = r.unpack("<I")
        sid = bytes(r.take(id_len)).decode("utf-8")
        flags, n_w = r.unpack("<BI")
        frontal = r.floats(grid.size, dim)
        lateral = r.floats(grid.size, dim) if flags & _LATERAL else None
        tokens = r.floats(n_w, dim)
        mask = np.frombuffer(r.take(n_w), dtype=np.uint8).astype(bool)
        (label,) = r.unpack("<i")
        (n_g,) = r.unpack("<I")
        grounding = []
        for _ in range(n_g):
            y0, x0, y1, x1, n_idx = r.unpack("<5I")
            idx = r.unpack(f"<{n_idx}I") if n_idx else ()
            grounding.append(Grounding(Box(y0, x0, y1, x1), tuple(idx)))
        studies.append(Study(sid, frontal, tokens, mask, grid, lateral,
                             None if label < 0 else label, grounding))
    if r.pos != len(buf):
        raise CorpusFormatError(f"{len(buf) - r.pos} trailing bytes after last study")
    corpus = Corpus(studies, dim, grid, split, corpus_id)
    corpus.validate()
    return corpus


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_corpus(corpus, path):
    """Write ``corpus`` to ``path`` plus its JSON manifest.

    Features are stored as float32; values that are not float32-representable
    are rounded.
    """
    if not corpus.studies:
        raise ValueError("empty corpus")
    buf = encode_corpus(corpus)
    path = Path(path)
    path.write_bytes(buf)
    manifest = {
        "id": corpus.id,
        "split": corpus.split,
        "format_version": FORMAT_VERSION,
        "dim": corpus.dim,
        "grid": [corpus.grid.height, corpus.grid.width],
        "counts": {
            "studies": len(corpus),
            "lateral": sum(s.lateral is not None for s in corpus.studies),
            "labeled": sum(s.label is not None for s in corpus.studies),
            "grounded": sum(bool(s.grounding) for s in corpus.studies),
        },
        "checksum": "sha256:" + hashlib.sha256(buf).hexdigest(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_corpus(path, verify=True):
    """Read and validate a corpus; structural errors are reported before checksum ones."""
    path = Path(path)
    buf = path.read_bytes()
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else None
    if manifest is None and verify:
        raise FileNotFoundError(f"manifest {mpath} not found")
    manifest = manifest or {}
    corpus = decode_corpus(memoryview(buf), split=manifest.get("split", "train"),
                           corpus_id=manifest.get("id", path.stem))
    if verify:
        digest = "sha256:" + hashlib.sha256(buf).hexdigest()
        if manifest.get("checksum") != digest:
            raise ChecksumMismatchError(f"checksum mismatch for {path}")
    return corpus
