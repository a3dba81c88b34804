"""Per-token embeddings for toxins and proteins.

Two sources sit behind :class:`EmbeddingSource`:

* :class:`PrecomputedEmbeddings` serves matrices produced by external
  chemical/protein language models, stored in the TPFE binary format.
* :class:`FallbackEmbeddings` tokenizes at character/residue level; the model
  then looks the indices up in its own trainable table. This path is a
  stand-in so the toolkit runs without external models. It is not ChemBERTa
  or ProtBert, and no positional encoding is added at this stage.

TPFE layout (little-endian)::

    b"TPFE" | u32 version=1 | u32 dim | u32 count |
    count x ( u32 id_len | id utf-8 | u32 rows | rows*dim float32 )
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from tipformer import autodiff as ad
from tipformer.data import AMINO_ACIDS, normalize_sequence
from tipformer.errors import DataError, DimensionError, FormatError

TOXIN_DIM = 384
PROTEIN_DIM = 1024
FALLBACK_DIM = 64

TPFE_MAGIC = b"TPFE"
TPFE_VERSION = 1
UNK = "<unk>"


@dataclass(frozen=True)
class TokenVocabulary:
    kind: str
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols) or UNK in self.symbols:
            raise ValueError("vocabulary symbols must be unique")

    @property
    def unk_index(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        # symbols plus UNK
        return len(self.symbols) + 1

    @cached_property
    def lookup(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def decode(self, indices) -> str:
        out = []
        for i in indices:
            i = int(i)
            if i == self.unk_index:
                raise DataError("cannot detokenize the UNK symbol")
            out.append(self.symbols[i])
        return "".join(out)


# residues in alphabetical one-letter order, X last (index 20), UNK = 21
PROTEIN_VOCAB = TokenVocabulary("protein", tuple(AMINO_ACIDS) + ("X",))
# every printable non-space ASCII character in code-point order, UNK = 94
SMILES_VOCAB = TokenVocabulary("smiles", tuple(chr(c) for c in range(33, 127)))


def tokenize_protein(sequence: str) -> np.ndarray:
    """Index of residue ``i + 1`` is at position ``i``."""
    seq = normalize_sequence(sequence)
    if not seq:
        raise DataError("cannot tokenize an empty protein sequence")
    idx = PROTEIN_VOCAB.lookup
    unk = PROTEIN_VOCAB.unk_index
    return np.fromiter((idx.get(c, unk) for c in seq), dtype=np.int64, count=len(seq))


def tokenize_smiles(smiles: str) -> np.ndarray:
    if not smiles:
        raise DataError("cannot tokenize an empty SMILES string")
    idx = SMILES_VOCAB.lookup
    unk = SMILES_VOCAB.unk_index
    return np.fromiter((idx.get(c, unk) for c in smiles), dtype=np.int64, count=len(smiles))


def detokenize_smiles(indices) -> str:
    return SMILES_VOCAB.decode(indices)


def fallback_embed(indices, table: ad.Tensor) -> ad.Tensor:
    """Row ``i`` of the result is ``table[indices[i]]``; gradients reach the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and idx.max() >= table.shape[0]:
        raise DimensionError(f"token index {int(idx.max())} outside table of {table.shape[0]} rows")
    return ad.take_rows(table, idx)


# ---------------------------------------------------------------- stores


@dataclass(frozen=True)
class EmbeddingMatrix:
    entity_id: str
    values: np.ndarray

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


class EmbeddingStore(Mapping[str, EmbeddingMatrix]):
    def __init__(self, dim: int, matrices: Mapping[str, np.ndarray] | None = None):
        if dim < 1:
            raise DimensionError("embedding dim must be positive")
        self.dim = dim
        self._items: dict[str, EmbeddingMatrix] = {}
        for key, values in (matrices or {}).items():
            self.add(key, values)

    def add(self, entity_id: str, values) -> None:
        arr = np.ascontiguousarray(values, dtype="<f4")
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != self.dim:
            raise DimensionError(f"{entity_id!r}: expected an L x {self.dim} matrix, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError(f"{entity_id!r}: embedding contains non-finite values")
        if entity_id in self._items:
            raise DataError(f"duplicate embedding id {entity_id!r}")
        self._items[entity_id] = EmbeddingMatrix(entity_id, arr)

    def __getitem__(self, key: str) -> EmbeddingMatrix:
        return self._items[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)


def save_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(TPFE_MAGIC + struct.pack("<III", TPFE_VERSION, store.dim, len(store)))
        for key, mat in store.items():
            raw = key.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", mat.rows))
            fh.write(mat.values.astype("<f4", copy=False).tobytes())


def load_embeddings(path: str | Path, expected_dim: int | None = None) -> EmbeddingStore:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated TPFE file at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != TPFE_MAGIC:
        raise FormatError(f"{path}: bad magic, not a TPFE file")
    version, dim, count = struct.unpack("<III", take(12))
    if version != TPFE_VERSION:
        raise FormatError(f"{path}: unsupported TPFE version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: declared dim {dim} but {expected_dim} expected")
    if dim < 1:
        raise FormatError(f"{path}: dim must be positive")
    store = EmbeddingStore(dim)
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        try:
            key = take(id_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: entity id is not valid UTF-8") from None
        (rows,) = struct.unpack("<I", take(4))
        if rows < 1:
            raise FormatError(f"{path}: entity {key!r} has no rows")
        values = np.frombuffer(take(rows * dim * 4), dtype="<f4").reshape(rows, dim)
        try:
            store.add(key, values)
        except (DataError, DimensionError) as exc:
            raise FormatError(f"{path}: {exc}") from None
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after {count} entities")
    return store


# ---------------------------------------------------------------- sources


class EmbeddingSource:
    """Turns an entity into model input: a float matrix or a token index list."""

    kind = "abstract"
    dim: int

    def features(self, entity_id: str, text: str) -> np.ndarray:
        raise NotImplementedError

    def pooled(self, entity_id: str, text: str) -> np.ndarray:
        """Mean over tokens, used by the KNN baseline."""
        raise NotImplementedError


class PrecomputedEmbeddings(EmbeddingSource):
    kind = "precomputed"

    def __init__(self, store: EmbeddingStore, label: str = ""):
        self.store = store
        self.dim = store.dim
        self.label = label

    def features(self, entity_id, text):
        try:
            return self.store[entity_id].values
        except KeyError:
            raise DataError(f"no embedding for {entity_id!r} in {self.label or 'store'}") from None

    def pooled(self, entity_id, text):
        return self.features(entity_id, text).astype(np.float64).mean(axis=0)


class FallbackEmbeddings(EmbeddingSource):
    """Character/residue tokenizer feeding the model's learned lookup table."""

    kind = "fallback"
    description = "learned token embedding fallback (not ChemBERTa/ProtBert)"

    def __init__(self, vocab: TokenVocabulary, dim: int = FALLBACK_DIM):
        self.vocab = vocab
        self.dim = dim
        self._tokenize = tokenize_protein if vocab.kind == "protein" else tokenize_smiles

    def features(self, entity_id, text):
        return self._tokenize(text)

    def pooled(self, entity_id, text):
        # token composition: mean one-hot over the vocabulary
        idx = self._tokenize(text)
        return np.bincount(idx, minlength=len(self.vocab)).astype(np.float64) / idx.size


def toxin_fallback(dim: int = FALLBACK_DIM) -> FallbackEmbeddings:
    return FallbackEmbeddings(SMILES_VOCAB, dim)


def protein_fallback(dim: int = FALLBACK_DIM) -> FallbackEmbeddings:
    return FallbackEmbeddings(PROTEIN_VOCAB, dim)


class Featurizer:
    """Caches model inputs for every toxin and protein of a corpus."""

    def __init__(self, corpus, toxin_source: EmbeddingSource, protein_source: EmbeddingSource):
        self.corpus = corpus
        self.toxin_source = toxin_source
        self.protein_source = protein_source
        self._toxins: dict[str, np.ndarray] = {}
        self._proteins: dict[str, np.ndarray] = {}

    def toxin(self, toxin_id: str) -> np.ndarray:
        if toxin_id not in self._toxins:
            entity = self.corpus.toxins.get(toxin_id)
            if entity is None:
                raise DataError(f"unknown toxin_id {toxin_id!r}")
            self._toxins[toxin_id] = self.toxin_source.features(toxin_id, entity.smiles)
        return self._toxins[toxin_id]

    def protein(self, protein_id: str) -> np.ndarray:
        if protein_id not in self._proteins:
            entity = self.corpus.proteins.get(protein_id)
            if entity is None:
                raise DataError(f"unknown protein_id {protein_id!r}")
            self._proteins[protein_id] = self.protein_source.features(protein_id, entity.sequence)
        return self._proteins[protein_id]

    def pooled_pair(self, toxin_id: str, protein_id: str) -> np.ndarray:
        t = self.corpus.toxins[toxin_id]
        p = self.corpus.proteins[protein_id]
        return np.concatenate([
            self.toxin_source.pooled(toxin_id, t.smiles),
            self.protein_source.pooled(protein_id, p.sequence),
        ])
