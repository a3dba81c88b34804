"""Toxin/protein/pair corpus: parsing, negative sampling and splits.

File formats (UTF-8 TSV, no header, ``#`` comment lines ignored)::

    toxins.tsv    toxin_id <TAB> smiles
    proteins.tsv  protein_id <TAB> sequence
    pairs.tsv     toxin_id <TAB> protein_id <TAB> label(0|1)

A split manifest has one pair per line with a fourth ``partition`` column
(``train``, ``val`` or ``test``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from tipformer.errors import DataError, UsageError

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
_AMBIGUOUS = str.maketrans({c: "X" for c in "BZJUO"})
_PROTEIN_OK = frozenset(AMINO_ACIDS + "X")

POLICIES = ("random", "new_toxin", "new_target")
PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class Toxin:
    toxin_id: str
    smiles: str


@dataclass(frozen=True)
class ProteinTarget:
    protein_id: str
    sequence: str


@dataclass(frozen=True)
class InteractionPair:
    toxin_id: str
    protein_id: str
    label: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.toxin_id, self.protein_id)


@dataclass(frozen=True)
class Corpus:
    toxins: dict[str, Toxin]
    proteins: dict[str, ProteinTarget]
    pairs: tuple[InteractionPair, ...] = ()

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.toxins), len(self.proteins), len(self.pairs)

    def positives(self) -> list[InteractionPair]:
        return [p for p in self.pairs if p.label == 1]

    def with_pairs(self, pairs: Iterable[InteractionPair]) -> "Corpus":
        out = Corpus(self.toxins, self.proteins, tuple(pairs))
        _check_pairs(out, ((None, p) for p in out.pairs), "<merged>")
        return out


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[InteractionPair, ...]
    validation: tuple[InteractionPair, ...]
    test: tuple[InteractionPair, ...]
    policy: str = "random"
    seed: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def partition(self, name: str) -> tuple[InteractionPair, ...]:
        return {"train": self.train, "val": self.validation, "validation": self.validation, "test": self.test}[name]

    def all_pairs(self) -> list[InteractionPair]:
        return [*self.train, *self.validation, *self.test]


# ---------------------------------------------------------------- validation helpers


def normalize_sequence(seq: str) -> str:
    """Upper-case a protein sequence and map B, Z, J, U, O to X."""
    return seq.strip().upper().translate(_AMBIGUOUS)


def check_sequence(seq: str) -> str | None:
    """Return the first illegal residue in a normalized sequence, if any."""
    for ch in seq:
        if ch not in _PROTEIN_OK:
            return ch
    return None


def check_smiles(smiles: str) -> str | None:
    for ch in smiles:
        if not 33 <= ord(ch) <= 126:
            return ch
    return None


def _rows(path: str | Path, ncols: int) -> Iterator[tuple[int, list[str]]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc})") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != ncols:
            raise DataError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(fields)}")
        yield lineno, [f.strip() for f in fields]


def _label(raw: str, where: str) -> int:
    if raw not in ("0", "1"):
        raise DataError(f"{where}: label must be 0 or 1, got {raw!r}")
    return int(raw)


def _check_pairs(corpus: Corpus, pairs: Iterable[tuple[int | None, InteractionPair]], path) -> None:
    seen: set[tuple[str, str]] = set()
    for lineno, p in pairs:
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        if p.toxin_id not in corpus.toxins:
            raise DataError(f"{where}: unknown toxin_id {p.toxin_id!r}")
        if p.protein_id not in corpus.proteins:
            raise DataError(f"{where}: unknown protein_id {p.protein_id!r}")
        if p.key in seen:
            raise DataError(f"{where}: duplicate pair {p.toxin_id!r}/{p.protein_id!r}")
        seen.add(p.key)


# ---------------------------------------------------------------- parsing


def read_toxins(path: str | Path) -> dict[str, Toxin]:
    toxins: dict[str, Toxin] = {}
    for lineno, (tid, smiles) in _rows(path, 2):
        if not tid:
            raise DataError(f"{path}:{lineno}: empty toxin_id")
        if tid in toxins:
            raise DataError(f"{path}:{lineno}: duplicate toxin_id {tid!r}")
        if not smiles:
            raise DataError(f"{path}:{lineno}: empty SMILES for {tid!r}")
        bad = check_smiles(smiles)
        if bad is not None:
            raise DataError(f"{path}:{lineno}: illegal SMILES character {bad!r} in {tid!r}")
        toxins[tid] = Toxin(tid, smiles)
    return toxins


def read_proteins(path: str | Path) -> dict[str, ProteinTarget]:
    proteins: dict[str, ProteinTarget] = {}
    for lineno, (pid, raw) in _rows(path, 2):
        if not pid:
            raise DataError(f"{path}:{lineno}: empty protein_id")
        if pid in proteins:
            raise DataError(f"{path}:{lineno}: duplicate protein_id {pid!r}")
        seq = normalize_sequence(raw)
        if not seq:
            raise DataError(f"{path}:{lineno}: empty sequence for {pid!r}")
        bad = check_sequence(seq)
        if bad is not None:
            raise DataError(f"{path}:{lineno}: illegal residue {bad!r} in {pid!r}")
        proteins[pid] = ProteinTarget(pid, seq)
    return proteins


def read_pairs(path: str | Path) -> list[tuple[int, InteractionPair]]:
    return [
        (lineno, InteractionPair(t, p, _label(lab, f"{path}:{lineno}")))
        for lineno, (t, p, lab) in _rows(path, 3)
    ]


def parse_corpus(toxin_file, protein_file, pair_file) -> Corpus:
    corpus = Corpus(read_toxins(toxin_file), read_proteins(protein_file))
    numbered = read_pairs(pair_file)
    _check_pairs(corpus, numbered, pair_file)
    return Corpus(corpus.toxins, corpus.proteins, tuple(p for _, p in numbered))


def write_corpus(corpus: Corpus, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / f"{name}.tsv" for name in ("toxins", "proteins", "pairs")}
    paths["toxins"].write_text("".join(f"{t.toxin_id}\t{t.smiles}\n" for t in corpus.toxins.values()))
    paths["proteins"].write_text("".join(f"{p.protein_id}\t{p.sequence}\n" for p in corpus.proteins.values()))
    paths["pairs"].write_text("".join(f"{p.toxin_id}\t{p.protein_id}\t{p.label}\n" for p in corpus.pairs))
    return paths


# ---------------------------------------------------------------- negatives


def sample_negatives(corpus: Corpus, ratio: float, seed: int) -> list[InteractionPair]:
    """Draw ``round(ratio * #positives)`` unlabeled pairs uniformly without replacement.

    Candidates are all (toxin, protein) combinations not already present in
    the corpus, so a drawn negative never collides with a positive or with an
    explicit negative. Output is ordered by (toxin, protein) corpus order.
    """
    if ratio <= 0:
        raise UsageError(f"negative ratio must be positive, got {ratio}")
    tids = list(corpus.toxins)
    pids = list(corpus.proteins)
    t_index = {t: i for i, t in enumerate(tids)}
    p_index = {p: i for i, p in enumerate(pids)}
    n_pos = len(corpus.positives())
    count = math.floor(ratio * n_pos + 0.5)

    taken = np.zeros(len(tids) * len(pids), dtype=bool)
    for p in corpus.pairs:
        taken[t_index[p.toxin_id] * len(pids) + p_index[p.protein_id]] = True
    candidates = np.flatnonzero(~taken)
    if count > candidates.size:
        raise DataError(f"requested {count} negatives but only {candidates.size} unlabeled pairs exist")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(candidates, size=count, replace=False))
    return [InteractionPair(tids[i // len(pids)], pids[i % len(pids)], 0) for i in chosen]


# ---------------------------------------------------------------- splits


def check_fractions(fractions: Sequence[float]) -> tuple[float, float, float]:
    if len(fractions) != 3:
        raise UsageError("fractions must be three numbers (train, val, test)")
    fr = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise UsageError(f"fractions must be positive and sum to 1, got {fractions}")
    return fr  # type: ignore[return-value]


def _partition_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    # floor every partition, remainder to train
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split(
    pairs: Sequence[InteractionPair],
    policy: str,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Partition labeled pairs into train/val/test.

    ``random`` shuffles pairs. ``new_toxin`` / ``new_target`` shuffle the
    entity ids instead and send every pair to the partition of its toxin
    (resp. protein), so held-out entities never appear in training.
    Within each partition pairs keep their input order.
    """
    fr = check_fractions(fractions)
    policy = policy.replace("-", "_")
    if policy not in POLICIES:
        raise UsageError(f"unknown split policy {policy!r}; expected one of {POLICIES}")
    pairs = list(pairs)
    rng = np.random.default_rng(seed)

    if policy == "random":
        n_train, n_val, _ = _partition_sizes(len(pairs), fr)
        order = rng.permutation(len(pairs))
        slot = np.empty(len(pairs), dtype=np.int64)
        slot[order[:n_train]] = 0
        slot[order[n_train:n_train + n_val]] = 1
        slot[order[n_train + n_val:]] = 2
        assign = slot.tolist()
        meta = {}
    else:
        attr = "toxin_id" if policy == "new_toxin" else "protein_id"
        entities = list(dict.fromkeys(getattr(p, attr) for p in pairs))
        n_train, n_val, n_test = _partition_sizes(len(entities), fr)
        if min(n_train, n_val, n_test) == 0:
            raise DataError(
                f"{policy} split of {len(entities)} entities with fractions {fr} leaves an empty partition"
            )
        order = rng.permutation(len(entities))
        part_of: dict[str, int] = {}
        for rank, idx in enumerate(order):
            part_of[entities[idx]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
        assign = [part_of[getattr(p, attr)] for p in pairs]
        meta = {"held_out_entities": n_test, "val_entities": n_val, "train_entities": n_train}

    parts: tuple[list, list, list] = ([], [], [])
    for p, a in zip(pairs, assign):
        parts[a].append(p)
    if policy != "random" and not all(parts):
        raise DataError(f"{policy} split leaves a partition without pairs")
    return DatasetSplit(tuple(parts[0]), tuple(parts[1]), tuple(parts[2]), policy, seed, meta)


def write_manifest(ds: DatasetSplit, path: str | Path) -> None:
    lines = [f"# policy={ds.policy} seed={ds.seed}\n"]
    for name in PARTITIONS:
        lines.extend(f"{p.toxin_id}\t{p.protein_id}\t{p.label}\t{name}\n" for p in ds.partition(name))
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: str | Path, corpus: Corpus | None = None) -> DatasetSplit:
    path = Path(path)
    policy, seed = "random", 0
    try:
        first = path.read_text(encoding="utf-8").splitlines()[:1]
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    if first and first[0].startswith("# policy="):
        for tok in first[0][2:].split():
            key, _, val = tok.partition("=")
            if key == "policy":
                policy = val
            elif key == "seed" and val.lstrip("-").isdigit():
                seed = int(val)
    parts: dict[str, list[InteractionPair]] = {name: [] for name in PARTITIONS}
    numbered = []
    for lineno, (t, p, lab, part) in _rows(path, 4):
        if part not in parts:
            raise DataError(f"{path}:{lineno}: unknown partition {part!r}")
        pair = InteractionPair(t, p, _label(lab, f"{path}:{lineno}"))
        parts[part].append(pair)
        numbered.append((lineno, pair))
    if corpus is not None:
        _check_pairs(corpus, numbered, path)
    return DatasetSplit(tuple(parts["train"]), tuple(parts["val"]), tuple(parts["test"]), policy, seed)
