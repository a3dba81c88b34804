"""Seeded synthetic corpus with a planted token co-occurrence rule.

Every toxin carries one marker atom class and every protein one marker
residue class; a pair interacts exactly when the classes match::

    class 0: toxin contains "N", protein contains "W"
    class 1: toxin contains "S", protein contains "C"

Marker symbols never occur in the filler, so the label is a function of which
tokens co-occur across the two sequences. The rule is only visible through
per-token embeddings, which makes it a target for the fallback embedder.
"""

from __future__ import annotations

import numpy as np

from tipformer.data import Corpus, InteractionPair, ProteinTarget, Toxin

TOXIN_MARKERS = ("N", "S")
PROTEIN_MARKERS = ("W", "C")
TOXIN_FILLER = "CCCcccO=()1"
PROTEIN_FILLER = "ADEFGHIKLMNPQRSTVY"


def _with_markers(rng, filler: str, length: int, marker: str, copies: int) -> str:
    chars = list(rng.choice(list(filler), size=length))
    for pos in rng.choice(length, size=copies, replace=False):
        chars[pos] = marker
    return "".join(chars)


def make_toy_corpus(
    n_toxins: int = 60,
    n_proteins: int = 60,
    n_pairs: int = 480,
    seed: int = 0,
    toxin_len: tuple[int, int] = (8, 14),
    protein_len: tuple[int, int] = (16, 28),
) -> Corpus:
    """Build the corpus; ``n_pairs`` labeled pairs are drawn half positive, half negative."""
    rng = np.random.default_rng(seed)
    t_class = rng.permutation(np.arange(n_toxins) % 2)
    p_class = rng.permutation(np.arange(n_proteins) % 2)

    toxins = {}
    for i in range(n_toxins):
        tid = f"T{i:03d}"
        length = int(rng.integers(toxin_len[0], toxin_len[1] + 1))
        toxins[tid] = Toxin(tid, _with_markers(rng, TOXIN_FILLER, length, TOXIN_MARKERS[t_class[i]], 2))
    proteins = {}
    for j in range(n_proteins):
        pid = f"P{j:03d}"
        length = int(rng.integers(protein_len[0], protein_len[1] + 1))
        proteins[pid] = ProteinTarget(pid, _with_markers(rng, PROTEIN_FILLER, length, PROTEIN_MARKERS[p_class[j]], 2))

    grid = np.arange(n_toxins * n_proteins)
    same = t_class[grid // n_proteins] == p_class[grid % n_proteins]
    n_pos = n_pairs // 2
    pos = rng.choice(grid[same], size=n_pos, replace=False)
    neg = rng.choice(grid[~same], size=n_pairs - n_pos, replace=False)
    chosen = np.sort(np.concatenate([pos, neg]))
    tids, pids = list(toxins), list(proteins)
    pairs = tuple(
        InteractionPair(tids[k // n_proteins], pids[k % n_proteins], int(same[k])) for k in chosen
    )
    return Corpus(toxins, proteins, pairs)
