"""Hierarchical bag-of-words vocabulary over 256-bit binary descriptors."""

from __future__ import annotations

from collections import Counter
from importlib import resources
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

DESCRIPTOR_BYTES = 32
FORMAT_TAG = "rkhs-slam-vocabulary 1"


def _bits(desc):
    return np.unpackbits(np.asarray(desc, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES), axis=1).astype(np.float32)


def hamming_matrix(a, b):
    """Pairwise Hamming distances between two descriptor arrays (uint8, 32 bytes each)."""
    ba, bb = _bits(a), _bits(b)
    return (ba @ (1.0 - bb).T + (1.0 - ba) @ bb.T).astype(np.int64)


def _kmedoids(desc, k, rng, n_iter=10, sample=1000):
    """Hamming k-medoids with k-means++ seeding; returns medoid row indices."""
    n = len(desc)
    first = int(rng.integers(n))
    medoids = [first]
    d_min = hamming_matrix(desc, desc[[first]])[:, 0].astype(float)
    while len(medoids) < k:
        p = d_min**2
        if p.sum() == 0:
            break
        nxt = int(rng.choice(n, p=p / p.sum()))
        medoids.append(nxt)
        d_min = np.minimum(d_min, hamming_matrix(desc, desc[[nxt]])[:, 0])
    medoids = np.array(medoids)

    for _ in range(n_iter):
        assign = np.argmin(hamming_matrix(desc, desc[medoids]), axis=1)
        updated = medoids.copy()
        for c in range(len(medoids)):
            members = np.flatnonzero(assign == c)
            if len(members) > sample:
                members = np.sort(rng.choice(members, sample, replace=False))
            cost = hamming_matrix(desc[members], desc[members]).sum(axis=1)
            updated[c] = members[int(np.argmin(cost))]
        if np.array_equal(updated, medoids):
            break
        medoids = updated
    return medoids


class Vocabulary(BaseEstimator):
    """Tree of medoid descriptors; its leaves are the visual words.

    ``fit`` takes one descriptor array per training image. Word weights are
    the smoothed inverse document frequency ``log((1 + N) / (1 + n_w)) + 1``
    so every word keeps a positive weight.
    """

    def __init__(self, branching=10, depth=3, random_state=0):
        self.branching = branching
        self.depth = depth
        self.random_state = random_state

    def fit(self, X, y=None):
        images = [np.asarray(d, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES) for d in X]
        images = [d for d in images if len(d)]
        if not images:
            raise ValueError("no descriptors to build a vocabulary from")
        if self.branching < 2 or self.depth < 1:
            raise ValueError("branching must be >= 2 and depth >= 1")
        rng = np.random.default_rng(self.random_state)
        self.centers_ = [np.zeros(DESCRIPTOR_BYTES, np.uint8)]
        self.parent_ = [-1]
        self.children_ = [[]]
        self._split(0, np.concatenate(images), 0, rng)
        self._index_words()
        counts = Counter()
        for d in images:
            counts.update(set(self.quantize(d).tolist()))
        n_img = len(images)
        self.idf_ = np.array([np.log((1 + n_img) / (1 + counts.get(w, 0))) + 1.0
                              for w in range(self.n_words_)])
        return self

    def _split(self, node, desc, level, rng):
        if level == self.depth:
            return
        uniq = np.unique(desc, axis=0)
        if len(uniq) <= self.branching:
            centers, groups = uniq, [None] * len(uniq)
            stop = True
        else:
            medoids = _kmedoids(desc, self.branching, rng)
            centers = desc[medoids]
            assign = np.argmin(hamming_matrix(desc, centers), axis=1)
            groups = [desc[assign == c] for c in range(len(centers))]
            stop = False
        for center, group in zip(centers, groups):
            child = len(self.centers_)
            self.centers_.append(center)
            self.parent_.append(node)
            self.children_.append([])
            self.children_[node].append(child)
            if not stop and len(group):
                self._split(child, group, level + 1, rng)

    def _index_words(self):
        self.centers_ = np.asarray(self.centers_, dtype=np.uint8)
        self.word_of_node_ = np.full(len(self.centers_), -1)
        leaves = [k for k in range(1, len(self.centers_)) if not self.children_[k]]
        self.word_of_node_[leaves] = np.arange(len(leaves))
        self.leaf_nodes_ = np.array(leaves)
        self.n_words_ = len(leaves)

    def _check(self):
        if not hasattr(self, "idf_"):
            raise NotFittedError("Vocabulary is not fitted yet")

    def quantize(self, descriptors) -> np.ndarray:
        """Word id of every descriptor (nearest child at each level, ties to the first)."""
        desc = np.asarray(descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        node = np.zeros(len(desc), dtype=int)
        while True:
            active = np.array([bool(self.children_[k]) for k in node], dtype=bool)
            if not active.any():
                break
            for parent in np.unique(node[active]):
                rows = np.flatnonzero(node == parent)
                kids = np.array(self.children_[parent])
                dist = hamming_matrix(desc[rows], self.centers_[kids])
                node[rows] = kids[np.argmin(dist, axis=1)]
        return self.word_of_node_[node]

    def transform(self, descriptors) -> dict:
        """Sparse tf-idf vector ``{word: weight}``; empty for no descriptors."""
        if not hasattr(self, "n_words_"):
            raise NotFittedError("Vocabulary is not fitted yet")
        words = self.quantize(descriptors) if len(descriptors) else np.zeros(0, int)
        if not len(words):
            return {}
        counts = Counter(words.tolist())
        total = len(words)
        return {int(w): c / total * float(self.idf_[w]) for w, c in sorted(counts.items())}

    def save(self, path):
        self._check()
        with Path(path).open("w") as fh:
            fh.write(f"# {FORMAT_TAG}\n")
            fh.write(f"branching {self.branching} depth {self.depth} nodes {len(self.centers_)} "
                     f"words {self.n_words_}\n")
            for k in range(1, len(self.centers_)):
                w = int(self.word_of_node_[k])
                idf = repr(float(self.idf_[w])) if w >= 0 else "0"
                fh.write(f"{k} {self.parent_[k]} {w} {idf} {self.centers_[k].tobytes().hex()}\n")

    @classmethod
    def load(cls, path) -> Vocabulary:
        path = Path(path)
        with path.open() as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0].strip() != f"# {FORMAT_TAG}":
            raise ValueError(f"{path}:1: not a vocabulary file")
        try:
            head = lines[1].split()
            vocab = cls(int(head[1]), int(head[3]))
            n_nodes, n_words = int(head[5]), int(head[7])
        except (IndexError, ValueError):
            raise ValueError(f"{path}:2: malformed header") from None
        centers = [np.zeros(DESCRIPTOR_BYTES, np.uint8)]
        parents, children = [-1], [[] for _ in range(n_nodes)]
        words = [-1]
        idf = np.zeros(n_words)
        for lineno, line in enumerate(lines[2:], 3):
            try:
                k, parent, w, weight, hexdesc = line.split()
                k, parent, w = int(k), int(parent), int(w)
                if k != len(centers):
                    raise ValueError(f"node id {k} out of order")
                raw = bytes.fromhex(hexdesc)
                if len(raw) != DESCRIPTOR_BYTES:
                    raise ValueError("descriptor must be 32 bytes")
                children[parent].append(k)
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            centers.append(np.frombuffer(raw, np.uint8))
            parents.append(parent)
            words.append(w)
            if w >= 0:
                idf[w] = float(weight)
        if len(centers) != n_nodes:
            raise ValueError(f"{path}: expected {n_nodes} nodes, found {len(centers)}")
        vocab.centers_ = np.asarray(centers, dtype=np.uint8)
        vocab.parent_ = parents
        vocab.children_ = children
        vocab.word_of_node_ = np.array(words)
        vocab.leaf_nodes_ = np.flatnonzero(vocab.word_of_node_ >= 0)
        vocab.n_words_ = n_words
        vocab.idf_ = idf
        return vocab


def bundled_vocabulary() -> Vocabulary:
    """Small vocabulary (100 words) trained on rendered synthetic frames."""
    with resources.as_file(resources.files("rkhs_slam").joinpath("data/synthetic_vocabulary.txt")) as path:
        return Vocabulary.load(path)
