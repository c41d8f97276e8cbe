"""Word-problem sampling from mixed-hardness token distributions.

For a product monoid M^a x G, each position draws its aperiodic component
uniformly and its group component as the identity with probability 1-p,
otherwise uniformly over the non-identity elements (each with probability
p / (|G|-1)).  Tokens with a non-identity group component are "hard": they
are the ones a fixed-depth parallel model cannot resolve over arbitrary
lengths.  For a plain monoid, tokens are uniform over all elements.

Sampling is counter-based (Philox keyed by seed and stream index, with the
domain separating train / held-out / init streams), so any sample can be
regenerated in isolation and workers can sample concurrently with identical
results.  Labels always come from the exact prefix-product oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO, Union

import numpy as np

from .algebra import AlgebraError, MonoidTable, ProductMonoid, monoid_from_name, prefix_products

DOMAIN_TRAIN = np.uint64(0xDA7A_0000)
DOMAIN_HELDOUT = np.uint64(0xDA7A_0001)

HELDOUT_SIZE_DEFAULT = 10_000


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DistributionSpec:
    """Token distribution for one split: monoid, hardness p, length, seed."""

    monoid: Union[MonoidTable, ProductMonoid]
    p: float = 0.1
    length: int = 64
    seed: int = 0
    heldout: bool = False  # held-out streams never collide with training ones

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise DatasetError(f"hard-token probability must be in [0,1], got {self.p}")
        if self.length < 1:
            raise DatasetError(f"length must be >= 1, got {self.length}")

    @property
    def table(self) -> MonoidTable:
        return self.monoid.flattened if isinstance(self.monoid, ProductMonoid) else self.monoid

    @property
    def vocab_size(self) -> int:
        return self.table.size

    def describe(self) -> dict:
        return {
            "monoid_size": self.vocab_size,
            "product": isinstance(self.monoid, ProductMonoid),
            "p": self.p,
            "length": self.length,
            "seed": self.seed,
            "heldout": self.heldout,
        }


@dataclass(frozen=True)
class WordProblemSample:
    tokens: np.ndarray
    labels: np.ndarray
    hard_mask: np.ndarray

    def __post_init__(self):
        if not (self.tokens.shape == self.labels.shape == self.hard_mask.shape):
            raise DatasetError("tokens/labels/hard_mask shapes disagree")


def _stream_rng(spec: DistributionSpec, stream_index: int) -> np.random.Generator:
    domain = DOMAIN_HELDOUT if spec.heldout else DOMAIN_TRAIN
    key = np.array([np.uint64(spec.seed), domain], dtype=np.uint64)
    counter = np.array([np.uint64(stream_index), 0, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _sample_tokens(spec: DistributionSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    m = spec.monoid
    if isinstance(m, ProductMonoid):
        left = rng.integers(0, m.left.size, size=n)
        coin = rng.random(n)
        # uniform over G \ {e}: draw in [0, |G|-1) and skip over the identity
        g_non = rng.integers(0, m.right.size - 1, size=n)
        g_non = g_non + (g_non >= m.right.identity)
        right = np.where(coin < spec.p, g_non, m.right.identity)
        return left * m.right.size + right
    return rng.integers(0, m.size, size=n)


def sample_word(spec: DistributionSpec, stream_index: int) -> WordProblemSample:
    """One sequence; deterministic given (seed, heldout flag, stream_index)."""
    rng = _stream_rng(spec, stream_index)
    tokens = _sample_tokens(spec, rng, spec.length)
    labels = prefix_products(spec.table, tokens)
    if isinstance(spec.monoid, ProductMonoid):
        hard = spec.monoid.hard_mask[tokens]
    else:
        hard = tokens != spec.table.identity
    return WordProblemSample(tokens=tokens, labels=labels, hard_mask=hard)


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (batch, length)
    labels: np.ndarray
    hard_mask: np.ndarray


def make_batch(spec: DistributionSpec, batch_size: int, epoch_index: int) -> Batch:
    """Batch over disjoint stream indices; fully reproducible."""
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    base = epoch_index * batch_size
    samples = [sample_word(spec, base + i) for i in range(batch_size)]
    return Batch(
        tokens=np.stack([s.tokens for s in samples]),
        labels=np.stack([s.labels for s in samples]),
        hard_mask=np.stack([s.hard_mask for s in samples]),
    )


def heldout_batch(spec: DistributionSpec, n_sequences: int, offset: int = 0) -> Batch:
    """Slice of the fixed held-out set (streams offset..offset+n) for a spec."""
    eval_spec = DistributionSpec(monoid=spec.monoid, p=spec.p, length=spec.length,
                                 seed=spec.seed, heldout=True)
    samples = [sample_word(eval_spec, offset + i) for i in range(n_sequences)]
    return Batch(
        tokens=np.stack([s.tokens for s in samples]),
        labels=np.stack([s.labels for s in samples]),
        hard_mask=np.stack([s.hard_mask for s in samples]),
    )


# ---------------------------------------------------------------------------
# export format: header line with the spec, then one sample per line with
# 2L space-separated integers (tokens then labels)


def export_samples(spec: DistributionSpec, stream_indices: Iterable[int], fh: TextIO,
                   monoid_name: Optional[str] = None) -> int:
    header = dict(spec.describe())
    if monoid_name is not None:
        header["monoid"] = monoid_name
    fh.write(json.dumps(header) + "\n")
    n = 0
    for idx in stream_indices:
        s = sample_word(spec, idx)
        fh.write(" ".join(map(str, np.concatenate([s.tokens, s.labels]))) + "\n")
        n += 1
    return n


def load_samples(fh: TextIO) -> tuple[dict, Batch]:
    header = json.loads(fh.readline())
    length = header["length"]
    tokens, labels = [], []
    for line in fh:
        values = np.array(line.split(), dtype=np.int64)
        if values.size != 2 * length:
            raise DatasetError(f"expected {2 * length} integers per line, got {values.size}")
        tokens.append(values[:length])
        labels.append(values[length:])
    tokens_arr = np.stack(tokens)
    labels_arr = np.stack(labels)
    return header, Batch(tokens=tokens_arr, labels=labels_arr,
                         hard_mask=np.zeros_like(tokens_arr, dtype=bool))


def spec_from_names(monoid_name: str, p: float, length: int, seed: int,
                    heldout: bool = False) -> DistributionSpec:
    try:
        monoid = monoid_from_name(monoid_name)
    except AlgebraError as exc:
        raise DatasetError(str(exc)) from exc
    return DistributionSpec(monoid=monoid, p=p, length=length, seed=seed, heldout=heldout)
