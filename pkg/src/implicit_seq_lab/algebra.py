"""Finite monoids and groups as explicit Cayley tables.

A ``MonoidTable`` stores the full composition table of a finite monoid;
``table[i, j]`` is the index of ``i ∘ j``.  The composition convention is
fixed throughout the package as "apply the left operand first, then the
right", so prefix products of a token sequence read left to right.  These
tables are the exact ground truth that word-problem datasets are labelled
against, so every constructor validates closure, identity and (by brute
force) associativity.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

BRUTE_FORCE_LIMIT = 512


class AlgebraError(ValueError):
    """Invalid table or out-of-domain constructor argument."""


@dataclass(frozen=True)
class MonoidTable:
    """A finite monoid (or group) given by its full composition table."""

    size: int
    table: np.ndarray  # (size, size) int array, table[i, j] = i∘j
    identity: int
    kind: str = "monoid"  # "monoid" or "group"
    names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=np.int64))
        self.table.setflags(write=False)

    def compose(self, i: int, j: int) -> int:
        return int(self.table[i, j])

    def inverse(self, i: int) -> int:
        if self.kind != "group":
            raise AlgebraError("inverses are only defined for groups")
        return int(np.nonzero(self.table[i] == self.identity)[0][0])

    def name_of(self, i: int) -> str:
        if self.names is not None:
            return self.names[i]
        return str(i)

    def to_json(self) -> str:
        doc = {
            "size": self.size,
            "identity": self.identity,
            "kind": self.kind,
            "table": self.table.tolist(),
            "names": list(self.names) if self.names is not None else None,
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "MonoidTable":
        doc = json.loads(text)
        names = tuple(doc["names"]) if doc.get("names") else None
        m = MonoidTable(
            size=doc["size"],
            table=np.asarray(doc["table"], dtype=np.int64),
            identity=doc["identity"],
            kind=doc["kind"],
            names=names,
        )
        validate_table(m)
        return m


def validate_table(m: MonoidTable) -> None:
    """Check closure, identity, associativity and (for groups) inverses.

    Associativity is checked by full enumeration, so this is O(size^3).
    """
    t = m.table
    if t.shape != (m.size, m.size):
        raise AlgebraError(f"table shape {t.shape} does not match size {m.size}")
    if t.min() < 0 or t.max() >= m.size:
        raise AlgebraError("table is not closed: entry outside [0, size)")
    e = m.identity
    if not (np.array_equal(t[e], np.arange(m.size)) and np.array_equal(t[:, e], np.arange(m.size))):
        raise AlgebraError(f"element {e} is not a two-sided identity")
    if not check_associative(m):
        raise AlgebraError("table is not associative")
    if m.kind == "group":
        # every row and column must be a permutation; this implies inverses
        # exist once associativity and identity hold
        ids = np.arange(m.size)
        for i in range(m.size):
            if not np.array_equal(np.sort(t[i]), ids) or not np.array_equal(np.sort(t[:, i]), ids):
                raise AlgebraError(f"row/column {i} is not a permutation; not a group")


def check_associative(m: MonoidTable) -> bool:
    """Brute-force associativity check: (i∘j)∘k == i∘(j∘k) for all triples."""
    if m.size > BRUTE_FORCE_LIMIT:
        raise AlgebraError(f"associativity brute force limited to size {BRUTE_FORCE_LIMIT}")
    t = m.table
    # left[i, j, k] = t[t[i, j], k]; right[i, j, k] = t[i, t[j, k]]
    # chunk over i to bound peak memory for the largest tables
    for i0 in range(0, m.size, 32):
        i1 = min(i0 + 32, m.size)
        left = t[t[i0:i1], :]
        right = t[i0:i1][:, t]
        if not np.array_equal(left, right):
            return False
    return True


def check_aperiodic(m: MonoidTable) -> bool:
    """True iff every element m satisfies m^k = m^(k+1) for some k <= size."""
    if m.size > BRUTE_FORCE_LIMIT:
        raise AlgebraError(f"aperiodicity brute force limited to size {BRUTE_FORCE_LIMIT}")
    for x in range(m.size):
        power = x
        ok = False
        for _ in range(m.size):
            nxt = m.compose(power, x)
            if nxt == power:
                ok = True
                break
            power = nxt
        if not ok:
            return False
    return True


def _perm_compose(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    # apply a first, then b: x -> b[a[x]]
    return tuple(b[a[x]] for x in range(len(a)))


def _perm_parity(p: Sequence[int]) -> int:
    seen = [False] * len(p)
    parity = 0
    for i in range(len(p)):
        if seen[i]:
            continue
        j, cycle = i, 0
        while not seen[j]:
            seen[j] = True
            j = p[j]
            cycle += 1
        parity ^= (cycle - 1) & 1
    return parity


def _table_from_perms(perms: list[tuple[int, ...]]) -> MonoidTable:
    index = {p: i for i, p in enumerate(perms)}
    size = len(perms)
    table = np.empty((size, size), dtype=np.int64)
    for i, a in enumerate(perms):
        for j, b in enumerate(perms):
            table[i, j] = index[_perm_compose(a, b)]
    names = tuple("".join(map(str, p)) for p in perms)
    m = MonoidTable(size=size, table=table, identity=index[tuple(range(len(perms[0])))],
                    kind="group", names=names)
    validate_table(m)
    return m


def make_symmetric_group(n: int) -> MonoidTable:
    """All permutations of {0..n-1} in lexicographic one-line order.

    Composition applies the left operand first (x -> right[left[x]]), and the
    identity permutation sorts to index 0.
    """
    if not 2 <= n <= 5:
        raise AlgebraError(f"symmetric group size must be in [2, 5], got {n}")
    perms = sorted(itertools.permutations(range(n)))
    return _table_from_perms(perms)


def make_alternating_group(n: int) -> MonoidTable:
    """Even permutations of {0..n-1}, same indexing convention as above."""
    if not 3 <= n <= 5:
        raise AlgebraError(f"alternating group size must be in [3, 5], got {n}")
    perms = sorted(p for p in itertools.permutations(range(n)) if _perm_parity(p) == 0)
    return _table_from_perms(perms)


def make_reset_monoid(r: int) -> MonoidTable:
    """Identity plus r "reset" elements: a∘b = b unless b is the identity.

    Every non-identity element is idempotent, so the monoid is aperiodic.
    r = 3 gives the four-element aperiodic monoid used by the mixed word
    problem.
    """
    if r < 1:
        raise AlgebraError(f"need at least one reset element, got {r}")
    size = r + 1
    table = np.tile(np.arange(size, dtype=np.int64), (size, 1))
    table[:, 0] = np.arange(size)  # a∘e = a
    names = ("e",) + tuple(f"r{i}" for i in range(1, size))
    m = MonoidTable(size=size, table=table, identity=0, kind="monoid", names=names)
    validate_table(m)
    return m


@dataclass(frozen=True)
class ProductMonoid:
    """Direct product of two monoids with componentwise composition.

    Flat element indices are ``i_left * |right| + i_right``.  Elements whose
    right component is the right identity are tagged "simple"; all others are
    "hard" (``hard_mask``).
    """

    left: MonoidTable
    right: MonoidTable
    flattened: MonoidTable = field(init=False)

    def __post_init__(self):
        nl, nr = self.left.size, self.right.size
        lt, rt = self.left.table, self.right.table
        # flat composition: (a_l, a_r)∘(b_l, b_r) = (a_l∘b_l, a_r∘b_r)
        flat = (lt[:, None, :, None] * nr + rt[None, :, None, :]).reshape(nl * nr, nl * nr)
        names = None
        if self.left.names is not None and self.right.names is not None:
            names = tuple(
                f"({self.left.names[i]},{self.right.names[j]})"
                for i in range(nl) for j in range(nr)
            )
        kind = "group" if (self.left.kind == "group" and self.right.kind == "group") else "monoid"
        m = MonoidTable(
            size=nl * nr,
            table=flat,
            identity=self.left.identity * nr + self.right.identity,
            kind=kind,
            names=names,
        )
        object.__setattr__(self, "flattened", m)

    @property
    def size(self) -> int:
        return self.flattened.size

    def flat_index(self, i_left: int, i_right: int) -> int:
        return i_left * self.right.size + i_right

    def split_index(self, flat: int) -> tuple[int, int]:
        return flat // self.right.size, flat % self.right.size

    @property
    def hard_mask(self) -> np.ndarray:
        """Boolean per flat index: right component is not the right identity."""
        right_part = np.arange(self.size) % self.right.size
        return right_part != self.right.identity


def direct_product(left: MonoidTable, right: MonoidTable) -> ProductMonoid:
    validate_table(left)
    validate_table(right)
    return ProductMonoid(left=left, right=right)


def prefix_products(table: MonoidTable, word: Sequence[int]) -> np.ndarray:
    """Running products m_0, m_0∘m_1, ..., the label oracle for word problems.

    An empty word maps to an empty output.  Accepts a 1-D word or a batch of
    words shaped (batch, length); labels have the same shape.
    """
    word_arr = np.asarray(word, dtype=np.int64)
    if word_arr.size == 0:
        return np.zeros_like(word_arr)
    if word_arr.min() < 0 or word_arr.max() >= table.size:
        raise AlgebraError("word contains indices outside the monoid")
    batched = word_arr.ndim == 2
    w = word_arr if batched else word_arr[None, :]
    out = np.empty_like(w)
    out[:, 0] = w[:, 0]
    t = table.table
    for k in range(1, w.shape[1]):
        out[:, k] = t[out[:, k - 1], w[:, k]]
    return out if batched else out[0]


def derived_series(m: MonoidTable) -> list[int]:
    """Sizes along the commutator-subgroup chain G ⊇ [G,G] ⊇ ...

    Stops once the chain is stable (size repeats) or reaches the trivial
    group.  A group is solvable iff the series ends at 1; a perfect group
    repeats its own size immediately.
    """
    if m.kind != "group":
        raise AlgebraError("derived series is only defined for groups")
    if m.size > 120:
        raise AlgebraError("derived series brute force limited to size 120")
    t = m.table
    inv = np.array([m.inverse(i) for i in range(m.size)])

    current = list(range(m.size))
    sizes = [m.size]
    while True:
        # commutators a b a^-1 b^-1 of the current subgroup, then closure
        gens = set()
        for a in current:
            for b in current:
                gens.add(int(t[t[t[a, b], inv[a]], inv[b]]))
        sub = set(gens) | {m.identity}
        frontier = list(sub)
        while frontier:
            nxt = []
            for a in frontier:
                for g in gens:
                    c = int(t[a, g])
                    if c not in sub:
                        sub.add(c)
                        nxt.append(c)
            frontier = nxt
        sizes.append(len(sub))
        if len(sub) == 1 or len(sub) == sizes[-2]:
            return sizes
        current = sorted(sub)


def monoid_from_name(name: str) -> MonoidTable | ProductMonoid:
    """Resolve the named algebraic structures used by presets and configs.

    Supported: s2..s5, a3..a5, resetR (R >= 1), and reset3xA5 style products
    (e.g. "reset3xa5").
    """
    key = name.strip().lower()
    if "x" in key:
        left_name, right_name = key.split("x", 1)
        left = monoid_from_name(left_name)
        right = monoid_from_name(right_name)
        if isinstance(left, ProductMonoid) or isinstance(right, ProductMonoid):
            raise AlgebraError("nested products are not supported")
        return direct_product(left, right)
    if key.startswith("s") and key[1:].isdigit():
        return make_symmetric_group(int(key[1:]))
    if key.startswith("a") and key[1:].isdigit():
        return make_alternating_group(int(key[1:]))
    if key.startswith("reset") and key[5:].isdigit():
        return make_reset_monoid(int(key[5:]))
    raise AlgebraError(f"unknown monoid name: {name!r}")
