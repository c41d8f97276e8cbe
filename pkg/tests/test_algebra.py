import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_seq_lab.algebra import (
    AlgebraError,
    MonoidTable,
    check_aperiodic,
    check_associative,
    derived_series,
    direct_product,
    make_alternating_group,
    make_reset_monoid,
    make_symmetric_group,
    monoid_from_name,
    prefix_products,
    validate_table,
)


def test_s2_structure_is_forced():
    s2 = make_symmetric_group(2)
    assert s2.size == 2
    assert s2.table.tolist() == [[0, 1], [1, 0]]
    assert s2.identity == 0


def test_s3_composition_applies_left_operand_first():
    s3 = make_symmetric_group(3)
    perms = [tuple(map(int, name)) for name in s3.names]
    a = perms.index((1, 0, 2))  # swap 0<->1
    b = perms.index((0, 2, 1))  # swap 1<->2
    # x -> b(a(x)): 0->1->2, 1->0->0, 2->2->1
    assert perms[s3.compose(a, b)] == (2, 0, 1)


def test_s5_and_a5_sizes_and_identity_index():
    s5 = make_symmetric_group(5)
    a5 = make_alternating_group(5)
    assert s5.size == 120 and a5.size == 60
    assert s5.identity == 0 and a5.identity == 0
    assert make_alternating_group(4).size == 12


def test_a3_is_cyclic_z3():
    a3 = make_alternating_group(3)
    assert a3.size == 3
    z3 = np.array([[0, 1, 2], [1, 2, 0], [2, 0, 1]])
    assert np.array_equal(a3.table, z3)


@pytest.mark.parametrize("n,maker", [(1, make_symmetric_group), (6, make_symmetric_group),
                                     (2, make_alternating_group), (6, make_alternating_group)])
def test_constructors_reject_out_of_range(n, maker):
    with pytest.raises(AlgebraError):
        maker(n)


def test_reset_monoid_semantics():
    m = make_reset_monoid(3)
    assert m.size == 4
    # every non-identity column is constant
    for j in range(1, 4):
        assert np.all(m.table[:, j] == j)
    assert m.compose(1, 2) == 2
    assert check_aperiodic(m)


def test_reset_monoid_rejects_zero():
    with pytest.raises(AlgebraError):
        make_reset_monoid(0)


def test_aperiodicity_of_groups_is_false():
    assert not check_aperiodic(make_symmetric_group(5))
    assert not check_aperiodic(make_symmetric_group(2))
    assert check_associative(make_alternating_group(5))


def test_validate_rejects_broken_tables():
    bad = MonoidTable(size=2, table=np.array([[0, 1], [1, 2]]), identity=0)
    with pytest.raises(AlgebraError):
        validate_table(bad)
    nonassoc = MonoidTable(size=3, table=np.array([[0, 1, 2], [1, 0, 0], [2, 0, 1]]), identity=0)
    with pytest.raises(AlgebraError):
        validate_table(nonassoc)


def test_direct_product_componentwise():
    prod = direct_product(make_reset_monoid(3), make_alternating_group(5))
    assert prod.size == 240
    flat = prod.flattened
    assert flat.identity == prod.flat_index(0, 0)
    lt, rt = prod.left.table, prod.right.table
    # full enumeration of the componentwise law
    for a in [0, 1, 17, 100, 239]:
        al, ar = prod.split_index(a)
        for b in range(prod.size):
            bl, br = prod.split_index(b)
            assert flat.table[a, b] == prod.flat_index(lt[al, bl], rt[ar, br])
    # hard elements are exactly those with non-identity right component
    assert prod.hard_mask.sum() == 4 * 59


def test_product_identity_and_mixed_composition():
    prod = direct_product(make_reset_monoid(2), make_symmetric_group(3))
    e = prod.flattened.identity
    assert prod.flattened.compose(e, e) == e
    # (m_a, g1)∘(e_a, g2) = (m_a, g1∘g2)
    m_a, g1, g2 = 1, 2, 4
    lhs = prod.flattened.compose(prod.flat_index(m_a, g1), prod.flat_index(0, g2))
    assert lhs == prod.flat_index(m_a, prod.right.compose(g1, g2))


def test_prefix_products_examples():
    s2 = make_symmetric_group(2)
    assert prefix_products(s2, [1, 1, 1]).tolist() == [1, 0, 1]
    assert prefix_products(s2, [0] * 5).tolist() == [0] * 5
    assert prefix_products(s2, []).size == 0

    s3 = make_symmetric_group(3)
    perms = [tuple(map(int, name)) for name in s3.names]
    swap01 = perms.index((1, 0, 2))
    swap12 = perms.index((0, 2, 1))
    out = prefix_products(s3, [swap01, swap12])
    assert [perms[i] for i in out] == [(1, 0, 2), (2, 0, 1)]


def test_prefix_products_batched_matches_rowwise():
    a5 = make_alternating_group(5)
    rng = np.random.default_rng(0)
    words = rng.integers(0, 60, size=(4, 17))
    batched = prefix_products(a5, words)
    for b in range(4):
        assert np.array_equal(batched[b], prefix_products(a5, words[b]))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_prefix_products_split_consistency(data):
    prod = monoid_from_name("reset3xa5").flattened
    n = data.draw(st.integers(min_value=2, max_value=32))
    word = data.draw(st.lists(st.integers(0, prod.size - 1), min_size=n, max_size=n))
    j = data.draw(st.integers(min_value=0, max_value=n - 2))
    out = prefix_products(prod, word)
    right = prefix_products(prod, word[j + 1:])
    for k in range(j + 1, n):
        assert out[k] == prod.compose(int(out[j]), int(right[k - j - 1]))


def test_derived_series():
    assert derived_series(make_symmetric_group(5)) == [120, 60, 60]
    assert derived_series(make_alternating_group(5)) == [60, 60]
    assert derived_series(make_symmetric_group(2)) == [2, 1]
    assert derived_series(make_symmetric_group(4)) == [24, 12, 4, 1]


def test_derived_series_rejects_monoids():
    with pytest.raises(AlgebraError):
        derived_series(make_reset_monoid(3))


def test_json_round_trip():
    a4 = make_alternating_group(4)
    back = MonoidTable.from_json(a4.to_json())
    assert back.size == a4.size and back.kind == "group"
    assert np.array_equal(back.table, a4.table)
    assert back.names == a4.names


def test_monoid_from_name():
    assert monoid_from_name("s5").size == 120
    assert monoid_from_name("A5").size == 60
    assert monoid_from_name("reset3").size == 4
    assert monoid_from_name("reset3xA5").size == 240
    with pytest.raises(AlgebraError):
        monoid_from_name("frobenius")
