import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flagcns.space import (ArchCode, SpaceConfig, _mutate_raw, canonicalize, crossover, decode, distinct_size,
                           encode, enumerate_codes, gene_options, mutate, parse_code, sample_random, space_size,
                           validate)

TYPES12 = tuple(f"t{i}" for i in range(12))


def codes(cfg):
    opts = gene_options(cfg)
    return st.tuples(*[st.sampled_from(o) for o in opts]).map(lambda g: ArchCode.from_genes(list(g), cfg.layers))


def test_space_size_default_setting():
    # 25 * 12^6 * 7! for the full library at L = 6
    assert space_size(SpaceConfig(6, TYPES12)) == 25 * 12 ** 6 * 5040


@pytest.mark.parametrize("layers,types", [(1, 6), (1, 12), (2, 2), (2, 3), (3, 1)])
def test_enumeration_matches_formula(layers, types):
    cfg = SpaceConfig(layers, tuple(f"t{i}" for i in range(types)))
    all_codes = list(enumerate_codes(cfg))
    assert len(all_codes) == space_size(cfg)
    assert len({canonicalize(c) for c in all_codes}) == distinct_size(cfg)


def test_known_small_counts():
    assert space_size(SpaceConfig(1, TYPES12)) == 600
    assert space_size(SpaceConfig(1)) == 300
    assert distinct_size(SpaceConfig(1)) == 25 * (1 + 6)


def test_canonicalize_collapses_tail():
    c = ArchCode(1, (2, 3, 4), (0, None, 1), 2)
    assert canonicalize(c) == ArchCode(1, (2, 0, 0), (0, None, None), 2)
    assert c.num_valid() == 1


def test_validate_rejects_forward_reference():
    with pytest.raises(ValueError):
        validate(ArchCode(0, (0, 0), (0, 2), 0), SpaceConfig(2))
    with pytest.raises(ValueError):
        validate(ArchCode(5, (0, 0), (0, 1), 0), SpaceConfig(2))


def test_text_form_round_trip():
    cfg = SpaceConfig(2)
    c = parse_code("IS3 | L1:gcn<-0 L2:None | OS4", cfg)
    assert c == ArchCode(3, (0, 0), (0, None), 4)
    assert parse_code(c.to_text(cfg), cfg) == c
    assert parse_code(str(c.genes()).replace("None", "null"), cfg) == c


def test_parse_rejects_garbage():
    with pytest.raises(ValueError):
        parse_code("IS3 L1", SpaceConfig(2))


def test_decode_encode_inverse():
    c = ArchCode(2, (1, 5, 0), (0, 1, None), 3)
    assert encode(decode(c)) == c


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_random_sample_valid_and_canonical(data):
    cfg = SpaceConfig(data.draw(st.integers(1, 6)))
    c = sample_random(cfg, data.draw(st.integers(0, 10 ** 6)))
    validate(c, cfg)
    assert canonicalize(c) == c


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_crossover_takes_each_gene_from_a_parent(data):
    cfg = SpaceConfig(data.draw(st.integers(1, 5)))
    a, b = data.draw(codes(cfg)), data.draw(codes(cfg))
    a, b = canonicalize(a), canonicalize(b)
    child = crossover(a, b, data.draw(st.integers(0, 10 ** 6)))
    validate(child, cfg)
    assert canonicalize(child) == child
    assert child.is_ in (a.is_, b.is_) and child.os in (a.os, b.os)
    for i in range(child.num_valid()):
        assert (child.ltype[i], child.lpre[i]) in {(a.ltype[i], a.lpre[i]), (b.ltype[i], b.lpre[i]),
                                                   (a.ltype[i], b.lpre[i]), (b.ltype[i], a.lpre[i])}


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_mutation_stays_in_space(data):
    cfg = SpaceConfig(data.draw(st.integers(1, 5)))
    c = mutate(data.draw(codes(cfg)), cfg, seed=data.draw(st.integers(0, 10 ** 6)))
    validate(c, cfg)


def test_mutation_rate_changes_expected_gene_count():
    cfg = SpaceConfig(6)
    rng = np.random.default_rng(0)
    base = sample_random(cfg, rng)
    changed = [sum(x != y for x, y in zip(base.genes(), _mutate_raw(base, cfg, 1 / cfg.num_genes, rng).genes()))
               for _ in range(4000)]
    assert np.mean(changed) == pytest.approx(1.0, abs=0.05)


def test_mutation_with_rate_one_changes_every_gene():
    cfg = SpaceConfig(3)
    c = sample_random(cfg, 1)
    m = _mutate_raw(c, cfg, 1.0, np.random.default_rng(0))
    assert all(x != y for x, y in zip(c.genes(), m.genes()))
