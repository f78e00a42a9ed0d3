"""Search-space parsing, encoding and mutation."""

from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from amg_solver import CycleType, SolverConfig
from param_space import (EPSILON_VALUE, ParameterVector, cardinality, decode, encode, enumerate_vectors,
                         fingerprint, format_space, load_space, normalize, normalize_many, parse_space,
                         random_vector, soft_mutate, try_encode, validate_vector)
from tuner_errors import OffGridError, SearchSpaceError


class TestParsing:
    def test_shipped_cardinalities(self, space7, tiny_space, config_dir):
        assert cardinality(space7) == 6336
        assert cardinality(tiny_space) == 1152
        space13 = load_space(f"{config_dir}/space13.space")
        assert space13.dimension == 13
        assert cardinality(space13) == 13305600000

    def test_cardinality_matches_enumeration(self):
        space = parse_space("cycle : list(V, W, F)\n"
                            "precond_iters : ints(1, 3)\n"
                            "p_max_elements : ints(0, 10)\n"
                            "coarsening : list(classical_rs, pmis_like)\n")
        vectors = list(enumerate_vectors(space))
        assert cardinality(space) == len(vectors) == 198
        assert len(set(vectors)) == len(vectors)

    def test_grid_kinds(self):
        space = parse_space("strength_threshold : range(0, 0.9, 0.1)\n"
                            "p_max_elements : ints(2, 6)\n"
                            "max_row_sum : list(eps, 0.5)\n"
                            "cycle : list(V, F)\n")
        strength, p_max, row_sum, cycle = space.specs
        assert strength.size == 10
        assert strength.grid()[3] == 0.3
        assert strength.grid()[-1] == 0.9
        assert p_max.grid() == [2, 3, 4, 5, 6]
        assert row_sum.grid() == [EPSILON_VALUE, 0.5]
        assert cycle.grid() == [CycleType.V, CycleType.F]

    def test_unmentioned_fields_are_frozen_at_defaults(self):
        space = parse_space("cycle : list(V, W)\nouter_max_iters : frozen(20)\n")
        assert space.frozen['outer_max_iters'] == 20
        assert space.frozen['trunc_factor'] == SolverConfig().trunc_factor
        assert 'cycle' not in space.frozen
        cfg = decode(space, ParameterVector((1,)))
        assert cfg == replace(SolverConfig(), cycle=CycleType.W, outer_max_iters=20)

    @pytest.mark.parametrize("text", [
        "cycle = V",
        "speed : ints(1, 2)",
        "cycle : list(V)\ncycle : list(W)",
        "cycle : list(V)\ncycle : frozen(W)",
        "precond_iters : ints(3, 1)",
        "cycle : list(X)",
        "strength_threshold : range(0, 0.5, 0)",
        "cycle : list()",
        "outer_rel_tol : frozen(1, 2)",
    ])
    def test_malformed(self, text):
        with pytest.raises(SearchSpaceError):
            parse_space(text)

    def test_fingerprint_ignores_layout(self):
        a = parse_space("cycle : list(V, W)\npre_cheby_order : ints(1, 4)\n")
        b = parse_space("# comment\n\n  cycle:list(V, W)   # trailing\npre_cheby_order : ints(1,4)\n")
        assert fingerprint(a) == fingerprint(b)
        assert fingerprint(a) != fingerprint(parse_space("cycle : list(V, W)\npre_cheby_order : ints(1, 3)\n"))

    def test_canonical_text_parses_back(self, space7):
        assert fingerprint(parse_space(format_space(space7))) == fingerprint(space7)


class TestEncoding:
    def test_default_on_space7(self, space7):
        v = encode(space7, SolverConfig())
        assert v.indices == (0, 0, 0, 1, 4, 1, 1)
        assert decode(space7, v) == SolverConfig()

    def test_default_is_off_the_larger_grid(self, config_dir):
        space13 = load_space(f"{config_dir}/space13.space")
        assert try_encode(space13, SolverConfig()) is None

    def test_reference_space(self, config_dir):
        space = load_space(f"{config_dir}/space7_reference.space")
        assert space.names == ["coarsening", "interpolation", "pre_cheby_order", "post_cheby_order"]
        assert cardinality(space) == 64
        assert try_encode(space, SolverConfig()) is None
        cfg = decode(space, ParameterVector((1, 0, 3, 3)))
        frozen = (cfg.max_row_sum, cfg.coarse_matrix_size, cfg.strength_threshold, cfg.trunc_factor)
        assert frozen == (0.9, 100, 0.5, 0.25)
        assert (cfg.cycle, cfg.precond_iters, cfg.p_max_elements) == (CycleType.V, 1, 4)
        assert (cfg.pre_cheby_order, cfg.post_cheby_order) == (4, 4)

    def test_off_grid_names_the_parameter(self, tiny_space):
        with pytest.raises(OffGridError) as excinfo:
            encode(tiny_space, replace(SolverConfig(), p_max_elements=3))
        assert excinfo.value.parameter == 'p_max_elements'

    def test_frozen_disagreement(self, tiny_space):
        assert try_encode(tiny_space, replace(SolverConfig(), outer_max_iters=20)) is None

    def test_enum_values_encode(self, tiny_space):
        cfg = replace(SolverConfig(), cycle=CycleType.F, p_max_elements=6)
        v = try_encode(tiny_space, cfg)
        assert v.indices[0] == 2
        assert decode(tiny_space, v) == cfg

    def test_every_small_vector_round_trips(self, small_space):
        vectors = list(enumerate_vectors(small_space))
        assert len(vectors) == 24
        assert len(set(vectors)) == 24
        assert vectors[0].indices == (0, 0, 0)
        assert vectors[-1].indices == (1, 3, 2)
        assert all(encode(small_space, decode(small_space, v)) == v for v in vectors)

    @pytest.mark.parametrize("indices", [(0, 0), (0, 0, 0, 0), (2, 0, 0), (0, -1, 0)])
    def test_invalid_vectors(self, small_space, indices):
        with pytest.raises(SearchSpaceError):
            validate_vector(small_space, ParameterVector(indices))
        with pytest.raises(SearchSpaceError):
            decode(small_space, ParameterVector(indices))


class TestMutation:
    def test_random_vectors_are_valid(self, space7, rng):
        for _ in range(200):
            validate_vector(space7, random_vector(space7, rng))

    def test_soft_mutation_moves_at_most_one_step(self, space7, rng):
        v = encode(space7, SolverConfig())
        for _ in range(200):
            w = soft_mutate(space7, v, rng)
            validate_vector(space7, w)
            assert all(abs(a - b) <= 1 for a, b in zip(v.indices, w.indices))

    def test_soft_mutation_clamps_at_the_ends(self, small_space, rng):
        corner = ParameterVector((1, 3, 2))
        for _ in range(100):
            validate_vector(small_space, soft_mutate(small_space, corner, rng))

    def test_stay_probability_one_is_identity(self, space7, rng):
        v = random_vector(space7, rng)
        assert soft_mutate(space7, v, rng, stay_probability=1.0) == v

    def test_mutation_is_seeded(self, space7):
        v = encode(space7, SolverConfig())
        a = [soft_mutate(space7, v, np.random.default_rng(7)) for _ in range(3)]
        b = [soft_mutate(space7, v, np.random.default_rng(7)) for _ in range(3)]
        assert a == b

    def test_random_vector_is_uniform_per_parameter(self, small_space):
        rng = np.random.default_rng(2024)
        draws = np.array([random_vector(small_space, rng).indices for _ in range(12000)])
        for column, size in enumerate(small_space.sizes):
            counts = np.bincount(draws[:, column], minlength=size)
            assert len(counts) == size
            assert stats.chisquare(counts).pvalue > 1e-4

    def test_soft_mutation_step_frequencies(self):
        space = parse_space("pre_cheby_order : ints(1, 4)\n"
                            "post_cheby_order : ints(1, 4)\n"
                            "p_max_elements : ints(0, 10)\n")
        start = ParameterVector((1, 2, 5))
        rng = np.random.default_rng(99)
        steps = np.array([soft_mutate(space, start, rng).indices for _ in range(20000)]) - np.array(start.indices)
        for column in range(space.dimension):
            assert np.mean(steps[:, column] == 0) == pytest.approx(0.5, abs=0.02)
            assert np.mean(steps[:, column] == 1) == pytest.approx(0.25, abs=0.02)
            assert np.mean(steps[:, column] == -1) == pytest.approx(0.25, abs=0.02)


class TestNormalize:
    def test_unit_interval(self, small_space):
        assert np.allclose(normalize(small_space, ParameterVector((1, 2, 1))), [1.0, 2.0 / 3.0, 0.5])

    def test_single_point_grid(self):
        space = parse_space("cycle : list(V)\npre_cheby_order : ints(1, 3)\n")
        assert normalize(space, ParameterVector((0, 2))).tolist() == [0.0, 1.0]

    def test_many(self, small_space):
        X = normalize_many(small_space, list(enumerate_vectors(small_space)))
        assert X.shape == (24, 3)
        assert X.min() == 0.0 and X.max() == 1.0
        assert normalize_many(small_space, []).shape == (0, 3)
