import numpy as np
import pytest

from pksim.deprivilege.corpus import ProgramGenerator, corpus, planted_cases, random_programs
from pksim.deprivilege.scanner import scan
from pksim.isa.decoder import decode_all


class TestPlantedCases:
    @pytest.mark.parametrize("name", sorted(planted_cases()))
    def test_each_case_has_an_occurrence(self, name):
        code = planted_cases()[name]
        assert scan(code)
        assert decode_all(code)


class TestGenerator:
    def test_seeded(self):
        assert list(random_programs(10, seed=4)) == list(random_programs(10, seed=4))
        assert list(random_programs(10, seed=4)) != list(random_programs(10, seed=5))

    def test_programs_decode(self):
        generator = ProgramGenerator(np.random.default_rng(0))
        for _ in range(50):
            assert decode_all(generator.program())

    def test_fixed_length(self):
        program = ProgramGenerator(np.random.default_rng(0)).program(n_instrs=7)
        assert len(decode_all(program)) == 7

    def test_planting_produces_occurrences(self):
        generator = ProgramGenerator(np.random.default_rng(0), plant_rate=1.0)
        assert any(scan(generator.program()) for _ in range(10))


class TestCorpus:
    def test_planted_cases_come_first(self):
        names = [name for name, _ in corpus(3)]
        planted = list(planted_cases())
        assert names[:len(planted)] == planted
        assert names[len(planted):] == ["random-0", "random-1", "random-2"]
