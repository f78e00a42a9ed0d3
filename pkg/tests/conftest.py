"""Shared fixtures for the tuner test suite."""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from fitness_evaluator import Budget, FitnessMode  # noqa: E402
from param_space import load_space, parse_space  # noqa: E402
from sparse_core import load_problem, parse_problem_spec  # noqa: E402

CONFIG_DIR = os.path.join(ROOT, "configs")


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR


@pytest.fixture(scope="session")
def space7():
    return load_space(os.path.join(CONFIG_DIR, "space7.space"))


@pytest.fixture(scope="session")
def tiny_space():
    return load_space(os.path.join(CONFIG_DIR, "tiny.space"))


@pytest.fixture(scope="session")
def small_space():
    """Three parameters, 24 points."""
    return parse_space("cycle : list(V, W)\n"
                       "pre_cheby_order : ints(1, 4)\n"
                       "p_max_elements : list(2, 4, 6)\n")


@pytest.fixture(scope="session")
def cube6():
    return load_problem(parse_problem_spec("cube:6"))


@pytest.fixture(scope="session")
def cube10():
    return load_problem(parse_problem_spec("cube:10"))


@pytest.fixture
def work_budget():
    return Budget(mode=FitnessMode.WORK_UNITS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_file(tmp_path):
    """Write text to tmp_path/name and return the path."""
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return _write
