#!/usr/bin/env python3
"""
Complete example: Tune the solver on a small Poisson cube
This example runs the plain evolution strategy over the 7-parameter space and
compares the tuned configuration with the defaults.
"""

import logging
import os

from dotenv import load_dotenv

from amg_solver import SolverConfig, format_solver_config
from fitness_evaluator import FitnessMode, calibrate_budget, evaluate_config
from hes_optimizer import EsConfig, run
from param_space import cardinality, load_space
from sparse_core import load_problem, parse_problem_spec
from tuner_config import load_settings
from tuner_errors import HesTunerError


def main():
    load_dotenv()
    settings = load_settings()
    logging.basicConfig(level=settings.log_level, format=settings.log_format)

    try:
        print("🧊 Building cube:12 ...")
        problem = load_problem(parse_problem_spec("cube:12"), seed=settings.seed)
        space = load_space(os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "space7.space"))
        print(f"✅ {problem.n} unknowns, {cardinality(space)} candidate configurations")

        budget = calibrate_budget(problem, FitnessMode.WORK_UNITS)
        default = evaluate_config(problem, SolverConfig(), budget)
        print(f"📏 Default configuration: {default.value:.0f} work units")

        print("\n🚀 Running S5/R5 ...")
        best_cfg, trace = run(problem, space, EsConfig(seed=settings.seed, max_generations=15), budget,
                              jobs=settings.jobs)
        best = trace.best[1].value
        print(f"✅ {len(trace.generations)} generations, {trace.total_evaluations} evaluations")
        print(f"🏁 Best: {best:.0f} work units ({default.value / best:.2f}x vs default)")
        print("\n" + format_solver_config(best_cfg))
    except HesTunerError as e:
        print(f"❌ Tuning failed: {e}")


if __name__ == "__main__":
    main()
