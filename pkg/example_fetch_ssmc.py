#!/usr/bin/env python3
"""
Complete example: Download a SuiteSparse matrix and solve it
This example fetches HB/bcsstk01, caches it locally and solves it with the
default solver configuration.
"""

from dotenv import load_dotenv

from amg_solver import SolverConfig, solve
from sparse_core import load_problem, parse_problem_spec
from ssmc_client import SsmcClient
from tuner_config import load_settings
from tuner_errors import HesTunerError


def main():
    load_dotenv()
    settings = load_settings()
    client = SsmcClient.from_settings(settings)

    print("🌐 Checking the collection ...")
    status = client.test_connection()
    if not status['success']:
        print(f"❌ {status['message']}")
        return
    print(f"✅ {status['message']}")

    try:
        problem = load_problem(parse_problem_spec("ssmc:HB/bcsstk01"), ssmc_resolver=client.fetch_matrix)
        print(f"📥 {problem.name}: {problem.n} rows, {problem.matrix.nnz} nonzeros")
        outcome = solve(problem.matrix, problem.rhs, SolverConfig())
        print(f"{'✅' if outcome.converged else '❌'} {outcome.reason}: {outcome.iterations} iterations, "
              f"relative residual {outcome.final_relative_residual:.2e}")
    except HesTunerError as e:
        print(f"❌ {e}")


if __name__ == "__main__":
    main()
