#!/usr/bin/env python3
"""
Complete example: Sample, balance and train a surrogate
This example samples a small dataset on cube:10, balances it and reports
hold-out R2, F_0.05 and the alpha picked for five random mutations.
"""

import logging
import os

import numpy as np
from dotenv import load_dotenv

from fitness_evaluator import FitnessMode, balance, calibrate_budget, dataset_stats, sample_dataset, split
from param_space import load_space
from sparse_core import load_problem, parse_problem_spec
from surrogate_net import TrainConfig, holdout_report, train
from tuner_config import load_settings
from tuner_errors import HesTunerError


def main():
    load_dotenv()
    settings = load_settings()
    logging.basicConfig(level=settings.log_level, format=settings.log_format)
    rng = np.random.default_rng(settings.seed)

    try:
        problem = load_problem(parse_problem_spec("cube:10"), seed=settings.seed)
        space = load_space(os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "tiny.space"))
        budget = calibrate_budget(problem, FitnessMode.WORK_UNITS)

        print("🎲 Sampling 300 configurations ...")
        raw = sample_dataset(problem, space, 300, rng, budget, jobs=settings.jobs)
        stats = dataset_stats(raw)
        print(f"✅ {stats['non_converged_percent']:.1f}% non-converged, median {stats['median']:.0f} work units")

        balanced = balance(raw)
        print(f"⚖️ Balanced at Q3 = {balanced.q3:.0f}")
        train_set, valid_set = split(balanced, 0.1, rng)

        print("\n🧠 Training ...")
        model = train(train_set, space, TrainConfig(seed=settings.seed, hidden_layers=(64, 32, 16)))
        report = holdout_report(model, space, valid_set, lambda_r=5)
        print(f"📊 R2 = {report['r_squared']:.3f}")
        for alpha, score in report['f_alpha'].items():
            print(f"   F_{alpha} = {score:.3f}")
        print(f"🎯 Picked alpha = {report['optimal_alpha']}")
    except HesTunerError as e:
        print(f"❌ Training example failed: {e}")


if __name__ == "__main__":
    main()
