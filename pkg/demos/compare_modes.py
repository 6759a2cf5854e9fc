"""Train every reward mode over a few seeds on the left fold and print success counts.

Usage: python demos/compare_modes.py [n_seeds]
"""
import sys

from clothfold.harness import (
    RunConfig,
    RunReport,
    evaluate_policy,
    policy_controller,
    record_demo,
    train_policy,
    train_state_classifier,
)

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
demo = record_demo("left")
cfg0 = RunConfig()
model = train_state_classifier(cfg0.env, cfg0.sim_task)
for mode in ("refined", "plain", "embedding"):
    report = RunReport(mode, "left")
    for seed in range(n_seeds):
        cfg = RunConfig(mode=mode, seed=seed)
        policy, _ = train_policy(cfg, demo, model)
        report.runs += evaluate_policy(policy_controller(policy, False), cfg, model, len(demo.actions), n_runs=1)
    print(f"{mode}: {report.counts()['summary']}/{n_seeds}")
    print(report.table())
