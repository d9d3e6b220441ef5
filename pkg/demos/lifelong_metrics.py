"""Lifelong-learning metrics on the shipped reference matrices.

The forgetting ratio, process forgetting ratio, forward transfer, and
backward transfer are computed from two 5x5 success-rate matrices recorded
after each task of a sequential driving curriculum, for a plain continual
learner versus the anchor-based one.
"""

from knowspace.metrics import compute_report, fixture_matrix, report_to_text

for name in ("table1_baseline_sr", "table1_ours_sr"):
    m = fixture_matrix(name)
    print(f"=== {name} ===")
    print("task order:", ", ".join(m.task_names))
    print(report_to_text(compute_report(m)))

baseline = compute_report(fixture_matrix("table1_baseline_sr"))
ours = compute_report(fixture_matrix("table1_ours_sr"))
print("anchor-based learner forgets less "
      f"({ours.fr:.2f} vs {baseline.fr:.2f} FR) and oscillates less "
      f"({ours.pfr:.2f} vs {baseline.pfr:.2f} PFR).")
