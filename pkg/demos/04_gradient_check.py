"""Verify the analytic backward pass against finite differences.

Draws random small scenes, renders them in exhaustive mode (no cutoff,
no early termination) so central differences are well posed, and
compares every trainable parameter class under both stage masks.
"""

from mixsplat.gradcheck import run_gradcheck

report = run_gradcheck(seed=0, n_scenes=5, stages=("stage1", "stage2"))
print("\n".join(report.lines()))
