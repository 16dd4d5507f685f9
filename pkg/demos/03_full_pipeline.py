"""Run every pipeline stage at desk scale (about five minutes on one core) and print the report.

PPO optimises the marker-count oracle directly, so the RLHF column should gain
on the marker-aligned evaluation set and in mean oracle reward.

A second call to ``run_plan`` finds every manifest current and skips all stages.
"""

import sys
import tempfile
from pathlib import Path

from okapi import pipeline

overrides = {"rlhf.reward_source": "oracle"}
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="okapi-"))
plan = pipeline.RunPlan(out, seed=0, settings=pipeline.load_settings("desk", overrides))
res = pipeline.run_plan(plan)
print("executed:", ", ".join(res.executed))
print((out / "report" / "report.md").read_text())
print("rerun skipped:", ", ".join(pipeline.run_plan(plan).skipped))
print("artifacts in", out)
