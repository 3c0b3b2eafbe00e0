"""
Few-shot training
=================

Keeps at most k real training images per class and measures how much the
synthetic images recover.
"""

import tempfile

from fishai import pipeline

cfg = pipeline.PipelineConfig(seed=0)
ws = pipeline.Workspace(tempfile.mkdtemp(prefix="fishai-demo-"))
manifest = pipeline.prepare_toy(ws, cfg)

for k in (1, 5, 10):
    base, aug, rows = pipeline.fewshot(ws, manifest, cfg, k)
    print(f"k={k:2d}  baseline acc@1 {base.report.accuracy(1):.3f}  augmented acc@1 {aug.report.accuracy(1):.3f}")

##############################################################################
# Every run leaves its reports and the delta table in the workspace.
print(sorted(p.name for p in ws.reports.iterdir()))
