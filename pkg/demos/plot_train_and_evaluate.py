"""
Contrastive fine-tuning with and without augmentation
=====================================================

Trains the toy encoder twice on the same split, once on real images only and
once with synthetic images for the small classes, then compares size-binned
accuracy.
"""

import tempfile

from fishai import evaluator, pipeline

cfg = pipeline.PipelineConfig(seed=0)
ws = pipeline.Workspace(tempfile.mkdtemp(prefix="fishai-demo-"))
manifest = pipeline.prepare_toy(ws, cfg)
descriptions = pipeline.describe_level(ws, manifest, "species", cfg.promptgen)

##############################################################################
# Both runs use the same schedule: one warmup epoch, then step decay.
print(cfg.train)

baseline = pipeline.run_variant(ws, manifest, cfg, False, "baseline", descriptions)
augmented = pipeline.run_variant(ws, manifest, cfg, True, "augmented", descriptions)
print("baseline losses :", [round(x, 3) for x in baseline.log.losses])
print("augmented losses:", [round(x, 3) for x in augmented.log.losses])

##############################################################################
# Bins come from real training counts, so both reports group classes the
# same way. One seed is noisy; the acceptance suite averages seeds 0..4.
print(evaluator.render_level_table({"baseline": [baseline.report], "augmented": [augmented.report]}))
print()
print(evaluator.render_bin_table({"baseline": baseline.report, "augmented": augmented.report}))
print()
print(evaluator.render_delta_table(evaluator.compare_reports(augmented.report, baseline.report),
                                   ("augmented", "baseline")))
