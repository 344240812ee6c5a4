# Short report-only training run, detection metrics and annotation ranking
import time

from reportseg.evalkit import DetectionThresholds
from reportseg.phantom import PhantomSpec, as_loaded, case_seeds, generate, plan_corpus
from reportseg.trainer import TrainConfig, Trainer, evaluate, rank_for_annotation

spec = PhantomSpec()
plan = plan_corpus(24, 8)
cases = [as_loaded(generate(spec, s, healthy=h, scan_id=f"case{i:04d}"), split)
         for i, ((h, split), s) in enumerate(zip(plan, case_seeds(0, 24)))]
train = [c for c in cases if c.split == "train"]
test = [c for c in cases if c.split == "test"]
th = DetectionThresholds.scaled(spec.spacing)
print("detection needs more than", th.voxel_count, "voxels above", th.confidence)

# a few hundred steps only; the full experiment uses TrainConfig.desk() unchanged
cfg = TrainConfig.desk(epochs=10)
t = Trainer(spec.organ_names, cfg)
t0 = time.time()
t.fit(train, log=lambda m: m["step"] % 50 == 0 and print("step", m["step"], "loss", round(m["loss"], 4)))
print(f"trained {t.step} steps in {time.time() - t0:.0f}s")

report, overlap, _ = evaluate(t, test, spec.organ_names, th)
print("macro F1", round(report.f1, 3), "sens", round(report.sensitivity, 3), "spec", round(report.specificity, 3))
for organ, m in report.per_organ.items():
    print(" ", organ, "TP FP TN FN", m.TP, m.FP, m.TN, m.FN)

# most report-inconsistent scans first
for scan, loss in rank_for_annotation(t, test, spec.organ_names, cfg.ball, cfg.dilation_mm)[:3]:
    print("annotate", scan, round(loss, 4))
