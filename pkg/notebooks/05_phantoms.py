# Synthetic CT phantoms with reports and ground-truth tumor masks
import tempfile

import numpy as np

from reportseg.phantom import PhantomSpec, generate, load_corpus, write_corpus

spec = PhantomSpec()
case = generate(spec, seed=3)
print("shape", case.ct.shape, "spacing", case.ct.spacing)
for t in case.truth:
    print("true tumor", t.organ, [round(d, 1) for d in t.diameters_mm], t.attenuation.value, t.n_voxels, "voxels")
for f in case.report.findings:
    print("reported  ", f.organ, [round(d, 1) for d in f.diameters_mm], "slice", f.slice)
print("negative organs", case.report.negative_organs)

with tempfile.TemporaryDirectory() as d:
    m = write_corpus(spec, 6, d, seed=1, n_test=2)
    cases = load_corpus(d, split="test")
    print("corpus", len(m["cases"]), "cases;", "test:", [c.scan_id for c in cases])
    print("healthy flags", [e["healthy"] for e in m["cases"]])
