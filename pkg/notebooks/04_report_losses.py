# Report-derived losses on a toy probability volume
import numpy as np

from reportseg.losses import (AttenuationClassifier, VolumeLossConfig, attenuation_loss, build_pseudo_mask,
                              pseudo_mask_loss, volume_forgiving, volume_loss)
from reportseg.ballconv import BallConfig
from reportseg.report import Attenuation, TumorFinding

# tolerant volume mismatch: zero near the reported volume, growing outside the band
cfg = VolumeLossConfig()
for vs in (0.0, 500.0, 900.0, 1000.0, 1100.0, 2000.0):
    print(f"V_s={vs:6.0f}  loss={volume_forgiving(vs, 1000.0, cfg)[0]:.4f}")

rng = np.random.default_rng(0)
organ = np.zeros((16, 16, 16), bool)
organ[2:14, 2:14, 2:14] = True
g = np.indices(organ.shape)
blob = ((g - 8) ** 2).sum(0) <= 9
prob = np.where(blob, 0.8, 0.05) * organ + rng.random(organ.shape) * 0.01

r = volume_loss(prob, organ, 523.6, (1, 1, 1))
print("volume loss", round(r.value, 4), "segmented", round(r.diagnostics["V_s"], 1), "mm3")

# pseudo-mask from a 10 mm finding, then dice + weighted CE against it
pm = build_pseudo_mask(prob, organ, [TumorFinding("o", (10.0,))], (1, 1, 1), BallConfig(), count_known=True)
print("pseudo-mask positives", int(pm.positive.sum()), "ignored", int(pm.ignore.sum()))
print("ball loss", round(pseudo_mask_loss(prob, pm, BallConfig()).value, 4))

# attenuation: a darker region inside the organ, labeled hypo
ct = np.where(organ, 1.0, -1.0) - 0.5 * blob + rng.normal(0, 0.05, organ.shape)
clf = AttenuationClassifier(hidden=128, rng=rng)
res, grads = attenuation_loss(prob, ct, organ, Attenuation.HYPO, clf)
print("attenuation loss", round(res.value, 4), "classifier gradients for", sorted(grads))
