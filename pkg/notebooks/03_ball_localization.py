# Ball kernels, both convolution backends, and greedy largest-first localization
import numpy as np

from reportseg.ballconv import BallConfig, ball_convolve, localize_tumors, make_kernel
from reportseg.report import TumorFinding

k = make_kernel(7.0, (1.0, 1.0, 1.0))
print("kernel", k.size, "center", k.weights[3, 3, 3], "corner", k.weights[0, 0, 0])

rng = np.random.default_rng(0)
p = rng.random((20, 20, 20)) * 0.1
g = np.indices(p.shape)
# two blobs: a large one and a small one
p += 0.8 * (((g - np.array([6, 6, 6]).reshape(3, 1, 1, 1)) ** 2).sum(0) <= 16)
p += 0.8 * (((g - np.array([14, 13, 14]).reshape(3, 1, 1, 1)) ** 2).sum(0) <= 4)
p = np.clip(p, 0, 1)

a, b = ball_convolve(p, k, "direct"), ball_convolve(p, k, "fft")
print("backends differ by", np.abs(a - b).max())

organ = np.ones(p.shape, bool)
findings = [TumorFinding("o", (4.0,)), TumorFinding("o", (8.0,))]
for t in localize_tumors(p, organ, findings, (1, 1, 1), BallConfig()):
    print("ball", round(t.diameter_mm, 2), "mm at", t.center, "carved", t.n, "voxels, clamped", t.clamped)
