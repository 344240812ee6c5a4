# Volumes on disk, organ masks, metric dilation and slice gating
import tempfile
from pathlib import Path

import numpy as np

from reportseg.volgrid import (BinaryMask, LabelVolume, VolumeGrid, connected_components, dilate, gate_slices,
                               read_volume, write_volume)

ct = VolumeGrid(np.random.default_rng(0).normal(40, 10, (24, 24, 24)).astype(np.float32), (2.0, 1.0, 1.0))
labels = np.zeros(ct.shape, np.int32)
labels[6:18, 5:15, 5:15] = 1
organs = LabelVolume(labels, ct.spacing, {1: "spleen"})

# round trip through the binary volume format
with tempfile.TemporaryDirectory() as d:
    write_volume(Path(d) / "ct.vol", ct)
    back = read_volume(Path(d) / "ct.vol")
    print("bit-exact:", back.data.tobytes() == ct.data.tobytes(), "spacing", back.spacing)

spleen = organs.mask("spleen")
print("organ voxels", int(spleen.mask.sum()))

# dilation is in mm, so the anisotropic first axis grows by fewer voxels
grown = dilate(spleen, 4.0)
print("after 4 mm dilation", int(grown.mask.sum()))
h = np.flatnonzero(grown.mask.any(axis=(1, 2)))
w = np.flatnonzero(grown.mask.any(axis=(0, 2)))
print("extent along heights", h.min(), h.max(), "along width", w.min(), w.max())

# keep only heights within one tumor diameter of a reported slice
gated = gate_slices(grown, [(10, 6.0)])
print("heights kept", np.flatnonzero(gated.mask.any(axis=(1, 2))))

# two separate blobs give two components, numbered in row-major order
two = np.zeros((10, 10, 10), bool)
two[1:3, 1:3, 1:3] = True
two[6:9, 6:9, 6:9] = True
lab, n = connected_components(BinaryMask(two, (1, 1, 1)))
print("components", n, "sizes", np.bincount(lab.labels.ravel())[1:])
