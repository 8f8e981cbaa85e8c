"""Hand-built fixtures shared by unit and acceptance tests."""

import numpy as np

from blobsense.annotation import Annotation

# Three 16x16 images, two malignant boxes, five hand-placed peaks.
#   A: malignant (2,2,8,8); benign (10,10,14,14)
#      peak (5,5) 0.9 -> hit; peak (12,12) 0.6 -> FP (benign is negative)
#   B: malignant (4,4,12,12) with high-risk (5,5,7,7) nested inside
#      peak (6,6) 0.4 -> hit on the malignant box; peak (14,2) 0.7 -> FP
#   C: no findings; peak (8,8) 0.3 -> FP
FIXTURE_PEAKS = [
    [(5, 5, 0.9), (12, 12, 0.6)],
    [(6, 6, 0.4), (14, 2, 0.7)],
    [(8, 8, 0.3)],
]
FIXTURE_ANNOTATIONS = [
    [Annotation((2, 2, 8, 8), "malignant"), Annotation((10, 10, 14, 14), "benign")],
    [Annotation((4, 4, 12, 12), "malignant"), Annotation((5, 5, 7, 7), "high_risk")],
    [],
]
# threshold -> (sensitivity, fpi), counted by hand from the comments above
FIXTURE_EXPECTED = {
    0.05: (2 / 2, 3 / 3),
    0.35: (2 / 2, 2 / 3),
    0.5: (1 / 2, 2 / 3),
    0.65: (1 / 2, 1 / 3),
    0.8: (1 / 2, 0 / 3),
    0.95: (0 / 2, 0 / 3),
}


def fixture_heatmaps():
    maps = []
    for peaks in FIXTURE_PEAKS:
        h = np.zeros((16, 16), dtype=np.float32)
        for r, c, v in peaks:
            h[r, c] = v
        maps.append(h)
    return maps
