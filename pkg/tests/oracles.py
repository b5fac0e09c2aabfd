"""Independent brute-force reference implementations used by the tests."""

from collections import deque
from itertools import product

import numpy as np


def neighbour_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    # 6: faces (one nonzero step), 18: + edges (two), 26: + corners (three)
    max_nonzero = {6: 1, 18: 2, 26: 3}[connectivity]
    return [d for d in product((-1, 0, 1), repeat=3) if 0 < sum(map(abs, d)) <= max_nonzero]


def flood_fill_components(mask: np.ndarray, connectivity: int) -> list[frozenset]:
    """Components as sets of voxel tuples, in raster order of their first voxel."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    offsets = neighbour_offsets(connectivity)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), {start}
        while queue:
            v = queue.popleft()
            for d in offsets:
                w = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                if all(0 <= w[a] < mask.shape[a] for a in range(3)) and mask[w] and not seen[w]:
                    seen[w] = True
                    comp.add(w)
                    queue.append(w)
        comps.append(frozenset(comp))
    return comps


def voxel_set(mask: np.ndarray) -> set:
    return set(zip(*np.nonzero(mask)))


def dice(pred, gt) -> float:
    p, g = voxel_set(pred), voxel_set(gt)
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def lesion_f1(pred, gt, connectivity=26) -> float:
    p, g = voxel_set(pred), voxel_set(gt)
    pc, gc = flood_fill_components(pred, connectivity), flood_fill_components(gt, connectivity)
    tp = sum(1 for c in gc if c & p)
    fn = len(gc) - tp
    fp = sum(1 for c in pc if not c & g)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def avd_ml(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    return abs(len(voxel_set(pred)) - len(voxel_set(gt))) * float(np.prod(spacing)) / 1000.0


def count_diff(pred, gt, connectivity=26) -> int:
    return abs(len(flood_fill_components(pred, connectivity)) - len(flood_fill_components(gt, connectivity)))


def random_mask_pair(rng: np.random.Generator, max_side: int = 16):
    shape = tuple(int(n) for n in rng.integers(1, max_side + 1, size=3))
    density = rng.uniform(0.02, 0.5)
    gt = rng.random(shape) < density
    # prediction correlated with the truth so lesions partially overlap
    flip = rng.random(shape) < rng.uniform(0.0, 0.4)
    pred = np.where(flip, ~gt, gt) & (rng.random(shape) < 0.9)
    spacing = tuple(rng.uniform(0.5, 2.5, size=3))
    return pred.astype(np.uint8), gt.astype(np.uint8), spacing
