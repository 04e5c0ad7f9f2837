import numpy as np

from morphmad.morphgen import LandmarkSet


class FixedEmbedding:
    """Embedding provider backed by a lookup table; images are their own ids."""

    def __init__(self, vectors):
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self.dimensionality = len(next(iter(self.vectors.values()))) if self.vectors else 0

    def embed(self, image):
        return self.vectors[image]


def grid_landmarks(w, h, jitter=0.0, rng=None):
    """A 4x4 interior grid of points plus plausible eye/nose anchors."""
    xs = np.linspace(0.2 * w, 0.8 * w, 4)
    ys = np.linspace(0.2 * h, 0.8 * h, 4)
    pts = np.array([(x, y) for y in ys for x in xs])
    if jitter:
        pts = pts + rng.uniform(-jitter, jitter, pts.shape)
    return LandmarkSet(pts, (0.3 * w, 0.4 * h), (0.7 * w, 0.4 * h), (0.5 * w, 0.45 * h))


def random_pool(rng):
    """1-3 keys and up to 10 pool images over a handful of identities."""
    n_keys = int(rng.integers(1, 4))
    n_pool = int(rng.integers(1, 11 - n_keys))
    keys = [f"k{i}" for i in range(n_keys)]
    pool = [f"p{i}" for i in range(n_pool)]
    if rng.random() < 0.3:
        pool = pool + keys[: int(rng.integers(1, n_keys + 1))]
    n_ident = int(rng.integers(2, 7))
    ids = {i: f"id{int(rng.integers(n_ident))}" for i in keys + pool}
    if rng.random() < 0.5:
        vec = {i: rng.integers(0, 3, 2).astype(float) for i in keys + pool}  # ties
    else:
        vec = {i: rng.normal(size=3) for i in keys + pool}
    rng.shuffle(pool)
    return keys, pool, ids, FixedEmbedding(vec)
