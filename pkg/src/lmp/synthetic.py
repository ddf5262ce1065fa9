"""Synthetic latent videos with known subject motion."""
import numpy as np

from .latent import LatentVideo


def moving_blob(frames=8, height=8, width=8, channels=4, start=(1.5, 1.5), end=(5.5, 5.5),
                radius=1.5, amplitude=3.0, seed=0, background=0.1):
    """A Gaussian blob moving linearly from ``start`` to ``end`` over a noisy background.

    Returns the latent and the (frames, 2) array of true blob centres.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB10B]))
    ys, xs = np.mgrid[:height, :width]
    signature = rng.standard_normal(channels)
    signature /= np.linalg.norm(signature)
    data = background * rng.standard_normal((frames, height, width, channels))
    centres = []
    for f in range(frames):
        a = f / max(frames - 1, 1)
        cy = start[0] + a * (end[0] - start[0])
        cx = start[1] + a * (end[1] - start[1])
        centres.append((cy, cx))
        bump = amplitude * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius**2))
        data[f] += bump[..., None] * signature
    return LatentVideo(data), np.array(centres)
