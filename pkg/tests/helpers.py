"""Small scene builders shared by the test modules."""

import numpy as np

from ndmag import simulate as sim

SWEEP = tuple(np.linspace(2.76e9, 2.98e9, 221))


def camera(width=64, height=64, pitch=0.24, psf_um=sim.DEFAULT_PSF_SIGMA_UM, background=100.0, bit_depth=12,
           frames_averaged=1):
    return sim.CameraModel(width, height, pitch, bit_depth, psf_um, background, frames_averaged)


def spot_at(x_px, y_px, cam, orientation=sim.IDENTITY, peak=2000.0, contrast=0.045, gamma=10e6, size=1.0):
    return sim.SimSpot(x_px * cam.pixel_pitch, y_px * cam.pixel_pitch, orientation, peak, contrast, gamma, size)


def scene(spots, cam, frequencies=SWEEP, bias=(0.0016, -0.002, 0.002), drift=(0.0, 0.0), seed=0, noise=True,
          wire=sim.WireGeometry()):
    return sim.SimScene(tuple(spots), tuple(bias), cam, tuple(frequencies), wire, tuple(drift), seed, noise)


def random_spots(rng, cam, n, margin=12, min_sep=14, **kw):
    placed = []
    while len(placed) < n:
        x, y = rng.uniform(margin, cam.width - margin), rng.uniform(margin, cam.height - margin)
        if all((x - a) ** 2 + (y - b) ** 2 >= min_sep**2 for a, b in placed):
            placed.append((x, y))
    return [spot_at(x, y, cam, orientation=sim.sample_orientation(rng), **kw) for x, y in placed]


def analyze_scene(sc, overrides=()):
    """Render, run the pipeline, and pair each planted spot with its nearest detected result."""
    from ndmag import config, pipeline

    stack, truth = sim.render_stack(sc)
    result = pipeline.analyze_stack(stack, config.build_config(overrides=overrides, environ={}))
    matched = []
    for t in truth["spots"]:
        best = None
        for r in result.results:
            d = np.hypot(r.spot.centroid[0] - t["x_px"], r.spot.centroid[1] - t["y_px"])
            if d < 2 and (best is None or d < best[0]):
                best = (d, r)
        matched.append((t, best[1] if best else None))
    return stack, truth, result, matched
