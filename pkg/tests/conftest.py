"""Shared test helpers: cached synthetic scenes and small solver configs."""

from functools import lru_cache

from nrtrack.solver import SolverConfig
from nrtrack.synth import add_noise, generate_scene


@lru_cache(maxsize=None)
def cached_scene(kind, width=48, height=36, seed=0):
    """Scenes are deterministic and immutable in tests; cache across tests."""
    return generate_scene(kind, (width, height), seed)


@lru_cache(maxsize=None)
def cached_noisy_scene(kind, width=48, height=36, seed=0, corr_sigma=0.4):
    return add_noise(cached_scene(kind, width, height, seed),
                     corr_sigma_px=corr_sigma, seed=seed + 1000)


def desk_config(**kwargs):
    """SolverConfig with the cluster threshold scaled to desk-size scenes."""
    kwargs.setdefault("min_cluster_correspondences", 50)
    return SolverConfig(**kwargs)
