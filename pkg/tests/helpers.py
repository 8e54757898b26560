import numpy as np

from riskcem import GaussianParams, ParticleBundle


def make_bundle(particle_var=None, member_means=None, member_var=None, particles=None, horizon=None):
    """Hand-built bundle for tests of the uncertainty and safety measures.

    ``particle_var`` is (H, B, d); ``member_means`` / ``member_var`` are the
    per-member predicted next-state means and variances, (H, K, d).
    """
    if particle_var is None:
        particle_var = np.ones((horizon or 1, 2, 1))
    particle_var = np.asarray(particle_var, dtype=float)
    h, b, d = particle_var.shape
    if member_means is None:
        member_means = np.zeros((h, 1, d))
    member_means = np.asarray(member_means, dtype=float)
    k = member_means.shape[1]
    if member_var is None:
        member_var = np.ones_like(member_means)
    mean_paths = np.zeros((h + 1, k, d))
    mean_paths[1:] = member_means
    if particles is None:
        particles = np.zeros((h + 1, b, d))
    return ParticleBundle(
        particles=np.asarray(particles, dtype=float),
        mean_paths=mean_paths,
        particle_params=GaussianParams(np.zeros((h, b, d)), np.log(particle_var)),
        # deltas chosen so each predicted next-state mean equals member_means
        mean_params=GaussianParams(member_means - mean_paths[:-1], np.log(np.asarray(member_var, dtype=float))),
        members=np.zeros((h, b), dtype=np.int64),
    )
