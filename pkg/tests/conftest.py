"""Shared oracles and fixtures."""

import numpy as np
import pytest

from kindiff.euclidean import VpSchedule
from kindiff.kinetic import KineticSchedule
from kindiff.torus import wrap_angle
from kindiff.wrapped_normal import WrappedNormalParams, wn_score_mean


class PointOracleModel:
    """Exact score for a single data cell at theta_star with zero initial
    velocities; used to drive the samplers without a trained network.

    Implements the same interface as sampling.TrainedModel.  The lattice
    and atom-type heads return zeros (those channels then relax to their
    priors, which the torus-side tests ignore).
    """

    def __init__(self, theta_star, ksched=None, vsched=None, mean_free=False,
                 k_trunc=5):
        self.theta_star = np.asarray(theta_star, dtype=float)
        self.ksched = ksched or KineticSchedule()
        self.vsched = vsched or VpSchedule()
        self.task = "csp"
        self.mean_free = mean_free
        self.num_species = 1
        self.atom_types = "one-hot"
        self.a_dim = 1
        self.standardizer = None
        self.k_trunc = k_trunc
        self.t_floor = self.ksched.t_min

    def scores(self, t, theta, v, l, a):
        ks = self.ksched
        te = max(float(t), ks.t_min)
        r = wrap_angle(theta - self.theta_star)
        mu = ks.a(te) * v  # zero initial velocities
        wn = wn_score_mean(r, WrappedNormalParams(mu, np.asarray(ks.sigma2_r(te)),
                                                  self.k_trunc))
        s = ks.a(te) * wn - v / ks.sigma2_v(te)
        if self.mean_free:
            s = s - s.mean(axis=-2, keepdims=True)
        return s, np.zeros_like(l), None

    def decode_lattice(self, l):
        lengths = np.full(l.shape[:-1] + (3,), 5.0)
        angles = np.full(l.shape[:-1] + (3,), 0.5 * np.pi)
        return lengths, angles


@pytest.fixture(scope="session")
def point_oracle():
    from kindiff.torus import frac_to_angle

    return PointOracleModel(frac_to_angle(np.array([[0.3, 0.6, 0.9]])))
