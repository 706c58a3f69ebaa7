"""Shared test utilities."""
from dataclasses import replace

import numpy as np

from graspsight import worldsim as ws


def outcome_flips_within(scene, c, eps, params=ws.WorldParams(), steps=9):
    """True if moving the command by at most `eps` (along the closing axis, along
    the pads, or in aperture) changes the analytic success label."""
    base = ws.grasp_outcome(scene, c, params).success
    ax, pd = c.axis, c.pad_direction
    for t in np.linspace(-eps, eps, steps):
        for moved in (replace(c, x=c.x + t * ax.x, y=c.y + t * ax.y),
                      replace(c, x=c.x + t * pd.x, y=c.y + t * pd.y),
                      replace(c, aperture=max(c.aperture + t, 1e-6))):
            if ws.grasp_outcome(scene, moved, params).success != base:
                return True
    return False
