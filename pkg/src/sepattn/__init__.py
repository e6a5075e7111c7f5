"""sepattn — depth-attention separated cycle-consistent image translation.

A desk-scale implementation of attention-separated adversarial enhancement:
images are split into foreground/background by a depth map, and a pair of
cycle-consistent generator/discriminator duos is trained with independently
weighted per-region objectives. Everything differentiable runs on the
package's own reverse-mode core (:mod:`sepattn.diffcore`).
"""
__version__ = "0.1.0"
