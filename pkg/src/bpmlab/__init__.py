"""bpmlab: a bit-patterned-media read-channel workbench.

Synthesizes readback images of magnetic island lattices, recovers lattices
and reader point-response functions from images, decodes island
magnetization with 2D Viterbi and Sieve detectors, reconstructs write
trajectories from servo lines, and compiles 2D bit-error-rate statistics
with analytic jitter fits.
"""

__version__ = "0.1.0"
