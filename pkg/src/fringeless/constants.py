"""Physical constants and filter relations shared across the package."""

import math

PLANCK_J_S = 6.62607015e-34
SPEED_OF_LIGHT_M_S = 2.99792458e8

# Integration time of a Gaussian resolution filter: dt ~= 0.44 / RBW.
GAUSSIAN_TIME_BANDWIDTH = 0.44

# Equivalent noise bandwidth of a Gaussian filter whose power response has
# -3 dB full width RBW: sqrt(pi / (4 ln 2)) * RBW.
GAUSSIAN_ENBW_PER_RBW = math.sqrt(math.pi / (4.0 * math.log(2.0)))

# Photon-number amplitude variance of a coherent state in either quadrature.
SHOT_NOISE_VARIANCE = 0.25
