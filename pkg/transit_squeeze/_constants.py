"""physical constants and reference parameters for a coated 87Rb cell probed on the D2 line"""

import math

from scipy.constants import c, hbar, k, m_u

K_B: float = k
HBAR: float = hbar
C_LIGHT: float = c

# 87Rb
MASS_RB87: float = 86.909180520 * m_u
GAMMA_NATURAL: float = 2 * math.pi * 6.07e6  # rad/s
WAVELENGTH_D2: float = 780e-9  # m
SPLIT_13: float = 2 * math.pi * 423.60e6  # rad/s, F'=1 <-> F'=3
SPLIT_23: float = 2 * math.pi * 266.65e6  # rad/s, F'=2 <-> F'=3

# reference probe settings
DETUNING_REFERENCE: float = -2 * math.pi * 2.5e9  # rad/s
PEAK_POWER_REFERENCE: float = 5e-3  # W
DUTY_CYCLE_REFERENCE: float = 0.1
TEMPERATURE_REFERENCE: float = 331.15  # K, 58 C
CELL_SIDE_REFERENCE: float = 3.0  # mm
KAPPA_REFERENCE: float = 1.61  # ms^-1/2
# interaction area and atom number that put the reference probe at KAPPA_REFERENCE
AREA_REFERENCE: float = 3.7828e-6  # m^2
ATOM_NUMBER_REFERENCE: float = 1e10
KAPPA2_T2_REFERENCE: float = 2.26

# quadrature variance of a coherent spin state in HP units
CSS_VARIANCE: float = 0.5

# experiment-style projection-noise calibration: PNL = 4/5 of thermal-state noise
PNL_THERMAL_FACTOR: float = 0.8

# <m^2> averaged over the 8 sublevels of F=1 and F=2, relative to the
# transverse variance F/2 = 1 of the stretched F=2 state
THERMAL_VARIANCE_RATIO: float = 1.5

ZERO_CELSIUS: float = 273.15
