"""Configuration module for the crystal surface workbench."""
import os
from pathlib import Path
from dotenv import load_dotenv

# --- Environment Setup ---

# Locate the .env file relative to this config file so the library behaves
# the same from the CLI, from notebooks and from the test suite.
# Structure: ROOT/crystal_surface/config.py -> ROOT/.env
CURRENT_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = CURRENT_DIR.parent
ENV_PATH = PROJECT_ROOT / '.env'

load_dotenv(dotenv_path=ENV_PATH)

# --- Directory Structure ---

OUTPUT_DIR = Path(os.getenv('CRYSTAL_OUTPUT_DIR', PROJECT_ROOT / 'runs'))
LOG_DIR = Path(os.getenv('CRYSTAL_LOG_DIR', PROJECT_ROOT / 'logs'))
PRESET_DIR = PROJECT_ROOT / 'presets'

# --- Model Conventions ---

CONFIG_SCHEMA_VERSION = 1
SIGMA_FORMAT_VERSION = 1
W_CONVENTION = "z[i-1]-2z[i]+z[i+1]"
TIME_SCALE_EXPONENT = 4       # alpha, both rate families
HEIGHT_AMPLITUDE_EXPONENT = 3 # beta for heights (0 for w)
MIN_LATTICE_SIZE = 8
SATURATION_LIMIT = 700.0      # |K*w| beyond this overflows exp()

# sigma operating points reported for K=2: N -> (epsilon, delta)
FULL_SCALE_OPERATING_POINTS = {
    1000: (0.003, 4e-10),
    2000: (0.002, 4e-10),
    4000: (0.0015, 4e-10),
}

# --- Default Settings ---

DEFAULT_THREADS = int(os.getenv('CRYSTAL_THREADS', '4'))
KMC_CHUNK_EVENTS = 1 << 16    # uniforms drawn per kernel call
RATE_RECOMPUTE_TOL = 1e-9     # relative, cached total rate vs full sum
PATH_RECORDER_MAX_N = 512     # full-path storage only for debug lattices

# le-diagnostics
E_CAUCHY_TOL = 0.1
V_SLOPE_ZETA = 0.5
EF_COLLAPSE_TOL = 0.1
BOUNDEDNESS_SLOPE_TOL = 0.1
ROUGHNESS_RADIUS = 3
SMOOTH_THRESHOLD_FRACTION = 0.1   # theta_smooth as a fraction of profile range
GIBBS_SIGMA_MULTIPLE = 3.0
GIBBS_SITE_FRACTION = 0.25
GIBBS_TAIL_BOUND = 1e-14

# current-fit
N_BINS = 64
BIN_MIN_COUNT = 3
BURN_IN_TOL = 0.1
BURN_IN_SCATTER_TOL = 0.25
SELECTION_BIAS_TOL = 0.05
SELECTION_NOISE_TOL = 0.25
DELTA0_FRACTION = 0.05        # delta0 = 0.05 * W
DELTA1_FACTOR = 2.0           # delta1 = 2 * delta0
SMOOTHING_WEIGHT = 0.99
SIGMA_FLOOR = 0.05
SIGMA_SYMMETRY_TOL = 0.05
SIGMA_MONOTONE_SLACK = 0.02
SIGMA_KNOTS = 401
SYMMETRIZE_SIGMA = True

# pde
SOLVER_RTOL = 1e-7
SOLVER_ATOL = 1e-10
PSI_QUAD_TOL = 1e-10
PROX_INNER_TOL = 1e-9
PROX_MAX_ITER = 100
