"""Constants for ensocast core."""

N_CHANNELS = 6
"""Input channels: SST and heat content for three consecutive months."""

CHANNEL_NAMES = ("sst_m3", "sst_m2", "sst_m1", "hc_m3", "hc_m2", "hc_m1")
"""Channel order of every input field stack (oldest month first)."""

MAX_LEAD_MONTHS = 23
"""Longest supported forecast lead."""

DEFAULT_NLAT = 24
"""Default number of latitude rows (5 degree cells, 60S to 60N)."""

DEFAULT_NLON = 72
"""Default number of longitude columns (5 degree cells, full circle)."""

DEFAULT_KERNEL = (4, 8)
"""Default convolution kernel extents (lat, lon)."""

Z_SAT = 2.5
"""Pre-activation magnitude above which tanh counts as saturated."""

DEAD_GRADIENT = 1e-9
"""Input-gradient magnitude below which a cell counts as dead."""

FD_EPSILON = 1e-12
"""Denominator guard of relative finite-difference discrepancies."""

NINO34_BOX = ((-5.0, 5.0), (190.0, 240.0))
"""Nino3.4 region as ((lat_min, lat_max), (lon_min, lon_max)), degrees east."""

SPRING_MONTHS = (3, 4, 5, 6)
"""Target months grouped as spring."""

NON_SPRING_MONTHS = (9, 10, 11, 12)
"""Target months grouped as non-spring."""

DEFAULT_THRESHOLD = 0.5
"""Default normalized-saliency threshold for important regions."""

MODEL_MAGIC = b"PPTVMDL1"
"""Magic bytes of model checkpoints."""

DATASET_MAGIC = b"PPTVDAT1"
"""Magic bytes of dataset files."""

MAX_EXTENT = 1 << 24
"""Largest single extent accepted when decoding binary files."""

MAX_ELEMENTS = 1 << 36
"""Largest element count accepted when decoding binary files."""
