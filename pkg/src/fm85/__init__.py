"""FM85 coupon sketches with ICON, MDL and HIP estimators, compression and simulation."""

__version__ = "0.1.0"

from .coupons import (  # noqa: E402
    ConfigMismatchError, CouponId, Fm85Sketch, HipUnavailableError, SketchConfig,
    hash_to_coupon, hash_to_coupons, merge,
)
from .estimators import hip_estimate, icon_estimate, mdl_estimate  # noqa: E402
from .hashing import DEFAULT_SEED, hash_pair  # noqa: E402
from .hll import HllSketch, from_fm85, hll_estimate, hll_hip_estimate, hll_mdl_estimate  # noqa: E402
from .entropy import entropy_constant, entropy_curve  # noqa: E402
from .compression import compress, decompress, dumps, loads  # noqa: E402

__all__ = [
    "__version__", "ConfigMismatchError", "CouponId", "Fm85Sketch", "HipUnavailableError",
    "SketchConfig", "hash_to_coupon", "hash_to_coupons", "merge", "hip_estimate", "icon_estimate",
    "mdl_estimate", "DEFAULT_SEED", "hash_pair", "HllSketch", "from_fm85", "hll_estimate",
    "hll_hip_estimate", "hll_mdl_estimate", "entropy_constant", "entropy_curve",
    "compress", "decompress", "dumps", "loads",
]
