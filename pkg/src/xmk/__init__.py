"""Cross-modality 2D keypoint descriptor toolkit.

Trains texture-invariant patch descriptors by pairing one reference volume
with many texture-randomized synthetic counterparts, then matches keypoints
across modalities with filtered cosine nearest-neighbor search.
"""

__version__ = "0.1.0"

from xmk.volume import Volume, Slice, load_volume, save_volume, normalize_volume, pad_crop_inplane, get_slice

__all__ = [
    "Volume",
    "Slice",
    "load_volume",
    "save_volume",
    "normalize_volume",
    "pad_crop_inplane",
    "get_slice",
    "__version__",
]
