from ganorcon.data.augment import AugmentationPolicy, augment_pair, sample_rng, two_views
from ganorcon.data.io import (FewShotDataset, as_image, load_dataset, load_pool, read_image,
                              read_mask, save_dataset, write_image, write_mask)
from ganorcon.data.schemas import (LabelMask, LabelRemap, LabelSchema, load_remap, load_schema,
                                   remap_labels, validate_mask)

__all__ = [
    "AugmentationPolicy", "augment_pair", "sample_rng", "two_views",
    "FewShotDataset", "as_image", "load_dataset", "load_pool", "read_image", "read_mask",
    "save_dataset", "write_image", "write_mask",
    "LabelMask", "LabelRemap", "LabelSchema", "load_remap", "load_schema", "remap_labels",
    "validate_mask",
]
