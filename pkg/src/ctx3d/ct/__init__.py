from .annotations import Annotation, LESION_TYPES, read_annotations, write_annotations
from .pipeline import (
    BoxTransform,
    SliceGroup,
    border_extent,
    clip_borders,
    group_indices,
    group_slices,
    preprocess,
    resample_inplane,
    resample_z,
    window_hu,
)
from .volume import Volume, VolumeFormatError, read_volume, write_volume
