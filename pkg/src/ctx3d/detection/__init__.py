from .anchors import AnchorConfig, base_anchors, generate_anchors
from .boxes import (
    Detection,
    area,
    clip_boxes,
    decode_bbox,
    encode_bbox,
    iobb,
    iobb_matrix,
    iou,
    iou_matrix,
    nms,
)
from .psroi import psroi_pool
from .targets import (
    ProposalConfig,
    RoiSamplingConfig,
    RpnTargetConfig,
    assign_rpn_targets,
    propose,
    sample_rois,
)
