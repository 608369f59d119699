from .losses import bbox_loss, detection_classification_loss, detection_distill_loss, expand_batch, expand_targets
from .model import REFERENCE_STUDENT, REFERENCE_TEACHER, DetrConfig, DetrLite, DetrOutput, detr_forward, sine_positions
from .preprocess import (MEAN, RESCALE, STD, DetectionTarget, boxes_from_normalized, boxes_to_normalized,
                         normalize_pixels, preprocess_detection, resize_bilinear, resize_dims)
from .train import (DetectionTrainConfig, cross_attention_probe, decode, detections, distill_detection, draw_boxes,
                    evaluate_map, prepare_detection, train_detr_teacher, write_detections_csv)

__all__ = [
    "DetectionTarget", "DetectionTrainConfig", "DetrConfig", "DetrLite", "DetrOutput", "MEAN", "REFERENCE_STUDENT",
    "REFERENCE_TEACHER", "RESCALE", "STD", "bbox_loss", "boxes_from_normalized", "boxes_to_normalized",
    "cross_attention_probe", "decode", "detection_classification_loss", "detection_distill_loss", "detections",
    "detr_forward", "distill_detection", "draw_boxes", "evaluate_map", "expand_batch", "expand_targets",
    "normalize_pixels", "prepare_detection", "preprocess_detection", "resize_bilinear", "resize_dims",
    "sine_positions", "train_detr_teacher", "write_detections_csv",
]
