"""Datasets, annotation files, checkpoints and config files."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .coco import CocoDataset, read_coco, write_coco
from .datasets import (ClassificationDataset, ClassificationDatasetSpec, DetectionDataset, DetectionSceneSpec,
                       gen_classification_dataset, gen_detection_dataset, load_classification_dataset,
                       load_detection_dataset, save_classification_dataset, save_detection_dataset)

__all__ = [
    "Checkpoint", "ClassificationDataset", "ClassificationDatasetSpec", "CocoDataset", "DetectionDataset",
    "DetectionSceneSpec", "gen_classification_dataset", "gen_detection_dataset", "load_checkpoint",
    "load_classification_dataset", "load_detection_dataset", "read_coco", "save_checkpoint",
    "save_classification_dataset", "save_detection_dataset", "write_coco",
]
