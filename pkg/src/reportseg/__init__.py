"""Tumor segmentation from radiology reports: report-derived losses, ball localization,
a tiny volumetric segmenter, synthetic phantoms and detection/overlap evaluation."""

__version__ = "0.1.0"

from .ballconv import BallConfig, ball_convolve, localize_tumors
from .evalkit import DetectionThresholds, detect, detection_metrics, dsc_nsd
from .losses import VolumeLossConfig, ball_loss, report_attenuation_loss, report_volume_loss, supervised_loss
from .phantom import PhantomSpec, generate, load_corpus, write_corpus
from .report import StructuredReport, TumorFinding, parse_report
from .trainer import TrainConfig, Trainer, evaluate, rank_for_annotation
from .volgrid import BinaryMask, LabelVolume, VolumeGrid, read_volume, write_volume

__all__ = [
    "BallConfig", "ball_convolve", "localize_tumors",
    "DetectionThresholds", "detect", "detection_metrics", "dsc_nsd",
    "VolumeLossConfig", "ball_loss", "report_attenuation_loss", "report_volume_loss", "supervised_loss",
    "PhantomSpec", "generate", "load_corpus", "write_corpus",
    "StructuredReport", "TumorFinding", "parse_report",
    "TrainConfig", "Trainer", "evaluate", "rank_for_annotation",
    "BinaryMask", "LabelVolume", "VolumeGrid", "read_volume", "write_volume",
]
