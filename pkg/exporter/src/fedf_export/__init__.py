"""Frozen-backbone image embedding exporter writing the FEDF format."""

from .export import BACKBONES, ExportJob, export, list_images, weight_checksum

__version__ = "0.1.0"
