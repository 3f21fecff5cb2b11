"""Bundled fixtures: a VOC-vocabulary confusion matrix, class hierarchies and an alias map."""

from importlib.resources import as_file, files
from pathlib import Path

VOC_CONFUSION = "voc_confusion.json"
SHAPES_HIERARCHY = "shapes_hierarchy.json"
SHAPES_DESCRIPTIONS = "shapes_descriptions.csv"
OPENIMAGES_HIERARCHY = "mini_openimages_hierarchy.json"
OPENIMAGES_DESCRIPTIONS = "mini_openimages_descriptions.csv"
COCO_ALIASES = "coco_openimages_aliases.json"


def resource_path(name: str) -> Path:
    """Filesystem path of a bundled resource (the package is installed unzipped)."""
    with as_file(files(__package__) / name) as p:
        return Path(p)
