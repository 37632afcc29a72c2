"""Toy dataset on disk: PPM images, PGM class-index masks, JSON label lists.

Layout under a root directory:
    classes.json   {"classes": ["background", <foreground names>...]}
    labels.json    {"<image stem>": [<present foreground class ids>], ...}
    images/<stem>.ppm
    masks/<stem>.pgm    values: class id, 0 background, 255 ignore

Images load in lexicographic stem order so every traversal is
reproducible. For synthetic data the label list of an image is exactly
the set of foreground ids present in its mask, and the loader enforces
that.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .images import read_pgm, read_ppm
from .static_calibration import IGNORE_LABEL


@dataclass
class ImageRecord:
    name: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8
    labels: list[int]  # present foreground class ids, ascending


@dataclass
class ToyDataset:
    root: Path
    class_names: list[str]  # index 0 is background
    images: list[ImageRecord]

    @property
    def num_foreground(self) -> int:
        return len(self.class_names) - 1

    def __len__(self) -> int:
        return len(self.images)


def load_dataset(root, patch_size: int | None = None) -> ToyDataset:
    root = Path(root)
    classes_path = root / "classes.json"
    labels_path = root / "labels.json"
    for req in (classes_path, labels_path, root / "images", root / "masks"):
        if not req.exists():
            raise DataError(f"dataset root {root} lacks {req.name}")
    class_names = json.loads(classes_path.read_text(encoding="utf-8"))["classes"]
    if not class_names or class_names[0] != "background":
        raise DataError(f"classes.json must start with 'background', got {class_names[:1]}")
    num_fg = len(class_names) - 1
    label_table = json.loads(labels_path.read_text(encoding="utf-8"))
    records = []
    for image_path in sorted((root / "images").glob("*.ppm")):
        stem = image_path.stem
        mask_path = root / "masks" / f"{stem}.pgm"
        if not mask_path.exists():
            raise DataError(f"missing mask for image '{stem}': {mask_path}")
        if stem not in label_table:
            raise DataError(f"missing label list for image '{stem}' in labels.json")
        rgb = read_ppm(image_path)
        mask = read_pgm(mask_path)
        if rgb.shape[:2] != mask.shape:
            raise DataError(
                f"image '{stem}' is {rgb.shape[1]}x{rgb.shape[0]} but its mask "
                f"is {mask.shape[1]}x{mask.shape[0]}"
            )
        if patch_size and (rgb.shape[0] % patch_size or rgb.shape[1] % patch_size):
            raise DataError(
                f"image '{stem}' dims {rgb.shape[1]}x{rgb.shape[0]} not divisible "
                f"by patch size {patch_size}"
            )
        mask_ids = set(int(v) for v in np.unique(mask)) - {0, IGNORE_LABEL}
        if any(v > num_fg for v in mask_ids):
            raise DataError(
                f"mask for '{stem}' contains class id {max(mask_ids)} outside 1..{num_fg}"
            )
        labels = sorted(int(v) for v in label_table[stem])
        if any(not 1 <= v <= num_fg for v in labels):
            raise DataError(f"label list for '{stem}' contains ids outside 1..{num_fg}")
        if set(labels) != mask_ids:
            raise DataError(
                f"label list for '{stem}' is {labels} but its mask contains {sorted(mask_ids)}"
            )
        image = np.ascontiguousarray(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
        records.append(ImageRecord(name=stem, image=image, mask=mask, labels=labels))
    if not records:
        raise DataError(f"dataset root {root} contains no images")
    return ToyDataset(root=root, class_names=list(class_names), images=records)


def save_dataset(root, class_names, records, comment: str | None = None):
    """Write a dataset tree; `records` is an iterable of (name, rgb_uint8,
    mask_uint8, labels)."""
    from .images import write_pgm, write_ppm

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    label_table = {}
    for name, rgb, mask, labels in records:
        write_ppm(root / "images" / f"{name}.ppm", rgb, comment=comment)
        write_pgm(root / "masks" / f"{name}.pgm", mask, comment=comment)
        label_table[name] = sorted(int(v) for v in labels)
    (root / "classes.json").write_text(
        json.dumps({"classes": list(class_names)}, indent=2) + "\n", encoding="utf-8"
    )
    (root / "labels.json").write_text(
        json.dumps(label_table, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return root
