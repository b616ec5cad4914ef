"""Dataset discovery, deterministic k-shot splits, and image/mask loading.

Datasets follow the industrial-inspection directory convention:

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect>/*.png      ("good" means normal)
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import ContractError, InsufficientAnomaliesError, LayoutError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class ImageRecord:
    """One image in a dataset index; ``path``/``mask`` are relative to root."""

    path: str
    label: int
    defect: str = "good"
    mask: str | None = None
    mask_absent: bool = False

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "label": self.label,
            "defect": self.defect,
            "mask": self.mask,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(
            path=d["path"],
            label=int(d["label"]),
            defect=d.get("defect", "good"),
            mask=d.get("mask"),
            mask_absent=bool(d["label"]) and d.get("mask") is None,
        )


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable listing of one category's training normals and test items."""

    root: Path
    category: str
    normal_train: tuple[ImageRecord, ...]
    test_items: tuple[ImageRecord, ...]

    @property
    def anomalous_test(self) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.test_items if r.label == 1)

    @property
    def normal_test(self) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.test_items if r.label == 0)

    def resolve(self, record: ImageRecord) -> Path:
        return self.root / record.path

    def resolve_mask(self, record: ImageRecord) -> Path | None:
        return self.root / record.mask if record.mask else None


@dataclass(frozen=True)
class KShotSplit:
    """Deterministic training partition: all normals plus k anomalous shots."""

    category: str
    k: int
    seed: int
    root: Path
    train_normals: tuple[ImageRecord, ...]
    train_anomalies: tuple[ImageRecord, ...]
    test_items: tuple[ImageRecord, ...]

    def resolve(self, record: ImageRecord) -> Path:
        return self.root / record.path

    def resolve_mask(self, record: ImageRecord) -> Path | None:
        return self.root / record.mask if record.mask else None


def _list_images(directory: Path) -> list[Path]:
    files = [
        p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    return files


def scan_dataset(root: str | Path, category: str) -> DatasetIndex:
    """Index a category directory, labelling test images by their defect folder.

    Test images under ``test/good`` get label 0, all other defect folders
    label 1. Masks are matched by the ``ground_truth/<defect>/<stem>_mask.png``
    convention; an anomalous image without a mask is flagged, not rejected.
    """
    root = Path(root)
    cat_dir = root / category
    train_dir = cat_dir / "train" / "good"
    test_dir = cat_dir / "test"
    if not cat_dir.is_dir():
        raise LayoutError(f"category directory not found: {cat_dir}")
    if not train_dir.is_dir():
        raise LayoutError(f"missing train/good directory: {train_dir}")
    if not test_dir.is_dir():
        raise LayoutError(f"missing test directory: {test_dir}")

    normals = tuple(
        ImageRecord(path=p.relative_to(root).as_posix(), label=0)
        for p in _list_images(train_dir)
    )

    gt_dir = cat_dir / "ground_truth"
    test_items: list[ImageRecord] = []
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        defect = defect_dir.name
        label = 0 if defect == "good" else 1
        for p in _list_images(defect_dir):
            mask_rel = None
            mask_absent = False
            if label == 1:
                mask_path = gt_dir / defect / f"{p.stem}_mask.png"
                if mask_path.is_file():
                    mask_rel = mask_path.relative_to(root).as_posix()
                else:
                    mask_absent = True
                    warnings.warn(
                        f"anomalous test image without mask: {p}", stacklevel=2
                    )
            test_items.append(
                ImageRecord(
                    path=p.relative_to(root).as_posix(),
                    label=label,
                    defect=defect,
                    mask=mask_rel,
                    mask_absent=mask_absent,
                )
            )

    index = DatasetIndex(
        root=root,
        category=category,
        normal_train=normals,
        test_items=tuple(test_items),
    )
    seen: set[str] = set()
    for rec in index.normal_train + index.test_items:
        if rec.path in seen:
            raise LayoutError(f"path listed twice in index: {rec.path}")
        seen.add(rec.path)
    return index


def make_kshot_split(index: DatasetIndex, k: int, seed: int) -> KShotSplit:
    """Sample k anomalous test images (uniform, without replacement) into
    the training set; everything else stays in the test set."""
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    anomalies = index.anomalous_test
    if k > len(anomalies):
        raise InsufficientAnomaliesError(requested=k, available=len(anomalies))
    rng = np.random.default_rng(seed)
    chosen_idx = set(rng.choice(len(anomalies), size=k, replace=False).tolist())
    train_anomalies = tuple(anomalies[i] for i in sorted(chosen_idx))
    chosen_paths = {r.path for r in train_anomalies}
    test_items = tuple(r for r in index.test_items if r.path not in chosen_paths)
    return KShotSplit(
        category=index.category,
        k=k,
        seed=seed,
        root=index.root,
        train_normals=index.normal_train,
        train_anomalies=train_anomalies,
        test_items=test_items,
    )


def save_split(split: KShotSplit, path: str | Path) -> Path:
    """Write a split to JSON with paths relative to the dataset root."""
    payload = {
        "category": split.category,
        "k": split.k,
        "seed": split.seed,
        "train_normals": [r.path for r in split.train_normals],
        "train_anomalies": [r.to_dict() for r in split.train_anomalies],
        "test": [r.to_dict() for r in split.test_items],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_split(path: str | Path, root: str | Path | None = None) -> KShotSplit:
    """Load a split JSON; ``root`` defaults to the split file's directory."""
    path = Path(path)
    payload = json.loads(path.read_text())
    root = Path(root) if root is not None else path.parent
    normals = tuple(
        ImageRecord(path=p, label=0) for p in payload["train_normals"]
    )
    anomalies = tuple(ImageRecord.from_dict(d) for d in payload["train_anomalies"])
    test_items = tuple(ImageRecord.from_dict(d) for d in payload["test"])
    return KShotSplit(
        category=payload["category"],
        k=int(payload["k"]),
        seed=int(payload["seed"]),
        root=root,
        train_normals=normals,
        train_anomalies=anomalies,
        test_items=test_items,
    )


def load_image(path: str | Path, size: int) -> torch.Tensor:
    """Load an image as a float32 tensor (3, size, size) with values in [0, 1].

    Bilinear resize when the source size differs (identity otherwise);
    grayscale inputs are replicated to three channels.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path: str | Path, size: int) -> torch.Tensor:
    """Load a ground-truth mask as a {0,1} tensor (size, size).

    Nearest-neighbour resize keeps the mask binary.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if img.size != (size, size):
                img = img.resize((size, size), Image.NEAREST)
            arr = np.asarray(img)
    except OSError as e:
        raise OSError(f"cannot read mask {path}: {e}") from e
    return torch.from_numpy((arr > 0).astype(np.uint8))


def load_images(
    records: tuple[ImageRecord, ...] | list[ImageRecord],
    root: Path,
    size: int,
) -> torch.Tensor:
    """Stack a list of records into an image batch tensor (N, 3, size, size)."""
    if not records:
        return torch.empty(0, 3, size, size)
    return torch.stack([load_image(root / r.path, size) for r in records])
