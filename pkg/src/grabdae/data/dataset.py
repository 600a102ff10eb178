"""Folder datasets laid out as ``<root>/<class>/<image>.ppm``."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import FormatError, read_ppm

IMAGE_SUFFIX = ".ppm"


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    path: Path
    label: int | None
    domain: str  # "source" or "target"


@dataclass
class DomainDataset:
    root: Path
    samples: list[Sample]
    class_names: list[str]
    skipped: list[tuple[Path, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labeled(self) -> bool:
        return all(s.label is not None for s in self.samples)

    @property
    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise ValueError(f"dataset at {self.root} is unlabeled")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def load_images(self) -> np.ndarray:
        """All images stacked as float32 (N, H, W, 3)."""
        return np.stack([read_ppm(s.path) for s in self.samples])


def _readable(path: Path) -> str | None:
    try:
        read_ppm(path)
    except (OSError, FormatError) as exc:
        return str(exc)
    return None


def load_dataset(root, labeled: bool = True, domain: str = "source") -> DomainDataset:
    """Scan ``root`` in code-point order; unreadable images are reported and skipped."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    samples: list[Sample] = []
    skipped: list[tuple[Path, str]] = []
    class_names: list[str] = []

    def add(path: Path, label: int | None) -> None:
        err = _readable(path)
        if err is None:
            samples.append(Sample(path, label, domain))
        else:
            skipped.append((path, err))

    if labeled:
        class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
        if not class_dirs:
            raise EmptyDatasetError(f"labeled dataset {root} has no class subdirectories")
        class_names = [p.name for p in class_dirs]
        for label, cdir in enumerate(class_dirs):
            for path in sorted(cdir.rglob("*" + IMAGE_SUFFIX), key=lambda p: p.relative_to(cdir).as_posix()):
                add(path, label)
    else:
        for path in sorted(root.rglob("*" + IMAGE_SUFFIX), key=lambda p: p.relative_to(root).as_posix()):
            add(path, None)
    if not samples:
        raise EmptyDatasetError(f"no readable {IMAGE_SUFFIX} images under {root}")
    return DomainDataset(root, samples, class_names, skipped)
