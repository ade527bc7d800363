"""Dataset indexing, image loading and deterministic batching.

Expected layout::

    root/
      RGB/<id>.<ext>
      T/<id>.<ext>
      GT/<id>.<ext>
      attributes.txt   (optional, lines ``id<TAB>TAG1,TAG2``)

A split manifest is a text file with one sample id per line.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError

log = logging.getLogger(__name__)

ATTRIBUTES = ("BSO", "SSO", "MSO", "LI", "CB", "CIB", "SA", "TC", "IC", "OF", "BW", "BadRGB", "BadT")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class SampleRecord:
    id: str
    rgb_path: Path
    thermal_path: Path
    gt_path: Optional[Path] = None
    attributes: frozenset = field(default_factory=frozenset)


@dataclass
class ModalityPair:
    rgb: np.ndarray  # (3, H, W) float32
    thermal: np.ndarray

    def __post_init__(self):
        if self.rgb.shape != self.thermal.shape:
            raise DatasetError(f"modalities differ in shape: {self.rgb.shape} vs {self.thermal.shape}")

    def replace(self, **kw):
        return ModalityPair(kw.get("rgb", self.rgb), kw.get("thermal", self.thermal))


def _stems(directory):
    out = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_EXTS:
            out.setdefault(p.stem, p)
    return out


def read_id_list(path):
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line)
    return ids


def read_attributes(path):
    """Parse ``id<TAB>TAG1,TAG2,...`` lines into ``{id: frozenset(tags)}``."""
    table = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        sid, _, tags = line.partition("\t")
        tags = frozenset(t.strip() for t in tags.split(",") if t.strip())
        unknown = tags - set(ATTRIBUTES)
        if unknown:
            raise DatasetError(f"{path}:{n}: unknown attribute tags {sorted(unknown)}")
        table[sid.strip()] = tags
    return table


def convert_attribute_lists(lists, out_path):
    """Write per-attribute id lists (``{tag: [ids]}``, the shape most VT5000
    releases ship as one file per challenge) as an ``attributes.txt``."""
    table = {}
    for tag, ids in lists.items():
        if tag not in ATTRIBUTES:
            raise DatasetError(f"unknown attribute tag {tag!r}")
        for sid in ids:
            table.setdefault(sid, set()).add(tag)
    lines = [f"{sid}\t{','.join(sorted(tags))}" for sid, tags in sorted(table.items())]
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(out_path)


def index_dataset(root, split_manifest=None, attributes_path=None, require_gt=True):
    """List the complete (RGB, T, GT) triples under ``root``, sorted by id."""
    root = Path(root)
    dirs = {name: root / name for name in ("RGB", "T", "GT")}
    needed = ("RGB", "T", "GT") if require_gt else ("RGB", "T")
    for name in needed:
        if not dirs[name].is_dir():
            raise DatasetError(f"missing directory {dirs[name]}")
    rgb = _stems(dirs["RGB"])
    thermal = _stems(dirs["T"])
    gt = _stems(dirs["GT"]) if dirs["GT"].is_dir() else {}

    ids = sorted(set(rgb) | set(thermal) | (set(gt) if require_gt else set()))
    if split_manifest is not None:
        wanted = read_id_list(split_manifest)
        missing = [i for i in wanted if i not in ids]
        if missing:
            raise DatasetError(f"manifest ids not found under {root}: {missing[:5]}")
        ids = sorted(set(wanted))

    if attributes_path is None and (root / "attributes.txt").is_file():
        attributes_path = root / "attributes.txt"
    attrs = read_attributes(attributes_path) if attributes_path else {}

    records = []
    for sid in ids:
        for name, table in (("RGB", rgb), ("T", thermal)) + ((("GT", gt),) if require_gt else ()):
            if sid not in table:
                raise DatasetError(f"sample {sid!r} has no {name} file")
        records.append(SampleRecord(sid, rgb[sid], thermal[sid], gt.get(sid), attrs.get(sid, frozenset())))
    if not records:
        raise DatasetError(f"no samples found under {root}")
    return records


def _open(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


def image_size(path):
    """(height, width) of an image file."""
    w, h = _open(path).size
    return h, w


def load_image(path, size=None):
    """Decode to a (3, H, W) float32 array in [0, 1]; grayscale is replicated."""
    im = _open(path).convert("RGB")
    if size is not None and im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_mask(path, size=None):
    """Decode a mask to an (H, W) float32 array in {0, 1}."""
    im = _open(path).convert("L")
    if size is not None and im.size != (size, size):
        im = im.resize((size, size), Image.NEAREST)
    return (np.asarray(im, dtype=np.float32) / 255.0 >= 0.5).astype(np.float32)


def load_sample(record, target_size=352):
    pair = ModalityPair(load_image(record.rgb_path, target_size),
                        load_image(record.thermal_path, target_size))
    mask = load_mask(record.gt_path, target_size) if record.gt_path is not None else None
    return pair, mask


def save_prediction(sal, path):
    """Save a [0, 1] map as 8-bit grayscale PNG with value round(255 * s)."""
    arr = np.clip(np.rint(np.asarray(sal, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def batch_iterator(records, batch_size=4, shuffle_seed=None, epoch=0):
    """Yield batches of records; order is a seeded permutation per epoch.

    ``shuffle_seed=None`` keeps the given order. The last partial batch is kept.
    """
    order = np.arange(len(records))
    if shuffle_seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch]))
        order = rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]
