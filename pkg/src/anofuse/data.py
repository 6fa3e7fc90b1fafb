"""Synthetic anomaly corpus generation, portable-graymap I/O, and the
MVTec-style directory loader.

Images are grayscale, quantized to the 8-bit grid at generation time so a
write/read roundtrip through PGM files is lossless. Anomalous samples get
one rectangular or elliptical defect whose intensity shift is drawn
relative to the measured texture standard deviation, with the sign chosen
toward the side with more headroom so clipping cannot wash the defect out.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetError
from .tensor import bilinear_upsample


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float64 in [0, 1], multiples of 1/255
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    label: int         # 1 iff mask has any positive pixel
    id: str


def _texture(rng, size, family):
    """Zero-mean background pattern, later scaled to a target std."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if family == "sinusoid":
        fy = rng.uniform(1.5, 4.0)
        fx = rng.uniform(1.5, 4.0)
        phy = rng.uniform(0, 2 * np.pi)
        phx = rng.uniform(0, 2 * np.pi)
        pat = np.sin(2 * np.pi * fy * yy / size + phy) * np.sin(2 * np.pi * fx * xx / size + phx)
        pat += 0.35 * rng.normal(size=(size, size))
        return pat
    # band-limited noise: coarse fields upsampled plus a fine component
    coarse = bilinear_upsample(rng.normal(size=(4, 4)), (size, size))
    mid = bilinear_upsample(rng.normal(size=(8, 8)), (size, size))
    fine = rng.normal(size=(size, size))
    return 1.0 * coarse + 0.7 * mid + 0.35 * fine


def _defect_mask(rng, size, lo, hi):
    """One axis-aligned rectangle or ellipse, fully inside the image."""
    dh = int(rng.integers(lo, hi + 1))
    dw = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, size - dh + 1))
    left = int(rng.integers(0, size - dw + 1))
    mask = np.zeros((size, size), dtype=np.uint8)
    if rng.uniform() < 0.5:
        mask[top:top + dh, left:left + dw] = 1
    else:
        cy, cx = top + (dh - 1) / 2.0, left + (dw - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        ell = ((yy - cy) / (dh / 2.0)) ** 2 + ((xx - cx) / (dw / 2.0)) ** 2 <= 1.0
        mask[ell] = 1
        if mask.sum() == 0:  # degenerate tiny ellipse: fall back to the box
            mask[top:top + dh, left:left + dw] = 1
    return mask


TEXTURE_STD = 0.07


def gen_synthetic(config, seed, n=None, prefix="s"):
    """Deterministic synthetic corpus; `config` supplies the data knobs."""
    if config.defect_max > config.image_size:
        raise ConfigurationError(
            f"defect_max={config.defect_max} larger than image {config.image_size}")
    rng = np.random.default_rng(seed)
    n = config.n_train if n is None else n
    size = config.image_size
    samples = []
    for i in range(n):
        if config.texture == "mixed":
            family = "noise" if rng.uniform() < 0.5 else "sinusoid"
        else:
            family = config.texture
        pat = _texture(rng, size, family)
        pat = (pat - pat.mean()) / max(pat.std(), 1e-9) * TEXTURE_STD
        pat = np.clip(pat, -3.5 * TEXTURE_STD, 3.5 * TEXTURE_STD)
        img = 0.5 + pat
        sigma = img.std()
        anomalous = rng.uniform() < config.anomaly_rate
        mask = np.zeros((size, size), dtype=np.uint8)
        if anomalous:
            mask = _defect_mask(rng, size, config.defect_min, config.defect_max)
            delta = rng.uniform(config.delta_min, config.delta_max) * sigma
            region = mask.astype(bool)
            base_mean = img.mean()
            sign = 1.0 if base_mean <= 0.5 else -1.0
            # land the region mean `delta` away from the background mean, so
            # local texture deviations cannot eat into the separability margin
            shift = base_mean + sign * delta - img[region].mean()
            img = img + shift * mask
        img = np.clip(img, 0.0, 1.0)
        img = np.round(img * 255.0) / 255.0
        samples.append(Sample(image=img, mask=mask, label=int(anomalous),
                              id=f"{prefix}_{i:04d}"))
    return samples


def get_corpora(config):
    """(train, test) sample lists, from disk when data_dir is set."""
    if config.data_dir:
        return (load_dataset(config.data_dir, "train"),
                load_dataset(config.data_dir, "test"))
    train = gen_synthetic(config, config.data_seed, config.n_train, prefix="train")
    test = gen_synthetic(config, config.data_seed + 1, config.n_test, prefix="test")
    return train, test


# ---------------------------------------------------------------------------
# portable graymaps


def write_pgm(path, array, maxval=255):
    """Binary P5 graymap; 16-bit data is written big-endian per the format."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise DatasetError(f"can only write 2-D graymaps, got shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    if maxval < 256:
        payload = arr.astype(np.uint8).tobytes()
    else:
        payload = arr.astype(">u2").tobytes()
    path.write_bytes(header + payload)


def read_pgm(path):
    """Parse a binary P5 graymap; malformed files raise DatasetError."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read graymap {path}: {exc}")
    if not blob.startswith(b"P5"):
        raise DatasetError(f"corrupt graymap header in {path}: not a P5 file")
    # header = magic + 3 integers, whitespace separated, '#' comments allowed
    pos, fields = 2, []
    while len(fields) < 3:
        m = re.compile(rb"\s*(#[^\n]*\n)*\s*(\d+)").match(blob, pos)
        if not m:
            raise DatasetError(f"corrupt graymap header in {path}")
        fields.append(int(m.group(2)))
        pos = m.end()
    width, height, maxval = fields
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = width * height
    if len(blob) - pos < count * dtype.itemsize:
        raise DatasetError(f"truncated graymap data in {path}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return data.reshape(height, width).astype(np.int64), maxval


# ---------------------------------------------------------------------------
# dataset directory layout


def export_dataset(root, split_samples):
    """Write {split: samples} as <root>/<split>/{good|defect}/<id>.pgm with
    masks under <root>/ground_truth/defect/<id>_mask.pgm."""
    root = Path(root)
    for split, samples in split_samples.items():
        for s in samples:
            sub = "defect" if s.label else "good"
            write_pgm(root / split / sub / f"{s.id}.pgm",
                      np.round(s.image * 255.0).astype(np.uint8))
            if s.label:
                write_pgm(root / "ground_truth" / "defect" / f"{s.id}_mask.pgm",
                          s.mask * 255)


def load_dataset(root, split="test"):
    """Load one split; good images get zero masks, defects must have masks."""
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"no split directory {split_dir}")
    samples = []
    for sub, label in (("good", 0), ("defect", 1)):
        folder = split_dir / sub
        if not folder.is_dir():
            continue
        for path in sorted(folder.glob("*.pgm")):
            sample_id = path.stem
            arr, maxval = read_pgm(path)
            image = arr.astype(np.float64) / maxval
            if label:
                mask_path = root / "ground_truth" / "defect" / f"{sample_id}_mask.pgm"
                if not mask_path.exists():
                    raise DatasetError(f"defect image {sample_id!r} has no mask at {mask_path}")
                mraw, _ = read_pgm(mask_path)
                mask = (mraw > 127).astype(np.uint8)
            else:
                mask = np.zeros_like(arr, dtype=np.uint8)
            samples.append(Sample(image=image, mask=mask, label=label, id=sample_id))
    samples.sort(key=lambda s: s.id)
    return samples


def batch_arrays(samples):
    """Stack samples into (B,1,H,W) images, (B,H,W) masks, (B,) labels."""
    images = np.stack([s.image for s in samples])[:, None, :, :]
    masks = np.stack([s.mask for s in samples]).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, masks, labels
