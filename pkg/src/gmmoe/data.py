"""Paired low-light / ground-truth dataset ingestion and patch sampling.

Directory conventions per layout (root_dir is the dataset root):
  lol_v1          our485/{low,high} for train, eval15/{low,high} for test,
                  identical filenames on both sides
  lol_v2_real     Real_captured/{Train,Test}/{Low,Normal}; ids pair
                  "low00001.png" with "normal00001.png" by stripping the
                  low/normal filename prefix
  lol_v2_syn      Synthetic/{Train,Test}/{Low,Normal}, identical filenames
  lsrw            {Train,Eval}/{low,high} (point root at one camera subtree)
  generic_paired  {train,test}/{low,high}, identical filenames

Manifests are immutable after load; patch sampling draws from a caller
provided torch.Generator with a fixed number of draws per sample, so a
saved generator state replays the exact sequence of patches.
"""

import functools
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigurationError,
    DataError,
    DecodeError,
    InputTooSmallError,
    IntegrityError,
    PairingError,
)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

LAYOUTS = ("lol_v1", "lol_v2_real", "lol_v2_syn", "lsrw", "generic_paired")


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered list of validated low/ground-truth pairs."""

    name: str
    split: str
    pairs: tuple

    def __len__(self):
        return len(self.pairs)

    def to_json(self) -> str:
        return json.dumps(
            {"name": self.name, "split": self.split, "pairs": list(self.pairs)},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        pairs = tuple(
            {"id": p["id"], "low_path": p["low_path"], "gt_path": p["gt_path"]}
            for p in d["pairs"]
        )
        return cls(name=d["name"], split=d["split"], pairs=pairs)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            return cls.from_json(f.read())


@dataclass(frozen=True)
class AugmentSpec:
    """Paired dihedral augmentation: 90-degree rotations plus flips."""

    rotations: tuple = (0, 90, 180, 270)
    hflip: bool = True
    vflip: bool = True

    def validate(self) -> None:
        bad = [r for r in self.rotations if r not in (0, 90, 180, 270)]
        if bad or len(self.rotations) == 0:
            raise ConfigurationError(
                f"rotations must be a nonempty subset of (0, 90, 180, 270), "
                f"got {self.rotations}"
            )


IDENTITY_AUGMENT = AugmentSpec(rotations=(0,), hflip=False, vflip=False)


def _list_images(directory):
    if not os.path.isdir(directory):
        raise DataError(f"missing dataset directory: {directory}")
    names = [
        n for n in os.listdir(directory)
        if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
    ]
    return sorted(names)


def _strip_prefix(stem, prefixes):
    low = stem.lower()
    for p in prefixes:
        if low.startswith(p):
            return stem[len(p):]
    return stem


def _layout_dirs(root_dir, layout, split):
    train = split == "train"
    if layout == "lol_v1":
        sub = "our485" if train else "eval15"
        return os.path.join(root_dir, sub, "low"), os.path.join(root_dir, sub, "high")
    if layout == "lol_v2_real":
        sub = "Train" if train else "Test"
        base = os.path.join(root_dir, "Real_captured", sub)
        return os.path.join(base, "Low"), os.path.join(base, "Normal")
    if layout == "lol_v2_syn":
        sub = "Train" if train else "Test"
        base = os.path.join(root_dir, "Synthetic", sub)
        return os.path.join(base, "Low"), os.path.join(base, "Normal")
    if layout == "lsrw":
        sub = "Train" if train else "Eval"
        return os.path.join(root_dir, sub, "low"), os.path.join(root_dir, sub, "high")
    if layout == "generic_paired":
        sub = "train" if train else "test"
        return os.path.join(root_dir, sub, "low"), os.path.join(root_dir, sub, "high")
    raise ConfigurationError(f"unknown dataset layout {layout!r} (choose from {LAYOUTS})")


def _image_size(path):
    """(H, W) from the file header, without decoding pixel data."""
    try:
        with Image.open(path) as img:
            w, h = img.size
        return h, w
    except (UnidentifiedImageError, OSError) as e:
        raise DecodeError(f"cannot read image header of {path}: {e}") from e


def load_manifest(root_dir, layout, split) -> DatasetManifest:
    """Scan a dataset directory into a validated, lexicographically ordered
    manifest. Orphan files raise PairingError; per-pair dimension mismatches
    raise IntegrityError; an empty directory pair raises PairingError."""
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    low_dir, gt_dir = _layout_dirs(root_dir, layout, split)
    low_names = _list_images(low_dir)
    gt_names = _list_images(gt_dir)

    strip = layout == "lol_v2_real"

    def key(name, prefixes):
        stem = os.path.splitext(name)[0]
        return _strip_prefix(stem, prefixes) if strip else stem

    low_map = {key(n, ("low", "low_")): n for n in low_names}
    gt_map = {key(n, ("normal", "normal_", "high", "high_")): n for n in gt_names}
    if len(low_map) != len(low_names):
        raise PairingError(f"duplicate pair ids among low images in {low_dir}")
    if len(gt_map) != len(gt_names):
        raise PairingError(f"duplicate pair ids among ground-truth images in {gt_dir}")

    orphans = sorted(set(low_map) ^ set(gt_map))
    if orphans:
        k = orphans[0]
        name = low_map.get(k) or gt_map.get(k)
        side = "ground-truth" if k in low_map else "low-light"
        raise PairingError(f"{name!r} (id {k!r}) has no {side} partner")
    if not low_map:
        raise PairingError(f"no image pairs found under {low_dir} and {gt_dir}")

    pairs = []
    for pid in sorted(low_map):
        low_path = os.path.join(low_dir, low_map[pid])
        gt_path = os.path.join(gt_dir, gt_map[pid])
        if _image_size(low_path) != _image_size(gt_path):
            raise IntegrityError(
                f"pair {pid!r}: {low_path} is {_image_size(low_path)} but "
                f"{gt_path} is {_image_size(gt_path)}"
            )
        pairs.append({"id": pid, "low_path": low_path, "gt_path": gt_path})
    return DatasetManifest(name=layout, split=split, pairs=tuple(pairs))


@functools.lru_cache(maxsize=64)
def _decode_cached(path, mtime):
    try:
        with Image.open(path) as img:
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.uint8)
                arr = np.stack([arr] * 3, axis=-1)
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise DecodeError(f"cannot decode {path}: {e}") from e
    t = torch.from_numpy(arr.astype(np.float32) / 255.0)
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()


def decode_image(path) -> torch.Tensor:
    """Decode an 8-bit image to a (1, 3, H, W) float tensor in [0, 1].

    Grayscale inputs are replicated across the three channels; values are
    raw/255 so PNG round-trips are exact.
    """
    if not os.path.isfile(path):
        raise DecodeError(f"no such image file: {path}")
    return _decode_cached(os.path.abspath(path), os.path.getmtime(path)).clone()


def encode_image(image: torch.Tensor, path) -> None:
    """Write a (1, 3, H, W) or (3, H, W) [0,1] tensor as an 8-bit PNG."""
    t = image.detach().cpu()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ConfigurationError(f"can only encode a single image, got batch {t.shape[0]}")
        t = t[0]
    if t.dim() != 3 or t.shape[0] != 3:
        raise ConfigurationError(f"expected a (3, H, W) image, got {tuple(t.shape)}")
    arr = (t.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def apply_dihedral(x: torch.Tensor, rot_k: int, hflip: bool, vflip: bool) -> torch.Tensor:
    """rot90 applied rot_k times, then horizontal flip, then vertical flip."""
    if rot_k not in (0, 1, 2, 3):
        raise ConfigurationError(f"rot_k must be in 0..3, got {rot_k}")
    y = torch.rot90(x, rot_k, dims=(-2, -1))
    if hflip:
        y = torch.flip(y, dims=(-1,))
    if vflip:
        y = torch.flip(y, dims=(-2,))
    return y


def invert_dihedral(x: torch.Tensor, rot_k: int, hflip: bool, vflip: bool) -> torch.Tensor:
    """Exact inverse of apply_dihedral with the same arguments."""
    if rot_k not in (0, 1, 2, 3):
        raise ConfigurationError(f"rot_k must be in 0..3, got {rot_k}")
    y = x
    if vflip:
        y = torch.flip(y, dims=(-2,))
    if hflip:
        y = torch.flip(y, dims=(-1,))
    return torch.rot90(y, -rot_k, dims=(-2, -1))


def _draw(rng: torch.Generator, n: int) -> int:
    """Uniform integer in [0, n); exactly one generator draw."""
    return int(torch.randint(0, max(n, 1), (1,), generator=rng).item())


def _pair_tensors(manifest: DatasetManifest, index: int):
    if not 0 <= index < len(manifest.pairs):
        raise IndexError(f"pair index {index} out of range for {len(manifest.pairs)} pairs")
    rec = manifest.pairs[index]
    low = _decode_cached(os.path.abspath(rec["low_path"]),
                         os.path.getmtime(rec["low_path"]))
    gt = _decode_cached(os.path.abspath(rec["gt_path"]),
                        os.path.getmtime(rec["gt_path"]))
    if low.shape != gt.shape:
        raise IntegrityError(
            f"pair {rec['id']!r} decodes to {tuple(low.shape)} vs {tuple(gt.shape)}"
        )
    return rec, low, gt


def _resize_pair(low, gt, size):
    low = torch.nn.functional.interpolate(
        low, size=size, mode="bilinear", align_corners=False
    )
    gt = torch.nn.functional.interpolate(
        gt, size=size, mode="bilinear", align_corners=False
    )
    return low, gt


def sample_training_patch(manifest, index, patch, rng_stream,
                          mode="crop", augment=None, allow_upscale=False):
    """Draw an aligned (low, gt) training patch of size patch x patch.

    mode "crop" takes a random window (InputTooSmallError if the image is
    smaller than the patch, unless allow_upscale resizes the pair up
    first); mode "resize" squashes the full pair to patch x patch. The same
    window and the same dihedral transform are applied to both images.
    Exactly five generator draws happen per call, so a fixed rng state
    yields a bit-identical pair.
    """
    if patch < 1:
        raise ConfigurationError(f"patch size must be >= 1, got {patch}")
    if mode not in ("crop", "resize"):
        raise ConfigurationError(f"mode must be 'crop' or 'resize', got {mode!r}")
    augment = augment or AugmentSpec()
    augment.validate()

    _, low, gt = _pair_tensors(manifest, index)
    h, w = low.shape[-2], low.shape[-1]

    if mode == "crop" and (h < patch or w < patch):
        if not allow_upscale:
            raise InputTooSmallError(
                f"patch {patch} exceeds image size {h}x{w} for pair index {index}"
            )
        scale = patch / min(h, w)
        size = (max(patch, round(h * scale)), max(patch, round(w * scale)))
        low, gt = _resize_pair(low, gt, size)
        h, w = size

    y0 = _draw(rng_stream, h - patch + 1)
    x0 = _draw(rng_stream, w - patch + 1)
    rot_idx = _draw(rng_stream, len(augment.rotations))
    hflip = _draw(rng_stream, 2) == 1 and augment.hflip
    vflip = _draw(rng_stream, 2) == 1 and augment.vflip

    if mode == "resize":
        low, gt = _resize_pair(low, gt, (patch, patch))
        low, gt = low.clone(), gt.clone()
    else:
        low = low[..., y0:y0 + patch, x0:x0 + patch].clone()
        gt = gt[..., y0:y0 + patch, x0:x0 + patch].clone()

    rot_k = augment.rotations[rot_idx] // 90
    low = apply_dihedral(low, rot_k, hflip, vflip)
    gt = apply_dihedral(gt, rot_k, hflip, vflip)
    return low.contiguous(), gt.contiguous()


def eval_pair(manifest, index):
    """Full-resolution decoded pair, no augmentation; deterministic."""
    _, low, gt = _pair_tensors(manifest, index)
    return low.clone(), gt.clone()


def sampler_stream(master_seed: int, worker: int = 0) -> torch.Generator:
    """Independent per-worker generator derived from one master seed."""
    g = torch.Generator()
    g.manual_seed((int(master_seed) * 1000003 + worker) % (2 ** 63))
    return g
