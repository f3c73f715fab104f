"""Training loss and evaluation metrics.

All operations are pure and stateless. mse / psnr_metric / ssim_metric
return one value per batch sample; psnr_loss reduces to a batch-mean
scalar suitable for backprop.
"""

import csv
import json
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputTooSmallError, ShapeError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def _check_batch_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.dim() != 4 or gt.dim() != 4:
        raise ShapeError(
            f"expected rank-4 batches, got ranks {pred.dim()} and {gt.dim()}"
        )
    if pred.shape != gt.shape:
        raise ShapeError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}"
        )


def mse(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-sample mean squared error over all C*H*W entries, shape (B,)."""
    _check_batch_pair(pred, gt)
    d = pred - gt
    return (d * d).flatten(1).mean(dim=1)


def psnr_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """(10/ln 10) * ln(MSE + eps), averaged over the batch.

    This is the negative PSNR with an eps floor: differentiable everywhere
    (including pred == gt) and minimizing it maximizes PSNR on unit dynamic
    range. At MSE = 0.01 the loss is about -20; at zero error it bottoms
    out at 10*log10(eps).
    """
    if eps <= 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    per = mse(pred, gt)
    return (10.0 / math.log(10.0)) * torch.log(per + eps).mean()


def psnr_metric(pred: torch.Tensor, gt: torch.Tensor, max_val: float = 1.0) -> torch.Tensor:
    """10 * log10(max_val^2 / MSE) in dB per sample, capped at 100 dB for
    identical images."""
    if max_val <= 0:
        raise ConfigurationError(f"max_val must be positive, got {max_val}")
    per = mse(pred, gt)
    db = 10.0 * torch.log10(max_val * max_val / per)
    return torch.clamp(db, max=PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float, channels: int, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64, device=device) - (size - 1) / 2
    g = torch.exp(-(coords * coords) / (2.0 * sigma * sigma))
    g = g / g.sum()
    k2d = torch.outer(g, g)
    return k2d.expand(channels, 1, size, size).contiguous()


def ssim_metric(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean local SSIM per sample, channels averaged.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range
    1.0, valid windows only (no padding), double-precision accumulation.
    """
    _check_batch_pair(pred, gt)
    h, w = pred.shape[-2], pred.shape[-1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InputTooSmallError(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )
    c = pred.shape[1]
    x = pred.detach().to(torch.float64)
    y = gt.detach().to(torch.float64)
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA, c, x.device)

    def blur(t):
        return F.conv2d(t, kernel, groups=c)

    mu_x = blur(x)
    mu_y = blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y

    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).flatten(1).mean(dim=1)


@dataclass
class MetricReport:
    """Per-image and aggregate PSNR/SSIM with the config digest that
    produced them."""

    per_image: list
    aggregate: dict
    config_digest: str = ""

    @classmethod
    def from_scores(cls, entries, config_digest: str = "") -> "MetricReport":
        """entries: iterable of (id, psnr_db, ssim)."""
        per = [
            {"id": str(i), "psnr_db": float(p), "ssim": float(s)}
            for i, p, s in entries
        ]
        n = len(per)
        aggregate = {
            "mean_psnr_db": sum(r["psnr_db"] for r in per) / n if n else 0.0,
            "mean_ssim": sum(r["ssim"] for r in per) / n if n else 0.0,
            "count": n,
        }
        return cls(per_image=per, aggregate=aggregate, config_digest=config_digest)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_image": self.per_image,
                "aggregate": self.aggregate,
                "config_digest": self.config_digest,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(
            per_image=d["per_image"],
            aggregate=d["aggregate"],
            config_digest=d.get("config_digest", ""),
        )

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "psnr_db", "ssim"])
            for row in self.per_image:
                writer.writerow([row["id"], row["psnr_db"], row["ssim"]])
