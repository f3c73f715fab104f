import math

import pytest
import torch

from gmmoe.errors import InputTooSmallError, ShapeError
from gmmoe.metrics import (
    MetricReport,
    mse,
    psnr_loss,
    psnr_metric,
    ssim_metric,
)
from oracles import psnr_reference, ssim_reference


def test_mse_closed_form():
    gt = torch.rand(2, 3, 8, 8)
    assert torch.equal(mse(gt, gt), torch.zeros(2))
    off = mse(gt + 0.1, gt)
    assert torch.allclose(off, torch.full((2,), 0.01), atol=1e-7)
    assert mse(torch.ones(1, 3, 4, 4), torch.zeros(1, 3, 4, 4)).item() == 1.0


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 9))
    with pytest.raises(ShapeError):
        mse(torch.rand(3, 8, 8), torch.rand(3, 8, 8))


def test_psnr_metric_closed_form():
    gt = torch.zeros(1, 3, 10, 10)
    pred = torch.full_like(gt, 0.1)  # MSE exactly 0.01
    assert abs(psnr_metric(pred, gt).item() - 20.0) < 1e-5
    assert psnr_metric(gt, gt).item() == 100.0  # capped, not inf


def test_psnr_metric_8bit_domain():
    gt = torch.zeros(1, 3, 10, 10)
    pred = torch.full_like(gt, 10.0)  # MSE = 100 on a [0, 255] scale
    got = psnr_metric(pred, gt, max_val=255.0).item()
    assert abs(got - 10 * math.log10(65025 / 100)) < 1e-5
    assert abs(got - 28.13) < 5e-3


def test_psnr_loss_closed_form():
    gt = torch.zeros(1, 3, 10, 10)
    one = torch.ones_like(gt)  # MSE = 1
    assert abs(psnr_loss(one, gt).item()) < 1e-6
    # double precision so the check isolates the log arithmetic, not fp32 MSE
    gt64 = torch.zeros(1, 3, 10, 10, dtype=torch.float64)
    tenth = torch.full_like(gt64, 0.1)  # MSE = 0.01
    assert abs(psnr_loss(tenth, gt64).item() - (-20.0)) < 5e-6
    # identical images bottom out at the eps floor
    assert abs(psnr_loss(gt, gt, eps=1e-8).item() - (-80.0)) < 1e-4


def test_psnr_loss_plus_metric_vanishes():
    torch.manual_seed(0)
    pred = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    gt = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    loss = psnr_loss(pred, gt, eps=1e-12)
    metric = psnr_metric(pred, gt).double().mean()
    assert abs((loss + metric).item()) < 1e-4


def test_psnr_metric_matches_reference():
    torch.manual_seed(1)
    pred = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    gt = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    got = psnr_metric(pred, gt)
    for i in range(3):
        want = psnr_reference(pred[i].numpy(), gt[i].numpy())
        assert abs(got[i].item() - want) < 1e-9


def test_psnr_loss_input_gradient():
    torch.manual_seed(2)
    pred = torch.rand(1, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    gt = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    psnr_loss(pred, gt).backward()
    analytic = pred.grad.clone()

    h = 1e-6
    flat = pred.detach().clone().view(-1)
    for idx in [0, 17, 52, 107]:
        plus, minus = flat.clone(), flat.clone()
        plus[idx] += h
        minus[idx] -= h
        fd = (psnr_loss(plus.view_as(gt), gt) - psnr_loss(minus.view_as(gt), gt)) / (2 * h)
        rel = abs(analytic.view(-1)[idx].item() - fd.item()) / max(abs(fd.item()), 1e-12)
        assert rel <= 1e-6


def test_metric_symmetry():
    torch.manual_seed(3)
    a = torch.rand(2, 3, 16, 16)
    b = torch.rand(2, 3, 16, 16)
    assert torch.equal(mse(a, b), mse(b, a))
    assert torch.equal(psnr_metric(a, b), psnr_metric(b, a))
    assert torch.allclose(ssim_metric(a, b), ssim_metric(b, a), atol=1e-12)


def test_psnr_strictly_decreases_with_error_scale():
    torch.manual_seed(4)
    gt = torch.rand(1, 3, 12, 12)
    err = torch.rand_like(gt) * 0.1
    prev = psnr_metric(gt + err, gt).item()
    for alpha in (1.5, 2.0, 4.0):
        cur = psnr_metric(gt + alpha * err, gt).item()
        assert cur < prev
        prev = cur


def test_ssim_identical_images():
    torch.manual_seed(5)
    x = torch.rand(2, 3, 16, 16)
    assert torch.allclose(ssim_metric(x, x), torch.ones(2, dtype=torch.float64),
                          atol=1e-12)


def test_ssim_constant_images_closed_form():
    a = torch.full((1, 3, 16, 16), 0.5)
    b = torch.full((1, 3, 16, 16), 0.25)
    c1 = 0.01 ** 2
    want = (2 * 0.5 * 0.25 + c1) / (0.5 ** 2 + 0.25 ** 2 + c1)
    got = ssim_metric(a, b).item()
    assert abs(got - want) < 1e-9
    assert abs(got - 0.8001) < 5e-5


def test_ssim_matches_windowed_oracle():
    torch.manual_seed(6)
    pred = torch.rand(1, 3, 64, 64)
    gt = torch.rand(1, 3, 64, 64)
    want = ssim_reference(pred[0].numpy(), gt[0].numpy())
    assert abs(ssim_metric(pred, gt).item() - want) <= 1e-6


def test_ssim_range_over_random_pairs():
    torch.manual_seed(7)
    pred = torch.rand(1000, 1, 12, 12)
    gt = torch.rand(1000, 1, 12, 12)
    vals = ssim_metric(pred, gt)
    assert vals.shape == (1000,)
    assert (vals >= -1.0).all() and (vals <= 1.0).all()


def test_ssim_rejects_tiny_images():
    with pytest.raises(InputTooSmallError):
        ssim_metric(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))


def test_report_roundtrip(tmp_path):
    rep = MetricReport.from_scores(
        [("a", 21.5, 0.81), ("b", 19.25, 0.795)], config_digest="deadbeef")
    again = MetricReport.from_json(rep.to_json())
    assert again == rep
    assert rep.aggregate["count"] == 2
    assert abs(rep.aggregate["mean_psnr_db"] - 20.375) < 1e-12

    jpath = tmp_path / "report.json"
    cpath = tmp_path / "report.csv"
    rep.write_json(jpath)
    rep.write_csv(cpath)
    assert MetricReport.from_json(jpath.read_text()) == rep
    lines = cpath.read_text().strip().splitlines()
    assert lines[0] == "id,psnr_db,ssim"
    assert lines[1].startswith("a,21.5")
    assert len(lines) == 3
