import pytest
import torch

from tforge import inversion as inv
from tforge import nc
from tforge.data import ImageBatch


def test_cost_schedule_up_and_down():
    s = nc.NCCostSchedule(init_cost=1e-3, patience=5)
    for _ in range(4):
        s.update(1.0)
    assert s.cost == 1e-3 and not s.raised
    s.update(1.0)
    assert s.cost == pytest.approx(1.5e-3) and s.raised
    for _ in range(5):
        s.update(0.5)
    assert s.cost == pytest.approx(1.5e-3 / 1.5**1.5)


def test_cost_schedule_counter_resets_on_crossing():
    s = nc.NCCostSchedule(init_cost=1.0, patience=3)
    for asr in (1.0, 1.0, 0.0, 1.0, 1.0, 0.0):
        s.update(asr)
    assert s.cost == 1.0


def test_hypothesis_range():
    h = nc.NCHypothesis((3, 8, 8), 0, torch.Generator().manual_seed(0))
    with torch.no_grad():
        h.mask_tanh.fill_(100.0)
    out = h(torch.rand(2, 3, 8, 8))
    assert out.min() >= 0 and out.max() <= 1
    assert h.mask.shape == (1, 8, 8) and h.pattern.shape == (3, 8, 8)


def test_constant_model_shrinks_mask(constant_model):
    model = constant_model(label=4)
    x = torch.rand(20, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    batch = ImageBatch(x, torch.arange(20) % 10, 10)
    hyp, row, log = nc.nc_invert_for_label(model, batch, 4, nc.NCConfig(steps=150), eval_set=batch)
    assert row.asr_inv == 1.0 and not row.constraints_unmet
    assert hyp.mask.sum().item() < 0.25 * log.rows[0]["mask"]


def test_nc_scan_rows_and_artifacts(constant_model, tmp_path):
    model = constant_model(label=1)
    x = torch.rand(10, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    batch = ImageBatch(x, torch.arange(10) % 10, 10)
    rep = nc.nc_scan(model, batch, nc.NCConfig(steps=5), eval_set=batch, labels=[0, 1], out_dir=tmp_path)
    assert rep.engine == "nc" and [r.label for r in rep.rows][0] == 1
    for name in ("hypothesis.pt", "mask.png", "pattern.png", "triggered.png", "row.json", "loss.csv"):
        assert (tmp_path / "label_1" / name).is_file()


@pytest.mark.property
def test_special_case_of_unified_engine(patch_model, defense, eval_set):
    """Identity transform, a channel-shared mask, only the mask-size term and the
    NC cost schedule: the unified engine should land where standalone NC does."""
    steps = 300
    _, ref, _ = nc.nc_invert_for_label(patch_model, defense, 3, nc.NCConfig(steps=steps), eval_set=eval_set)
    cfg = inv.OptConfig(steps=steps, transform="identity", mask_layout="shared", weight_policy="nc",
                        lr_masks=0.1, pretrain_steps=0, patience=25)
    _, row, _ = inv.invert_for_label(patch_model, defense, 3, opt_config=cfg, eval_set=eval_set)
    assert abs(row.asr_inv - ref.asr_inv) <= 0.05
