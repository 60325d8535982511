import numpy as np
import pytest
import torch

from msgaze import aeri
from msgaze.aeri import AeriArchitecture, AeriTrainConfig
from msgaze.augment import AugmentConfig
from msgaze.checkpoint import Checkpoint, module_checksum
from msgaze.data import load_dataset
from msgaze.errors import ArchitectureError, ConfigError, ContractError
from msgaze.metrics import miou

SMALL = AeriArchitecture(width_multiplier=0.125)


def test_channel_plan_full_width():
    assert AeriArchitecture().channels() == [64, 128, 256, 512, 1024]
    assert AeriArchitecture(width_multiplier=0.5).channels() == [32, 64, 128, 256, 512]


def test_forward_shape_and_range():
    m = aeri.build_aeri(SMALL, seed=0).eval()
    for n in (1, 3):
        y = m(torch.rand(n, 1, 36, 60))
        assert y.shape == (n, 2, 36, 60)
    y = m(torch.zeros(2, 1, 36, 60))
    assert torch.isfinite(y).all() and (y > 0).all() and (y < 1).all()


def test_same_seed_same_weights():
    a, b = aeri.build_aeri(SMALL, 3), aeri.build_aeri(SMALL, 3)
    assert module_checksum(a) == module_checksum(b)
    assert module_checksum(a) != module_checksum(aeri.build_aeri(SMALL, 4))


def test_bad_architecture():
    with pytest.raises(ArchitectureError):
        AeriArchitecture(input_shape=(8, 8)).validate()
    with pytest.raises(ArchitectureError):
        aeri.AeriUNet(AeriArchitecture(width_multiplier=0))
    with pytest.raises(ContractError):
        aeri.build_aeri(SMALL)(torch.zeros(1, 2, 36, 60))


def test_loss_analytic_cases():
    gt = (torch.rand(4, 2, 36, 60) > 0.5).float()
    assert aeri.aeri_loss(gt, gt).item() == 0.0
    assert aeri.aeri_loss(1 - gt, gt).item() == 1.0
    assert aeri.aeri_loss(torch.full_like(gt, 0.5), gt).item() == 0.25
    with pytest.raises(ContractError):
        aeri.aeri_loss(gt, gt[:, :1])


def test_loss_elementwise_oracle():
    rng = np.random.default_rng(0)
    p, g = rng.random((2, 2, 36, 60)), (rng.random((2, 2, 36, 60)) > 0.5).astype(float)
    total = 0.0
    for v in (p - g).ravel():
        total += v * v
    got = aeri.aeri_loss(torch.tensor(p), torch.tensor(g)).item()
    assert got == pytest.approx(total / p.size, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        AeriTrainConfig(lr=0)
    with pytest.raises(ConfigError):
        AeriTrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        AeriTrainConfig.from_dict({"momentum": 0.9})
    cfg = AeriTrainConfig(augment={"noise": False})
    assert not cfg.augment.noise


def test_train_and_export(tiny_dataset, tiny_aeri, tmp_path):
    ck = tiny_aeri
    assert ck.kind == "aeri" and len(ck.log) == 1
    row = ck.log[0]
    assert set(row) >= {"train_loss", "val_loss", "val_miou", "lr"}
    path = ck.save(tmp_path / "a.pt")
    back = Checkpoint.load(path, kind="aeri")
    assert back.checksum == ck.checksum
    assert (tmp_path / "a.json").exists()

    val = load_dataset(tiny_dataset, split="val", with_masks=True)
    model = aeri.load_aeri(back)
    before = module_checksum(model)
    m1 = aeri.export_masks(model, val.images)
    m2 = aeri.export_masks(model, val.images)
    assert module_checksum(model) == before
    np.testing.assert_array_equal(m1, m2)
    assert m1.shape == (len(val), 2, 36, 60) and set(np.unique(m1)) <= {0, 1}
    # two independent paths to the same number
    soft = aeri.predict_soft(model, val.images)
    assert miou(m1, val.masks) == miou((soft > 0.5).astype(np.uint8), val.masks)
    with pytest.raises(ContractError):
        aeri.export_masks(model, np.zeros((2, 30, 60)))
    with pytest.raises(ContractError):
        aeri.export_masks(model, val.images, threshold=1.0)


def test_export_threshold_semantics():
    class Const(torch.nn.Module):
        def forward(self, x):
            return torch.full((x.shape[0], 2) + tuple(x.shape[-2:]), 0.7)

    m = aeri.export_masks(Const(), np.zeros((2, 36, 60), np.uint8), 0.5)
    assert m.all()


def test_training_deterministic(tiny_dataset):
    cfg = AeriTrainConfig(epochs=1, width_multiplier=0.0625, seed=2, augment=AugmentConfig())
    a = aeri.train_aeri(tiny_dataset, cfg)
    b = aeri.train_aeri(tiny_dataset, cfg)
    assert a.log[0]["train_loss"] == b.log[0]["train_loss"]
    assert a.checksum == b.checksum


@pytest.mark.slow
def test_overfit_small_set(tiny_dataset):
    data = load_dataset(tiny_dataset, split="train", with_masks=True)
    cfg = AeriTrainConfig(epochs=60, width_multiplier=0.25, augment=AugmentConfig.disabled(), lr=3e-3,
                          batch_size=8, step_size=1000)
    ck = aeri.train_aeri(data, cfg)
    assert ck.log[-1]["train_loss"] < 0.02
    assert ck.log[-1]["train_loss"] < ck.log[0]["train_loss"]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_difference(seed):
    # float64: float32 central differences on this network sit at a ~1e-2 roundoff floor
    from gradcheck import directional_gradcheck

    m = aeri.build_aeri(AeriArchitecture(width_multiplier=0.25), seed).double().train()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 1, 36, 60, generator=g, dtype=torch.float64)
    gt = (torch.rand(2, 2, 36, 60, generator=g) > 0.5).double()
    assert directional_gradcheck(m, aeri.aeri_loss, x, gt, seed=seed) < 1e-2
