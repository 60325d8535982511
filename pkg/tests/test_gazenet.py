import numpy as np
import pytest
import torch

from msgaze import aeri, gazenet
from msgaze.checkpoint import Checkpoint, module_checksum
from msgaze.data import load_dataset
from msgaze.errors import ArchitectureError, ConfigError, ContractError
from msgaze.gazenet import GazeArchitecture, GazeTrainConfig

SMALL = GazeArchitecture(widen_factor=1)


def test_full_channel_plan():
    arch = GazeArchitecture()
    assert [arch.group_out(g) for g in range(3)] == [64, 128, 256]
    assert arch.fusion_width() == 384 and arch.feature_width() == 256


def test_full_forward_shape():
    m = gazenet.build_msgazenet(GazeArchitecture(), seed=0).eval()
    assert m(torch.zeros(32, 3, 36, 60)).shape == (32, 2)
    assert torch.isfinite(m(torch.zeros(2, 3, 36, 60))).all()
    x = torch.rand(2, 1, 36, 60)
    torch.testing.assert_close(m(x, x, x), m(torch.cat([x, x, x], 1)))


@pytest.mark.parametrize("kind", gazenet.VARIANTS)
def test_variants_forward(kind):
    m = gazenet.build_variant(kind, SMALL).eval()
    assert m(torch.rand(3, 3, 36, 60)).shape == (3, 2)


def test_variant_parameter_counts():
    count = lambda k: gazenet.count_parameters(gazenet.build_variant(k))  # noqa: E731
    full = count("full")
    for k in ("no_masks", "no_image", "no_visible", "no_iris", "shared_weights", "single_encoder", "two_encoder"):
        assert count(k) < full, k
    assert count("no_image") == count("no_iris") == count("no_visible")
    assert gazenet.variant_architecture("early_fusion").fusion_width() == 192
    assert gazenet.variant_architecture("late_fusion").fusion_width() == 768


def test_unknown_variant_and_bad_plan():
    with pytest.raises(ArchitectureError):
        gazenet.build_variant("triple_attention")
    with pytest.raises(ArchitectureError):
        gazenet.MultiStreamGazeNet(GazeArchitecture(fc_widths=(16, 3)))
    with pytest.raises(ArchitectureError):
        gazenet.MultiStreamGazeNet(GazeArchitecture(streams=(("depth",),)))


def test_shared_weights_tied_after_step():
    m = gazenet.build_variant("shared_weights", SMALL)
    streams = m.stream_modules()
    assert len(streams) == 3
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    gazenet.gaze_loss(m(torch.rand(4, 3, 36, 60)), torch.zeros(4, 2)).backward()
    opt.step()
    sums = {module_checksum(s) for s in m.stream_modules()}
    assert len(sums) == 1


def test_permutation_equivariance_eval():
    m = gazenet.build_msgazenet(SMALL, seed=1).eval()
    x = torch.rand(6, 3, 36, 60)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    torch.testing.assert_close(m(x)[perm], m(x[perm]))


def test_eval_is_deterministic_train_is_not():
    m = gazenet.build_msgazenet(SMALL, seed=1)
    x = torch.rand(4, 3, 36, 60)
    m.eval()
    assert torch.equal(m(x), m(x))
    m.train()
    assert not torch.equal(m(x), m(x))


def test_gaze_loss_cases():
    g = torch.rand(5, 2)
    assert gazenet.gaze_loss(g, g).item() == 0.0
    assert gazenet.gaze_loss(g + torch.tensor([0.1, 0.0]), g).item() == pytest.approx(0.01, rel=1e-5)
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    brute = sum((p[i, 0] - t[i, 0]) ** 2 + (p[i, 1] - t[i, 1]) ** 2 for i in range(5)) / 5
    assert gazenet.gaze_loss(torch.tensor(p), torch.tensor(t)).item() == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ContractError):
        gazenet.gaze_loss(torch.zeros(5, 2), torch.zeros(4, 2))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        GazeTrainConfig(fc_widths=(256, 128, 3))
    with pytest.raises(ConfigError):
        GazeTrainConfig(kind="nope")
    with pytest.raises(ConfigError):
        GazeTrainConfig.from_dict({"momentum": 0.9})


@pytest.fixture(scope="module")
def trained(tiny_dataset, tiny_aeri):
    train = load_dataset(tiny_dataset, split="train")
    val = load_dataset(tiny_dataset, split="val")
    cfg = GazeTrainConfig(widen_factor=1, epochs=6, seed=0, lr=1e-12)
    return gazenet.train_gaze(train, cfg, aeri=tiny_aeri, val=val), val


def test_train_gaze_log_and_plateau_semantics(trained):
    ck, _ = trained
    assert len(ck.log) == 6
    assert all(np.isfinite(r["val_mean_error"]) for r in ck.log)
    # replay the recorded validation losses through a reference scheduler
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.Adam([p], lr=1e-12)
    ref = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=0.5, patience=3)
    for row in ck.log:
        assert row["lr"] == opt.param_groups[0]["lr"]
        ref.step(row["val_loss"])


def test_pipeline_checkpoint_roundtrip(trained, tmp_path):
    ck, val = trained
    ck.save(tmp_path / "g.pt")
    back = Checkpoint.load(tmp_path / "g.pt", kind="gaze")
    assert back.extra["aeri"]["checksum"] == ck.provenance["aeri_checksum"]
    a = gazenet.predict_gaze(ck, val.images)
    b = gazenet.predict_gaze(back, val.images)
    np.testing.assert_array_equal(a, b)
    single = np.concatenate([gazenet.predict_gaze(back, val.images[i:i + 1]) for i in range(len(val))])
    np.testing.assert_allclose(single, a, rtol=0, atol=1e-6)
    sat = gazenet.predict_gaze(back, np.full((2, 36, 60), 255, np.uint8))
    assert np.isfinite(sat).all()


def test_frozen_mask_network(tiny_dataset, tiny_aeri):
    train = load_dataset(tiny_dataset, split="train")
    net = aeri.load_aeri(tiny_aeri)
    before = module_checksum(net)
    norms = []
    cfg = GazeTrainConfig(widen_factor=1, epochs=5, max_steps=4)
    ck = gazenet.train_gaze(train, cfg, aeri=net,
                            step_callback=lambda s, pipe, loss: norms.append(gazenet.aeri_grad_norm(pipe)))
    assert ck.provenance["steps"] == 4
    assert norms == [0.0] * 4
    assert module_checksum(net) == before
    assert all(not p.requires_grad for p in net.parameters())


def test_train_gaze_requires_masks_or_network(tiny_dataset):
    from msgaze.errors import TrainingError

    train = load_dataset(tiny_dataset, split="train")
    with pytest.raises(TrainingError):
        gazenet.train_gaze(train, GazeTrainConfig(widen_factor=1, max_steps=1))
