import numpy as np
import pytest
import torch

from daffnet import fields, fileio, network
from daffnet.errors import ConfigError, ContractViolation
from daffnet.network import ArchitectureConfig, build_variant, load_checkpoint, save_checkpoint

from conftest import SMALL_ARCH

# frozen from the default channel plan; see test_blocks for the per-block formula
EXPECTED_PARAMS = {
    "PyramidReg": 1_868_958,
    "AuxReg": 1_868_958,
    "SimSReg": 2_915_282,
    "GloSReg": 2_422_850,
    "CcSReg": 2_941_394,
    "DAFFNet": 3_800_438,
    "DAFFNetUns": 3_800_370,
}


@pytest.mark.parametrize("variant", network.VARIANTS)
def test_parameter_counts(variant):
    assert network.parameter_count(network.RegistrationNet(ArchitectureConfig(variant=variant))) == EXPECTED_PARAMS[variant]


def test_variant_relations():
    c = EXPECTED_PARAMS
    # unsupervised model drops only the 1x1x1 softmax head (16*4 weights + 4 biases)
    assert c["DAFFNet"] - c["DAFFNetUns"] == 16 * 4 + 4
    # auxiliary labels add no parameters
    assert c["AuxReg"] == c["PyramidReg"]
    # the separate segmentation network duplicates the encoder
    enc = sum(p.numel() for p in network.Encoder((16, 32, 32, 64, 64)).parameters())
    assert c["SimSReg"] - c["GloSReg"] == enc


@pytest.mark.parametrize("variant", network.VARIANTS)
def test_forward_shapes(variant):
    model = build_variant(ArchitectureConfig(variant=variant, **SMALL_ARCH), seed=0)
    m, f = torch.rand(1, 1, 32, 32, 32), torch.rand(1, 1, 32, 32, 32)
    out = model(m, f, mode="train", generator=torch.Generator().manual_seed(0))
    assert out.field.shape == (1, 3, 32, 32, 32)
    assert sorted(out.level_fields) == [1, 2, 3, 4, 5]
    for level, u in out.level_fields.items():
        assert u.shape[2] == 32 // 2 ** (level - 1)
    has_seg = variant in network.SEG_HEAD_VARIANTS
    assert (out.seg_fixed is not None) == has_seg
    if has_seg:
        assert out.seg_fixed.shape == (1, 4, 32, 32, 32)
        torch.testing.assert_close(out.seg_fixed.sum(dim=1), torch.ones(1, 32, 32, 32))


def test_initial_model_is_identity():
    model = build_variant(ArchitectureConfig(variant="DAFFNet", **SMALL_ARCH), seed=0)
    out = model(torch.rand(1, 1, 32, 32, 32), torch.rand(1, 1, 32, 32, 32), mode="infer")
    assert fields.is_identity(out.field)


def test_pyramid_composition():
    model = build_variant(ArchitectureConfig(variant="PyramidReg", **SMALL_ARCH), seed=0)
    with torch.no_grad():
        for feb in model.reg_decoder.febs:
            feb.mu_head.weight.normal_(0, 0.05)
        out = model(torch.rand(1, 1, 32, 32, 32), torch.rand(1, 1, 32, 32, 32))
    for level in range(4, 0, -1):
        up = fields.upsample_field(out.level_fields[level + 1])
        torch.testing.assert_close(out.upsampled_fields[level], up)
        torch.testing.assert_close(out.level_fields[level], fields.compose(up, out.residual_fields[level]))


def test_same_seed_same_weights():
    a = build_variant("CcSReg", seed=3)
    b = build_variant("CcSReg", seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_input_dims_checked():
    model = build_variant(ArchitectureConfig(variant="PyramidReg", **SMALL_ARCH))
    with pytest.raises(ContractViolation, match="divisible by 16"):
        model(torch.rand(1, 1, 24, 24, 24), torch.rand(1, 1, 24, 24, 24))
    with pytest.raises(ContractViolation):
        model(torch.rand(1, 1, 32, 32, 32), torch.rand(1, 1, 16, 32, 32))


def test_config_validation():
    with pytest.raises(ConfigError):
        ArchitectureConfig(variant="VoxelMorph")
    with pytest.raises(ConfigError):
        ArchitectureConfig(seg_channels=(4, 4))
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_dict({"variant": "DAFFNet", "depth": 3})
    cfg = ArchitectureConfig(variant="GloSReg", **SMALL_ARCH)
    assert ArchitectureConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path):
    model = build_variant(ArchitectureConfig(variant="DAFFNet", **SMALL_ARCH), seed=1)
    path = tmp_path / "m.dckp"
    network.save_checkpoint(path, model, {"note": "x"}, iteration=12)
    loaded, meta, it, opt = network.load_checkpoint(path)
    assert it == 12 and opt is None and meta["note"] == "x"
    for (k, v), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    # save of the loaded model reproduces the file byte for byte
    path2 = tmp_path / "m2.dckp"
    network.save_checkpoint(path2, loaded, {"note": "x"}, iteration=12)
    assert path.read_bytes() == path2.read_bytes()


def test_corrupt_checkpoint_is_diagnosed(tmp_path):
    model = build_variant(ArchitectureConfig(variant="PyramidReg", **SMALL_ARCH))
    path = tmp_path / "m.dckp"
    network.save_checkpoint(path, model)
    blob = path.read_bytes()
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(fileio.BadMagicError):
        network.load_checkpoint(path)
    path.write_bytes(blob[:-10])
    with pytest.raises(fileio.TruncatedPayloadError):
        network.load_checkpoint(path)


def test_load_checkpoint_rejects_inconsistent_content(tmp_path):
    from daffnet import fileio
    from daffnet.errors import VolumeFormatError

    model = build_variant(ArchitectureConfig(variant="PyramidReg", **SMALL_ARCH), 0)
    save_checkpoint(tmp_path / "m.dckp", model, {}, 1)
    meta, params, it, opt = fileio.decode_checkpoint((tmp_path / "m.dckp").read_bytes())
    cases = {
        "no_arch": ({k: v for k, v in meta.items() if k != "architecture"}, params),
        "bad_arch": ({**meta, "architecture": {**meta["architecture"], "encoder_channels": [-4, 4]}}, params),
        "missing_param": (meta, dict(list(params.items())[1:])),
    }
    for name, (m, p) in cases.items():
        (tmp_path / f"{name}.dckp").write_bytes(fileio.encode_checkpoint(m, p, it, None))
        with pytest.raises(VolumeFormatError):
            load_checkpoint(tmp_path / f"{name}.dckp")


@pytest.mark.parametrize(
    "change",
    [dict(encoder_channels=(4, 0, 4, 4, 4)), dict(gaussian_sigma=0.0), dict(gaussian_ksize=4), dict(integration_steps=-1)],
)
def test_architecture_rejects_bad_values(change):
    with pytest.raises(ConfigError):
        ArchitectureConfig(**change)
