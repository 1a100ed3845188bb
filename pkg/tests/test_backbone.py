import pytest
import torch

from latte.backbone import (
    BackboneConfig,
    ToyVisionBackbone,
    build_backbone,
    encode_image,
    register_backbone_builder,
    set_trainable,
)


def small_config(**kw):
    base = dict(kind="toy", d=32, input_size=(32, 32), width=16)
    base.update(kw)
    return BackboneConfig(**base)


def test_patch_grid_size():
    torch.manual_seed(0)
    backbone = ToyVisionBackbone(small_config())
    patch, global_token = backbone(torch.rand(2, 3, 32, 32))
    assert patch.shape == (2, 64, 32)  # 8x8 grid from a stride-4 trunk
    assert global_token.shape == (2, 32)


def test_input_size_checked():
    backbone = ToyVisionBackbone(small_config())
    with pytest.raises(ValueError, match="expected input"):
        backbone(torch.rand(1, 3, 16, 16))


def test_zeroed_projection_gives_zero_global_token():
    torch.manual_seed(0)
    backbone = ToyVisionBackbone(small_config())
    with torch.no_grad():
        backbone.global_proj.weight.zero_()
        backbone.global_proj.bias.zero_()
    _, global_token = backbone(torch.zeros(1, 3, 32, 32))
    assert torch.equal(global_token, torch.zeros(1, 32))


def test_encode_image_deterministic():
    torch.manual_seed(1)
    backbone = ToyVisionBackbone(small_config())
    image = torch.rand(3, 32, 32)
    f1 = encode_image(image, backbone)
    f2 = encode_image(image, backbone)
    assert torch.equal(f1.patch_tokens, f2.patch_tokens)
    assert torch.equal(f1.global_token, f2.global_token)
    assert f1.patch_tokens.shape == (64, 32)
    assert f1.global_token.shape == (32,)


def test_feature_width_consistency():
    with pytest.raises(ValueError, match="widths"):
        from latte.backbone import VisualFeatures

        VisualFeatures(torch.zeros(4, 8), torch.zeros(16))


def test_set_trainable_freezes_for_the_optimizer():
    torch.manual_seed(2)
    backbone = ToyVisionBackbone(small_config())
    head = torch.nn.Linear(32, 1)
    set_trainable(backbone, False)
    params = [p for p in list(backbone.parameters()) + list(head.parameters()) if p.requires_grad]
    assert len(params) == 2  # only the head

    before = {k: v.clone() for k, v in backbone.state_dict().items()}
    opt = torch.optim.AdamW(params, lr=1e-2, weight_decay=1e-2)
    for _ in range(3):
        patch, g = backbone(torch.rand(4, 3, 32, 32))
        loss = head(g).square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    after = backbone.state_dict()
    for k in before:
        assert torch.equal(before[k], after[k])


def test_set_trainable_is_an_involution():
    backbone = ToyVisionBackbone(small_config())
    original = [p.requires_grad for p in backbone.parameters()]
    set_trainable(backbone, False)
    set_trainable(backbone, True)
    assert [p.requires_grad for p in backbone.parameters()] == original


def test_builder_registry():
    assert isinstance(build_backbone(small_config()), ToyVisionBackbone)
    with pytest.raises(ValueError, match="adapter"):
        build_backbone(small_config(kind="adapter:clip"))
    register_backbone_builder("clip", lambda cfg: ToyVisionBackbone(small_config()))
    assert isinstance(build_backbone(small_config(kind="adapter:clip")), ToyVisionBackbone)
    with pytest.raises(ValueError, match="kind"):
        build_backbone(small_config(kind="resnet"))
